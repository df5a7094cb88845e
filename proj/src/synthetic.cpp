#include "pearl/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "pearl/errors.hpp"
#include "pearl/pipeline.hpp"

namespace pearl {

namespace {

constexpr std::size_t kClasses = 3;
constexpr double kGrayLevel[kClasses] = {0.15, 0.5, 0.85};

struct Rng {
  std::mt19937_64 engine;
  std::normal_distribution<double> normal{0.0, 1.0};

  Matrix gaussian(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(engine);
    return m;
  }
  Matrix orthogonal(Eigen::Index n) {
    Eigen::HouseholderQR<Matrix> qr(gaussian(n, n));
    return qr.householderQ();
  }
  Matrix unit_rows(Eigen::Index rows, Eigen::Index cols) {
    Matrix m = gaussian(rows, cols);
    m.rowwise().normalize();
    return m;
  }
};

std::int32_t scene_class(double y, double x, double size) {
  const double s = size / 128.0;
  const double dy = y - 44.0 * s, dx = x - 44.0 * s;
  if (dy * dy + dx * dx <= (28.0 * s) * (28.0 * s)) return 1;
  if (y >= 70.0 * s && y < 116.0 * s && x >= 60.0 * s && x < 121.0 * s) return 2;
  return 0;
}

}  // namespace

SyntheticScene make_synthetic_scene(const SyntheticOptions& o) {
  if (o.patch == 0 || o.window % o.patch != 0) {
    fail(ErrorKind::validation, "window must be a multiple of the patch size");
  }
  if (o.heads == 0 || o.head_dim == 0) fail(ErrorKind::validation, "heads and head_dim must be positive");

  Rng rng{std::mt19937_64(o.seed)};
  const std::size_t n = o.size;
  const auto d = static_cast<Eigen::Index>(o.head_dim);
  const auto dm = static_cast<Eigen::Index>(o.heads * o.head_dim);
  const std::size_t hp = o.window / o.patch;
  const auto tokens = static_cast<Eigen::Index>(hp * hp + 1);

  SyntheticScene scene;
  scene.gt = LabelMap(n, n);
  GrayImage gray(n, n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const auto c = scene_class(y + 0.5, x + 0.5, static_cast<double>(n));
      scene.gt.at(y, x) = c;
      gray.at(y, x) = std::clamp(kGrayLevel[c] + o.gray_noise * rng.normal(rng.engine), 0.0, 1.0);
    }
  }

  const Matrix protos = rng.unit_rows(kClasses, dm);
  const Matrix w_o = rng.orthogonal(dm);
  std::vector<Matrix> signatures, rotations;
  for (std::size_t j = 0; j < o.heads; ++j) {
    signatures.push_back(rng.unit_rows(kClasses, d));
    rotations.push_back(rng.orthogonal(d));
  }

  const WindowPlan plan = plan_windows(n, n, o.window, o.stride);
  const std::size_t count = plan.windows().size();
  for (std::size_t m = 0; m < count; ++m) {
    const Window& win = plan.windows()[m];
    // Token 0 is CLS; patch tokens follow in row-major order.
    std::vector<std::int32_t> cls(static_cast<std::size_t>(tokens), -1);
    for (std::size_t py = 0; py < hp; ++py) {
      for (std::size_t px = 0; px < hp; ++px) {
        const double cy = win.top + (py + 0.5) * o.patch;
        const double cx = win.left + (px + 0.5) * o.patch;
        cls[1 + py * hp + px] = scene_class(cy, cx, static_cast<double>(n));
      }
    }

    Matrix target = o.feature_noise * rng.gaussian(tokens, dm);
    for (Eigen::Index t = 1; t < tokens; ++t) target.row(t) += protos.row(cls[t]);
    target.row(0) += protos.colwise().mean();
    const Matrix v_all = target * w_o.transpose();

    const std::string prefix = count == 1 ? "" : "w" + std::to_string(m) + ".";
    for (std::size_t j = 0; j < o.heads; ++j) {
      // Orthonormal design keeps the query cloud well conditioned.
      Eigen::HouseholderQR<Matrix> qr(rng.gaussian(tokens, d));
      Matrix q = std::sqrt(static_cast<double>(tokens)) * Matrix(qr.householderQ()).leftCols(d);
      for (Eigen::Index t = 1; t < tokens; ++t) q.row(t) += signatures[j].row(cls[t]);
      const Matrix k = q * rotations[j].transpose() + 0.01 * rng.gaussian(tokens, d);
      const Matrix v = v_all.middleCols(static_cast<Eigen::Index>(j) * d, d);
      const std::string suffix = ".h" + std::to_string(j);
      scene.features.add(from_matrix(prefix + "Q" + suffix, q));
      scene.features.add(from_matrix(prefix + "K" + suffix, k));
      scene.features.add(from_matrix(prefix + "V" + suffix, v));
    }
  }
  scene.features.add(from_matrix("W_o", w_o));

  scene.prototypes.add(from_matrix("prototypes", protos));
  scene.image.add(from_gray("image_gray", gray));
  scene.image.add(from_labels("gt_labels", scene.gt));

  scene.config.window = static_cast<int>(o.window);
  scene.config.stride = static_cast<int>(o.stride);
  scene.config.short_side = static_cast<int>(n);
  scene.config.grid_h = static_cast<int>(n / o.patch);
  scene.config.grid_w = static_cast<int>(n / o.patch);
  return scene;
}

}  // namespace pearl
