#include "pearl/propagate.hpp"

#include <algorithm>
#include <cmath>

#include "pearl/errors.hpp"
#include "pearl/resample.hpp"

namespace pearl {

namespace {

constexpr double kRoundoffFloor = 1e-15;

void softmax_rows(Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double peak = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - peak).exp();
    m.row(i) /= m.row(i).sum();
  }
}

}  // namespace

ClassGraph class_graph(const PrototypeMatrix& prototypes, double tau_s, double beta) {
  if (!(tau_s > 0)) fail(ErrorKind::validation, "tau_s: must be > 0");
  if (!(beta >= 0)) fail(ErrorKind::validation, "beta: must be >= 0");
  const auto& t = prototypes.rows();
  Matrix g = (t * t.transpose()) / tau_s;
  softmax_rows(g);
  g.diagonal().array() += beta;
  for (Eigen::Index i = 0; i < g.rows(); ++i) g.row(i) /= g.row(i).sum();
  return {std::move(g), tau_s, beta};
}

GridField pool_to_grid(const LogitGrid& z, const GrayImage& gray, std::size_t grid_h,
                       std::size_t grid_w) {
  if (gray.height != z.height || gray.width != z.width) {
    fail(ErrorKind::dimension, "image and logit field differ in size");
  }
  const LogitGrid pooled = adaptive_avg_pool(z, grid_h, grid_w);
  GridField field;
  field.grid_h = grid_h;
  field.grid_w = grid_w;
  field.z_g.resize(static_cast<Eigen::Index>(grid_h * grid_w), static_cast<Eigen::Index>(z.classes));
  for (std::size_t i = 0; i < grid_h * grid_w; ++i) {
    for (std::size_t c = 0; c < z.classes; ++c) {
      field.z_g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
          pooled.scores[i * z.classes + c];
    }
  }
  field.gray = adaptive_avg_pool(gray, grid_h, grid_w);
  return field;
}

GridField node_stats(GridField field, const ClassGraph& graph, double epsilon) {
  if (!(epsilon > 0)) fail(ErrorKind::validation, "epsilon: must be > 0");
  if (graph.g.rows() != field.z_g.cols()) {
    fail(ErrorKind::dimension, "class graph size differs from logit classes");
  }
  field.p = field.z_g;
  softmax_rows(field.p);
  const auto n = field.p.rows();
  field.gamma = field.p.rowwise().maxCoeff();
  field.u.resize(n);
  field.rho.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    field.u(i) = field.p.row(i) * graph.g * field.p.row(i).transpose();
    const double peak = std::max(field.gamma(i), epsilon);
    field.rho(i) = peak * peak * (1.0 + field.u(i));
  }
  return field;
}

EdgeSet edge_set(const GridField& field, const ClassGraph& graph, double kappa, double lambda) {
  if (!(kappa > 0)) fail(ErrorKind::validation, "kappa: must be > 0");
  if (!(lambda >= 0)) fail(ErrorKind::validation, "lambda: must be >= 0");
  if (field.p.rows() != static_cast<Eigen::Index>(field.nodes())) {
    fail(ErrorKind::dimension, "edge_set needs node probabilities (run node_stats first)");
  }
  EdgeSet out;
  out.kappa = kappa;
  out.lambda = lambda;
  const Matrix pg = field.p * graph.g;  // row i holds p_i^T G
  auto link = [&](std::size_t i, std::size_t j) {
    Edge e;
    e.i = i;
    e.j = j;
    e.image = std::exp(-kappa * std::abs(field.gray.pixels[i] - field.gray.pixels[j]));
    e.gate = std::clamp(pg.row(static_cast<Eigen::Index>(i))
                            .dot(field.p.row(static_cast<Eigen::Index>(j))),
                        0.0, 1.0);
    e.weight = e.image * (1.0 + lambda * e.gate);
    out.edges.push_back(e);
  };
  for (std::size_t r = 0; r < field.grid_h; ++r) {
    for (std::size_t s = 0; s < field.grid_w; ++s) {
      const std::size_t i = r * field.grid_w + s;
      if (s + 1 < field.grid_w) link(i, i + 1);
      if (r + 1 < field.grid_h) link(i, i + field.grid_w);
    }
  }
  return out;
}

SparseMatrix graph_laplacian(const EdgeSet& edges, std::size_t nodes) {
  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(edges.edges.size() * 4);
  for (const auto& e : edges.edges) {
    if (e.i >= nodes || e.j >= nodes) fail(ErrorKind::dimension, "edge endpoint out of range");
    const auto i = static_cast<Eigen::Index>(e.i);
    const auto j = static_cast<Eigen::Index>(e.j);
    entries.emplace_back(i, i, e.weight);
    entries.emplace_back(j, j, e.weight);
    entries.emplace_back(i, j, -e.weight);
    entries.emplace_back(j, i, -e.weight);
  }
  const auto n = static_cast<Eigen::Index>(nodes);
  SparseMatrix l(n, n);
  l.setFromTriplets(entries.begin(), entries.end());
  return l;
}

LinearSystem assemble_system(const Vector& rho, const EdgeSet& edges, double tau,
                             const Matrix& z_g) {
  if (!(tau >= 0)) fail(ErrorKind::validation, "tau: must be >= 0");
  if (z_g.rows() != rho.size()) fail(ErrorKind::dimension, "rho length differs from node count");
  if (!(rho.maxCoeff() > 0)) {
    fail(ErrorKind::solver, "no positive confidence; system is not positive definite");
  }
  const auto n = rho.size();
  SparseMatrix d(n, n);
  std::vector<Eigen::Triplet<double>> diag;
  for (Eigen::Index i = 0; i < n; ++i) diag.emplace_back(i, i, rho(i));
  d.setFromTriplets(diag.begin(), diag.end());
  LinearSystem sys;
  sys.a = d + tau * graph_laplacian(edges, static_cast<std::size_t>(n));
  sys.a.makeCompressed();
  sys.b = rho.asDiagonal() * z_g;
  return sys;
}

CgResult cg_solve(const SparseMatrix& a, const Matrix& b, const Matrix& initial, int iters,
                  const CgObserver& observer) {
  if (a.rows() != a.cols() || a.rows() != b.rows() || initial.rows() != b.rows() ||
      initial.cols() != b.cols()) {
    fail(ErrorKind::dimension, "cg_solve operand shapes disagree");
  }
  if (iters < 1) fail(ErrorKind::validation, "cg_iters: must be >= 1");

  const auto channels = b.cols();
  const Vector b_norm = b.colwise().norm().transpose();
  CgResult out;
  out.f = initial;
  Matrix r = b - a * out.f;
  Matrix p = r;
  Vector rr = r.colwise().squaredNorm().transpose();
  std::vector<bool> active(static_cast<std::size_t>(channels));
  // Below this the residual is round-off; continuing only amplifies noise.
  const Vector floor = (kRoundoffFloor * b_norm).array().square();
  for (Eigen::Index c = 0; c < channels; ++c) {
    active[static_cast<std::size_t>(c)] = rr(c) > floor(c);
  }

  for (int k = 1; k <= iters; ++k) {
    if (std::none_of(active.begin(), active.end(), [](bool v) { return v; })) break;
    const Matrix ap = a * p;
    for (Eigen::Index c = 0; c < channels; ++c) {
      if (!active[static_cast<std::size_t>(c)]) continue;
      const double curvature = p.col(c).dot(ap.col(c));
      if (!(curvature > 0.0)) {
        fail(ErrorKind::solver, "CG breakdown: non-positive curvature in channel " +
                                    std::to_string(c));
      }
      const double alpha = rr(c) / curvature;
      out.f.col(c) += alpha * p.col(c);
      r.col(c) -= alpha * ap.col(c);
      const double rr_next = r.col(c).squaredNorm();
      if (rr_next > 100.0 * rr(c) && std::sqrt(rr_next) > 1e-10 * b_norm(c)) {
        fail(ErrorKind::solver, "CG breakdown: residual grew more than tenfold in channel " +
                                    std::to_string(c));
      }
      if (rr_next <= floor(c)) {
        active[static_cast<std::size_t>(c)] = false;
      } else {
        p.col(c) = r.col(c) + (rr_next / rr(c)) * p.col(c);
      }
      rr(c) = rr_next;
    }
    out.iterations = k;
    if (observer) observer(k, out.f);
  }

  const Matrix true_residual = b - a * out.f;
  out.relative_residual.resize(channels);
  for (Eigen::Index c = 0; c < channels; ++c) {
    const double res = true_residual.col(c).norm();
    out.relative_residual(c) = b_norm(c) > 0 ? res / b_norm(c) : res;
  }
  return out;
}

LogitGrid nodes_to_grid(const Matrix& values, std::size_t grid_h, std::size_t grid_w) {
  if (static_cast<std::size_t>(values.rows()) != grid_h * grid_w) {
    fail(ErrorKind::dimension, "node count differs from grid size");
  }
  LogitGrid grid(grid_h, grid_w, static_cast<std::size_t>(values.cols()));
  for (std::size_t i = 0; i < grid_h * grid_w; ++i) {
    for (std::size_t c = 0; c < grid.classes; ++c) {
      grid.scores[i * grid.classes + c] =
          values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
    }
  }
  return grid;
}

LabelMap argmax_labels(const LogitGrid& scores) {
  LabelMap labels(scores.height, scores.width);
  for (std::size_t y = 0; y < scores.height; ++y) {
    for (std::size_t x = 0; x < scores.width; ++x) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < scores.classes; ++c) {
        if (scores.at(y, x, c) > scores.at(y, x, best)) best = c;
      }
      labels.at(y, x) = static_cast<std::int32_t>(best);
    }
  }
  return labels;
}

Segmentation finalize(const LogitGrid& f_g, std::size_t out_h, std::size_t out_w) {
  if (out_h < f_g.height || out_w < f_g.width) {
    fail(ErrorKind::dimension, "output extents smaller than the propagation grid");
  }
  Segmentation seg;
  seg.field = resize_bilinear(f_g, out_h, out_w);
  seg.labels = argmax_labels(seg.field);
  return seg;
}

PropagationResult propagate(const LogitGrid& z, const GrayImage& gray,
                            const PrototypeMatrix& prototypes, const PipelineConfig& config,
                            std::size_t out_h, std::size_t out_w) {
  if (z.classes != prototypes.classes()) {
    fail(ErrorKind::dimension, "logit classes differ from prototype count");
  }
  PropagationResult out;
  out.tau = config.tau;
  out.graph = class_graph(prototypes, config.tau_s, config.beta);
  out.field = node_stats(pool_to_grid(z, gray, static_cast<std::size_t>(config.grid_h),
                                      static_cast<std::size_t>(config.grid_w)),
                         out.graph, config.epsilon);
  out.edges = edge_set(out.field, out.graph, config.kappa, config.lambda);
  const LinearSystem sys = assemble_system(out.field.rho, out.edges, config.tau, out.field.z_g);
  out.solve = cg_solve(sys.a, sys.b, out.field.z_g, config.cg_iters);
  out.segmentation =
      finalize(nodes_to_grid(out.solve.f, out.field.grid_h, out.field.grid_w), out_h, out_w);
  return out;
}

TensorContainer dump_system(const PropagationResult& result) {
  TensorContainer c;
  c.add(from_matrix("G", result.graph.g));
  Matrix rho(static_cast<Eigen::Index>(result.field.grid_h),
             static_cast<Eigen::Index>(result.field.grid_w));
  for (std::size_t i = 0; i < result.field.nodes(); ++i) {
    rho(static_cast<Eigen::Index>(i / result.field.grid_w),
        static_cast<Eigen::Index>(i % result.field.grid_w)) = result.field.rho(static_cast<Eigen::Index>(i));
  }
  c.add(from_matrix("rho", rho));
  Matrix edges(static_cast<Eigen::Index>(result.edges.edges.size()), 3);
  for (std::size_t k = 0; k < result.edges.edges.size(); ++k) {
    const auto& e = result.edges.edges[k];
    const auto row = static_cast<Eigen::Index>(k);
    edges(row, 0) = static_cast<double>(e.i);
    edges(row, 1) = static_cast<double>(e.j);
    edges(row, 2) = e.weight;
  }
  c.add(from_matrix("edges", edges));
  const LinearSystem sys =
      assemble_system(result.field.rho, result.edges, result.tau, result.field.z_g);
  const Vector diag = sys.a.diagonal();
  std::vector<float> d(diag.data(), diag.data() + diag.size());
  c.add("A_diag", {static_cast<std::uint64_t>(diag.size())}, std::move(d));
  c.add("tau", {1}, {static_cast<float>(result.tau)});
  return c;
}

}  // namespace pearl
