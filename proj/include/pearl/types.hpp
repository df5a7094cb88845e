#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pearl/container.hpp"

namespace pearl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Query/key/value token matrices (N x d) of one attention head.
struct HeadTensors {
  Matrix q;
  Matrix k;
  Matrix v;
  std::optional<std::size_t> cls_index;

  std::size_t tokens() const { return static_cast<std::size_t>(q.rows()); }
  std::size_t width() const { return static_cast<std::size_t>(q.cols()); }
  /// Throws a dimension error unless q, k, v share one N x d shape.
  void check() const;
};

/// Unit-norm class prototypes, one row per class.
class PrototypeMatrix {
 public:
  static constexpr double kNormTolerance = 1e-4;

  /// Validates C >= 1 and unit row norms within kNormTolerance.
  explicit PrototypeMatrix(Matrix rows, std::vector<std::string> class_names = {});

  const Matrix& rows() const { return rows_; }
  std::size_t classes() const { return static_cast<std::size_t>(rows_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(rows_.cols()); }
  const std::vector<std::string>& class_names() const { return names_; }

 private:
  Matrix rows_;
  std::vector<std::string> names_;
};

/// Dense H x W x C class-score field, stored height-major then class-minor.
struct LogitGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::vector<double> scores;

  LogitGrid() = default;
  LogitGrid(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), classes(c), scores(h * w * c, fill) {}

  std::size_t index(std::size_t y, std::size_t x, std::size_t c) const {
    return (y * width + x) * classes + c;
  }
  double& at(std::size_t y, std::size_t x, std::size_t c) { return scores[index(y, x, c)]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return scores[index(y, x, c)];
  }
  bool all_finite() const;
};

/// Per-pixel class indices. Entries equal to ignore_value are unlabeled.
struct LabelMap {
  static constexpr std::int32_t kDefaultIgnore = 255;

  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> labels;
  std::int32_t ignore_value = kDefaultIgnore;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::int32_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}

  std::int32_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::int32_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }

  /// Throws a validation error if a labeled entry is outside [0, classes).
  void check(std::size_t classes) const;
};

/// Single-channel H x W image with values in [0, 1].
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w, double fill = 0.0)
      : height(h), width(w), pixels(h * w, fill) {}

  double& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

// Conversions between container entries and domain types.
Matrix to_matrix(const TensorEntry& entry);
Vector to_vector(const TensorEntry& entry);
TensorEntry from_matrix(std::string name, const Matrix& m);
GrayImage to_gray(const TensorEntry& entry);
/// Rec. 601 luma of an H x W x 3 entry with channels in [0, 1].
GrayImage gray_from_rgb(const TensorEntry& entry);
TensorEntry from_gray(std::string name, const GrayImage& image);
LabelMap to_labels(const TensorEntry& entry);
/// Stores integer codes as f32, which is exact for |code| < 2^24.
TensorEntry from_labels(std::string name, const LabelMap& labels);
/// C x H x W layout, class-major.
TensorEntry from_logits_chw(std::string name, const LogitGrid& grid);

}  // namespace pearl
