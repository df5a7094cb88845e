#include "pearl/types.hpp"

#include <algorithm>
#include <cmath>

#include "pearl/errors.hpp"

namespace pearl {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::format: return "format error";
    case ErrorKind::validation: return "validation error";
    case ErrorKind::dimension: return "dimension error";
    case ErrorKind::solver: return "solver error";
    case ErrorKind::planning: return "planning error";
    case ErrorKind::load: return "load error";
  }
  return "error";
}

void HeadTensors::check() const {
  if (q.rows() == 0 || q.cols() == 0) fail(ErrorKind::dimension, "empty head tensors");
  if (k.rows() != q.rows() || k.cols() != q.cols() || v.rows() != q.rows() ||
      v.cols() != q.cols()) {
    fail(ErrorKind::dimension, "Q, K and V must share one N x d shape");
  }
  if (cls_index && *cls_index >= tokens()) {
    fail(ErrorKind::dimension, "CLS index outside token range");
  }
}

PrototypeMatrix::PrototypeMatrix(Matrix rows, std::vector<std::string> class_names)
    : rows_(std::move(rows)), names_(std::move(class_names)) {
  if (rows_.rows() < 1 || rows_.cols() < 1) {
    fail(ErrorKind::validation, "prototype matrix needs at least one class");
  }
  for (Eigen::Index c = 0; c < rows_.rows(); ++c) {
    const double norm = rows_.row(c).norm();
    if (!(std::abs(norm - 1.0) <= kNormTolerance)) {
      fail(ErrorKind::validation, "prototype row " + std::to_string(c) +
                                      " has norm " + std::to_string(norm) +
                                      ", expected 1");
    }
  }
  if (names_.empty()) {
    for (Eigen::Index c = 0; c < rows_.rows(); ++c) {
      names_.push_back("class" + std::to_string(c));
    }
  } else if (names_.size() != classes()) {
    fail(ErrorKind::validation, "class name count differs from prototype rows");
  }
}

bool LogitGrid::all_finite() const {
  return std::all_of(scores.begin(), scores.end(),
                     [](double v) { return std::isfinite(v); });
}

void LabelMap::check(std::size_t classes) const {
  for (auto v : labels) {
    if (v == ignore_value) continue;
    if (v < 0 || static_cast<std::size_t>(v) >= classes) {
      fail(ErrorKind::validation, "label " + std::to_string(v) +
                                      " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

Matrix to_matrix(const TensorEntry& entry) {
  if (entry.shape.size() != 2) {
    fail(ErrorKind::dimension, "entry '" + entry.name + "' is not a matrix");
  }
  const auto rows = static_cast<Eigen::Index>(entry.shape[0]);
  const auto cols = static_cast<Eigen::Index>(entry.shape[1]);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = entry.data[static_cast<std::size_t>(r * cols + c)];
    }
  }
  return m;
}

Vector to_vector(const TensorEntry& entry) {
  if (entry.shape.size() != 1) {
    fail(ErrorKind::dimension, "entry '" + entry.name + "' is not a vector");
  }
  Vector v(static_cast<Eigen::Index>(entry.data.size()));
  for (std::size_t i = 0; i < entry.data.size(); ++i) v(static_cast<Eigen::Index>(i)) = entry.data[i];
  return v;
}

TensorEntry from_matrix(std::string name, const Matrix& m) {
  TensorEntry e{std::move(name),
                {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
                {}};
  e.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) e.data.push_back(static_cast<float>(m(r, c)));
  }
  return e;
}

GrayImage to_gray(const TensorEntry& entry) {
  if (entry.shape.size() != 2) {
    fail(ErrorKind::dimension, "entry '" + entry.name + "' must be H x W");
  }
  GrayImage img(entry.shape[0], entry.shape[1]);
  for (std::size_t i = 0; i < entry.data.size(); ++i) {
    const double v = entry.data[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      fail(ErrorKind::validation, "entry '" + entry.name + "' has a value outside [0,1]");
    }
    img.pixels[i] = v;
  }
  return img;
}

GrayImage gray_from_rgb(const TensorEntry& entry) {
  if (entry.shape.size() != 3 || entry.shape[2] != 3) {
    fail(ErrorKind::dimension, "entry '" + entry.name + "' must be H x W x 3");
  }
  GrayImage img(entry.shape[0], entry.shape[1]);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double y = 0.299 * entry.data[3 * i] + 0.587 * entry.data[3 * i + 1] +
                     0.114 * entry.data[3 * i + 2];
    img.pixels[i] = std::clamp(y, 0.0, 1.0);
  }
  return img;
}

TensorEntry from_gray(std::string name, const GrayImage& image) {
  TensorEntry e{std::move(name), {image.height, image.width}, {}};
  e.data.assign(image.pixels.begin(), image.pixels.end());
  return e;
}

LabelMap to_labels(const TensorEntry& entry) {
  if (entry.shape.size() != 2) {
    fail(ErrorKind::dimension, "entry '" + entry.name + "' must be H x W");
  }
  LabelMap map(entry.shape[0], entry.shape[1]);
  for (std::size_t i = 0; i < entry.data.size(); ++i) {
    const float v = entry.data[i];
    if (!std::isfinite(v) || v != std::round(v)) {
      fail(ErrorKind::validation, "entry '" + entry.name + "' holds a non-integer label");
    }
    map.labels[i] = static_cast<std::int32_t>(v);
  }
  return map;
}

TensorEntry from_labels(std::string name, const LabelMap& labels) {
  TensorEntry e{std::move(name), {labels.height, labels.width}, {}};
  e.data.reserve(labels.labels.size());
  for (auto v : labels.labels) e.data.push_back(static_cast<float>(v));
  return e;
}

TensorEntry from_logits_chw(std::string name, const LogitGrid& grid) {
  TensorEntry e{std::move(name), {grid.classes, grid.height, grid.width}, {}};
  e.data.resize(grid.scores.size());
  for (std::size_t c = 0; c < grid.classes; ++c) {
    for (std::size_t y = 0; y < grid.height; ++y) {
      for (std::size_t x = 0; x < grid.width; ++x) {
        e.data[(c * grid.height + y) * grid.width + x] = static_cast<float>(grid.at(y, x, c));
      }
    }
  }
  return e;
}

}  // namespace pearl
