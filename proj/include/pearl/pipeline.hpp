#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pearl/config.hpp"
#include "pearl/container.hpp"
#include "pearl/procrustes.hpp"
#include "pearl/propagate.hpp"
#include "pearl/types.hpp"

namespace pearl {

struct Window {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  bool contains(std::size_t y, std::size_t x) const {
    return y >= top && y < top + height && x >= left && x < left + width;
  }
};

/// Sliding windows over an image and their overlap-averaging weights.
class WindowPlan {
 public:
  WindowPlan(std::size_t image_h, std::size_t image_w, std::vector<Window> windows);

  std::size_t image_height() const { return image_h_; }
  std::size_t image_width() const { return image_w_; }
  const std::vector<Window>& windows() const { return windows_; }
  std::size_t coverage(std::size_t y, std::size_t x) const { return coverage_[y * image_w_ + x]; }

  /// 1 / coverage inside window m, 0 outside.
  double weight(std::size_t m, std::size_t y, std::size_t x) const;

 private:
  std::size_t image_h_;
  std::size_t image_w_;
  std::vector<Window> windows_;
  std::vector<std::uint32_t> coverage_;
};

/// Row-major sliding grid with the last window in each direction clamped to
/// the border. Throws a planning error when the window exceeds the image.
WindowPlan plan_windows(std::size_t image_h, std::size_t image_w, std::size_t window,
                        std::size_t stride);

/// Weighted overlap fusion. window_logits[m] covers plan.windows()[m] and has
/// that window's extents; the result spans the full image.
LogitGrid fuse(std::span<const LogitGrid> window_logits, const WindowPlan& plan);

/// Extents after scaling the shorter side to `short_side` (rounded half up).
std::pair<std::size_t, std::size_t> short_side_extents(std::size_t h, std::size_t w,
                                                       std::size_t short_side);

/// Per-window attention tensors read from a features container.
struct FeatureSet {
  std::vector<BlockTensors> windows;
  std::size_t patch_h = 0;
  std::size_t patch_w = 0;
};

/// Reads "w{m}.Q.h{j}" / "w{m}.K.h{j}" / "w{m}.V.h{j}" for m < window_count
/// (bare "Q.h{j}" names when window_count == 1), the optional block tail and
/// the optional "patch_grid" entry.
FeatureSet read_features(const TensorContainer& features, std::size_t window_count);
PrototypeMatrix read_prototypes(const TensorContainer& prototypes);
/// "image_gray", or Rec. 601 luma of "image_rgb" when no gray entry exists.
GrayImage read_image(const TensorContainer& image);

struct RunOptions {
  bool keep_field = false;        // keep the upsampled score field F
  bool keep_propagation = false;  // keep the grid system for debug dumps
};

struct RunResult {
  LabelMap labels;                // original image resolution
  std::optional<LogitGrid> field;  // F, same extents as labels
  std::optional<PropagationResult> propagation;
  std::vector<std::vector<AlignmentResult>> alignments;  // [window][head]
  Vector cg_relative_residual;
  std::vector<std::string> warnings;
};

/// Align-then-propagate inference. Stages: per-window alignment and scoring,
/// upsampling of each window into the resized image frame, overlap fusion,
/// propagation on the grid, upsampling to the original image size and argmax.
/// Errors carry a "[stage]" prefix.
RunResult run(const TensorContainer& features, const TensorContainer& prototypes,
              const TensorContainer& image, const PipelineConfig& config,
              const RunOptions& options = {});

/// Output container: "labels" (H x W) and, when present, "F" (C x H x W).
TensorContainer make_output(const RunResult& result, const std::string& field_name = "F");

}  // namespace pearl
