#pragma once

#include <cstddef>
#include <cstdint>

#include "pearl/config.hpp"
#include "pearl/container.hpp"
#include "pearl/types.hpp"

namespace pearl {

/// Three-class toy scene with exported-feature-shaped tensors: a background,
/// a disc and a rectangle, each with its own gray level. Queries carry a class
/// signature so attention groups same-class tokens; keys are the queries under
/// a hidden rotation, which alignment has to undo.
struct SyntheticOptions {
  std::size_t size = 128;  // square image side
  std::size_t window = 32;
  std::size_t stride = 16;
  std::size_t patch = 4;
  std::size_t heads = 2;
  std::size_t head_dim = 16;
  double feature_noise = 0.05;  // std of additive noise on the block output
  double gray_noise = 0.02;
  std::uint64_t seed = 7;
};

struct SyntheticScene {
  TensorContainer features;
  TensorContainer prototypes;
  TensorContainer image;  // "image_gray" and "gt_labels"
  LabelMap gt;
  PipelineConfig config;  // matches the scene geometry
};

SyntheticScene make_synthetic_scene(const SyntheticOptions& options = {});

}  // namespace pearl
