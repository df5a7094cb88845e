#pragma once

#include <cstddef>

#include "pearl/types.hpp"

namespace pearl {

/// Bilinear resampling with half-pixel centers (align_corners = false):
/// output pixel y samples source coordinate (y + 0.5) * in/out - 0.5,
/// clamped to the border. Works for up- and down-sampling.
LogitGrid resize_bilinear(const LogitGrid& in, std::size_t out_h, std::size_t out_w);
GrayImage resize_bilinear(const GrayImage& in, std::size_t out_h, std::size_t out_w);

/// Adaptive average pooling. Output cell (r, s) averages the input rectangle
/// [floor(r*H/Hg), floor((r+1)*H/Hg)) x [floor(s*W/Wg), floor((s+1)*W/Wg)).
/// Requires 1 <= Hg <= H and 1 <= Wg <= W.
LogitGrid adaptive_avg_pool(const LogitGrid& in, std::size_t grid_h, std::size_t grid_w);
GrayImage adaptive_avg_pool(const GrayImage& in, std::size_t grid_h, std::size_t grid_w);

}  // namespace pearl
