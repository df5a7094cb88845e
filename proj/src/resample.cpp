#include "pearl/resample.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "pearl/errors.hpp"

namespace pearl {

namespace {

struct Tap {
  std::size_t lo;
  std::size_t hi;
  double frac;  // weight of hi
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = std::max(0.0, (static_cast<double>(o) + 0.5) * scale - 0.5);
    auto lo = static_cast<std::size_t>(src);
    lo = std::min(lo, in - 1);
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, hi == lo ? 0.0 : src - static_cast<double>(lo)};
  }
  return taps;
}

struct Bin {
  std::size_t begin;
  std::size_t end;
};

std::vector<Bin> pool_bins(std::size_t in, std::size_t out) {
  std::vector<Bin> bins(out);
  for (std::size_t r = 0; r < out; ++r) {
    bins[r] = {r * in / out, (r + 1) * in / out};
  }
  return bins;
}

void check_resize(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w) {
  if (in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0) {
    fail(ErrorKind::dimension, "bilinear resize needs non-empty extents");
  }
}

void check_pool(std::size_t in_h, std::size_t in_w, std::size_t grid_h, std::size_t grid_w) {
  if (grid_h == 0 || grid_w == 0) fail(ErrorKind::dimension, "zero-sized pooling grid");
  if (grid_h > in_h || grid_w > in_w) {
    fail(ErrorKind::dimension, "pooling grid " + std::to_string(grid_h) + "x" +
                                   std::to_string(grid_w) + " exceeds input " +
                                   std::to_string(in_h) + "x" + std::to_string(in_w));
  }
}

}  // namespace

LogitGrid resize_bilinear(const LogitGrid& in, std::size_t out_h, std::size_t out_w) {
  check_resize(in.height, in.width, out_h, out_w);
  if (out_h == in.height && out_w == in.width) return in;
  const auto ty = bilinear_taps(in.height, out_h);
  const auto tx = bilinear_taps(in.width, out_w);
  LogitGrid out(out_h, out_w, in.classes);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto& a = ty[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& b = tx[x];
      const double w00 = (1 - a.frac) * (1 - b.frac);
      const double w01 = (1 - a.frac) * b.frac;
      const double w10 = a.frac * (1 - b.frac);
      const double w11 = a.frac * b.frac;
      for (std::size_t c = 0; c < in.classes; ++c) {
        out.at(y, x, c) = w00 * in.at(a.lo, b.lo, c) + w01 * in.at(a.lo, b.hi, c) +
                          w10 * in.at(a.hi, b.lo, c) + w11 * in.at(a.hi, b.hi, c);
      }
    }
  }
  return out;
}

GrayImage resize_bilinear(const GrayImage& in, std::size_t out_h, std::size_t out_w) {
  check_resize(in.height, in.width, out_h, out_w);
  if (out_h == in.height && out_w == in.width) return in;
  const auto ty = bilinear_taps(in.height, out_h);
  const auto tx = bilinear_taps(in.width, out_w);
  GrayImage out(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto& a = ty[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& b = tx[x];
      out.at(y, x) = (1 - a.frac) * ((1 - b.frac) * in.at(a.lo, b.lo) + b.frac * in.at(a.lo, b.hi)) +
                     a.frac * ((1 - b.frac) * in.at(a.hi, b.lo) + b.frac * in.at(a.hi, b.hi));
    }
  }
  return out;
}

LogitGrid adaptive_avg_pool(const LogitGrid& in, std::size_t grid_h, std::size_t grid_w) {
  check_pool(in.height, in.width, grid_h, grid_w);
  const auto by = pool_bins(in.height, grid_h);
  const auto bx = pool_bins(in.width, grid_w);
  LogitGrid out(grid_h, grid_w, in.classes);
  for (std::size_t r = 0; r < grid_h; ++r) {
    for (std::size_t s = 0; s < grid_w; ++s) {
      const double count = static_cast<double>((by[r].end - by[r].begin) * (bx[s].end - bx[s].begin));
      for (std::size_t y = by[r].begin; y < by[r].end; ++y) {
        for (std::size_t x = bx[s].begin; x < bx[s].end; ++x) {
          for (std::size_t c = 0; c < in.classes; ++c) out.at(r, s, c) += in.at(y, x, c);
        }
      }
      for (std::size_t c = 0; c < in.classes; ++c) out.at(r, s, c) /= count;
    }
  }
  return out;
}

GrayImage adaptive_avg_pool(const GrayImage& in, std::size_t grid_h, std::size_t grid_w) {
  check_pool(in.height, in.width, grid_h, grid_w);
  const auto by = pool_bins(in.height, grid_h);
  const auto bx = pool_bins(in.width, grid_w);
  GrayImage out(grid_h, grid_w);
  for (std::size_t r = 0; r < grid_h; ++r) {
    for (std::size_t s = 0; s < grid_w; ++s) {
      double sum = 0.0;
      for (std::size_t y = by[r].begin; y < by[r].end; ++y) {
        for (std::size_t x = bx[s].begin; x < bx[s].end; ++x) sum += in.at(y, x);
      }
      out.at(r, s) = sum / static_cast<double>((by[r].end - by[r].begin) * (bx[s].end - bx[s].begin));
    }
  }
  return out;
}

}  // namespace pearl
