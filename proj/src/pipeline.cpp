#include "pearl/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "pearl/errors.hpp"
#include "pearl/resample.hpp"

namespace pearl {

namespace {

template <typename Fn>
auto staged(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.kind(), std::string("[") + stage + "] " + e.what());
  }
}

std::string window_prefix(std::size_t m, std::size_t window_count) {
  return window_count == 1 ? std::string() : "w" + std::to_string(m) + ".";
}

const TensorEntry* find_windowed(const TensorContainer& c, std::size_t m,
                                 std::size_t window_count, const std::string& name) {
  if (const auto* e = c.find(window_prefix(m, window_count) + name)) return e;
  if (window_count == 1) return c.find("w0." + name);
  return nullptr;
}

const TensorEntry& at_windowed(const TensorContainer& c, std::size_t m,
                               std::size_t window_count, const std::string& name) {
  const auto* e = find_windowed(c, m, window_count, name);
  if (e == nullptr) {
    fail(ErrorKind::load, "missing tensor entry '" + window_prefix(m, window_count) + name + "'");
  }
  return *e;
}

std::size_t exact_sqrt(std::size_t n) {
  auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  return r * r == n ? r : 0;
}

std::optional<Vector> optional_vector(const TensorContainer& c, const char* name) {
  if (const auto* e = c.find(name)) return to_vector(*e);
  return std::nullopt;
}

BlockTail read_tail(const TensorContainer& c) {
  BlockTail tail;
  if (const auto* e = c.find("W_o")) tail.w_o = to_matrix(*e);
  tail.b_o = optional_vector(c, "b_o");
  if (c.contains("mlp.fc1.weight")) {
    BlockTail::Mlp mlp;
    mlp.ln_weight = to_vector(c.at("mlp.ln.weight"));
    mlp.ln_bias = to_vector(c.at("mlp.ln.bias"));
    mlp.fc1 = to_matrix(c.at("mlp.fc1.weight"));
    mlp.fc1_bias = to_vector(c.at("mlp.fc1.bias"));
    mlp.fc2 = to_matrix(c.at("mlp.fc2.weight"));
    mlp.fc2_bias = to_vector(c.at("mlp.fc2.bias"));
    tail.mlp = std::move(mlp);
  }
  if (c.contains("post.proj")) {
    BlockTail::Output post;
    post.ln_weight = to_vector(c.at("post.ln.weight"));
    post.ln_bias = to_vector(c.at("post.ln.bias"));
    post.proj = to_matrix(c.at("post.proj"));
    tail.post = std::move(post);
  }
  return tail;
}

}  // namespace

WindowPlan::WindowPlan(std::size_t image_h, std::size_t image_w, std::vector<Window> windows)
    : image_h_(image_h), image_w_(image_w), windows_(std::move(windows)),
      coverage_(image_h * image_w, 0) {
  for (const auto& win : windows_) {
    if (win.top + win.height > image_h_ || win.left + win.width > image_w_) {
      fail(ErrorKind::planning, "window extends past the image border");
    }
    for (std::size_t y = win.top; y < win.top + win.height; ++y) {
      for (std::size_t x = win.left; x < win.left + win.width; ++x) ++coverage_[y * image_w_ + x];
    }
  }
  if (std::find(coverage_.begin(), coverage_.end(), 0u) != coverage_.end()) {
    fail(ErrorKind::planning, "window plan leaves pixels uncovered");
  }
}

double WindowPlan::weight(std::size_t m, std::size_t y, std::size_t x) const {
  if (!windows_[m].contains(y, x)) return 0.0;
  return 1.0 / static_cast<double>(coverage(y, x));
}

WindowPlan plan_windows(std::size_t image_h, std::size_t image_w, std::size_t window,
                        std::size_t stride) {
  if (window == 0 || stride == 0) fail(ErrorKind::planning, "window and stride must be positive");
  if (stride > window) fail(ErrorKind::planning, "stride exceeds window");
  if (window > image_h || window > image_w) {
    fail(ErrorKind::planning, "window " + std::to_string(window) + " exceeds image " +
                                  std::to_string(image_h) + "x" + std::to_string(image_w) +
                                  "; resize the image so its short side is at least the window");
  }
  auto starts = [&](std::size_t extent) {
    const std::size_t count = (extent - window + stride - 1) / stride + 1;
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t end = std::min(i * stride + window, extent);
      out.push_back(end - window);
    }
    return out;
  };
  std::vector<Window> windows;
  for (auto top : starts(image_h)) {
    for (auto left : starts(image_w)) windows.push_back({top, left, window, window});
  }
  return WindowPlan(image_h, image_w, std::move(windows));
}

LogitGrid fuse(std::span<const LogitGrid> window_logits, const WindowPlan& plan) {
  if (window_logits.size() != plan.windows().size()) {
    fail(ErrorKind::dimension, "window logit count differs from the plan");
  }
  if (window_logits.empty()) fail(ErrorKind::dimension, "nothing to fuse");
  const std::size_t classes = window_logits.front().classes;
  LogitGrid out(plan.image_height(), plan.image_width(), classes);
  for (std::size_t m = 0; m < window_logits.size(); ++m) {
    const auto& win = plan.windows()[m];
    const auto& z = window_logits[m];
    if (z.height != win.height || z.width != win.width || z.classes != classes) {
      fail(ErrorKind::dimension, "window " + std::to_string(m) + " logits do not match its extents");
    }
    for (std::size_t y = 0; y < win.height; ++y) {
      for (std::size_t x = 0; x < win.width; ++x) {
        const std::size_t iy = win.top + y;
        const std::size_t ix = win.left + x;
        const double w = plan.weight(m, iy, ix);
        for (std::size_t c = 0; c < classes; ++c) out.at(iy, ix, c) += w * z.at(y, x, c);
      }
    }
  }
  return out;
}

std::pair<std::size_t, std::size_t> short_side_extents(std::size_t h, std::size_t w,
                                                       std::size_t short_side) {
  auto scaled = [&](std::size_t v, std::size_t shorter) {
    const double exact = static_cast<double>(v) * static_cast<double>(short_side) /
                         static_cast<double>(shorter);
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(exact + 0.5)));
  };
  if (h <= w) return {short_side, scaled(w, h)};
  return {scaled(h, w), short_side};
}

FeatureSet read_features(const TensorContainer& features, std::size_t window_count) {
  if (window_count == 0) fail(ErrorKind::load, "no windows requested");
  FeatureSet out;
  const BlockTail tail = read_tail(features);

  std::size_t heads = 0;
  while (find_windowed(features, 0, window_count, "Q.h" + std::to_string(heads))) ++heads;
  if (heads == 0) {
    fail(ErrorKind::load, "missing tensor entry '" + window_prefix(0, window_count) + "Q.h0'");
  }
  if (window_count > 1 && features.contains("w" + std::to_string(window_count) + ".Q.h0")) {
    fail(ErrorKind::load, "features container holds more windows than the plan (" +
                              std::to_string(window_count) + ")");
  }

  std::optional<std::size_t> tokens;
  for (std::size_t m = 0; m < window_count; ++m) {
    BlockTensors block;
    block.tail = tail;
    if (const auto* x_in = find_windowed(features, m, window_count, "X_in")) {
      block.tail.x_in = to_matrix(*x_in);
    }
    for (std::size_t j = 0; j < heads; ++j) {
      const std::string suffix = ".h" + std::to_string(j);
      HeadTensors head;
      head.q = to_matrix(at_windowed(features, m, window_count, "Q" + suffix));
      head.k = to_matrix(at_windowed(features, m, window_count, "K" + suffix));
      head.v = to_matrix(at_windowed(features, m, window_count, "V" + suffix));
      const auto n = static_cast<std::size_t>(head.q.rows());
      if (tokens && *tokens != n) fail(ErrorKind::dimension, "windows disagree on token count");
      tokens = n;
      block.heads.push_back(std::move(head));
    }
    out.windows.push_back(std::move(block));
  }

  const std::size_t n = *tokens;
  if (const auto* grid = features.find("patch_grid")) {
    if (grid->data.size() != 2) fail(ErrorKind::dimension, "patch_grid must hold two extents");
    out.patch_h = static_cast<std::size_t>(grid->data[0]);
    out.patch_w = static_cast<std::size_t>(grid->data[1]);
  } else if (std::size_t k = n > 1 ? exact_sqrt(n - 1) : 0; k > 0) {
    out.patch_h = out.patch_w = k;
  } else if (std::size_t k2 = exact_sqrt(n); k2 > 0) {
    out.patch_h = out.patch_w = k2;
  } else {
    fail(ErrorKind::dimension, std::to_string(n) + " tokens do not form a square patch grid; "
                                                   "ship a patch_grid entry");
  }
  const std::size_t patches = out.patch_h * out.patch_w;
  std::optional<std::size_t> cls;
  if (n == patches + 1) {
    cls = 0;
  } else if (n != patches) {
    fail(ErrorKind::dimension, "token count does not match patch_grid");
  }
  for (auto& block : out.windows) {
    for (auto& head : block.heads) head.cls_index = cls;
  }
  return out;
}

PrototypeMatrix read_prototypes(const TensorContainer& prototypes) {
  return PrototypeMatrix(to_matrix(prototypes.at("prototypes")));
}

GrayImage read_image(const TensorContainer& image) {
  if (const auto* gray = image.find("image_gray")) return to_gray(*gray);
  if (const auto* rgb = image.find("image_rgb")) return gray_from_rgb(*rgb);
  fail(ErrorKind::load, "missing tensor entry 'image_gray'");
}

RunResult run(const TensorContainer& features, const TensorContainer& prototypes,
              const TensorContainer& image, const PipelineConfig& config,
              const RunOptions& options) {
  config.validate();
  RunResult result;
  for (const auto* c : {&features, &prototypes, &image}) {
    for (const auto& name : c->non_finite_entries()) {
      result.warnings.push_back("entry '" + name + "' holds non-finite values");
    }
  }

  const PrototypeMatrix protos = staged("load", [&] { return read_prototypes(prototypes); });
  const GrayImage original = staged("load", [&] { return read_image(image); });
  const auto [frame_h, frame_w] = short_side_extents(
      original.height, original.width, static_cast<std::size_t>(config.short_side));
  const GrayImage gray = resize_bilinear(original, frame_h, frame_w);

  const WindowPlan plan = staged("plan", [&] {
    return plan_windows(frame_h, frame_w, static_cast<std::size_t>(config.window),
                        static_cast<std::size_t>(config.stride));
  });
  const FeatureSet feats = staged("load", [&] { return read_features(features, plan.windows().size()); });

  std::vector<LogitGrid> window_logits;
  window_logits.reserve(plan.windows().size());
  staged("align", [&] {
    for (std::size_t m = 0; m < plan.windows().size(); ++m) {
      BlockResult block = align_block(feats.windows[m], protos, config, feats.patch_h, feats.patch_w);
      if (!block.projected && m == 0) {
        result.warnings.push_back("W_o absent: scoring unprojected head concatenation");
      }
      if (block.zero_norm_rows > 0) {
        result.warnings.push_back("window " + std::to_string(m) + ": " +
                                  std::to_string(block.zero_norm_rows) +
                                  " zero-norm patch features scored as 0");
      }
      for (std::size_t j = 0; j < block.alignments.size(); ++j) {
        if (block.alignments[j].fell_back) {
          result.warnings.push_back("window " + std::to_string(m) + " head " + std::to_string(j) +
                                    ": Newton-Schulz did not converge, used SVD");
        }
      }
      const auto& win = plan.windows()[m];
      window_logits.push_back(resize_bilinear(block.logits, win.height, win.width));
      result.alignments.push_back(std::move(block.alignments));
    }
  });

  const LogitGrid fused = staged("fuse", [&] { return fuse(window_logits, plan); });
  window_logits.clear();

  PipelineConfig grid_config = config;
  grid_config.grid_h = static_cast<int>(std::min<std::size_t>(
      {static_cast<std::size_t>(config.grid_h), frame_h, original.height}));
  grid_config.grid_w = static_cast<int>(std::min<std::size_t>(
      {static_cast<std::size_t>(config.grid_w), frame_w, original.width}));
  if (grid_config.grid_h != config.grid_h || grid_config.grid_w != config.grid_w) {
    result.warnings.push_back("propagation grid clamped to " + std::to_string(grid_config.grid_h) +
                              "x" + std::to_string(grid_config.grid_w));
  }

  PropagationResult prop = staged("propagate", [&] {
    return propagate(fused, gray, protos, grid_config, original.height, original.width);
  });
  result.labels = std::move(prop.segmentation.labels);
  result.cg_relative_residual = prop.solve.relative_residual;
  if (options.keep_field) result.field = std::move(prop.segmentation.field);
  if (options.keep_propagation) result.propagation = std::move(prop);
  return result;
}

TensorContainer make_output(const RunResult& result, const std::string& field_name) {
  TensorContainer out;
  out.add(from_labels("labels", result.labels));
  if (result.field) out.add(from_logits_chw(field_name, *result.field));
  return out;
}

}  // namespace pearl
