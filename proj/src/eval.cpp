#include "pearl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "pearl/container.hpp"
#include "pearl/errors.hpp"
#include "pearl/pipeline.hpp"

namespace pearl {

ConfusionMatrix::ConfusionMatrix(std::size_t classes)
    : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) fail(ErrorKind::validation, "confusion matrix needs at least one class");
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    fail(ErrorKind::dimension, "prediction and ground truth differ in size");
  }
  const auto in_range = [&](std::int32_t v) {
    return v >= 0 && static_cast<std::size_t>(v) < classes_;
  };
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const auto g = gt.labels[i];
    if (g == gt.ignore_value) {
      ++ignored_;
      continue;
    }
    const auto p = pred.labels[i];
    if (!in_range(g) || !in_range(p)) {
      fail(ErrorKind::validation, "class index outside [0, " + std::to_string(classes_) +
                                      ") at pixel " + std::to_string(i));
    }
    ++counts_[static_cast<std::size_t>(g) * classes_ + static_cast<std::size_t>(p)];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) fail(ErrorKind::dimension, "confusion matrices differ in size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  ignored_ += other.ignored_;
}

ConfusionMatrix accumulate(ConfusionMatrix cm, const LabelMap& pred, const LabelMap& gt) {
  cm.accumulate(pred, gt);
  return cm;
}

double miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) fail(ErrorKind::validation, "mIoU of an empty confusion matrix");
  const std::size_t n = cm.classes();
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t k = 0; k < n; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t denom = row + col - tp;  // TP + FN + FP
    if (denom == 0) continue;
    sum += static_cast<double>(tp) / static_cast<double>(denom);
    ++counted;
  }
  return 100.0 * sum / static_cast<double>(counted);
}

double pacc(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) fail(ErrorKind::validation, "pAcc of an empty confusion matrix");
  std::uint64_t trace = 0;
  for (std::size_t c = 0; c < cm.classes(); ++c) trace += cm.at(c, c);
  return 100.0 * static_cast<double>(trace) / static_cast<double>(total);
}

std::vector<double> pes(std::span<const PesRow> rows) {
  if (rows.size() < 2) {
    fail(ErrorKind::validation, "PES needs at least two rows to form a range");
  }
  for (const auto& r : rows) {
    for (double v : {r.miou, r.pacc, r.latency_ms, r.memory_gb}) {
      if (!std::isfinite(v) || v < 0) {
        fail(ErrorKind::validation, "PES rows must be finite and non-negative");
      }
    }
  }
  auto normalized = [&](auto field, bool higher_is_better) {
    double lo = field(rows.front()), hi = lo;
    for (const auto& r : rows) {
      lo = std::min(lo, field(r));
      hi = std::max(hi, field(r));
    }
    std::vector<double> out;
    for (const auto& r : rows) {
      if (!(hi > lo)) {
        out.push_back(1.0);
      } else if (higher_is_better) {
        out.push_back((field(r) - lo) / (hi - lo));
      } else {
        out.push_back((hi - field(r)) / (hi - lo));
      }
    }
    return out;
  };
  const auto m = normalized([](const PesRow& r) { return r.miou; }, true);
  const auto p = normalized([](const PesRow& r) { return r.pacc; }, true);
  const auto l = normalized([](const PesRow& r) { return r.latency_ms; }, false);
  const auto g = normalized([](const PesRow& r) { return r.memory_gb; }, false);
  std::vector<double> scores;
  for (std::size_t k = 0; k < rows.size(); ++k) scores.push_back((m[k] + p[k] + l[k] + g[k]) / 4.0);
  return scores;
}

std::vector<ManifestItem> parse_manifest(std::string_view text,
                                         const std::filesystem::path& base) {
  std::vector<ManifestItem> items;
  std::istringstream lines{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_relative() && !base.empty() ? base / path : path;
  };
  while (std::getline(lines, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream fields(line);
    std::vector<std::string> f;
    for (std::string tok; fields >> tok;) f.push_back(tok);
    if (f.empty()) continue;
    if (f.size() != 4 && f.size() != 5) {
      fail(ErrorKind::validation, "manifest line " + std::to_string(line_no) +
                                      ": expected 'dataset features image gt [prototypes]'");
    }
    ManifestItem item{f[0], resolve(f[1]), resolve(f[2]), resolve(f[3]), {}};
    if (f.size() == 5) item.prototypes = resolve(f[4]);
    items.push_back(std::move(item));
  }
  return items;
}

std::vector<DatasetScore> run_corpus(std::span<const ManifestItem> items,
                                     const std::filesystem::path& default_prototypes,
                                     const PipelineConfig& config, std::int32_t ignore_value) {
  std::vector<std::string> order;
  std::map<std::string, std::pair<ConfusionMatrix, std::size_t>> per_dataset;
  std::map<std::filesystem::path, TensorContainer> prototype_cache;

  for (const auto& item : items) {
    const auto& proto_path = item.prototypes.empty() ? default_prototypes : item.prototypes;
    if (proto_path.empty()) {
      fail(ErrorKind::load, "no prototypes for manifest item " + item.features.string());
    }
    auto it = prototype_cache.find(proto_path);
    if (it == prototype_cache.end()) {
      it = prototype_cache.emplace(proto_path, load_container(proto_path)).first;
    }
    const auto features = load_container(item.features);
    const auto image = load_container(item.image);
    const auto gt_container = item.gt == item.image ? image : load_container(item.gt);
    LabelMap gt = to_labels(gt_container.at("gt_labels"));
    gt.ignore_value = ignore_value;

    const RunResult result = run(features, it->second, image, config);
    const std::size_t classes = read_prototypes(it->second).classes();

    auto slot = per_dataset.find(item.dataset);
    if (slot == per_dataset.end()) {
      order.push_back(item.dataset);
      slot = per_dataset.emplace(item.dataset, std::make_pair(ConfusionMatrix(classes), 0)).first;
    }
    slot->second.first.accumulate(result.labels, gt);
    ++slot->second.second;
  }

  std::vector<DatasetScore> scores;
  for (const auto& name : order) {
    const auto& [cm, images] = per_dataset.at(name);
    scores.push_back({name, miou(cm), pacc(cm), images});
  }
  return scores;
}

std::string format_results_csv(std::span<const DatasetScore> scores) {
  std::string out = "dataset,mIoU,pAcc\n";
  char buf[64];
  for (const auto& s : scores) {
    std::snprintf(buf, sizeof(buf), ",%.2f,%.2f\n", s.miou, s.pacc);
    out += s.dataset + buf;
  }
  return out;
}

}  // namespace pearl
