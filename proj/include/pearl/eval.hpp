#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pearl/config.hpp"
#include "pearl/types.hpp"

namespace pearl {

/// Pixel counts indexed [ground truth][prediction].
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * classes_ + pred]; }
  std::uint64_t total() const;
  std::uint64_t ignored() const { return ignored_; }

  /// Counts every pixel whose ground truth is not gt.ignore_value. Throws a
  /// dimension error on mismatched extents and a validation error on a class
  /// index >= classes().
  void accumulate(const LabelMap& pred, const LabelMap& gt);
  void merge(const ConfusionMatrix& other);

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t ignored_ = 0;
};

ConfusionMatrix accumulate(ConfusionMatrix cm, const LabelMap& pred, const LabelMap& gt);

/// Mean IoU in percent over classes that occur in ground truth or prediction.
double miou(const ConfusionMatrix& cm);
/// Pixel accuracy in percent.
double pacc(const ConfusionMatrix& cm);

struct PesRow {
  double miou = 0.0;        // percent
  double pacc = 0.0;        // percent
  double latency_ms = 0.0;  // per image
  double memory_gb = 0.0;
};

/// Precision-efficiency score: the mean of min-max normalized mIoU and pAcc
/// (higher is better) and latency and memory (lower is better). A metric that
/// is constant across rows normalizes to 1. Needs at least two rows.
std::vector<double> pes(std::span<const PesRow> rows);

/// One line of a corpus manifest:
///   <dataset> <features.prl> <image.prl> <gt.prl> [prototypes.prl]
struct ManifestItem {
  std::string dataset;
  std::filesystem::path features;
  std::filesystem::path image;
  std::filesystem::path gt;
  std::filesystem::path prototypes;  // empty: use the runner default
};

/// Blank lines and '#' comments are skipped. Relative paths resolve against
/// `base`.
std::vector<ManifestItem> parse_manifest(std::string_view text,
                                         const std::filesystem::path& base = {});

struct DatasetScore {
  std::string dataset;
  double miou = 0.0;
  double pacc = 0.0;
  std::size_t images = 0;
};

/// Runs the pipeline on every manifest item and aggregates one confusion
/// matrix per dataset, in order of first appearance. Ground truth comes from
/// the "gt_labels" entry of the gt container.
std::vector<DatasetScore> run_corpus(std::span<const ManifestItem> items,
                                     const std::filesystem::path& default_prototypes,
                                     const PipelineConfig& config,
                                     std::int32_t ignore_value = LabelMap::kDefaultIgnore);

/// "dataset,mIoU,pAcc" header plus one row per dataset, two decimals.
std::string format_results_csv(std::span<const DatasetScore> scores);

}  // namespace pearl
