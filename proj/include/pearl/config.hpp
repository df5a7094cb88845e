#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace pearl {

enum class PolarSolver { svd, newton_schulz };

std::string_view to_string(PolarSolver solver);

/// Hyperparameters of one inference run. Defaults are the fixed values used
/// for every benchmark: the propagation constants, 25 CG steps, an 80x80
/// propagation grid (224x224 is the Cityscapes setting) and 224/112 sliding
/// windows over a 336-pixel short side.
struct PipelineConfig {
  // text-aware propagation
  double tau_s = 0.5;     // class-graph temperature
  double beta = 10.0;     // class-graph self-affinity boost
  double epsilon = 1e-6;  // confidence floor
  double kappa = 5.0;     // image edge sharpness
  double lambda = 1.0;    // text gate strength
  double tau = 1.0;       // smoothness weight
  int grid_h = 80;
  int grid_w = 80;
  int cg_iters = 25;

  // alignment
  PolarSolver solver = PolarSolver::newton_schulz;
  int ns_iters = 8;
  bool use_key_key = true;
  bool zero_cls_weight = true;
  bool replay_tail = true;
  bool identity_rotation = false;  // debug: skip the Procrustes solve

  // geometry
  int window = 224;
  int stride = 112;
  int short_side = 336;

  /// Throws a validation error naming the first offending key.
  void validate() const;
};

struct ConfigLoadResult {
  PipelineConfig config;
  std::vector<std::string> warnings;  // unknown keys and similar
};

/// Parses a flat `key=value` document. Pairs are separated by whitespace or
/// newlines; `#` starts a comment that runs to the end of the line. Keys not
/// mentioned keep their defaults.
ConfigLoadResult load_config(std::string_view text);
ConfigLoadResult load_config_file(const std::string& path);

/// Serializes every key, one `key=value` per line; load_config accepts it.
std::string to_text(const PipelineConfig& config);

}  // namespace pearl
