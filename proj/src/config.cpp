#include "pearl/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "pearl/errors.hpp"

namespace pearl {

namespace {

[[noreturn]] void invalid(std::string_view key, const std::string& why) {
  fail(ErrorKind::validation, std::string(key) + ": " + why);
}

double parse_real(std::string_view key, std::string_view value) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    invalid(key, "expected a real number, got '" + std::string(value) + "'");
  }
  return out;
}

int parse_int(std::string_view key, std::string_view value) {
  int out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    invalid(key, "expected an integer, got '" + std::string(value) + "'");
  }
  return out;
}

bool parse_flag(std::string_view key, std::string_view value) {
  if (value == "1" || value == "true" || value == "on" || value == "yes") return true;
  if (value == "0" || value == "false" || value == "off" || value == "no") return false;
  invalid(key, "expected a boolean, got '" + std::string(value) + "'");
}

PolarSolver parse_solver(std::string_view key, std::string_view value) {
  if (value == "svd") return PolarSolver::svd;
  if (value == "newton_schulz" || value == "ns") return PolarSolver::newton_schulz;
  invalid(key, "expected svd or newton_schulz, got '" + std::string(value) + "'");
}

using Setter = std::function<void(PipelineConfig&, std::string_view, std::string_view)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"tau_s", [](auto& c, auto k, auto v) { c.tau_s = parse_real(k, v); }},
      {"beta", [](auto& c, auto k, auto v) { c.beta = parse_real(k, v); }},
      {"epsilon", [](auto& c, auto k, auto v) { c.epsilon = parse_real(k, v); }},
      {"kappa", [](auto& c, auto k, auto v) { c.kappa = parse_real(k, v); }},
      {"lambda", [](auto& c, auto k, auto v) { c.lambda = parse_real(k, v); }},
      {"tau", [](auto& c, auto k, auto v) { c.tau = parse_real(k, v); }},
      {"grid_h", [](auto& c, auto k, auto v) { c.grid_h = parse_int(k, v); }},
      {"grid_w", [](auto& c, auto k, auto v) { c.grid_w = parse_int(k, v); }},
      {"cg_iters", [](auto& c, auto k, auto v) { c.cg_iters = parse_int(k, v); }},
      {"ns_iters", [](auto& c, auto k, auto v) { c.ns_iters = parse_int(k, v); }},
      {"solver", [](auto& c, auto k, auto v) { c.solver = parse_solver(k, v); }},
      {"use_key_key", [](auto& c, auto k, auto v) { c.use_key_key = parse_flag(k, v); }},
      {"zero_cls_weight",
       [](auto& c, auto k, auto v) { c.zero_cls_weight = parse_flag(k, v); }},
      {"replay_tail", [](auto& c, auto k, auto v) { c.replay_tail = parse_flag(k, v); }},
      {"identity_rotation",
       [](auto& c, auto k, auto v) { c.identity_rotation = parse_flag(k, v); }},
      {"window", [](auto& c, auto k, auto v) { c.window = parse_int(k, v); }},
      {"stride", [](auto& c, auto k, auto v) { c.stride = parse_int(k, v); }},
      {"short_side", [](auto& c, auto k, auto v) { c.short_side = parse_int(k, v); }},
  };
  return table;
}

}  // namespace

std::string_view to_string(PolarSolver solver) {
  return solver == PolarSolver::svd ? "svd" : "newton_schulz";
}

void PipelineConfig::validate() const {
  if (!(tau_s > 0)) invalid("tau_s", "must be > 0");
  if (!(epsilon > 0)) invalid("epsilon", "must be > 0");
  if (!(kappa > 0)) invalid("kappa", "must be > 0");
  if (!(lambda >= 0)) invalid("lambda", "must be >= 0");
  if (!(tau >= 0)) invalid("tau", "must be >= 0");
  if (!(beta >= 0)) invalid("beta", "must be >= 0");
  if (grid_h <= 0) invalid("grid_h", "must be positive");
  if (grid_w <= 0) invalid("grid_w", "must be positive");
  if (cg_iters <= 0) invalid("cg_iters", "must be positive");
  if (ns_iters <= 0) invalid("ns_iters", "must be positive");
  if (window <= 0) invalid("window", "must be positive");
  if (stride <= 0) invalid("stride", "must be positive");
  if (short_side <= 0) invalid("short_side", "must be positive");
  if (stride > window) invalid("stride", "must not exceed window");
}

ConfigLoadResult load_config(std::string_view text) {
  ConfigLoadResult result;
  std::istringstream lines{std::string(text)};
  std::string line;
  while (std::getline(lines, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream tokens(line);
    std::string token;
    while (tokens >> token) {
      const auto eq = token.find('=');
      if (eq == std::string::npos || eq == 0) {
        fail(ErrorKind::validation, "malformed config token '" + token +
                                        "' (expected key=value)");
      }
      const std::string_view key = std::string_view(token).substr(0, eq);
      const std::string_view value = std::string_view(token).substr(eq + 1);
      const auto& table = setters();
      if (auto it = table.find(key); it != table.end()) {
        it->second(result.config, key, value);
      } else {
        result.warnings.push_back("unknown config key '" + std::string(key) +
                                  "' ignored");
      }
    }
  }
  result.config.validate();
  return result;
}

ConfigLoadResult load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::load, "cannot open config " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return load_config(buffer.str());
}

namespace {

// Shortest text that parses back to the same double.
std::string shortest(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace

std::string to_text(const PipelineConfig& c) {
  std::ostringstream out;
  out << "tau_s=" << shortest(c.tau_s) << "\nbeta=" << shortest(c.beta)
      << "\nepsilon=" << shortest(c.epsilon) << "\nkappa=" << shortest(c.kappa)
      << "\nlambda=" << shortest(c.lambda) << "\ntau=" << shortest(c.tau)
      << "\ngrid_h=" << c.grid_h << "\ngrid_w=" << c.grid_w
      << "\ncg_iters=" << c.cg_iters << "\nsolver=" << to_string(c.solver)
      << "\nns_iters=" << c.ns_iters << "\nuse_key_key=" << c.use_key_key
      << "\nzero_cls_weight=" << c.zero_cls_weight
      << "\nreplay_tail=" << c.replay_tail
      << "\nidentity_rotation=" << c.identity_rotation << "\nwindow=" << c.window
      << "\nstride=" << c.stride << "\nshort_side=" << c.short_side << "\n";
  return out.str();
}

}  // namespace pearl
