#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pearl/config.hpp"
#include "pearl/container.hpp"
#include "pearl/errors.hpp"
#include "pearl/eval.hpp"
#include "pearl/pipeline.hpp"
#include "pearl/synthetic.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitValidation = 2;
constexpr int kExitSolver = 3;

void warn(const std::string& message) { std::cerr << "warning: " << message << "\n"; }

pearl::PipelineConfig read_config(const std::string& path) {
  if (path.empty()) return {};
  auto loaded = pearl::load_config_file(path);
  for (const auto& w : loaded.warnings) warn(w);
  return loaded.config;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) pearl::fail(pearl::ErrorKind::load, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct RunArgs {
  std::string features, prototypes, image, config, out;
  std::string dump_field;
  std::string dump_system;
  bool identity_r = false;
  bool no_key_key = false;
};

int cmd_run(const RunArgs& a, bool dump_field) {
  auto config = read_config(a.config);
  if (a.identity_r) config.identity_rotation = true;
  if (a.no_key_key) config.use_key_key = false;

  pearl::RunOptions options;
  options.keep_field = dump_field;
  options.keep_propagation = !a.dump_system.empty();
  const auto result = pearl::run(pearl::load_container(a.features), pearl::load_container(a.prototypes),
                                 pearl::load_container(a.image), config, options);
  for (const auto& w : result.warnings) warn(w);

  const std::string field_name = a.dump_field.empty() ? "F" : a.dump_field;
  pearl::save_container(pearl::make_output(result, field_name), a.out);
  if (!a.dump_system.empty() && result.propagation) {
    pearl::save_container(pearl::dump_system(*result.propagation), a.dump_system);
  }
  std::cerr << "cg relative residual (max over classes): "
            << (result.cg_relative_residual.size() ? result.cg_relative_residual.maxCoeff() : 0.0)
            << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& manifest, const std::string& prototypes, const std::string& config,
             const std::string& out) {
  const fs::path path(manifest);
  const auto items = pearl::parse_manifest(read_text(path), path.parent_path());
  const auto scores = pearl::run_corpus(items, prototypes, read_config(config));
  const std::string csv = pearl::format_results_csv(scores);
  if (out.empty()) {
    std::cout << csv;
  } else {
    std::ofstream(out) << csv;
  }
  return kExitOk;
}

// CSV with a header naming at least miou, pacc, latency_ms and memory_gb;
// other columns (a label, say) pass through unchanged.
int cmd_pes(const std::string& table) {
  std::istringstream lines(read_text(table));
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::stringstream ss(s);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    return cells;
  };
  if (!std::getline(lines, line)) pearl::fail(pearl::ErrorKind::validation, "empty PES table");
  const auto header = split(line);
  auto column = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    pearl::fail(pearl::ErrorKind::validation, "PES table lacks a '" + name + "' column");
  };
  const std::size_t cm = column("miou"), cp = column("pacc"), cl = column("latency_ms"),
                    cg = column("memory_gb");
  std::vector<std::string> raw;
  std::vector<pearl::PesRow> rows;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      pearl::fail(pearl::ErrorKind::validation, "PES row has the wrong number of cells: " + line);
    }
    try {
      rows.push_back({std::stod(cells[cm]), std::stod(cells[cp]), std::stod(cells[cl]),
                      std::stod(cells[cg])});
    } catch (const std::exception&) {
      pearl::fail(pearl::ErrorKind::validation, "non-numeric PES row: " + line);
    }
    raw.push_back(line);
  }
  const auto scores = pearl::pes(rows);
  std::cout << header.front();
  for (std::size_t i = 1; i < header.size(); ++i) std::cout << "," << header[i];
  std::cout << ",pes\n";
  char buf[32];
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::snprintf(buf, sizeof(buf), ",%.4f", scores[k]);
    std::cout << raw[k] << buf << "\n";
  }
  return kExitOk;
}

int cmd_synth(const std::string& out_dir, const pearl::SyntheticOptions& options) {
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  const auto scene = pearl::make_synthetic_scene(options);
  pearl::save_container(scene.features, dir / "features.prl");
  pearl::save_container(scene.prototypes, dir / "prototypes.prl");
  pearl::save_container(scene.image, dir / "image.prl");
  std::ofstream(dir / "config.txt") << pearl::to_text(scene.config);
  std::ofstream(dir / "manifest.txt") << "synthetic features.prl image.prl image.prl prototypes.prl\n";
  std::cout << "wrote synthetic scene to " << dir.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PEARL open-vocabulary segmentation on exported CLIP tensors"};
  app.require_subcommand(1);

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Segment one image");
  run->add_option("--features", run_args.features, "Per-window attention tensors")->required();
  run->add_option("--prototypes", run_args.prototypes, "Unit-norm class prototypes")->required();
  run->add_option("--image", run_args.image, "Grayscale or RGB image container")->required();
  run->add_option("--config", run_args.config, "key=value configuration file");
  run->add_option("--out", run_args.out, "Output container")->required();
  auto* dump_field = run->add_option("--dump-field", run_args.dump_field,
                                     "Also store the score field under this name (default F)")
                         ->expected(0, 1);
  run->add_option("--dump-system", run_args.dump_system, "Write the propagation system here");
  run->add_flag("--debug-identity-R", run_args.identity_r, "Skip alignment (R = I)");
  run->add_flag("--no-key-key", run_args.no_key_key, "Drop the key-key attention term");

  std::string manifest, eval_protos, eval_config, eval_out;
  auto* eval = app.add_subcommand("eval", "Score a corpus listed in a manifest");
  eval->add_option("--manifest", manifest, "Lines: dataset features image gt [prototypes]")
      ->required();
  eval->add_option("--prototypes", eval_protos, "Default prototypes container");
  eval->add_option("--config", eval_config, "key=value configuration file");
  eval->add_option("--out", eval_out, "CSV destination (stdout when omitted)");

  std::string pes_table;
  auto* pes = app.add_subcommand("pes", "Precision-efficiency scores for a CSV table");
  pes->add_option("--table", pes_table, "CSV with miou,pacc,latency_ms,memory_gb")->required();

  std::string synth_dir;
  pearl::SyntheticOptions synth_opts;
  auto* synth = app.add_subcommand("synth", "Write a synthetic three-class scene");
  synth->add_option("--out-dir", synth_dir)->required();
  synth->add_option("--noise", synth_opts.feature_noise, "Feature noise std");
  synth->add_option("--gray-noise", synth_opts.gray_noise, "Gray noise std");
  synth->add_option("--seed", synth_opts.seed);
  synth->add_option("--size", synth_opts.size, "Square image side");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*run) return cmd_run(run_args, dump_field->count() > 0);
    if (*eval) return cmd_eval(manifest, eval_protos, eval_config, eval_out);
    if (*pes) return cmd_pes(pes_table);
    if (*synth) return cmd_synth(synth_dir, synth_opts);
  } catch (const pearl::Error& e) {
    std::cerr << "error (" << pearl::to_string(e.kind()) << "): " << e.what() << "\n";
    return e.kind() == pearl::ErrorKind::solver ? kExitSolver : kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitOther;
}
