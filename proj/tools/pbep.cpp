#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pbep/commands.hpp"

namespace {

// Document with command-line overrides applied, or nullopt after printing the error.
std::optional<std::vector<pbep::ConfigEntry>> load(const std::string& path, const std::vector<std::pair<std::string, std::string>>& overrides) {
  try {
    auto doc = pbep::parse_document(pbep::read_file(path));
    for (const auto& [k, v] : overrides) pbep::set_entry(doc, k, v);
    pbep::build_config(doc);
    return doc;
  } catch (const std::exception& e) {
    std::cerr << path << ": " << e.what() << '\n';
    return std::nullopt;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Power-balance parameterization: simulation, checks and sweeps"};
  app.set_help_flag("--help", "print help");
  app.require_subcommand(1);

  std::string config;
  std::string out;
  std::string t_end, h;
  auto* run = app.add_subcommand("run", "simulate a scenario; writes trace.csv, report.txt and plot.py");
  run->add_option("config", config, "scenario config file")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "output directory");
  run->add_option("--t-end", t_end, "horizon [s]");
  run->add_option("--h", h, "step size [s]");

  std::vector<std::string> boxes;
  std::string samples, seed;
  auto* check = app.add_subcommand("check", "monotonicity of the parameter selection, plus excitation if a trace exists");
  check->add_option("config", config, "scenario config file")->required()->check(CLI::ExistingFile);
  check->add_option("--box", boxes, "lo,hi interval per theta component (repeat)");
  check->add_option("--samples", samples, "random sample count");
  check->add_option("--seed", seed, "sampling seed");
  check->add_option("--out", out, "directory holding a trace.csv");

  std::vector<std::string> grid;
  unsigned threads = 0;
  auto* sweep = app.add_subcommand("sweep", "repeat run over a grid; one directory per cell plus index.csv");
  sweep->add_option("config", config, "scenario config file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--grid", grid, "key=lo:hi:steps (repeat for a product grid)")->required();
  sweep->add_option("--out", out, "output root");
  sweep->add_option("--threads", threads, "worker threads (0: hardware concurrency)");

  CLI11_PARSE(app, argc, argv);

  std::vector<std::pair<std::string, std::string>> ov;
  if (!out.empty()) ov.emplace_back("out", out);
  if (!t_end.empty()) ov.emplace_back("t_end", t_end);
  if (!h.empty()) ov.emplace_back("h", h);
  if (!samples.empty()) ov.emplace_back("samples", samples);
  if (!seed.empty()) ov.emplace_back("seed", seed);
  if (!boxes.empty()) {
    std::string b;
    for (const std::string& s : boxes) b += (b.empty() ? "" : ";") + s;
    ov.emplace_back("box", b);
  }

  const auto doc = load(config, ov);
  if (!doc) return 2;
  if (*run) return pbep::run_command(pbep::build_config(*doc));
  if (*check) return pbep::check_command(pbep::build_config(*doc));
  return pbep::sweep_command(*doc, grid, threads);
}
