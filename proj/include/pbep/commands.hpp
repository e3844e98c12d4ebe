#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "pbep/config.hpp"
#include "pbep/estimator.hpp"
#include "pbep/io.hpp"
#include "pbep/sim.hpp"

namespace pbep {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.close();
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

struct RunOutcome {
  RunReport report;
  std::filesystem::path dir;
};

// Runs one scenario, writing trace.csv, report.txt and plot.py into cfg.out.
// Throws on I/O failure; an aborted simulation still produces all three files.
inline RunOutcome run_to_directory(const ScenarioConfig& cfg) {
  namespace fs = std::filesystem;
  const fs::path dir(cfg.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir.string());

  CsvTraceWriter trace((dir / "trace.csv").string());
  RunOutcome o;
  o.dir = dir;
  o.report = run(make_scenario(cfg), make_sim_config(cfg), &trace);
  trace.close();
  write_file(dir / "report.txt", format_report(cfg, o.report));
  write_file(dir / "plot.py", plot_script(cfg));
  return o;
}

inline int run_command(const ScenarioConfig& cfg, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  RunOutcome o;
  try {
    o = run_to_directory(cfg);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  const RunReport& r = o.report;
  if (!r.completed) {
    err << "run aborted at t=" << format_double(r.abort_time.value_or(r.t_final)) << ": " << r.abort_message << '\n';
    return 1;
  }
  out << "completed " << r.steps << " steps in " << format_double(r.wall_seconds) << " s\n";
  out << "theta_hat = " << format_vector(r.theta_hat_final) << '\n';
  out << "x = " << format_vector(r.x_final) << '\n';
  out << "wrote " << (o.dir / "trace.csv").string() << ", report.txt, plot.py\n";
  return 0;
}

struct CheckResult {
  MonotonicityReport monotonicity;
  std::optional<ExcitationSummary> excitation;  // set when a trace was found
  bool pass = false;
};

// Excitation verdict from the gram_min_eig column of a trace.
inline ExcitationSummary excitation_from_trace(const Trace& tr, double C_c) {
  const auto it = tr.column("t");
  const auto ig = tr.column("gram_min_eig");
  if (!it || !ig) throw std::runtime_error("trace lacks t or gram_min_eig columns");
  for (const auto& row : tr.rows)
    if (row[*ig] >= C_c) return {true, row[*it]};
  return {};
}

inline CheckResult check(const ScenarioConfig& cfg) {
  CheckResult c;
  const Scenario sc = make_scenario(cfg);
  c.monotonicity = check_monotonicity(sc.plant.param_map, make_box(cfg), cfg.samples, cfg.seed);
  c.pass = c.monotonicity.pass;
  const std::filesystem::path trace = std::filesystem::path(cfg.out) / "trace.csv";
  if (std::filesystem::exists(trace)) {
    c.excitation = excitation_from_trace(read_trace(trace.string()), cfg.excitation_threshold);
    c.pass = c.pass && c.excitation->is_ie;
  }
  return c;
}

inline int check_command(const ScenarioConfig& cfg, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CheckResult c;
  try {
    c = check(cfg);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  const MonotonicityReport& m = c.monotonicity;
  out << "monotonicity: rho_jacobian = " << format_double(m.rho_jacobian) << ", rho_secant = " << format_double(m.rho_secant)
      << " over " << m.sample_count << " points (seed " << m.seed << ") -> " << (m.pass ? "PASS" : "FAIL") << '\n';
  if (c.excitation) {
    out << "excitation: is_ie = " << (c.excitation->is_ie ? "true" : "false")
        << ", t_c = " << (c.excitation->t_c ? format_double(*c.excitation->t_c) : "none")
        << " at C_c = " << format_double(cfg.excitation_threshold) << " -> " << (c.excitation->is_ie ? "PASS" : "FAIL") << '\n';
  } else {
    out << "excitation: no trace in " << cfg.out << ", skipped\n";
  }
  out << (c.pass ? "PASS" : "FAIL") << '\n';
  return c.pass ? 0 : 1;
}

struct GridAxis {
  std::string key;
  std::vector<double> values;
};

// "key=lo:hi:steps" with steps >= 1 evenly spaced points (lo only when steps == 1).
inline GridAxis parse_grid(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("grid '" + spec + "': expected key=lo:hi:steps");
  GridAxis g;
  g.key = detail::trim(spec.substr(0, eq));
  const auto parts = detail::split(spec.substr(eq + 1), ':');
  if (parts.size() != 3) throw std::invalid_argument("grid '" + spec + "': expected key=lo:hi:steps");
  const ConfigEntry e{g.key, parts[2], 0};
  const double lo = detail::to_double(e, parts[0]), hi = detail::to_double(e, parts[1]);
  const std::uint64_t steps = detail::to_uint(e);
  if (steps < 1) throw std::invalid_argument("grid '" + spec + "': steps must be >= 1");
  for (std::uint64_t i = 0; i < steps; ++i)
    g.values.push_back(steps == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(steps - 1));
  return g;
}

struct SweepCell {
  std::vector<double> values;
  ScenarioConfig cfg;
  RunReport report;
  std::string error;
};

// Cartesian product of the grid axes; every cell is validated before any run starts.
inline std::vector<SweepCell> sweep_cells(const std::vector<ConfigEntry>& doc, const std::string& out, const std::vector<GridAxis>& grid) {
  std::vector<SweepCell> cells;
  std::size_t total = 1;
  for (const GridAxis& g : grid) total *= g.values.size();
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::vector<ConfigEntry> d = doc;
    SweepCell c;
    std::size_t rem = idx;
    for (auto it = grid.rbegin(); it != grid.rend(); ++it) {
      const double v = it->values[rem % it->values.size()];
      rem /= it->values.size();
      c.values.insert(c.values.begin(), v);
      set_entry(d, it->key, format_double(v));
    }
    char name[32];
    std::snprintf(name, sizeof name, "cell_%04zu", idx);
    set_entry(d, "out", (std::filesystem::path(out) / name).string());
    c.cfg = build_config(d);
    cells.push_back(std::move(c));
  }
  return cells;
}

inline int sweep_command(const std::vector<ConfigEntry>& doc, const std::vector<std::string>& grid_specs, unsigned threads = 0,
                         std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<GridAxis> grid;
  std::vector<SweepCell> cells;
  std::string root;
  try {
    if (grid_specs.empty()) throw std::invalid_argument("sweep needs at least one --grid");
    for (const std::string& s : grid_specs) grid.push_back(parse_grid(s));
    root = build_config(doc).out;
    cells = sweep_cells(doc, root, grid);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  if (threads == 0) threads = std::max(1U, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(cells.size()));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) {
      try {
        cells[i].report = run_to_directory(cells[i].cfg).report;
      } catch (const std::exception& e) {
        cells[i].error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  std::ostringstream idx;
  idx << "cell";
  for (const GridAxis& g : grid) idx << ',' << g.key;
  idx << ",completed,theta_rel_error,regulation_error,max_power_balance_residual,dir\n";
  bool all_ok = true;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const SweepCell& c = cells[i];
    const bool ok = c.error.empty() && c.report.completed;
    all_ok = all_ok && ok;
    idx << i;
    for (double v : c.values) idx << ',' << format_sci(v);
    idx << ',' << (ok ? "true" : "false") << ','
        << (c.report.theta_rel_error ? format_sci(*c.report.theta_rel_error) : "nan") << ','
        << format_sci(c.report.regulation_error) << ',' << format_sci(c.report.max_power_balance_residual) << ','
        << c.cfg.out << '\n';
    if (!c.error.empty()) err << "cell " << i << ": " << c.error << '\n';
  }
  try {
    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    write_file(std::filesystem::path(root) / "index.csv", idx.str());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  out << "swept " << cells.size() << " cells into " << root << '\n';
  return all_ok ? 0 : 1;
}

}  // namespace pbep
