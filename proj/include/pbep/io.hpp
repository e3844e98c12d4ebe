#pragma once

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pbep/config.hpp"
#include "pbep/sim.hpp"

namespace pbep {

inline std::string format_sci(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17e", v);
  return buf;
}

// Comma-separated trace, one header line, '\n' terminated rows.
class CsvTraceWriter : public TraceSink {
 public:
  explicit CsvTraceWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot open " + path + " for writing");
  }

  void header(const std::vector<std::string>& columns) override {
    for (std::size_t i = 0; i < columns.size(); ++i) out_ << (i ? "," : "") << columns[i];
    out_ << '\n';
    check();
  }

  void row(std::span<const double> values) override {
    std::string line;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i) line += ',';
      line += format_sci(values[i]);
    }
    line += '\n';
    out_ << line;
    check();
  }

  void close() {
    out_.flush();
    check();
    out_.close();
  }

 private:
  void check() {
    if (!out_) throw std::runtime_error("trace write failed");
  }
  std::ofstream out_;
};

// Column-wise view of a trace CSV.
struct Trace {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::optional<std::size_t> column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    return std::nullopt;
  }
};

inline Trace read_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  Trace tr;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty trace");
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) tr.columns.push_back(c);
  }
  while (std::getline(in, line)) {
    std::vector<double> r;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) r.push_back(std::strtod(c.c_str(), nullptr));
    if (r.size() != tr.columns.size()) throw std::runtime_error(path + ": ragged row");
    tr.rows.push_back(std::move(r));
  }
  return tr;
}

namespace detail {
inline std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : "none"; }
}  // namespace detail

// Flat key=value summary: the resolved configuration first (loadable with
// parse_config after dropping the result.* lines), then the run results.
inline std::string format_report(const ScenarioConfig& cfg, const RunReport& r) {
  using detail::opt;
  std::ostringstream o;
  o << emit_config(cfg);
  auto kv = [&](const std::string& k, const std::string& v) { o << "result." << k << " = " << v << '\n'; };
  kv("completed", r.completed ? "true" : "false");
  kv("abort_time", opt(r.abort_time));
  if (!r.completed) kv("abort_message", r.abort_message);
  kv("steps", std::to_string(r.steps));
  kv("t_final", format_double(r.t_final));
  kv("wall_seconds", format_double(r.wall_seconds));
  kv("x_final", format_vector(r.x_final));
  kv("theta_hat_final", format_vector(r.theta_hat_final));
  if (!r.overparam_hat_final.empty()) kv("overparam_hat_final", format_vector(r.overparam_hat_final));
  kv("theta_error", opt(r.theta_error));
  kv("theta_rel_error", opt(r.theta_rel_error));
  kv("overparam_error_initial", opt(r.overparam_error_initial));
  kv("overparam_error", opt(r.overparam_error));
  kv("x_error", format_double(r.x_error));
  kv("regulation_error", format_double(r.regulation_error));
  kv("param_settling_time", opt(r.param_settling_time));
  kv("regulation_settling_time", opt(r.regulation_settling_time));
  kv("is_ie", r.is_ie ? "true" : "false");
  kv("t_c", opt(r.t_c));
  kv("gram_min_eig", format_double(r.gram_min_eig));
  kv("max_power_balance_residual", format_double(r.max_power_balance_residual));
  kv("max_abel_liouville_rel_error", opt(r.max_abel_liouville_rel_error));
  kv("abel_liouville_samples", std::to_string(r.abel_liouville_samples));
  kv("abel_liouville_below_floor", std::to_string(r.abel_liouville_below_floor));
  kv("delta_final", opt(r.delta_final));
  kv("det_phi_final", opt(r.det_phi_final));
  return o.str();
}

// matplotlib script: parameter estimates and regulated state against time.
inline std::string plot_script(const ScenarioConfig& cfg) {
  std::ostringstream o;
  const bool ph = cfg.scenario == "ph";
  o << "import csv\n"
       "import sys\n"
       "import matplotlib\n"
       "matplotlib.use('Agg')\n"
       "import matplotlib.pyplot as plt\n\n"
       "path = sys.argv[1] if len(sys.argv) > 1 else 'trace.csv'\n"
       "with open(path) as f:\n"
       "    rows = list(csv.reader(f))\n"
       "cols = {name: [float(r[i]) for r in rows[1:]] for i, name in enumerate(rows[0])}\n"
       "t = cols['t']\n\n"
       "fig, ax = plt.subplots(2, 1, sharex=True, figsize=(7, 6))\n"
       "for name in cols:\n"
       "    if name.startswith('theta_hat') or name.startswith('Theta_hat'):\n"
       "        ax[0].plot(t, cols[name], label=name)\n";
  if (ph) {
    o << "ax[0].axhline(" << format_double(cfg.theta) << ", color='k', lw=0.5)\n"
      << "ax[1].plot(t, cols['x1'], label='x1')\n"
      << "ax[1].plot(t, cols['x2'], label='x2')\n"
      << "ax[1].axhline(0, color='k', lw=0.5)\n";
  } else {
    o << "for v in (" << format_double(cfg.circuit.theta1) << ", " << format_double(cfg.circuit.theta2) << "):\n"
      << "    ax[0].axhline(v, color='k', lw=0.5)\n"
      << "ax[1].plot(t, cols['x2'], label='x2')\n"
      << "ax[1].axhline(" << format_double(cfg.circuit.kappa) << ", color='k', lw=0.5, label='kappa')\n";
  }
  o << "ax[0].set_ylabel('estimates')\n"
       "ax[1].set_ylabel('state')\n"
       "ax[1].set_xlabel('t [s]')\n"
       "for a in ax:\n"
       "    a.legend(loc='best')\n"
       "    a.grid(True)\n"
       "fig.tight_layout()\n"
       "fig.savefig(path.rsplit('.', 1)[0] + '.png', dpi=120)\n";
  return o.str();
}

}  // namespace pbep
