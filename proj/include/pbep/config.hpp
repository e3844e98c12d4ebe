#pragma once

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pbep/plant.hpp"
#include "pbep/sim.hpp"

namespace pbep {

struct ConfigError : std::runtime_error {
  ConfigError(std::size_t line_, const std::string& msg)
      : std::runtime_error(line_ > 0 ? "line " + std::to_string(line_) + ": " + msg : msg), line(line_) {}
  std::size_t line;
};

// Flat scenario description. parse_config resolves every scenario-dependent
// default, so a parsed config is fully explicit and emit_config round-trips.
struct ScenarioConfig {
  std::string scenario = "circuit";  // ph | circuit
  double a = 1.0;                    // ph
  double theta = 1.0;                // ph
  CircuitParams circuit;
  double gamma_g = 100.0;
  double gamma = 50.0;
  double lambda = 10.0;
  EstimatorKind estimator = EstimatorKind::GplusDPbep;
  ControllerKind controller = ControllerKind::Adaptive;
  Vector x0;
  Vector theta_hat0;
  Vector overparam_hat0;  // empty unless a gradient estimator is selected
  Vector theta_g0;        // empty unless G+D is selected
  double t_end = 20.0;
  double h = 1e-3;
  int substeps = 1;
  Scheme scheme = Scheme::ExponentialFlow;
  std::size_t decimation = 1;
  std::string out = "out";
  std::uint64_t seed = 0;
  double excitation_threshold = 1e-3;
  std::vector<std::pair<double, double>> box;  // monotonicity check box, one interval per theta component
  std::size_t samples = 1000;
  std::string selector = "default";  // circuit also accepts "power" (W = (theta1^alpha, theta2))

  bool operator==(const ScenarioConfig& o) const {
    return scenario == o.scenario && a == o.a && theta == o.theta && circuit.theta1 == o.circuit.theta1 &&
           circuit.theta2 == o.circuit.theta2 && circuit.alpha == o.circuit.alpha && circuit.E == o.circuit.E &&
           circuit.kp == o.circuit.kp && circuit.kappa == o.circuit.kappa && gamma_g == o.gamma_g && gamma == o.gamma &&
           lambda == o.lambda && estimator == o.estimator && controller == o.controller && x0 == o.x0 &&
           theta_hat0 == o.theta_hat0 && overparam_hat0 == o.overparam_hat0 && theta_g0 == o.theta_g0 &&
           t_end == o.t_end && h == o.h && substeps == o.substeps && scheme == o.scheme && decimation == o.decimation &&
           out == o.out && seed == o.seed && excitation_threshold == o.excitation_threshold && box == o.box &&
           samples == o.samples && selector == o.selector;
  }
};

inline const char* to_string(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::GplusDPbep:
      return "gplusd_pbep";
    case EstimatorKind::GradientStd:
      return "gradient_std";
    case EstimatorKind::GradientPbepOverparam:
      return "gradient_pbep_overparam";
    case EstimatorKind::None:
      return "none";
  }
  return "?";
}

inline const char* to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::Adaptive:
      return "adaptive";
    case ControllerKind::KnownParameter:
      return "known_parameter";
    case ControllerKind::OpenLoop:
      return "open_loop";
  }
  return "?";
}

inline const char* to_string(Scheme s) { return s == Scheme::Rk4 ? "rk4" : "exponential_flow"; }

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_vector(const Vector& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ", ";
    s += format_double(v[i]);
  }
  return s;
}

// One "key = value" line of a config document.
struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;  // 0 for entries injected from the command line
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

inline double to_double(const ConfigEntry& e, const std::string& text) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size() || !std::isfinite(v))
    throw ConfigError(e.line, e.key + ": expected a finite number, got '" + text + "'");
  return v;
}

inline std::uint64_t to_uint(const ConfigEntry& e) {
  const std::string t = trim(e.value);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
    throw ConfigError(e.line, e.key + ": expected a non-negative integer, got '" + e.value + "'");
  return v;
}

inline Vector to_vector(const ConfigEntry& e) {
  Vector v;
  if (trim(e.value).empty()) return v;
  for (const std::string& part : split(e.value, ',')) v.push_back(to_double(e, part));
  return v;
}

inline std::vector<std::pair<double, double>> to_box(const ConfigEntry& e) {
  std::vector<std::pair<double, double>> box;
  for (const std::string& iv : split(e.value, ';')) {
    const auto ends = split(iv, ',');
    if (ends.size() != 2) throw ConfigError(e.line, "box: expected 'lo,hi' intervals separated by ';'");
    const double lo = to_double(e, ends[0]), hi = to_double(e, ends[1]);
    if (!(hi > lo)) throw ConfigError(e.line, "box: interval must satisfy lo < hi");
    box.emplace_back(lo, hi);
  }
  return box;
}

}  // namespace detail

inline std::vector<ConfigEntry> parse_document(std::string_view text) {
  std::vector<ConfigEntry> entries;
  std::map<std::string, std::size_t> seen;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string s = detail::trim(line);
    if (s.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(line_no, "expected 'key = value'");
    ConfigEntry e{detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)), line_no};
    if (e.key.empty()) throw ConfigError(line_no, "missing key");
    if (auto it = seen.find(e.key); it != seen.end())
      throw ConfigError(line_no, e.key + ": duplicate key (first set on line " + std::to_string(it->second) + ")");
    seen.emplace(e.key, line_no);
    entries.push_back(std::move(e));
    if (end == text.size()) break;
  }
  return entries;
}

// Replace or append an entry (command-line overrides, sweep cells).
inline void set_entry(std::vector<ConfigEntry>& doc, const std::string& key, const std::string& value) {
  for (ConfigEntry& e : doc)
    if (e.key == key) {
      e.value = value;
      e.line = 0;
      return;
    }
  doc.push_back({key, value, 0});
}

inline ScenarioConfig build_config(const std::vector<ConfigEntry>& doc) {
  using namespace detail;
  ScenarioConfig c;
  std::map<std::string, std::size_t> line_of;

  const ConfigEntry* scenario_entry = nullptr;
  for (const ConfigEntry& e : doc)
    if (e.key == "scenario") scenario_entry = &e;
  if (!scenario_entry) throw ConfigError(0, "missing required key 'scenario'");
  c.scenario = scenario_entry->value;
  if (c.scenario == "custom")
    throw ConfigError(scenario_entry->line, "scenario: 'custom' plants cannot be described in a config file; use the library API");
  if (c.scenario != "ph" && c.scenario != "circuit")
    throw ConfigError(scenario_entry->line, "scenario: expected 'ph' or 'circuit', got '" + c.scenario + "'");
  const bool ph = c.scenario == "ph";
  c.substeps = ph ? 1 : 4;

  std::optional<std::uint64_t> substeps_set;
  bool x0_set = false, th0_set = false, ov0_set = false, g0_set = false, box_set = false;

  for (const ConfigEntry& e : doc) {
    const std::string& k = e.key;
    line_of[k] = e.line;
    auto only = [&](bool ok, const char* which) {
      if (!ok) throw ConfigError(e.line, k + ": only valid for scenario=" + which);
    };
    if (k == "scenario") continue;
    if (k == "a") {
      only(ph, "ph");
      c.a = to_double(e, e.value);
    } else if (k == "theta") {
      only(ph, "ph");
      c.theta = to_double(e, e.value);
    } else if (k == "theta1") {
      only(!ph, "circuit");
      c.circuit.theta1 = to_double(e, e.value);
    } else if (k == "theta2") {
      only(!ph, "circuit");
      c.circuit.theta2 = to_double(e, e.value);
    } else if (k == "alpha") {
      only(!ph, "circuit");
      c.circuit.alpha = to_double(e, e.value);
    } else if (k == "E") {
      only(!ph, "circuit");
      c.circuit.E = to_double(e, e.value);
    } else if (k == "kp") {
      only(!ph, "circuit");
      c.circuit.kp = to_double(e, e.value);
    } else if (k == "kappa") {
      only(!ph, "circuit");
      c.circuit.kappa = to_double(e, e.value);
    } else if (k == "gamma_g") {
      c.gamma_g = to_double(e, e.value);
    } else if (k == "gamma") {
      c.gamma = to_double(e, e.value);
    } else if (k == "lambda") {
      c.lambda = to_double(e, e.value);
    } else if (k == "estimator") {
      if (e.value == "gplusd_pbep") c.estimator = EstimatorKind::GplusDPbep;
      else if (e.value == "gradient_std") c.estimator = EstimatorKind::GradientStd;
      else if (e.value == "gradient_pbep_overparam") c.estimator = EstimatorKind::GradientPbepOverparam;
      else if (e.value == "none") c.estimator = EstimatorKind::None;
      else throw ConfigError(e.line, "estimator: expected gplusd_pbep, gradient_std, gradient_pbep_overparam or none");
    } else if (k == "controller") {
      if (e.value == "adaptive") c.controller = ControllerKind::Adaptive;
      else if (e.value == "known_parameter") c.controller = ControllerKind::KnownParameter;
      else if (e.value == "open_loop") c.controller = ControllerKind::OpenLoop;
      else throw ConfigError(e.line, "controller: expected adaptive, known_parameter or open_loop");
    } else if (k == "x0") {
      c.x0 = to_vector(e);
      x0_set = true;
    } else if (k == "theta_hat0") {
      c.theta_hat0 = to_vector(e);
      th0_set = true;
    } else if (k == "overparam_hat0") {
      c.overparam_hat0 = to_vector(e);
      ov0_set = true;
    } else if (k == "theta_g0") {
      c.theta_g0 = to_vector(e);
      g0_set = true;
    } else if (k == "t_end") {
      c.t_end = to_double(e, e.value);
    } else if (k == "h") {
      c.h = to_double(e, e.value);
    } else if (k == "substeps") {
      substeps_set = to_uint(e);
    } else if (k == "scheme") {
      if (e.value == "exponential_flow") c.scheme = Scheme::ExponentialFlow;
      else if (e.value == "rk4") c.scheme = Scheme::Rk4;
      else throw ConfigError(e.line, "scheme: expected exponential_flow or rk4");
    } else if (k == "decimation") {
      c.decimation = to_uint(e);
    } else if (k == "out") {
      if (e.value.empty()) throw ConfigError(e.line, "out: must not be empty");
      c.out = e.value;
    } else if (k == "seed") {
      c.seed = to_uint(e);
    } else if (k == "excitation_threshold") {
      c.excitation_threshold = to_double(e, e.value);
    } else if (k == "box") {
      c.box = to_box(e);
      box_set = true;
    } else if (k == "samples") {
      c.samples = to_uint(e);
    } else if (k == "selector") {
      c.selector = e.value;
    } else {
      throw ConfigError(e.line, "unknown key '" + k + "'");
    }
  }

  auto fail = [&](const std::string& key, const std::string& msg) -> void {
    const auto it = line_of.find(key);
    throw ConfigError(it == line_of.end() ? 0 : it->second, key + ": " + msg);
  };
  auto positive = [&](const std::string& key, double v) {
    if (!(v > 0.0)) fail(key, "must be positive");
  };

  if (ph) {
    if (c.theta == 0.0) fail("theta", "must be nonzero (the stabilizer divides by theta)");
  } else {
    positive("theta1", c.circuit.theta1);
    positive("theta2", c.circuit.theta2);
    positive("E", c.circuit.E);
    positive("kp", c.circuit.kp);
    if (c.circuit.kappa == 0.0) fail("kappa", "must be nonzero");
  }
  positive("gamma_g", c.gamma_g);
  positive("gamma", c.gamma);
  positive("lambda", c.lambda);
  positive("h", c.h);
  if (!(c.t_end > c.h)) fail("t_end", "must exceed h");
  positive("excitation_threshold", c.excitation_threshold);
  if (substeps_set) {
    if (*substeps_set < 1 || *substeps_set > 1000) fail("substeps", "must be between 1 and 1000");
    c.substeps = static_cast<int>(*substeps_set);
  }
  if (c.decimation < 1) fail("decimation", "must be >= 1");
  if (c.samples < 2) fail("samples", "must be >= 2");
  if (c.selector != "default" && !(c.selector == "power" && !ph))
    fail("selector", ph ? "expected 'default'" : "expected 'default' or 'power'");

  const std::size_t n = 2, q = ph ? 1 : 2, p = ph ? 2 : 3;
  const std::size_t n_w = ph ? 2 : 3;
  auto dim = [&](const std::string& key, const Vector& v, std::size_t want) {
    if (v.size() != want) fail(key, "expected " + std::to_string(want) + " components, got " + std::to_string(v.size()));
  };
  if (!x0_set) c.x0 = ph ? Vector{1.0, 1.0} : Vector{0.0, 0.0};
  dim("x0", c.x0, n);
  if (!th0_set) c.theta_hat0 = ph ? Vector{0.5} : Vector{0.0, 0.0};
  dim("theta_hat0", c.theta_hat0, q);
  if (ph && c.controller == ControllerKind::Adaptive && c.estimator == EstimatorKind::GplusDPbep && c.theta_hat0[0] == 0.0)
    fail("theta_hat0", "must be nonzero for the adaptive ph loop (the stabilizer divides by theta)");

  const bool gradient = c.estimator == EstimatorKind::GradientStd || c.estimator == EstimatorKind::GradientPbepOverparam;
  const std::size_t ov_dim = c.estimator == EstimatorKind::GradientStd ? n_w : p;
  if (gradient) {
    if (!ov0_set) c.overparam_hat0 = ph ? Vector{0.5, 0.25} : Vector(ov_dim, 0.0);
    dim("overparam_hat0", c.overparam_hat0, ov_dim);
  } else if (ov0_set && !c.overparam_hat0.empty()) {
    fail("overparam_hat0", "only used by gradient estimators");
  } else {
    c.overparam_hat0.clear();
  }
  if (c.estimator == EstimatorKind::GplusDPbep) {
    if (!g0_set) c.theta_g0.assign(p, 0.0);
    dim("theta_g0", c.theta_g0, p);
  } else if (g0_set && !c.theta_g0.empty()) {
    fail("theta_g0", "only used by the gplusd_pbep estimator");
  } else {
    c.theta_g0.clear();
  }
  if (!box_set) c.box.assign(q, {0.1, 10.0});
  if (c.box.size() != q) fail("box", "expected " + std::to_string(q) + " intervals");
  return c;
}

inline ScenarioConfig parse_config(std::string_view text) { return build_config(parse_document(text)); }

inline std::string emit_config(const ScenarioConfig& c) {
  std::ostringstream o;
  auto kv = [&](const char* k, const std::string& v) { o << k << " = " << v << '\n'; };
  kv("scenario", c.scenario);
  if (c.scenario == "ph") {
    kv("a", format_double(c.a));
    kv("theta", format_double(c.theta));
  } else {
    kv("theta1", format_double(c.circuit.theta1));
    kv("theta2", format_double(c.circuit.theta2));
    kv("alpha", format_double(c.circuit.alpha));
    kv("E", format_double(c.circuit.E));
    kv("kp", format_double(c.circuit.kp));
    kv("kappa", format_double(c.circuit.kappa));
  }
  kv("gamma_g", format_double(c.gamma_g));
  kv("gamma", format_double(c.gamma));
  kv("lambda", format_double(c.lambda));
  kv("estimator", to_string(c.estimator));
  kv("controller", to_string(c.controller));
  kv("x0", format_vector(c.x0));
  kv("theta_hat0", format_vector(c.theta_hat0));
  if (!c.overparam_hat0.empty()) kv("overparam_hat0", format_vector(c.overparam_hat0));
  if (!c.theta_g0.empty()) kv("theta_g0", format_vector(c.theta_g0));
  kv("t_end", format_double(c.t_end));
  kv("h", format_double(c.h));
  kv("substeps", std::to_string(c.substeps));
  kv("scheme", to_string(c.scheme));
  kv("decimation", std::to_string(c.decimation));
  kv("out", c.out);
  kv("seed", std::to_string(c.seed));
  kv("excitation_threshold", format_double(c.excitation_threshold));
  std::string box;
  for (std::size_t i = 0; i < c.box.size(); ++i) {
    if (i) box += "; ";
    box += format_double(c.box[i].first) + "," + format_double(c.box[i].second);
  }
  kv("box", box);
  kv("samples", std::to_string(c.samples));
  kv("selector", c.selector);
  return o.str();
}

inline Scenario make_scenario(const ScenarioConfig& c) {
  Scenario sc = c.scenario == "ph" ? ph_example(c.a, c.theta) : circuit_example(c.circuit);
  if (c.selector == "power") sc.plant.param_map.T = Matrix{{0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}};
  return sc;
}

inline SimConfig make_sim_config(const ScenarioConfig& c) {
  SimConfig s;
  s.h = c.h;
  s.t_end = c.t_end;
  s.substeps = c.substeps;
  s.scheme = c.scheme;
  s.estimator = c.estimator;
  s.controller = c.controller;
  s.gamma_g = c.gamma_g;
  s.gamma = c.gamma;
  s.lambda = c.lambda;
  s.x0 = c.x0;
  s.theta_hat0 = c.theta_hat0;
  s.overparam_hat0 = c.overparam_hat0;
  s.theta_g0 = c.theta_g0;
  s.decimation = c.decimation;
  s.excitation_threshold = c.excitation_threshold;
  return s;
}

inline Box make_box(const ScenarioConfig& c) {
  Box b;
  for (const auto& [lo, hi] : c.box) {
    b.lo.push_back(lo);
    b.hi.push_back(hi);
  }
  return b;
}

}  // namespace pbep
