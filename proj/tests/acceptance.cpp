// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pbep/commands.hpp"

using namespace pbep;
namespace fs = std::filesystem;

namespace {

const fs::path kOut = "acceptance_out";

struct Shipped {
  ScenarioConfig cfg;
  RunReport report;
};

ScenarioConfig load(const std::string& name, const std::string& out_name) {
  auto doc = parse_document(read_file(std::string(PBEP_CONFIG_DIR) + "/" + name + ".cfg"));
  set_entry(doc, "out", (kOut / out_name).string());
  return build_config(doc);
}

Shipped shipped(const std::string& name) {
  Shipped s{load(name, name), {}};
  s.report = run_to_directory(s.cfg).report;
  return s;
}

std::string g(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.3g", v);
  return b;
}

struct Line {
  int id;
  bool pass;
  std::string detail;
};

Vector sub(const Vector& a, const Vector& b) { return a - b; }

// Criterion 4b: G+D fed by an exact regression Y = Omega' G(theta) from a
// random bounded stream; checks |Ycal - Delta G(theta)| along the whole run.
double exact_feed_worst(std::mt19937_64& rng, std::size_t p) {
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::uniform_real_distribution<double> Fq(0.5, 10.0);
  Vector Gt(p), tg0(p);
  for (double& v : Gt) v = 5.0 * U(rng);
  for (double& v : tg0) v = 2.0 * U(rng);
  std::vector<std::vector<std::pair<double, double>>> modes(p);
  for (auto& m : modes)
    for (int k = 0; k < 3; ++k) m.emplace_back(U(rng), Fq(rng));
  auto omega = [&](double t) {
    Matrix O(p, 1);
    for (std::size_t i = 0; i < p; ++i)
      for (const auto& [a, w] : modes[i]) O(i, 0) += a * std::sin(w * t + static_cast<double>(i));
    return O;
  };
  const double gamma_g = 100.0, h = 1e-3;
  GplusDState s{tg0, Matrix::identity(p), Vector(1, 0.0)};
  double worst = 0.0;
  RegressorSample a{0.0, transpose(omega(0.0)) * Gt, omega(0.0)};
  for (int k = 0; k < 5000; ++k) {
    const double t1 = (k + 1) * h;
    RegressorSample b{t1, transpose(omega(t1)) * Gt, omega(t1)};
    const FlowAverages avg = flow_averages(a, b);
    const GradientFlowStep st(gamma_g, h, avg.M);
    s.theta_g_hat = st.apply(s.theta_g_hat, avg.b);
    s.Phi = st.apply(s.Phi);
    const Mixing mix = gd_mix(s, tg0);
    const double scale = std::max({1.0, norm(mix.Ycal), std::abs(mix.Delta) * norm(Gt)});
    worst = std::max(worst, norm(sub(mix.Ycal, mix.Delta * Gt)) / scale);
    a = b;
  }
  return worst;
}

// Criterion 4c: adj(M) M = det(M) I.
double adjugate_worst(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(-3.0, 3.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(trial % 6);
    Matrix M(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) M(i, j) = U(rng);
    const Matrix A = adjugate(M);
    const double d = determinant(M);
    const Matrix R = A * M - d * Matrix::identity(n);
    double nm = 0.0, na = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        nm = std::max(nm, std::abs(M(i, j)));
        na = std::max(na, std::abs(A(i, j)));
      }
    const double scale = std::max({1.0, std::abs(d), static_cast<double>(n) * na * nm});
    worst = std::max(worst, max_abs(R) / scale);
  }
  return worst;
}

}  // namespace

int main() {
  std::vector<Line> lines;
  auto add = [&](int id, bool pass, const std::string& detail) { lines.push_back({id, pass, detail}); };

  fs::create_directories(kOut);
  const Shipped circ = shipped("circuit");
  const Shipped circ_grad = shipped("circuit_gradient");
  const Shipped circ_known = shipped("circuit_known");
  const Shipped ph = shipped("ph");
  const Shipped ph_grad = shipped("ph_gradient");
  const Shipped ph_known = shipped("ph_known");

  {  // 1
    const RunReport& r = circ.report;
    const double th_rel = r.theta_rel_error.value_or(INFINITY);
    const double e2 = std::abs(r.x_final[1] - 15.0);
    const bool ok = r.completed && th_rel <= 0.02 && e2 <= 0.15 && r.wall_seconds < 5.0;
    add(1, ok,
        "circuit G+D: theta_hat=(" + g(r.theta_hat_final[0]) + ", " + g(r.theta_hat_final[1]) + ") rel err " + g(th_rel) +
            " (<=0.02), |x2-15|=" + g(e2) + " (<=0.15), wall " + g(r.wall_seconds) + " s (<5)");
  }
  {  // 2
    const RunReport& r = circ_grad.report;
    const double e2 = std::abs(r.x_final[1] - 15.0);
    const double terr = r.overparam_error.value_or(0.0);
    const Vector& T = r.overparam_hat_final;
    const Vector published{1.00, 0.17, 0.25};
    double soft = 0.0;
    for (std::size_t i = 0; i < 3; ++i) soft = std::max(soft, std::abs(T[i] - published[i]));
    const bool ok = r.completed && e2 > 0.5 && terr > 0.3;
    add(2, ok,
        "circuit gradient: |x2-15|=" + g(e2) + " (>0.5), |Theta_hat-(1,1,1.5)|=" + g(terr) + " (>0.3); Theta_hat=(" + g(T[0]) +
            ", " + g(T[1]) + ", " + g(T[2]) + "), max deviation from (1.00,0.17,0.25) " + g(soft) + " [report only: " +
            (soft <= 0.15 ? "within" : "outside") + " 0.15]");
  }
  {  // 3
    const double nx0 = std::sqrt(2.0);
    const double known = norm(ph_known.report.x_final) / nx0;
    const double adapt = norm(ph.report.x_final) / nx0;
    const double th = std::abs(ph.report.theta_hat_final[0] - 1.0);
    const double ratio = ph_grad.report.overparam_error.value_or(0.0) / ph_grad.report.overparam_error_initial.value_or(1.0);
    const bool ok = ph_known.report.completed && ph.report.completed && ph_grad.report.completed && known <= 1e-3 &&
                    adapt <= 1e-2 && th <= 0.02 && ratio >= 0.5;
    add(3, ok,
        "ph: known |x(10)|/|x0|=" + g(known) + " (<=1e-3), G+D |x(20)|/|x0|=" + g(adapt) + " (<=1e-2), |theta_hat-1|=" + g(th) +
            " (<=0.02), gradient |Theta~(20)|/|Theta~(0)|=" + g(ratio) + " (>=0.5)");
  }
  {  // 4
    double abel = 0.0;
    std::size_t samples = 0;
    for (const Shipped* s : {&circ, &circ_grad, &circ_known, &ph, &ph_grad, &ph_known}) {
      if (s->report.max_abel_liouville_rel_error) abel = std::max(abel, *s->report.max_abel_liouville_rel_error);
      samples += s->report.abel_liouville_samples;
    }
    std::mt19937_64 rng(20240611);
    double feed = 0.0;
    for (int stream = 0; stream < 100; ++stream) feed = std::max(feed, exact_feed_worst(rng, 1 + stream % 3));
    const double adj = adjugate_worst(rng);
    const bool ok = samples > 0 && abel <= 1e-5 && feed <= 1e-6 && adj <= 1e-9;
    add(4, ok,
        "identities: Abel-Liouville rel err " + g(abel) + " over " + std::to_string(samples) + " samples (<=1e-5), exact-feed " +
            g(feed) + " (<=1e-6), adj(M)M-det(M)I " + g(adj) + " (<=1e-9)");
  }
  {  // 5
    double circ_pb = 0.0, ph_pb = 0.0;
    for (const Shipped* s : {&circ, &circ_grad, &circ_known}) circ_pb = std::max(circ_pb, s->report.max_power_balance_residual);
    for (const Shipped* s : {&ph, &ph_grad, &ph_known}) ph_pb = std::max(ph_pb, s->report.max_power_balance_residual);

    // Lyapunov function along the known-parameter circuit trace, centered differences at h.
    const Trace tr = read_trace((kOut / "circuit_known" / "trace.csv").string());
    const std::size_t ix1 = *tr.column("x1"), ix2 = *tr.column("x2"), it = *tr.column("t");
    const CircuitParams& c = circ_known.cfg.circuit;
    std::vector<double> W;
    for (const auto& row : tr.rows) W.push_back(circuit_lyapunov(c, {row[ix1], row[ix2]}));
    const double tol_mono = 1e-12 * W.front();
    bool mono = true;
    for (std::size_t k = 1; k < W.size(); ++k) mono = mono && W[k] <= W[k - 1] + tol_mono;
    double peak = 0.0;
    for (const auto& row : tr.rows) peak = std::max(peak, std::abs(circuit_lyapunov_rate(c, {row[ix1], row[ix2]})));
    double rel = 0.0;
    for (std::size_t k = 1; k + 1 < tr.rows.size(); ++k) {
      const double meas = (W[k + 1] - W[k - 1]) / (tr.rows[k + 1][it] - tr.rows[k - 1][it]);
      const double ref = circuit_lyapunov_rate(c, {tr.rows[k][ix1], tr.rows[k][ix2]});
      rel = std::max(rel, std::abs(meas - ref) / std::max(std::abs(ref), 1e-6 * peak));
    }
    const bool ok = circ_pb <= 1e-3 && ph_pb <= 1e-4 && mono && rel <= 1e-3;
    add(5, ok,
        "physics: circuit power balance " + g(circ_pb) + " (<=1e-3), ph " + g(ph_pb) + " (<=1e-4), W non-increasing " +
            (mono ? "yes" : "no") + ", W' rel err " + g(rel) + " (<=1e-3)");
  }
  {  // 6
    const ScenarioConfig cc = load("circuit", "unused"), pc = load("ph", "unused");
    const Box bc{{0.1, 0.1}, {10.0, 10.0}}, bp{{0.1}, {10.0}};
    const auto rc = check_monotonicity(make_scenario(cc).plant.param_map, bc, 1000, 1);
    const auto rp = check_monotonicity(make_scenario(pc).plant.param_map, bp, 1000, 1);
    const bool ok = std::abs(rc.rho_jacobian - 1.0) <= 1e-9 && std::abs(rp.rho_jacobian - 1.0) <= 1e-9;
    add(6, ok, "monotonicity over [0.1,10]^q: circuit rho=" + format_double(rc.rho_jacobian) + ", ph rho=" + format_double(rp.rho_jacobian));
  }
  {  // 7
    const RunReport& r = circ.report;
    ExcitationRecord zero;
    zero.reset(3, 1e-3);
    for (int k = 1; k <= 20000; ++k) zero.accumulate(Matrix(3, 3), k * 1e-3);
    const ExcitationSummary z = excitation_report(zero, 1e-3);
    const bool ok = r.is_ie && r.t_c && std::isfinite(*r.t_c) && !z.is_ie && !z.t_c;
    add(7, ok,
        std::string("excitation: circuit is_IE=") + (r.is_ie ? "true" : "false") + " t_c=" + (r.t_c ? g(*r.t_c) : "none") +
            " at C_c=1e-3; zero stream is_IE=" + (z.is_ie ? "true" : "false"));
  }
  {  // 8
    ScenarioConfig half = circ.cfg;
    half.h = circ.cfg.h / 2;
    half.out = (kOut / "circuit_half_h").string();
    const RunReport rh = run_to_directory(half).report;
    const double order = norm(rh.theta_hat_final - circ.report.theta_hat_final) / norm(circ.report.theta_hat_final);
    ScenarioConfig again = circ.cfg;
    again.out = (kOut / "circuit_again").string();
    run_to_directory(again);
    const bool same = read_file((kOut / "circuit" / "trace.csv").string()) == read_file((kOut / "circuit_again" / "trace.csv").string());
    add(8, rh.completed && order <= 1e-4 && same,
        "hygiene: halving h changes theta_hat by " + g(order) + " relative (<=1e-4); repeated run CSV bit-identical " + (same ? "yes" : "no"));
  }

  bool all = true;
  for (const Line& l : lines) {
    std::printf("criterion %d: %s  %s\n", l.id, l.pass ? "PASS" : "FAIL", l.detail.c_str());
    all = all && l.pass;
  }
  return all ? 0 : 1;
}
