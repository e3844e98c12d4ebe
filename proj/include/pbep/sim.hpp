#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <deque>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pbep/estimator.hpp"
#include "pbep/plant.hpp"
#include "pbep/regressor.hpp"
#include "pbep/smallmat.hpp"

namespace pbep {

enum class EstimatorKind { GplusDPbep, GradientStd, GradientPbepOverparam, None };
enum class ControllerKind { Adaptive, KnownParameter, OpenLoop };

// ExponentialFlow: RK4 for plant, filters and theta_hat; the linear gradient
// flows (theta_g, Phi, Theta_hat) propagated exactly for the trapezoid mean of
// Omega Omega' at every stage. Rk4: plain RK4 on everything.
enum class Scheme { ExponentialFlow, Rk4 };

struct SimConfig {
  double h = 1e-3;
  double t_end = 20.0;
  int substeps = 1;  // RK4 substeps per output step h
  Scheme scheme = Scheme::ExponentialFlow;
  EstimatorKind estimator = EstimatorKind::GplusDPbep;
  ControllerKind controller = ControllerKind::Adaptive;
  double gamma_g = 100.0;
  double gamma = 50.0;
  double lambda = 10.0;
  Vector x0;
  Vector theta_hat0;      // initial theta estimate; zero if empty
  Vector overparam_hat0;  // initial Theta estimate for gradient kinds; zero if empty
  Vector theta_g0;        // G+D pre-estimator start; zero if empty
  std::size_t decimation = 1;
  double excitation_threshold = 1e-3;
  double param_band = 0.02;       // |theta~| / |theta|
  double regulation_band = 0.01;  // |x~_reg| / |x*_reg|
  double abel_liouville_floor = 1e-9;

  void validate() const {
    if (!(h > 0.0) || !std::isfinite(h)) throw std::invalid_argument("SimConfig: h must be positive");
    if (!(t_end > h) || !std::isfinite(t_end)) throw std::invalid_argument("SimConfig: t_end must exceed h");
    if (substeps < 1) throw std::invalid_argument("SimConfig: substeps must be >= 1");
    if (decimation < 1) throw std::invalid_argument("SimConfig: decimation must be >= 1");
    if (!(gamma_g > 0.0) || !(gamma > 0.0) || !(lambda > 0.0)) throw std::invalid_argument("SimConfig: gains must be positive");
    if (!(excitation_threshold > 0.0)) throw std::invalid_argument("SimConfig: excitation threshold must be positive");
  }
};

// Running Gram integral of the active regressor, int Omega Omega' dt.
struct ExcitationRecord {
  Matrix gram;
  std::vector<std::pair<double, double>> min_eig_history;  // (t, lambda_min(gram(t)))
  std::optional<double> t_c;
  double threshold = 1e-3;

  void reset(std::size_t dim, double c) {
    gram = Matrix(dim, dim);
    min_eig_history.clear();
    t_c.reset();
    threshold = c;
  }

  void accumulate(const Matrix& increment, double t) {
    gram += increment;
    const double mu = min_eig_symmetric(gram);
    min_eig_history.emplace_back(t, mu);
    if (!t_c && mu >= threshold) t_c = t;
  }

  double min_eig() const { return min_eig_history.empty() ? 0.0 : min_eig_history.back().second; }
};

struct ExcitationSummary {
  bool is_ie = false;
  std::optional<double> t_c;
};

inline ExcitationSummary excitation_report(const ExcitationRecord& rec, double C_c) {
  for (const auto& [t, mu] : rec.min_eig_history)
    if (mu >= C_c) return {true, t};
  return {};
}

struct SimulationError : std::runtime_error {
  SimulationError(double t_, std::string component_, const std::string& what)
      : std::runtime_error(what), t(t_), component(std::move(component_)) {}
  double t;
  std::string component;
};

struct RunReport {
  bool completed = false;
  std::optional<double> abort_time;
  std::string abort_message;
  std::size_t steps = 0;
  double t_final = 0.0;
  double wall_seconds = 0.0;

  Vector x_final;
  Vector theta_hat_final;      // parameter fed to the controller
  Vector overparam_hat_final;  // Theta_hat for gradient kinds
  std::optional<double> theta_error;      // |theta_hat - theta|
  std::optional<double> theta_rel_error;  // / |theta|
  std::optional<double> overparam_error_initial;
  std::optional<double> overparam_error;  // |Theta_hat - Theta|
  double x_error = 0.0;                   // |x - x*|
  double regulation_error = 0.0;          // |x_reg - x*_reg|
  std::optional<double> param_settling_time;
  std::optional<double> regulation_settling_time;

  bool is_ie = false;
  std::optional<double> t_c;
  double gram_min_eig = 0.0;
  double excitation_threshold = 0.0;

  double max_power_balance_residual = 0.0;
  std::optional<double> max_abel_liouville_rel_error;
  std::size_t abel_liouville_samples = 0;
  std::size_t abel_liouville_below_floor = 0;
  std::optional<double> delta_final;
  std::optional<double> det_phi_final;
};

class TraceSink {
 public:
  virtual ~TraceSink() = default;
  virtual void header(const std::vector<std::string>& columns) = 0;
  virtual void row(std::span<const double> values) = 0;
};

class Simulation {
 public:
  // Linear-flow states (theta_g, Phi for G+D; Theta_hat for gradient kinds).
  struct Flow {
    Vector theta_g;
    Matrix Phi;
    Vector Theta;
  };

  Simulation(Scenario scenario, SimConfig cfg) : sc_(std::move(scenario)), cfg_(std::move(cfg)) {
    cfg_.validate();
    const PlantModel& pl = sc_.plant;
    pl.param_map.validate();
    if (cfg_.x0.size() != pl.n) throw std::invalid_argument("Simulation: x0 has wrong dimension");
    if (pl.theta_true.size() != pl.param_map.q) throw std::invalid_argument("Simulation: theta_true has wrong dimension");
    n_ = pl.n;
    q_ = pl.param_map.q;
    p_ = pl.param_map.p();

    if (cfg_.theta_hat0.empty()) cfg_.theta_hat0.assign(q_, 0.0);
    if (cfg_.theta_hat0.size() != q_) throw std::invalid_argument("Simulation: theta_hat0 must have dimension q");

    uses_std_ = cfg_.estimator == EstimatorKind::GradientStd;
    if (uses_std_ && !pl.std_lre) throw std::invalid_argument("Simulation: scenario has no standard LRE data");
    gradient_ = cfg_.estimator == EstimatorKind::GradientStd || cfg_.estimator == EstimatorKind::GradientPbepOverparam;
    gplusd_ = cfg_.estimator == EstimatorKind::GplusDPbep;

    if (gplusd_) {
      gd_ = GplusD(pl.param_map, cfg_.gamma_g, cfg_.gamma, cfg_.theta_g0);
      flow_.theta_g = gd_.theta_g0;
      flow_.Phi = Matrix::identity(p_);
    }
    if (gradient_) {
      const std::size_t dim = uses_std_ ? pl.std_lre->n_w : p_;
      if (cfg_.overparam_hat0.empty()) cfg_.overparam_hat0.assign(dim, 0.0);
      if (cfg_.overparam_hat0.size() != dim) throw std::invalid_argument("Simulation: overparam_hat0 has wrong dimension");
      flow_.Theta = cfg_.overparam_hat0;
      overparam_true_ = uses_std_ ? pl.std_lre->C(pl.theta_true) : pl.param_map.G(pl.theta_true);
    }

    const Vector& x0 = cfg_.x0;
    const Vector u0 = control(0.0, x0, gplusd_ ? cfg_.theta_hat0 : controller_theta(Vector{}, flow_), flow_);
    const Vector up0 = pl.port_input(u0, 0.0);
    const Vector yp0 = pl.output(x0, pl.theta_true, up0);
    pbep_.emplace(pl.nlpre, pl.param_map, cfg_.lambda, x0, up0, yp0);
    if (uses_std_) std_.emplace(*pl.std_lre, cfg_.lambda, x0, up0);

    // slow = [x | PBEP filters | standard-LRE filters | theta_hat (G+D)]
    off_pbep_ = n_;
    off_std_ = off_pbep_ + pbep_->bank().channels();
    off_theta_ = off_std_ + (std_ ? std_->bank().channels() : 0);
    slow_.assign(x0.begin(), x0.end());
    slow_.insert(slow_.end(), pbep_->bank().state().begin(), pbep_->bank().state().end());
    if (std_) slow_.insert(slow_.end(), std_->bank().state().begin(), std_->bank().state().end());
    if (gplusd_) slow_.insert(slow_.end(), cfg_.theta_hat0.begin(), cfg_.theta_hat0.end());

    excitation_.reset(active_dim(), cfg_.excitation_threshold);
    observe_balance();
  }

  const Scenario& scenario() const { return sc_; }
  const SimConfig& config() const { return cfg_; }
  double time() const { return t_; }
  std::size_t step_count() const { return k_; }

  Vector x() const { return Vector(slow_.begin(), slow_.begin() + static_cast<std::ptrdiff_t>(n_)); }
  const Vector& slow_state() const { return slow_; }
  const Flow& flow() const { return flow_; }

  // Parameter currently fed to the controller.
  Vector controller_theta() const { return controller_theta(slow_, flow_); }

  std::optional<GplusDState> gd_state() const {
    if (!gplusd_) return std::nullopt;
    return GplusDState{flow_.theta_g, flow_.Phi, theta_slice(slow_)};
  }
  const GplusD* gd() const { return gplusd_ ? &gd_ : nullptr; }

  std::optional<Vector> overparam_hat() const {
    if (!gradient_) return std::nullopt;
    return flow_.Theta;
  }
  const Vector& overparam_true() const { return overparam_true_; }

  // Regressor that drives the active estimator (PBEP unless GradientStd).
  RegressorSample active_sample() const { return active_sample(t_, slow_); }
  RegressorSample pbep_sample() const { return pbep_->sample_at(pbep_slice(slow_), t_, x()); }
  const PbepGenerator& pbep_generator() const { return *pbep_; }
  const StdLreGenerator* std_generator() const { return std_ ? &*std_ : nullptr; }

  const ExcitationRecord& excitation() const { return excitation_; }

  // Power-balance residual |S' + d - s| on the integrator (sub)step grid,
  // centered in the interior and second-order one-sided at the first sample.
  // Residuals lag the state by one substep; finish_balance() closes the end.
  double max_power_balance_residual() const { return max_residual_; }
  std::optional<double> balance_residual(std::size_t substep_index) const {
    for (const auto& [j, r] : residuals_)
      if (j == substep_index) return r;
    return std::nullopt;
  }
  void finish_balance() {
    if (balance_count_ < 3 || balance_closed_) return;
    balance_closed_ = true;
    record_residual(balance_count_ - 1, storage_slope(S_[0], S_[1], S_[2], tau(), 1) + dms_[2]);
  }
  double omega_sq_integral() const { return omega_sq_integral_; }

  struct Signals {
    Vector u;
    Vector up;
    Vector yp;
  };
  Signals signals() const { return signals_at(t_, x()); }

  // Advance by h (cfg.substeps RK4 substeps).
  void step() {
    const double tau = cfg_.h / cfg_.substeps;
    Matrix gram_inc(active_dim(), active_dim());
    for (int j = 0; j < cfg_.substeps; ++j) {
      const double t0 = t_ + j * tau;
      if (cfg_.scheme == Scheme::ExponentialFlow)
        substep_exponential(t0, tau, gram_inc);
      else
        substep_rk4(t0, tau, gram_inc);
      check_finite(t0 + tau);
      observe_balance();
    }
    ++k_;
    t_ = static_cast<double>(k_) * cfg_.h;
    excitation_.accumulate(gram_inc, t_);
  }

  // Runs to t_end. Never throws on a numerical abort: the report carries it.
  RunReport run(TraceSink* sink = nullptr) {
    const auto wall0 = std::chrono::steady_clock::now();
    RunReport rep;
    rep.excitation_threshold = cfg_.excitation_threshold;
    const std::size_t n_steps = static_cast<std::size_t>(std::llround(cfg_.t_end / cfg_.h));
    if (sink) sink->header(trace_columns());
    if (gradient_) rep.overparam_error_initial = norm(flow_.Theta - overparam_true_);

    Tracker tr(*this);
    try {
      tr.observe(*this, sink);
      while (k_ < n_steps) {
        step();
        tr.observe(*this, sink);
      }
      rep.completed = true;
    } catch (const SimulationError& e) {
      rep.abort_time = e.t;
      rep.abort_message = e.what();
    } catch (const std::exception& e) {
      rep.abort_time = t_;
      rep.abort_message = e.what();
    }
    tr.finish(*this, sink);

    rep.steps = k_;
    rep.t_final = t_;
    rep.x_final = x();
    rep.theta_hat_final = controller_theta();
    const Vector& th = sc_.plant.theta_true;
    if (cfg_.estimator != EstimatorKind::None) {
      rep.theta_error = norm(rep.theta_hat_final - th);
      rep.theta_rel_error = *rep.theta_error / norm(th);
    }
    if (gradient_) {
      rep.overparam_hat_final = flow_.Theta;
      rep.overparam_error = norm(flow_.Theta - overparam_true_);
    }
    rep.x_error = norm(rep.x_final - sc_.controller.x_star);
    rep.regulation_error = regulation_error(rep.x_final);
    rep.param_settling_time = tr.param_enter;
    rep.regulation_settling_time = tr.reg_enter;
    const ExcitationSummary ex = excitation_report(excitation_, cfg_.excitation_threshold);
    rep.is_ie = ex.is_ie;
    rep.t_c = ex.t_c;
    rep.gram_min_eig = excitation_.min_eig();
    rep.max_power_balance_residual = max_residual_;
    if (gplusd_) {
      if (tr.abel_samples > 0) rep.max_abel_liouville_rel_error = tr.max_abel;
      rep.abel_liouville_samples = tr.abel_samples;
      rep.abel_liouville_below_floor = tr.abel_below;
      const Mixing mix = gd_mix(*gd_state(), gd_.theta_g0);
      rep.delta_final = mix.Delta;
      rep.det_phi_final = determinant(flow_.Phi);
    }
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    return rep;
  }

  std::vector<std::string> trace_columns() const {
    std::vector<std::string> c{"t"};
    for (std::size_t i = 1; i <= n_; ++i) c.push_back("x" + std::to_string(i));
    for (std::size_t i = 1; i <= sc_.plant.m; ++i) c.push_back("u" + std::to_string(i));
    for (std::size_t i = 1; i <= sc_.plant.n_p; ++i) c.push_back("yp" + std::to_string(i));
    for (std::size_t i = 1; i <= q_; ++i) c.push_back("theta_hat" + std::to_string(i));
    if (gradient_)
      for (std::size_t i = 1; i <= flow_.Theta.size(); ++i) c.push_back("Theta_hat" + std::to_string(i));
    for (const char* s : {"Delta", "det_Phi", "gram_min_eig", "pb_residual"}) c.emplace_back(s);
    return c;
  }

  double regulation_error(const Vector& xx) const {
    double e = 0.0;
    for (std::size_t i : sc_.controller.regulated) {
      const double d = xx[i] - sc_.controller.x_star[i];
      e += d * d;
    }
    return std::sqrt(e);
  }

 private:
  struct Tracker;

  double tau() const { return cfg_.h / cfg_.substeps; }

  void record_residual(std::size_t j, double r) {
    const double a = std::abs(r);
    max_residual_ = std::max(max_residual_, a);
    residuals_.emplace_back(j, a);
    while (residuals_.size() > static_cast<std::size_t>(cfg_.substeps) + 4) residuals_.pop_front();
  }

  void observe_balance() {
    const PlantModel& pl = sc_.plant;
    const Vector xx = x();
    const Signals sig = signals_at(t_sub(), xx);
    for (int i = 0; i < 2; ++i) {
      S_[i] = S_[i + 1];
      dms_[i] = dms_[i + 1];
    }
    S_[2] = pl.S(xx, pl.theta_true);
    dms_[2] = pl.d(xx, pl.theta_true) - pl.s(sig.up, sig.yp, pl.theta_true);
    const std::size_t j = balance_count_++;
    if (j == 2) record_residual(0, storage_slope(S_[0], S_[1], S_[2], tau(), -1) + dms_[0]);
    if (j >= 2) record_residual(j - 1, storage_slope(S_[0], S_[1], S_[2], tau(), 0) + dms_[1]);
  }

  // time of the latest balance sample (substeps complete within the current step)
  double t_sub() const { return static_cast<double>(balance_count_) * tau(); }

  Signals signals_at(double t, const Vector& xx) const {
    Signals s;
    s.u = control(t, xx, controller_theta(slow_, flow_), flow_);
    s.up = sc_.plant.port_input(s.u, t);
    s.yp = sc_.plant.output(xx, sc_.plant.theta_true, s.up);
    return s;
  }

  std::size_t active_dim() const {
    return uses_std_ ? sc_.plant.std_lre->n_w : p_;
  }

  std::span<const double> pbep_slice(const Vector& slow) const {
    return std::span<const double>(slow).subspan(off_pbep_, off_std_ - off_pbep_);
  }
  std::span<const double> std_slice(const Vector& slow) const {
    return std::span<const double>(slow).subspan(off_std_, off_theta_ - off_std_);
  }
  Vector theta_slice(const Vector& slow) const {
    if (!gplusd_) return {};
    return Vector(slow.begin() + static_cast<std::ptrdiff_t>(off_theta_), slow.end());
  }
  Vector x_slice(const Vector& slow) const {
    return Vector(slow.begin(), slow.begin() + static_cast<std::ptrdiff_t>(n_));
  }

  Vector controller_theta(const Vector& slow, const Flow& flow) const {
    switch (cfg_.estimator) {
      case EstimatorKind::GplusDPbep:
        return theta_slice(slow);
      case EstimatorKind::GradientStd: {
        auto rec = sc_.plant.std_lre->recover ? sc_.plant.std_lre->recover(flow.Theta) : std::nullopt;
        return rec ? *rec : cfg_.theta_hat0;
      }
      case EstimatorKind::GradientPbepOverparam:
        // exact when W(theta) = T G(theta) = theta, as in both shipped scenarios
        return sc_.plant.param_map.T * flow.Theta;
      case EstimatorKind::None:
        break;
    }
    return cfg_.theta_hat0;
  }

  Vector control(double t, const Vector& x, const Vector& theta_hat, const Flow&) const {
    switch (cfg_.controller) {
      case ControllerKind::Adaptive:
        return sc_.controller.beta(x, theta_hat, t);
      case ControllerKind::KnownParameter:
        return sc_.controller.beta(x, sc_.plant.theta_true, t);
      case ControllerKind::OpenLoop:
        break;
    }
    return Vector(sc_.plant.m, 0.0);
  }

  RegressorSample active_sample(double t, const Vector& slow) const {
    if (uses_std_) return std_->sample_at(std_slice(slow), t, x_slice(slow));
    return pbep_->sample_at(pbep_slice(slow), t, x_slice(slow));
  }

  struct Rates {
    Vector slow;
    Flow flow;  // filled only for the plain RK4 scheme
  };

  Rates rates(double t, const Vector& slow, const Flow& flow, const RegressorSample* sample) const {
    const PlantModel& pl = sc_.plant;
    const Vector xx = x_slice(slow);
    const Vector u = control(t, xx, controller_theta(slow, flow), flow);
    const Vector up = pl.port_input(u, t);
    const Vector yp = pl.output(xx, pl.theta_true, up);

    Rates r;
    r.slow = pl.xdot(xx, pl.theta_true, up);
    const Vector dp = pbep_->rate_at(pbep_slice(slow), xx, up, yp);
    r.slow.insert(r.slow.end(), dp.begin(), dp.end());
    if (std_) {
      const Vector ds = std_->rate_at(std_slice(slow), xx, up);
      r.slow.insert(r.slow.end(), ds.begin(), ds.end());
    }
    if (gplusd_) {
      const Vector th = theta_slice(slow);
      const Mixing mix = gd_mix(GplusDState{flow.theta_g, flow.Phi, th}, gd_.theta_g0);
      const Vector dth = gd_theta_rate(gd_, mix, th);
      r.slow.insert(r.slow.end(), dth.begin(), dth.end());
      if (sample) {
        const GplusDRates g = gd_rates(gd_, GplusDState{flow.theta_g, flow.Phi, th}, *sample);
        r.flow.theta_g = g.dtheta_g;
        r.flow.Phi = g.dPhi;
      }
    }
    if (gradient_ && sample) r.flow.Theta = gradient_rate(GradientState{flow.Theta, cfg_.gamma}, *sample);
    return r;
  }

  Flow propagate(const Flow& f0, const RegressorSample& a, const RegressorSample& b, double tau) const {
    Flow out = f0;
    if (!gplusd_ && !gradient_) return out;
    const FlowAverages avg = flow_averages(a, b);
    if (gplusd_) {
      const GradientFlowStep st(cfg_.gamma_g, tau, avg.M);
      out.theta_g = st.apply(f0.theta_g, avg.b);
      out.Phi = st.apply(f0.Phi);
    } else {
      const GradientFlowStep st(cfg_.gamma, tau, avg.M);
      out.Theta = st.apply(f0.Theta, avg.b);
    }
    return out;
  }

  static Vector axpy(const Vector& base, const Vector& d, double s) {
    Vector out = base;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * d[i];
    return out;
  }

  static Flow axpy(const Flow& base, const Flow& d, double s) {
    Flow out = base;
    if (!d.theta_g.empty()) out.theta_g = axpy(base.theta_g, d.theta_g, s);
    if (d.Phi.rows() > 0) out.Phi = base.Phi + (s * d.Phi);
    if (!d.Theta.empty()) out.Theta = axpy(base.Theta, d.Theta, s);
    return out;
  }

  void accumulate_diagnostics(const RegressorSample& a, const RegressorSample& b, double tau, Matrix& gram_inc) {
    const Matrix inc = tau * flow_averages(a, b).M;
    gram_inc += inc;
    double tr = 0.0;
    for (std::size_t i = 0; i < inc.rows(); ++i) tr += inc(i, i);
    omega_sq_integral_ += tr;
  }

  void substep_exponential(double t, double tau, Matrix& gram_inc) {
    const Vector s0 = slow_;
    const Flow f0 = flow_;
    const RegressorSample r0 = active_sample(t, s0);

    const Rates k1 = rates(t, s0, f0, nullptr);
    const Vector s2 = axpy(s0, k1.slow, tau / 2);
    const Flow f2 = propagate(f0, r0, active_sample(t + tau / 2, s2), tau / 2);
    const Rates k2 = rates(t + tau / 2, s2, f2, nullptr);
    const Vector s3 = axpy(s0, k2.slow, tau / 2);
    const Flow f3 = propagate(f0, r0, active_sample(t + tau / 2, s3), tau / 2);
    const Rates k3 = rates(t + tau / 2, s3, f3, nullptr);
    const Vector s4 = axpy(s0, k3.slow, tau);
    const Flow f4 = propagate(f0, r0, active_sample(t + tau, s4), tau);
    const Rates k4 = rates(t + tau, s4, f4, nullptr);

    for (std::size_t i = 0; i < slow_.size(); ++i)
      slow_[i] = s0[i] + tau / 6 * (k1.slow[i] + 2 * k2.slow[i] + 2 * k3.slow[i] + k4.slow[i]);
    const RegressorSample r1 = active_sample(t + tau, slow_);
    flow_ = propagate(f0, r0, r1, tau);
    accumulate_diagnostics(r0, r1, tau, gram_inc);
  }

  void substep_rk4(double t, double tau, Matrix& gram_inc) {
    const Vector s0 = slow_;
    const Flow f0 = flow_;
    const RegressorSample r0 = active_sample(t, s0);

    const Rates k1 = rates(t, s0, f0, &r0);
    const Vector s2 = axpy(s0, k1.slow, tau / 2);
    const Flow f2 = axpy(f0, k1.flow, tau / 2);
    const RegressorSample r2 = active_sample(t + tau / 2, s2);
    const Rates k2 = rates(t + tau / 2, s2, f2, &r2);
    const Vector s3 = axpy(s0, k2.slow, tau / 2);
    const Flow f3 = axpy(f0, k2.flow, tau / 2);
    const RegressorSample r3 = active_sample(t + tau / 2, s3);
    const Rates k3 = rates(t + tau / 2, s3, f3, &r3);
    const Vector s4 = axpy(s0, k3.slow, tau);
    const Flow f4 = axpy(f0, k3.flow, tau);
    const RegressorSample r4 = active_sample(t + tau, s4);
    const Rates k4 = rates(t + tau, s4, f4, &r4);

    for (std::size_t i = 0; i < slow_.size(); ++i)
      slow_[i] = s0[i] + tau / 6 * (k1.slow[i] + 2 * k2.slow[i] + 2 * k3.slow[i] + k4.slow[i]);
    Flow f = f0;
    f = axpy(f, k1.flow, tau / 6);
    f = axpy(f, k2.flow, tau / 3);
    f = axpy(f, k3.flow, tau / 3);
    f = axpy(f, k4.flow, tau / 6);
    flow_ = std::move(f);
    accumulate_diagnostics(r0, active_sample(t + tau, slow_), tau, gram_inc);
  }

  void check_finite(double t) const {
    auto fail = [&](const char* what) {
      throw SimulationError(t, what, std::string("non-finite ") + what + " at t=" + std::to_string(t));
    };
    const std::span<const double> s(slow_);
    if (!all_finite(s.subspan(0, n_))) fail("x");
    if (!all_finite(pbep_slice(slow_))) fail("pbep_filter");
    if (!all_finite(std_slice(slow_))) fail("std_filter");
    if (!all_finite(s.subspan(off_theta_))) fail("theta_hat");
    if (!all_finite(flow_.theta_g)) fail("theta_g_hat");
    if (!all_finite(flow_.Phi)) fail("Phi");
    if (!all_finite(flow_.Theta)) fail("Theta_hat");
  }

  // Per-sample bookkeeping for run(): trace rows (held until their power-balance
  // residual is known), Abel-Liouville, settling.
  struct Tracker {
    struct Pending {
      std::size_t k;
      Vector row;
    };
    std::deque<Pending> pending;
    std::size_t samples = 0;
    double max_abel = 0.0;
    std::size_t abel_samples = 0;
    std::size_t abel_below = 0;
    std::optional<double> param_enter;
    std::optional<double> reg_enter;
    double reg_scale = 1.0;
    std::size_t substeps = 1;

    explicit Tracker(const Simulation& sim) : substeps(static_cast<std::size_t>(sim.cfg_.substeps)) {
      const Vector& xs = sim.sc_.controller.x_star;
      double star = 0.0, init = 0.0;
      for (std::size_t i : sim.sc_.controller.regulated) {
        star += xs[i] * xs[i];
        init += (sim.cfg_.x0[i] - xs[i]) * (sim.cfg_.x0[i] - xs[i]);
      }
      reg_scale = star > 0.0 ? std::sqrt(star) : (init > 0.0 ? std::sqrt(init) : 1.0);
    }

    void observe(const Simulation& sim, TraceSink* sink) {
      const PlantModel& pl = sim.sc_.plant;
      const Vector xx = sim.x();
      const Signals sig = sim.signals();
      const double t = sim.t_;

      const std::size_t k = samples++;

      double delta = std::numeric_limits<double>::quiet_NaN();
      double detphi = delta;
      if (sim.gplusd_) {
        const Mixing mix = gd_mix(*sim.gd_state(), sim.gd_.theta_g0);
        delta = mix.Delta;
        detphi = determinant(sim.flow_.Phi);
        const double ref = std::exp(-sim.cfg_.gamma_g * sim.omega_sq_integral_);
        if (ref >= sim.cfg_.abel_liouville_floor) {
          max_abel = std::max(max_abel, std::abs(detphi - ref) / ref);
          ++abel_samples;
        } else {
          ++abel_below;
        }
      }

      const Vector th = sim.controller_theta();
      if (sim.cfg_.estimator != EstimatorKind::None) {
        const double rel = norm(th - pl.theta_true) / norm(pl.theta_true);
        if (rel <= sim.cfg_.param_band) {
          if (!param_enter) param_enter = t;
        } else {
          param_enter.reset();
        }
      }
      if (sim.regulation_error(xx) <= sim.cfg_.regulation_band * reg_scale) {
        if (!reg_enter) reg_enter = t;
      } else {
        reg_enter.reset();
      }

      if (sink && k % sim.cfg_.decimation == 0) {
        Vector row{t};
        row.insert(row.end(), xx.begin(), xx.end());
        row.insert(row.end(), sig.u.begin(), sig.u.end());
        row.insert(row.end(), sig.yp.begin(), sig.yp.end());
        row.insert(row.end(), th.begin(), th.end());
        if (sim.gradient_) row.insert(row.end(), sim.flow_.Theta.begin(), sim.flow_.Theta.end());
        row.push_back(delta);
        row.push_back(detphi);
        row.push_back(sim.excitation_.min_eig());
        row.push_back(std::numeric_limits<double>::quiet_NaN());
        pending.push_back({k, std::move(row)});
      }
      flush(sim, sink, false);
    }

    void flush(const Simulation& sim, TraceSink* sink, bool all) {
      while (!pending.empty()) {
        Pending& p = pending.front();
        const auto r = sim.balance_residual(p.k * substeps);
        if (!r && !all) break;
        if (r) p.row.back() = *r;
        if (sink) sink->row(p.row);
        pending.pop_front();
      }
    }

    void finish(Simulation& sim, TraceSink* sink) {
      sim.finish_balance();
      flush(sim, sink, true);
    }
  };

  Scenario sc_;
  SimConfig cfg_;
  std::size_t n_ = 0, q_ = 0, p_ = 0;
  bool uses_std_ = false, gradient_ = false, gplusd_ = false;
  GplusD gd_;
  std::optional<PbepGenerator> pbep_;
  std::optional<StdLreGenerator> std_;
  std::size_t off_pbep_ = 0, off_std_ = 0, off_theta_ = 0;
  Vector slow_;
  Flow flow_;
  Vector overparam_true_;
  ExcitationRecord excitation_;
  double omega_sq_integral_ = 0.0;
  double S_[3] = {0.0, 0.0, 0.0};
  double dms_[3] = {0.0, 0.0, 0.0};  // d - s
  std::size_t balance_count_ = 0;
  bool balance_closed_ = false;
  std::deque<std::pair<std::size_t, double>> residuals_;
  double max_residual_ = 0.0;
  double t_ = 0.0;
  std::size_t k_ = 0;
};

inline RunReport run(const Scenario& scenario, const SimConfig& cfg, TraceSink* sink = nullptr) {
  Simulation sim(scenario, cfg);
  return sim.run(sink);
}

}  // namespace pbep
