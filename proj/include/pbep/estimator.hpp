#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "pbep/regressor.hpp"
#include "pbep/smallmat.hpp"

namespace pbep {

// Interlaced gradient + determinant-mixing estimator:
//   theta_g' = gamma_g Omega (Y - Omega' theta_g),   theta_g(0) = theta_g0
//   Phi'     = -gamma_g Omega Omega' Phi,            Phi(0) = I_p
//   theta'   = gamma P T Delta [Ycal - Delta G(theta)]
// with Delta = det(I - Phi) and Ycal = adj(I - Phi) (theta_g - Phi theta_g0).
struct GplusD {
  ParamMap param_map;
  double gamma_g = 100.0;
  double gamma = 50.0;
  Vector theta_g0;  // defaults to zero when left empty

  GplusD() = default;
  GplusD(ParamMap pm, double gamma_g_, double gamma_, Vector theta_g0_ = {})
      : param_map(std::move(pm)), gamma_g(gamma_g_), gamma(gamma_), theta_g0(std::move(theta_g0_)) {
    param_map.validate();
    if (!(gamma_g > 0.0) || !(gamma > 0.0)) throw std::invalid_argument("GplusD: gains must be positive");
    if (theta_g0.empty()) theta_g0.assign(param_map.p(), 0.0);
    if (theta_g0.size() != param_map.p()) throw std::invalid_argument("GplusD: theta_g0 must have dimension p");
  }
};

struct GplusDState {
  Vector theta_g_hat;
  Matrix Phi;
  Vector theta_hat;
};

inline GplusDState gd_initial_state(const GplusD& est, Vector theta_hat0) {
  if (theta_hat0.empty()) theta_hat0.assign(est.param_map.q, 0.0);
  if (theta_hat0.size() != est.param_map.q) throw std::invalid_argument("GplusD: theta_hat0 must have dimension q");
  return {est.theta_g0, Matrix::identity(est.param_map.p()), std::move(theta_hat0)};
}

struct Mixing {
  double Delta = 0.0;
  Vector Ycal;
};

inline Mixing gd_mix(const GplusDState& s, std::span<const double> theta_g0) {
  const std::size_t p = s.theta_g_hat.size();
  if (s.Phi.rows() != p || s.Phi.cols() != p || theta_g0.size() != p)
    throw std::invalid_argument("gd_mix: dimension mismatch");
  const Matrix M = Matrix::identity(p) - s.Phi;
  Mixing out;
  out.Delta = determinant(M);
  out.Ycal = adjugate(M) * (s.theta_g_hat - (s.Phi * theta_g0));
  return out;
}

// theta' of the correction flow for a given mixing result.
inline Vector gd_theta_rate(const GplusD& est, const Mixing& mix, const Vector& theta_hat) {
  const ParamMap& pm = est.param_map;
  const Vector bracket = mix.Ycal - (mix.Delta * pm.G(theta_hat));
  return (est.gamma * mix.Delta) * ((pm.P * pm.T) * bracket);
}

struct GplusDRates {
  Vector dtheta_g;
  Matrix dPhi;
  Vector dtheta;
};

inline GplusDRates gd_rates(const GplusD& est, const GplusDState& s, const RegressorSample& sample) {
  const std::size_t p = est.param_map.p();
  if (sample.Y.size() != 1 || sample.Omega.rows() != p || sample.Omega.cols() != 1)
    throw std::invalid_argument("gd_rates: expected a scalar-Y regression sample with p regressors");
  if (!all_finite(sample.Y) || !all_finite(sample.Omega)) throw std::domain_error("gd_rates: non-finite sample");
  const Vector omega = sample.omega_column();
  const double err = sample.Y[0] - dot(omega, s.theta_g_hat);
  GplusDRates r;
  r.dtheta_g = (est.gamma_g * err) * omega;
  r.dPhi = (-est.gamma_g) * (outer(omega, omega) * s.Phi);
  r.dtheta = gd_theta_rate(est, gd_mix(s, est.theta_g0), s.theta_hat);
  return r;
}

// Plain gradient flow on a linear regression Y = Omega' Theta.
struct GradientState {
  Vector Theta_hat;
  double gamma = 30.0;
};

inline Vector gradient_rate(const GradientState& s, const RegressorSample& sample) {
  if (sample.Omega.rows() != s.Theta_hat.size() || sample.Omega.cols() != sample.Y.size())
    throw std::invalid_argument("gradient_rate: dimension mismatch");
  const Vector e = sample.residual(s.Theta_hat);
  return s.gamma * (sample.Omega * e);
}

// Exact propagation of z' = -gain M z + gain b over a step tau for frozen
// symmetric positive semidefinite M and b. Both gradient flows above have this
// form, with M = Omega Omega' and b = Omega Y. The stiff directions
// (gain * |Omega|^2 * tau >> 1) are integrated without a step-size limit.
class GradientFlowStep {
 public:
  GradientFlowStep(double gain, double tau, const Matrix& M) : eig_(symmetric_eigen(M)) {
    const std::size_t n = M.rows();
    Vector decay(n), forced(n);
    trace_ = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double mu = std::max(eig_.values[k], 0.0);
      trace_ += mu;
      const double x = gain * tau * mu;
      decay[k] = std::exp(-x);
      // (1 - e^{-x}) / mu, continuous at mu = 0
      forced[k] = x > 0.0 ? -std::expm1(-x) / x * gain * tau : gain * tau;
    }
    const Matrix& Q = eig_.vectors;
    transition_ = Q * Matrix::diagonal(decay) * transpose(Q);
    forcing_ = Q * Matrix::diagonal(forced) * transpose(Q);
  }

  const Matrix& transition() const { return transition_; }
  const Matrix& forcing() const { return forcing_; }
  double clamped_trace() const { return trace_; }

  Vector apply(const Vector& z, const Vector& b) const { return (transition_ * z) + (forcing_ * b); }
  Matrix apply(const Matrix& Z) const { return transition_ * Z; }

 private:
  SymmetricEigen eig_;
  Matrix transition_;
  Matrix forcing_;
  double trace_ = 0.0;
};

// Trapezoid means of Omega Omega' and Omega Y over two samples.
struct FlowAverages {
  Matrix M;
  Vector b;
};

inline FlowAverages flow_averages(const RegressorSample& a, const RegressorSample& b) {
  FlowAverages out;
  out.M = 0.5 * ((a.Omega * transpose(a.Omega)) + (b.Omega * transpose(b.Omega)));
  out.b = 0.5 * ((a.Omega * a.Y) + (b.Omega * b.Y));
  return out;
}

struct Box {
  std::vector<double> lo;
  std::vector<double> hi;
};

struct MonotonicityReport {
  double rho_jacobian = 0.0;
  double rho_secant = 0.0;
  std::size_t sample_count = 0;
  Box box;
  std::uint64_t seed = 0;
  bool pass = false;
};

// Sampled strong P-monotonicity of W = T G over a box. The Jacobian bound is the
// infimum of lambda_min(sym(P T J_G)) over the 2^q corners plus n_samples
// seeded uniform points; the secant bound is the infimum of
// (a-b)' P (W(a) - W(b)) / |a-b|^2 over consecutive sample pairs and corner pairs.
inline MonotonicityReport check_monotonicity(const ParamMap& pm, const Box& box, std::size_t n_samples, std::uint64_t seed) {
  pm.validate();
  const std::size_t q = pm.q;
  if (box.lo.size() != q || box.hi.size() != q) throw std::invalid_argument("check_monotonicity: box must have q intervals");
  for (std::size_t k = 0; k < q; ++k)
    if (!(box.hi[k] > box.lo[k])) throw std::invalid_argument("check_monotonicity: degenerate box");
  if (n_samples < 2) throw std::invalid_argument("check_monotonicity: need at least 2 samples");

  std::vector<Vector> points;
  if (q < 16) {
    for (std::size_t mask = 0; mask < (std::size_t{1} << q); ++mask) {
      Vector c(q);
      for (std::size_t k = 0; k < q; ++k) c[k] = (mask >> k) & 1U ? box.hi[k] : box.lo[k];
      points.push_back(std::move(c));
    }
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    Vector v(q);
    for (std::size_t k = 0; k < q; ++k) v[k] = box.lo[k] + (box.hi[k] - box.lo[k]) * unit(rng);
    points.push_back(std::move(v));
  }

  const Matrix PT = pm.P * pm.T;
  MonotonicityReport rep;
  rep.box = box;
  rep.seed = seed;
  rep.rho_jacobian = std::numeric_limits<double>::infinity();
  rep.rho_secant = std::numeric_limits<double>::infinity();
  for (const Vector& th : points) {
    const Matrix A = PT * pm.jacobian(th);
    rep.rho_jacobian = std::min(rep.rho_jacobian, min_eig_symmetric(0.5 * (A + transpose(A))));
  }
  auto secant = [&](const Vector& a, const Vector& b) {
    const Vector d = a - b;
    const double dd = dot(d, d);
    if (dd == 0.0) return;
    const Vector dW = pm.W(a) - pm.W(b);
    rep.rho_secant = std::min(rep.rho_secant, dot(d, pm.P * dW) / dd);
  };
  for (std::size_t i = 1; i < points.size(); ++i) secant(points[i], points[i - 1]);
  secant(points.front(), points.back());
  rep.sample_count = points.size();
  rep.pass = rep.rho_jacobian > 0.0;
  return rep;
}

}  // namespace pbep
