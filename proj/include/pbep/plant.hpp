#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pbep/regressor.hpp"
#include "pbep/smallmat.hpp"

namespace pbep {

// x' = f(x,theta) + g(x,theta) u_p,  y_p = h(x,theta) + j(x,theta) u_p,  u_p = col(u, E(t)),
// dissipative with S' = -d + s along solutions.
struct PlantModel {
  std::string name;
  std::size_t n = 0;    // state
  std::size_t m = 0;    // control
  std::size_t n_p = 0;  // ports

  std::function<Vector(const Vector& x, const Vector& theta)> f;
  std::function<Matrix(const Vector& x, const Vector& theta)> g;
  std::function<Vector(const Vector& x, const Vector& theta)> h;
  std::function<Matrix(const Vector& x, const Vector& theta)> j;  // zero if empty
  std::function<Vector(double t)> E;                              // n_p - m sources; empty if none

  std::function<double(const Vector& x, const Vector& theta)> S;
  std::function<double(const Vector& x, const Vector& theta)> d;
  std::function<double(const Vector& up, const Vector& yp, const Vector& theta)> s;

  NlpreData nlpre;
  std::optional<StdLreData> std_lre;
  ParamMap param_map;
  Vector theta_true;

  Vector port_input(const Vector& u, double t) const {
    if (u.size() != m) throw std::invalid_argument("PlantModel: control has wrong dimension");
    Vector up = u;
    if (n_p > m) {
      if (!E) throw std::invalid_argument("PlantModel: missing external source signal");
      const Vector e = E(t);
      if (e.size() != n_p - m) throw std::invalid_argument("PlantModel: source signal has wrong dimension");
      up.insert(up.end(), e.begin(), e.end());
    }
    return up;
  }

  Vector xdot(const Vector& x, const Vector& theta, const Vector& up) const { return f(x, theta) + (g(x, theta) * up); }

  Vector output(const Vector& x, const Vector& theta, const Vector& up) const {
    Vector y = h(x, theta);
    if (j) y = y + (j(x, theta) * up);
    return y;
  }
};

// Known-parameter stabilizer beta(x, theta, t) and its regulation target.
struct Controller {
  std::function<Vector(const Vector& x, const Vector& theta, double t)> beta;
  Vector x_star;
  std::vector<std::size_t> regulated;  // components scored for regulation settling
};

struct Scenario {
  PlantModel plant;
  Controller controller;
};

// Lossless LTI port-Hamiltonian example:
//   x' = [0 -a; a 0] x + [theta; theta^2] u,  y_p = [theta theta^2] x,
// stabilized by beta = -x1/theta - x2.
inline Scenario ph_example(double a, double theta) {
  if (theta == 0.0 || !std::isfinite(theta)) throw std::invalid_argument("ph_example: theta must be nonzero (beta divides by it)");
  if (!std::isfinite(a)) throw std::invalid_argument("ph_example: a must be finite");

  Scenario sc;
  PlantModel& pl = sc.plant;
  pl.name = "ph";
  pl.n = 2;
  pl.m = 1;
  pl.n_p = 1;
  pl.f = [a](const Vector& x, const Vector&) { return Vector{-a * x[1], a * x[0]}; };
  pl.g = [](const Vector&, const Vector& th) { return Matrix{{th[0]}, {th[0] * th[0]}}; };
  pl.h = [](const Vector& x, const Vector& th) { return Vector{th[0] * x[0] + th[0] * th[0] * x[1]}; };
  pl.S = [](const Vector& x, const Vector&) { return 0.5 * dot(x, x); };
  pl.d = [](const Vector&, const Vector&) { return 0.0; };
  pl.s = [](const Vector& up, const Vector& yp, const Vector&) { return dot(up, yp); };

  pl.nlpre.phi_s = [](const Vector& x, const Vector& up, const Vector&) { return Vector{up[0] * x[0], up[0] * x[1]}; };
  pl.nlpre.b_S = [](const Vector& x) { return 0.5 * dot(x, x); };

  ParamMap& pm = pl.param_map;
  pm.q = 1;
  pm.p_s = 2;
  pm.G_s = [](const Vector& th) { return Vector{th[0], th[0] * th[0]}; };
  pm.jacobian_G = [](const Vector& th) { return Matrix{{1.0}, {2.0 * th[0]}}; };
  pm.T = Matrix{{1.0, 0.0}};
  pm.P = Matrix{{1.0}};

  StdLreData sd;
  sd.n = 2;
  sd.n_p = 1;
  sd.n_w = 2;
  sd.b_f = [a](const Vector& x) { return Vector{-a * x[1], a * x[0]}; };
  sd.phi_g = {{[](const Vector&) { return Vector{1.0, 0.0}; }}, {[](const Vector&) { return Vector{0.0, 1.0}; }}};
  sd.C = [](const Vector& th) { return Vector{th[0], th[0] * th[0]}; };
  sd.recover = [](const Vector& Th) -> std::optional<Vector> { return Vector{Th[0]}; };
  pl.std_lre = std::move(sd);

  pl.theta_true = {theta};

  sc.controller.beta = [](const Vector& x, const Vector& th, double) { return Vector{-x[0] / th[0] - x[1]}; };
  sc.controller.x_star = {0.0, 0.0};
  sc.controller.regulated = {0, 1};
  return sc;
}

struct CircuitParams {
  double theta1 = 1.0;
  double theta2 = 1.5;
  double alpha = 2.0;
  double E = 15.0;
  double kp = 10.0;
  double kappa = 15.0;
};

inline double circuit_x1_star(const CircuitParams& c) { return c.theta2 * c.kappa * c.kappa / c.E; }
inline double circuit_u_star(const CircuitParams& c) { return c.E / c.kappa; }

// Transformer-RC circuit:
//   diag(theta1, theta1^alpha) x' = [0 0; 0 -theta2] x + [-x2; x1] u + [E; 0],
// regulated to x2 = kappa by beta = -kp (theta2 kappa^2 / E x2 - kappa x1) + E / kappa.
// Ports u_p = col(u, E) with y_p = g' grad S = col(0, x1), so s = E x1.
inline Scenario circuit_example(const CircuitParams& c) {
  if (!(c.theta1 > 0.0) || !(c.theta2 > 0.0)) throw std::invalid_argument("circuit_example: theta1 and theta2 must be positive");
  if (!(c.E > 0.0)) throw std::invalid_argument("circuit_example: E must be positive");
  if (!(c.kp > 0.0)) throw std::invalid_argument("circuit_example: kp must be positive");
  if (c.kappa == 0.0 || !std::isfinite(c.kappa)) throw std::invalid_argument("circuit_example: kappa must be nonzero");
  if (!std::isfinite(c.alpha)) throw std::invalid_argument("circuit_example: alpha must be finite");

  const double alpha = c.alpha, E = c.E, kp = c.kp, kappa = c.kappa;
  Scenario sc;
  PlantModel& pl = sc.plant;
  pl.name = "circuit";
  pl.n = 2;
  pl.m = 1;
  pl.n_p = 2;
  pl.f = [alpha](const Vector& x, const Vector& th) {
    return Vector{0.0, -th[1] * x[1] / std::pow(th[0], alpha)};
  };
  pl.g = [alpha](const Vector& x, const Vector& th) {
    const double m1 = 1.0 / th[0], m2 = 1.0 / std::pow(th[0], alpha);
    return Matrix{{-x[1] * m1, m1}, {x[0] * m2, 0.0}};
  };
  pl.h = [](const Vector& x, const Vector&) { return Vector{0.0, x[0]}; };
  pl.E = [E](double) { return Vector{E}; };
  pl.S = [alpha](const Vector& x, const Vector& th) {
    return 0.5 * (th[0] * x[0] * x[0] + std::pow(th[0], alpha) * x[1] * x[1]);
  };
  pl.d = [](const Vector& x, const Vector& th) { return th[1] * x[1] * x[1]; };
  pl.s = [](const Vector& up, const Vector& yp, const Vector&) { return dot(up, yp); };

  pl.nlpre.b_s = [](const Vector&, const Vector& up, const Vector& yp) { return dot(up, yp); };
  pl.nlpre.phi_S = [](const Vector& x) { return Vector{0.5 * x[0] * x[0], 0.5 * x[1] * x[1]}; };
  pl.nlpre.phi_d = [](const Vector& x) { return Vector{x[1] * x[1]}; };

  ParamMap& pm = pl.param_map;
  pm.q = 2;
  pm.p_S = 2;
  pm.p_d = 1;
  pm.G_S = [alpha](const Vector& th) { return Vector{th[0], std::pow(th[0], alpha)}; };
  pm.G_d = [](const Vector& th) { return Vector{th[1]}; };
  pm.jacobian_G = [alpha](const Vector& th) {
    return Matrix{{1.0, 0.0}, {alpha * std::pow(th[0], alpha - 1.0), 0.0}, {0.0, 1.0}};
  };
  pm.T = Matrix{{1.0, 0.0, 0.0}, {0.0, 0.0, 1.0}};
  pm.P = Matrix::identity(2);

  // Theta = col(1/theta1, 1/theta1^alpha, theta2/theta1^alpha); the source E
  // enters through the u_p column of g.
  StdLreData sd;
  sd.n = 2;
  sd.n_p = 2;
  sd.n_w = 3;
  sd.w_f = [](const Vector& x) { return Matrix{{0.0, 0.0, 0.0}, {0.0, 0.0, -x[1]}}; };
  sd.phi_g = {
      {[](const Vector& x) { return Vector{-x[1], 0.0, 0.0}; }, [](const Vector&) { return Vector{1.0, 0.0, 0.0}; }},
      {[](const Vector& x) { return Vector{0.0, x[0], 0.0}; }, {}},
  };
  sd.C = [alpha](const Vector& th) {
    const double ma = std::pow(th[0], alpha);
    return Vector{1.0 / th[0], 1.0 / ma, th[1] / ma};
  };
  // theta1 = 1/Theta1, theta2 = Theta3 theta1^alpha
  sd.recover = [alpha](const Vector& Th) -> std::optional<Vector> {
    if (!(std::abs(Th[0]) > 1e-9)) return std::nullopt;
    return Vector{1.0 / Th[0], Th[2] / std::pow(Th[0], alpha)};
  };
  pl.std_lre = std::move(sd);

  pl.theta_true = {c.theta1, c.theta2};

  sc.controller.beta = [E, kp, kappa](const Vector& x, const Vector& th, double) {
    return Vector{-kp * (th[1] * kappa * kappa / E * x[1] - kappa * x[0]) + E / kappa};
  };
  sc.controller.x_star = {circuit_x1_star(c), kappa};
  sc.controller.regulated = {1};
  return sc;
}

inline Scenario circuit_example(double theta1, double theta2, double alpha, double E, double kp, double kappa) {
  return circuit_example(CircuitParams{theta1, theta2, alpha, E, kp, kappa});
}

// W = S(x - x_star) for the circuit and its closed-form derivative under the
// known-parameter controller: -theta2 e2^2 - kp (theta2 kappa^2/E e2 - kappa e1)^2.
inline double circuit_lyapunov(const CircuitParams& c, const Vector& x) {
  const double e1 = x[0] - circuit_x1_star(c), e2 = x[1] - c.kappa;
  return 0.5 * (c.theta1 * e1 * e1 + std::pow(c.theta1, c.alpha) * e2 * e2);
}

inline double circuit_lyapunov_rate(const CircuitParams& c, const Vector& x) {
  const double e1 = x[0] - circuit_x1_star(c), e2 = x[1] - c.kappa;
  const double v = c.theta2 * c.kappa * c.kappa / c.E * e2 - c.kappa * e1;
  return -c.theta2 * e2 * e2 - c.kp * v * v;
}

struct TrajectorySample {
  double t = 0.0;
  Vector x;
  Vector up;
  Vector yp;
};

// Power-balance residual |S' + d - s| at one sample, given the storage slope.
inline double power_balance_term(const PlantModel& pl, double dSdt, const TrajectorySample& smp) {
  return std::abs(dSdt + pl.d(smp.x, pl.theta_true) - pl.s(smp.up, smp.yp, pl.theta_true));
}

// Storage slope from three equally spaced storage values: centered at the
// middle sample, second-order one-sided at either end (where = -1, 0, +1).
inline double storage_slope(double S0, double S1, double S2, double h, int where) {
  switch (where) {
    case -1:
      return (-3.0 * S0 + 4.0 * S1 - S2) / (2.0 * h);
    case 1:
      return (S0 - 4.0 * S1 + 3.0 * S2) / (2.0 * h);
    default:
      return (S2 - S0) / (2.0 * h);
  }
}

// max_k |S'(t_k) + d(x_k) - s(u_p,k, y_p,k)| along an evenly sampled trajectory,
// with S' from centered differences (second-order one-sided at the endpoints).
inline double power_balance_residual(const PlantModel& pl, const std::vector<TrajectorySample>& traj) {
  if (traj.size() < 3) throw std::invalid_argument("power_balance_residual: need at least 3 samples");
  std::vector<double> S(traj.size());
  for (std::size_t k = 0; k < traj.size(); ++k) S[k] = pl.S(traj[k].x, pl.theta_true);
  double worst = 0.0;
  const std::size_t last = traj.size() - 1;
  for (std::size_t k = 0; k <= last; ++k) {
    double slope;
    if (k == 0) {
      slope = storage_slope(S[0], S[1], S[2], traj[1].t - traj[0].t, -1);
    } else if (k == last) {
      slope = storage_slope(S[last - 2], S[last - 1], S[last], traj[last].t - traj[last - 1].t, 1);
    } else {
      slope = (S[k + 1] - S[k - 1]) / (traj[k + 1].t - traj[k - 1].t);
    }
    worst = std::max(worst, power_balance_term(pl, slope, traj[k]));
  }
  return worst;
}

}  // namespace pbep
