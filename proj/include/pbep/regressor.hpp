#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pbep/filter.hpp"
#include "pbep/smallmat.hpp"

namespace pbep {

using ParamFn = std::function<Vector(const Vector& theta)>;

// Nonlinear parameterization of a scenario: G(theta) = col(G_s, G_S, G_d),
// the designer's selector T (q x p) and metric P (q x q), W(theta) = T G(theta).
struct ParamMap {
  std::size_t q = 0;
  std::size_t p_s = 0;
  std::size_t p_S = 0;
  std::size_t p_d = 0;
  ParamFn G_s;  // empty when p_s == 0
  ParamFn G_S;
  ParamFn G_d;
  std::function<Matrix(const Vector& theta)> jacobian_G;  // p x q; central differences if empty
  Matrix T;
  Matrix P;

  std::size_t p() const { return p_s + p_S + p_d; }

  Vector G(const Vector& theta) const {
    if (theta.size() != q) throw std::invalid_argument("ParamMap::G: theta has wrong dimension");
    Vector out;
    out.reserve(p());
    append(out, G_s, p_s, theta, "G_s");
    append(out, G_S, p_S, theta, "G_S");
    append(out, G_d, p_d, theta, "G_d");
    return out;
  }

  Vector W(const Vector& theta) const { return T * G(theta); }

  Matrix jacobian(const Vector& theta) const {
    if (jacobian_G) {
      Matrix j = jacobian_G(theta);
      if (j.rows() != p() || j.cols() != q) throw std::invalid_argument("ParamMap: jacobian_G has wrong shape");
      return j;
    }
    Matrix j(p(), q);
    for (std::size_t k = 0; k < q; ++k) {
      const double step = 1e-6 * std::max(1.0, std::abs(theta[k]));
      Vector hi = theta, lo = theta;
      hi[k] += step;
      lo[k] -= step;
      const Vector ghi = G(hi), glo = G(lo);
      for (std::size_t i = 0; i < p(); ++i) j(i, k) = (ghi[i] - glo[i]) / (2.0 * step);
    }
    return j;
  }

  // Dimensional audit: p >= q, T is q x p, P is q x q symmetric positive definite.
  void validate() const {
    if (q == 0) throw std::invalid_argument("ParamMap: q must be positive");
    if (p() < q) throw std::invalid_argument("ParamMap: p = p_s + p_S + p_d must be >= q");
    if (T.rows() != q || T.cols() != p()) throw std::invalid_argument("ParamMap: selector T must be q x p");
    if (P.rows() != q || P.cols() != q) throw std::invalid_argument("ParamMap: metric P must be q x q");
    if (max_abs(P - transpose(P)) > 1e-9 * std::max(1.0, max_abs(P)))
      throw std::invalid_argument("ParamMap: metric P must be symmetric");
    if (!(min_eig_symmetric(P) > 0.0)) throw std::invalid_argument("ParamMap: metric P must be positive definite");
  }

 private:
  static void append(Vector& out, const ParamFn& fn, std::size_t dim, const Vector& theta, const char* name) {
    if (dim == 0) return;
    if (!fn) throw std::invalid_argument(std::string("ParamMap: missing map ") + name);
    const Vector v = fn(theta);
    if (v.size() != dim) throw std::invalid_argument(std::string("ParamMap: ") + name + " has wrong dimension");
    out.insert(out.end(), v.begin(), v.end());
  }
};

// Separable data s = phi_s' G_s + b_s, S = phi_S' G_S + b_S, d = phi_d' G_d + b_d.
// Empty maps are read as zero-dimensional vectors / zero scalars. The supply
// terms also receive the measured state.
struct NlpreData {
  using PortVecFn = std::function<Vector(const Vector& x, const Vector& up, const Vector& yp)>;
  using PortScalarFn = std::function<double(const Vector& x, const Vector& up, const Vector& yp)>;
  using StateVecFn = std::function<Vector(const Vector& x)>;
  using StateScalarFn = std::function<double(const Vector& x)>;

  PortVecFn phi_s;
  StateVecFn phi_S;
  StateVecFn phi_d;
  PortScalarFn b_s;
  StateScalarFn b_S;
  StateScalarFn b_d;

  Vector eval_phi_s(const Vector& x, const Vector& up, const Vector& yp) const { return phi_s ? phi_s(x, up, yp) : Vector{}; }
  Vector eval_phi_S(const Vector& x) const { return phi_S ? phi_S(x) : Vector{}; }
  Vector eval_phi_d(const Vector& x) const { return phi_d ? phi_d(x) : Vector{}; }
  double eval_b_s(const Vector& x, const Vector& up, const Vector& yp) const { return b_s ? b_s(x, up, yp) : 0.0; }
  double eval_b_S(const Vector& x) const { return b_S ? b_S(x) : 0.0; }
  double eval_b_d(const Vector& x) const { return b_d ? b_d(x) : 0.0; }
};

// One regression sample with the uniform contract Y = Omega' * params.
// PBEP: Y has one entry and Omega is p x 1. Standard LRE: Y in R^n, Omega is n_w x n.
struct RegressorSample {
  double t = 0.0;
  Vector Y;
  Matrix Omega;

  Vector omega_column(std::size_t k = 0) const {
    Vector c(Omega.rows());
    for (std::size_t i = 0; i < Omega.rows(); ++i) c[i] = Omega(i, k);
    return c;
  }

  // Y - Omega' params
  Vector residual(std::span<const double> params) const {
    return Y - (transpose(Omega) * params);
  }
};

// Filtered power-balance regression:
//   Y     = F[b_s - b_d] - pF[b_S]
//   Omega = col(-F[phi_s], pF[phi_S], F[phi_d])
// Channel layout: [b_s - b_d | b_S | phi_s... | phi_S... | phi_d...].
class PbepGenerator {
 public:
  PbepGenerator(NlpreData nlpre, const ParamMap& dims, double lambda, const Vector& x0, const Vector& up0, const Vector& yp0)
      : nlpre_(std::move(nlpre)), p_s_(dims.p_s), p_S_(dims.p_S), p_d_(dims.p_d) {
    std::vector<FilterMode> modes;
    modes.push_back(FilterMode::Plain);
    modes.push_back(FilterMode::Derivative);
    modes.insert(modes.end(), p_s_, FilterMode::Plain);
    modes.insert(modes.end(), p_S_, FilterMode::Derivative);
    modes.insert(modes.end(), p_d_, FilterMode::Plain);
    const Vector in0 = inputs(x0, up0, yp0);
    bank_ = FirstOrderFilterBank(lambda, std::move(modes), in0);
  }

  std::size_t p() const { return p_s_ + p_S_ + p_d_; }
  std::size_t omega_channels() const { return p(); }

  FirstOrderFilterBank& bank() { return bank_; }
  const FirstOrderFilterBank& bank() const { return bank_; }

  // Filter inputs for the current measurements.
  Vector inputs(const Vector& x, const Vector& up, const Vector& yp) const {
    Vector in;
    in.reserve(2 + p());
    in.push_back(nlpre_.eval_b_s(x, up, yp) - nlpre_.eval_b_d(x));
    in.push_back(nlpre_.eval_b_S(x));
    append_checked(in, nlpre_.phi_s ? nlpre_.phi_s(x, up, yp) : Vector(p_s_, 0.0), p_s_, "phi_s");
    append_checked(in, nlpre_.phi_S ? nlpre_.phi_S(x) : Vector(p_S_, 0.0), p_S_, "phi_S");
    append_checked(in, nlpre_.phi_d ? nlpre_.phi_d(x) : Vector(p_d_, 0.0), p_d_, "phi_d");
    return in;
  }

  // Sample for an arbitrary filter state. Plain outputs read the state only and
  // derivative outputs read phi_S(x) and b_S(x), so the port signals are not needed.
  RegressorSample sample_at(std::span<const double> state, double t, const Vector& x) const {
    Vector in(bank_.channels(), 0.0);
    in[1] = nlpre_.eval_b_S(x);
    const Vector phiS = nlpre_.phi_S ? nlpre_.phi_S(x) : Vector(p_S_, 0.0);
    if (phiS.size() != p_S_) throw std::invalid_argument("PbepGenerator: phi_S has wrong dimension");
    for (std::size_t i = 0; i < p_S_; ++i) in[2 + p_s_ + i] = phiS[i];
    const Vector out = bank_.output_at(state, in);

    RegressorSample s;
    s.t = t;
    s.Y = {out[0] - out[1]};
    s.Omega = Matrix(p(), 1);
    for (std::size_t i = 0; i < p_s_; ++i) s.Omega(i, 0) = -out[2 + i];
    for (std::size_t i = p_s_; i < p(); ++i) s.Omega(i, 0) = out[2 + i];
    return s;
  }

  RegressorSample sample(double t, const Vector& x) const { return sample_at(bank_.state(), t, x); }

  Vector rate_at(std::span<const double> state, const Vector& x, const Vector& up, const Vector& yp) const {
    return bank_.rate_at(state, inputs(x, up, yp));
  }

 private:
  static void append_checked(Vector& out, const Vector& v, std::size_t dim, const char* name) {
    if (v.size() != dim) throw std::invalid_argument(std::string("PbepGenerator: ") + name + " has wrong dimension");
    out.insert(out.end(), v.begin(), v.end());
  }

  NlpreData nlpre_;
  std::size_t p_s_, p_S_, p_d_;
  FirstOrderFilterBank bank_;
};

inline PbepGenerator pbep_make(NlpreData nlpre, const ParamMap& dims, double lambda, const Vector& x0, const Vector& up0, const Vector& yp0) {
  return PbepGenerator(std::move(nlpre), dims, lambda, x0, up0, yp0);
}

// Linear parameterization of the vector field:
//   f = w_f(x) C(theta) + b_f(x),  g_ij = phi_g[i][j](x)' C(theta) + b_g[i][j](x).
struct StdLreData {
  std::size_t n = 0;
  std::size_t n_p = 0;
  std::size_t n_w = 0;
  std::function<Matrix(const Vector& x)> w_f;  // n x n_w; zero if empty
  std::function<Vector(const Vector& x)> b_f;  // n; zero if empty
  std::vector<std::vector<std::function<Vector(const Vector& x)>>> phi_g;  // [n][n_p], entries in R^{n_w}
  std::vector<std::vector<std::function<double(const Vector& x)>>> b_g;    // [n][n_p]
  ParamFn C;  // theta -> Theta
  // Theta -> theta where the overparameterization can be inverted; nullopt otherwise.
  std::function<std::optional<Vector>(const Vector& Theta)> recover;

  // w_f + w_g, with row i of w_g equal to sum_j phi_g[i][j](x)' u_pj.
  Matrix regressor_matrix(const Vector& x, const Vector& up) const {
    Matrix w = w_f ? w_f(x) : Matrix(n, n_w);
    if (w.rows() != n || w.cols() != n_w) throw std::invalid_argument("StdLreData: w_f has wrong shape");
    for (std::size_t i = 0; i < n && i < phi_g.size(); ++i)
      for (std::size_t j = 0; j < n_p && j < phi_g[i].size(); ++j) {
        if (!phi_g[i][j]) continue;
        const Vector phi = phi_g[i][j](x);
        if (phi.size() != n_w) throw std::invalid_argument("StdLreData: phi_g entry has wrong dimension");
        for (std::size_t k = 0; k < n_w; ++k) w(i, k) += phi[k] * up[j];
      }
    return w;
  }

  // b_f + B_g u_p
  Vector offset(const Vector& x, const Vector& up) const {
    Vector o = b_f ? b_f(x) : Vector(n, 0.0);
    if (o.size() != n) throw std::invalid_argument("StdLreData: b_f has wrong dimension");
    for (std::size_t i = 0; i < n && i < b_g.size(); ++i)
      for (std::size_t j = 0; j < n_p && j < b_g[i].size(); ++j)
        if (b_g[i][j]) o[i] += b_g[i][j](x) * up[j];
    return o;
  }
};

// Filtered state-space regression Y = pF[x] - F[b_f + B_g u_p], Omega' = F[w_f + w_g].
// Channel layout: [x (derivative) | offset (plain) | w entries row-major (plain)].
class StdLreGenerator {
 public:
  StdLreGenerator(StdLreData data, double lambda, const Vector& x0, const Vector& up0) : data_(std::move(data)) {
    if (x0.size() != data_.n) throw std::invalid_argument("StdLreGenerator: x0 has wrong dimension");
    if (up0.size() != data_.n_p) throw std::invalid_argument("StdLreGenerator: u_p has wrong dimension");
    std::vector<FilterMode> modes(data_.n, FilterMode::Derivative);
    modes.insert(modes.end(), data_.n + data_.n * data_.n_w, FilterMode::Plain);
    bank_ = FirstOrderFilterBank(lambda, std::move(modes), inputs(x0, up0));
  }

  const StdLreData& data() const { return data_; }
  std::size_t omega_channels() const { return data_.n * data_.n_w; }

  FirstOrderFilterBank& bank() { return bank_; }
  const FirstOrderFilterBank& bank() const { return bank_; }

  Vector inputs(const Vector& x, const Vector& up) const {
    Vector in(x.begin(), x.end());
    const Vector o = data_.offset(x, up);
    in.insert(in.end(), o.begin(), o.end());
    const Matrix w = data_.regressor_matrix(x, up);
    in.insert(in.end(), w.data().begin(), w.data().end());
    return in;
  }

  RegressorSample sample_at(std::span<const double> state, double t, const Vector& x) const {
    const std::size_t n = data_.n, nw = data_.n_w;
    Vector in(bank_.channels(), 0.0);
    for (std::size_t i = 0; i < n; ++i) in[i] = x[i];
    const Vector out = bank_.output_at(state, in);
    RegressorSample s;
    s.t = t;
    s.Y.resize(n);
    for (std::size_t i = 0; i < n; ++i) s.Y[i] = out[i] - out[n + i];
    s.Omega = Matrix(nw, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < nw; ++k) s.Omega(k, i) = out[2 * n + i * nw + k];
    return s;
  }

  RegressorSample sample(double t, const Vector& x) const { return sample_at(bank_.state(), t, x); }

  Vector rate_at(std::span<const double> state, const Vector& x, const Vector& up) const {
    return bank_.rate_at(state, inputs(x, up));
  }

 private:
  StdLreData data_;
  FirstOrderFilterBank bank_;
};

inline StdLreGenerator std_make(StdLreData data, double lambda, const Vector& x0, const Vector& up0) {
  return StdLreGenerator(std::move(data), lambda, x0, up0);
}

}  // namespace pbep
