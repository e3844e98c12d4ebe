#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "pbep/smallmat.hpp"

namespace pbep {

// PLAIN realizes F(p) = lambda / (p + lambda):  z' = -lambda z + lambda u, output z.
// DERIVATIVE realizes p F(p):                   x' = -lambda (x - u),   output lambda (u - x).
enum class FilterMode { Plain, Derivative };

// Bank of first-order filters sharing one lambda. The bank only reports
// outputs and state derivatives; the simulator owns time stepping.
class FirstOrderFilterBank {
 public:
  FirstOrderFilterBank() = default;

  // Plain channels start at 0. Derivative channels start at the initial
  // input so their output is 0 at t = 0 instead of an impulse.
  FirstOrderFilterBank(double lambda, std::vector<FilterMode> modes, std::span<const double> initial_inputs)
      : lambda_(lambda), modes_(std::move(modes)), state_(modes_.size(), 0.0) {
    if (!(lambda > 0.0) || !std::isfinite(lambda))
      throw std::invalid_argument("FirstOrderFilterBank: lambda must be positive and finite");
    if (initial_inputs.size() != modes_.size())
      throw std::invalid_argument("FirstOrderFilterBank: initial input count does not match channel count");
    for (std::size_t i = 0; i < modes_.size(); ++i)
      if (modes_[i] == FilterMode::Derivative) state_[i] = initial_inputs[i];
  }

  double lambda() const { return lambda_; }
  std::size_t channels() const { return modes_.size(); }
  const std::vector<FilterMode>& modes() const { return modes_; }

  std::span<double> state() { return state_; }
  std::span<const double> state() const { return state_; }

  void set_state(std::span<const double> s) {
    if (s.size() != state_.size()) throw std::invalid_argument("FirstOrderFilterBank: state size mismatch");
    state_.assign(s.begin(), s.end());
  }

  Vector output(std::span<const double> inputs) const { return output_at(state_, inputs); }
  Vector rate(std::span<const double> inputs) const { return rate_at(state_, inputs); }

  // Same as output()/rate() but for an externally held state (RK4 stages).
  Vector output_at(std::span<const double> state, std::span<const double> inputs) const {
    check(state, inputs);
    Vector y(modes_.size());
    for (std::size_t i = 0; i < modes_.size(); ++i)
      y[i] = modes_[i] == FilterMode::Plain ? state[i] : lambda_ * (inputs[i] - state[i]);
    return y;
  }

  Vector rate_at(std::span<const double> state, std::span<const double> inputs) const {
    check(state, inputs);
    Vector d(modes_.size());
    for (std::size_t i = 0; i < modes_.size(); ++i) d[i] = -lambda_ * (state[i] - inputs[i]);
    return d;
  }

 private:
  void check(std::span<const double> state, std::span<const double> inputs) const {
    if (state.size() != modes_.size() || inputs.size() != modes_.size())
      throw std::invalid_argument("FirstOrderFilterBank: channel count mismatch");
  }

  double lambda_ = 1.0;
  std::vector<FilterMode> modes_;
  Vector state_;
};

inline FirstOrderFilterBank make_bank(double lambda, std::vector<FilterMode> modes, std::span<const double> initial_inputs) {
  return FirstOrderFilterBank(lambda, std::move(modes), initial_inputs);
}

}  // namespace pbep
