#include <gtest/gtest.h>

#include <cmath>

#include "pbep/sim.hpp"

using namespace pbep;

namespace {

struct MemorySink : TraceSink {
  std::vector<std::string> columns;
  std::vector<Vector> rows;
  void header(const std::vector<std::string>& c) override { columns = c; }
  void row(std::span<const double> v) override { rows.emplace_back(v.begin(), v.end()); }
};

SimConfig circuit_cfg(double t_end) {
  SimConfig cfg;
  cfg.x0 = {0.0, 0.0};
  cfg.substeps = 4;
  cfg.t_end = t_end;
  return cfg;
}

}  // namespace

TEST(SimConfig, ValidateRejectsBadValues) {
  SimConfig c;
  c.h = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SimConfig{};
  c.t_end = c.h / 2;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SimConfig{};
  c.decimation = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SimConfig{};
  c.lambda = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Simulation, RejectsDimensionMismatch) {
  SimConfig cfg;
  cfg.x0 = {1.0};
  EXPECT_THROW(Simulation(ph_example(1, 1), cfg), std::invalid_argument);
  cfg.x0 = {1.0, 1.0};
  cfg.theta_hat0 = {1.0, 2.0};
  EXPECT_THROW(Simulation(ph_example(1, 1), cfg), std::invalid_argument);
}

TEST(Simulation, CircuitEquilibriumIsFixedPoint) {
  const Scenario sc = circuit_example(CircuitParams{});
  SimConfig cfg = circuit_cfg(2.0);
  cfg.x0 = sc.controller.x_star;
  cfg.estimator = EstimatorKind::None;
  cfg.controller = ControllerKind::KnownParameter;
  Simulation sim(sc, cfg);
  for (int k = 0; k < 1000; ++k) {
    sim.step();
    ASSERT_LE(norm(sim.x() - sc.controller.x_star), 1e-9) << k;
  }
}

TEST(Simulation, OpenLoopRotationPreservesNorm) {
  SimConfig cfg;
  cfg.x0 = {1.0, 1.0};
  cfg.estimator = EstimatorKind::None;
  cfg.controller = ControllerKind::OpenLoop;
  Simulation sim(ph_example(1, 1), cfg);
  const double n0 = norm(cfg.x0);
  for (int k = 1; k <= 2000; ++k) {
    sim.step();
    ASSERT_LE(std::abs(norm(sim.x()) - n0), 1e-10 * k);
  }
  EXPECT_NEAR(sim.x()[0], std::cos(2.0) - std::sin(2.0), 1e-9);
}

TEST(Excitation, ZeroRegressorNeverExcites) {
  ExcitationRecord rec;
  rec.reset(2, 1e-3);
  for (int k = 1; k <= 1000; ++k) rec.accumulate(Matrix(2, 2), k * 1e-3);
  const ExcitationSummary s = excitation_report(rec, 1e-3);
  EXPECT_FALSE(s.is_ie);
  EXPECT_FALSE(s.t_c);
}

TEST(Excitation, ScalarConstantRegressorClosedForm) {
  const double c = 0.5, C_c = 0.01, h = 1e-3;
  ExcitationRecord rec;
  rec.reset(1, C_c);
  for (int k = 1; k <= 1000; ++k) rec.accumulate(Matrix{{c * c * h}}, k * h);
  const ExcitationSummary s = excitation_report(rec, C_c);
  ASSERT_TRUE(s.is_ie);
  EXPECT_NEAR(*s.t_c, C_c / (c * c), h + 1e-12);
  EXPECT_NEAR(rec.gram(0, 0), c * c, 1e-12);
}

TEST(Excitation, CircuitGramIsMonotoneAndExciting) {
  Simulation sim(circuit_example(CircuitParams{}), circuit_cfg(2.0));
  const RunReport r = sim.run();
  ASSERT_TRUE(r.completed);
  EXPECT_TRUE(r.is_ie);
  ASSERT_TRUE(r.t_c);
  EXPECT_GT(*r.t_c, 0.0);
  const auto& hist = sim.excitation().min_eig_history;
  for (std::size_t k = 1; k < hist.size(); ++k) EXPECT_GE(hist[k].second, hist[k - 1].second - 1e-12) << hist[k].first;
}

TEST(Run, TraceLayoutAndDecimation) {
  SimConfig cfg = circuit_cfg(0.1);
  cfg.decimation = 10;
  MemorySink sink;
  const RunReport r = run(circuit_example(CircuitParams{}), cfg, &sink);
  ASSERT_TRUE(r.completed);
  EXPECT_EQ(sink.columns, (std::vector<std::string>{"t", "x1", "x2", "u1", "yp1", "yp2", "theta_hat1", "theta_hat2", "Delta",
                                                    "det_Phi", "gram_min_eig", "pb_residual"}));
  ASSERT_EQ(sink.rows.size(), 11u);
  EXPECT_NEAR(sink.rows.back()[0], 0.1, 1e-12);
  for (const Vector& row : sink.rows) EXPECT_TRUE(std::isfinite(row.back()));
}

TEST(Run, GradientTraceCarriesOverparameterizedEstimate) {
  SimConfig cfg = circuit_cfg(0.05);
  cfg.estimator = EstimatorKind::GradientStd;
  cfg.gamma = 30;
  MemorySink sink;
  const RunReport r = run(circuit_example(CircuitParams{}), cfg, &sink);
  ASSERT_TRUE(r.completed);
  EXPECT_EQ(sink.columns[8], "Theta_hat1");
  EXPECT_EQ(r.overparam_hat_final.size(), 3u);
  EXPECT_NEAR(*r.overparam_error_initial, norm(Vector{1.0, 1.0, 1.5}), 1e-12);
}

TEST(Run, DeterministicAcrossRepeats) {
  MemorySink a, b;
  run(circuit_example(CircuitParams{}), circuit_cfg(0.5), &a);
  run(circuit_example(CircuitParams{}), circuit_cfg(0.5), &b);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t k = 0; k < a.rows.size(); ++k)
    for (std::size_t j = 0; j < a.rows[k].size(); ++j) {
      if (std::isnan(a.rows[k][j])) {
        EXPECT_TRUE(std::isnan(b.rows[k][j]));
      } else {
        EXPECT_EQ(a.rows[k][j], b.rows[k][j]);
      }
    }
}

TEST(Run, ExponentialAndRk4SchemesConvergeTogetherOnPh) {
  // the stage-averaged flow is second order, so the gap shrinks 4x per halving of h
  auto gap = [](double h) {
    SimConfig cfg;
    cfg.x0 = {1.0, 1.0};
    cfg.theta_hat0 = {0.5};
    cfg.t_end = 5.0;
    cfg.h = h;
    const RunReport e = run(ph_example(1, 1), cfg);
    cfg.scheme = Scheme::Rk4;
    const RunReport k = run(ph_example(1, 1), cfg);
    EXPECT_TRUE(e.completed && k.completed);
    EXPECT_LE(norm(e.theta_hat_final - k.theta_hat_final), 1e-8);
    return norm(e.x_final - k.x_final);
  };
  const double g1 = gap(1e-3), g2 = gap(5e-4);
  EXPECT_LE(g1, 1e-5);
  EXPECT_NEAR(g1 / g2, 4.0, 0.2);
}

TEST(Run, PlainRk4DivergesOnCircuitAndAbortsWithDiagnostic) {
  SimConfig cfg = circuit_cfg(3.0);
  cfg.substeps = 1;
  cfg.scheme = Scheme::Rk4;
  MemorySink sink;
  const RunReport r = run(circuit_example(CircuitParams{}), cfg, &sink);
  EXPECT_FALSE(r.completed);
  ASSERT_TRUE(r.abort_time);
  EXPECT_LT(*r.abort_time, 3.0);
  EXPECT_NE(r.abort_message.find("non-finite"), std::string::npos);
  EXPECT_FALSE(sink.rows.empty());
}

TEST(Run, PhAdaptiveLoopConverges) {
  SimConfig cfg;
  cfg.x0 = {1.0, 1.0};
  cfg.theta_hat0 = {0.5};
  cfg.t_end = 20;
  const RunReport r = run(ph_example(1, 1), cfg);
  ASSERT_TRUE(r.completed);
  EXPECT_LE(std::abs(r.theta_hat_final[0] - 1.0), 0.02);
  EXPECT_LE(r.x_error, 1e-2 * std::sqrt(2.0));
  EXPECT_LE(r.max_power_balance_residual, 1e-4);
  ASSERT_TRUE(r.max_abel_liouville_rel_error);
  EXPECT_LE(*r.max_abel_liouville_rel_error, 1e-5);
  ASSERT_TRUE(r.param_settling_time);
  ASSERT_TRUE(r.regulation_settling_time);
}
