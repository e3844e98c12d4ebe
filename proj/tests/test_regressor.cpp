#include <gtest/gtest.h>

#include <cmath>

#include "pbep/plant.hpp"
#include "pbep/regressor.hpp"
#include "pbep/sim.hpp"

using namespace pbep;

namespace {

// Drive a generator bank with constant inputs for t_end seconds (exact solution).
void freeze(FirstOrderFilterBank& bank, const Vector& in, double t_end) {
  Vector s(bank.state().begin(), bank.state().end());
  const double decay = std::exp(-bank.lambda() * t_end);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = in[i] + (s[i] - in[i]) * decay;
  bank.set_state(s);
}

}  // namespace

TEST(ParamMap, StacksBlocksInOrder) {
  const Scenario sc = circuit_example(CircuitParams{});
  const ParamMap& pm = sc.plant.param_map;
  EXPECT_EQ(pm.p(), 3u);
  const Vector G = pm.G({2.0, 3.0});
  EXPECT_DOUBLE_EQ(G[0], 2.0);
  EXPECT_DOUBLE_EQ(G[1], 4.0);
  EXPECT_DOUBLE_EQ(G[2], 3.0);
  EXPECT_EQ(pm.W({2.0, 3.0}), (Vector{2.0, 3.0}));
}

TEST(ParamMap, NumericJacobianMatchesAnalytic) {
  ParamMap pm = circuit_example(CircuitParams{}).plant.param_map;
  const Matrix analytic = pm.jacobian({1.3, 0.7});
  pm.jacobian_G = nullptr;
  EXPECT_LE(max_abs(pm.jacobian({1.3, 0.7}) - analytic), 1e-7);
}

TEST(ParamMap, ValidateRejectsBadSelections) {
  ParamMap pm = ph_example(1, 1).plant.param_map;
  pm.validate();
  ParamMap bad_p = pm;
  bad_p.P = Matrix{{-1.0}};
  EXPECT_THROW(bad_p.validate(), std::invalid_argument);
  ParamMap bad_t = pm;
  bad_t.T = Matrix{{1.0, 0.0, 0.0}};
  EXPECT_THROW(bad_t.validate(), std::invalid_argument);
  ParamMap too_few = pm;
  too_few.q = 3;
  EXPECT_THROW(too_few.validate(), std::invalid_argument);
}

TEST(PbepGenerator, ChannelCountsAgainstStandardRegression) {
  const Scenario c = circuit_example(CircuitParams{});
  const PlantModel& pl = c.plant;
  const Vector x0{1, 2}, up0{1, 15};
  const auto pb = pbep_make(pl.nlpre, pl.param_map, 10, x0, up0, pl.output(x0, pl.theta_true, up0));
  const auto sd = std_make(*pl.std_lre, 10, x0, up0);
  EXPECT_EQ(pb.omega_channels(), 3u);
  EXPECT_EQ(sd.omega_channels(), 6u);

  const Scenario p = ph_example(1, 1);
  const auto pb_ph = pbep_make(p.plant.nlpre, p.plant.param_map, 10, x0, {1.0}, {3.0});
  EXPECT_EQ(pb_ph.omega_channels(), 2u);
}

TEST(PbepGenerator, ZeroMapsGiveZeroSample) {
  ParamMap dims;
  dims.q = 1;
  dims.p_s = 1;
  const auto gen = pbep_make(NlpreData{}, dims, 10, {0.0}, {0.0}, {0.0});
  const RegressorSample s = gen.sample(0.0, {0.0});
  EXPECT_EQ(s.Y, Vector{0.0});
  EXPECT_EQ(max_abs(s.Omega), 0.0);
}

TEST(PbepGenerator, PhRegressorIsNegatedFilteredPortProduct) {
  const Scenario p = ph_example(1, 1);
  const Vector x{0.5, -2.0}, up{3.0};
  auto gen = pbep_make(p.plant.nlpre, p.plant.param_map, 10, x, up, p.plant.output(x, {1.0}, up));
  freeze(gen.bank(), gen.inputs(x, up, {}), 5.0);
  const RegressorSample s = gen.sample(5.0, x);
  EXPECT_NEAR(s.Omega(0, 0), -up[0] * x[0], 1e-12);
  EXPECT_NEAR(s.Omega(1, 0), -up[0] * x[1], 1e-12);
  EXPECT_NEAR(s.Y[0], 0.0, 1e-12);
}

TEST(PbepGenerator, FrozenCircuitConvergesWithDerivativeBlocksVanishing) {
  const Scenario c = circuit_example(CircuitParams{});
  const PlantModel& pl = c.plant;
  const Vector x{4.0, 3.0}, up{2.0, 15.0};
  const Vector yp = pl.output(x, pl.theta_true, up);
  auto gen = pbep_make(pl.nlpre, pl.param_map, 10, {0.0, 0.0}, up, pl.output({0.0, 0.0}, pl.theta_true, up));
  freeze(gen.bank(), gen.inputs(x, up, yp), 5.0);
  const RegressorSample s = gen.sample(5.0, x);
  EXPECT_NEAR(s.Y[0], 15.0 * x[0], 1e-9);
  EXPECT_NEAR(s.Omega(0, 0), 0.0, 1e-9);
  EXPECT_NEAR(s.Omega(1, 0), 0.0, 1e-9);
  EXPECT_NEAR(s.Omega(2, 0), x[1] * x[1], 1e-9);
}

TEST(PbepGenerator, CircuitResidualStaysWithinTransientEnvelope) {
  // Known-parameter loop on a fine substep grid; the PBEP regression must hold
  // up to the filter transient lambda (|b_S(x0)| + |phi_S(x0)' G_S|) e^{-lambda t}.
  const CircuitParams cp;
  const Scenario sc = circuit_example(cp);
  SimConfig cfg;
  cfg.estimator = EstimatorKind::None;
  cfg.controller = ControllerKind::KnownParameter;
  cfg.x0 = {3.0, 2.0};
  cfg.t_end = 1.0;
  cfg.substeps = 100;
  Simulation sim(sc, cfg);
  const PlantModel& pl = sc.plant;
  const Vector Gt = pl.param_map.G(pl.theta_true);
  const Vector phiS0 = pl.nlpre.phi_S(cfg.x0);
  const double env0 = cfg.lambda * (std::abs(pl.nlpre.b_S ? pl.nlpre.b_S(cfg.x0) : 0.0) +
                                    std::abs(phiS0[0] * Gt[0] + phiS0[1] * Gt[1]));
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    sim.step();
    const RegressorSample s = sim.pbep_sample();
    const double r = std::abs(s.Y[0] - dot(s.omega_column(), Gt));
    worst = std::max(worst, r / (1.0 + std::abs(s.Y[0])));
    EXPECT_LE(r, env0 * std::exp(-cfg.lambda * sim.time()) + 1e-6 * (1.0 + std::abs(s.Y[0]))) << sim.time();
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(StdLreGenerator, CircuitRegressorAndParameterVector) {
  const Scenario c = circuit_example(CircuitParams{});
  const StdLreData& sd = *c.plant.std_lre;
  const Vector x{2.0, 3.0}, up{0.5, 15.0};
  const Matrix w = sd.regressor_matrix(x, up);
  EXPECT_EQ(w, (Matrix{{-x[1] * up[0] + 15.0, 0, 0}, {0, x[0] * up[0], -x[1]}}));
  const Vector Th = sd.C({2.0, 1.5});
  EXPECT_DOUBLE_EQ(Th[0], 0.5);
  EXPECT_DOUBLE_EQ(Th[1], 0.25);
  EXPECT_DOUBLE_EQ(Th[2], 1.5 / 4.0);
  // the vector field is exactly w C(theta) + offset
  const Vector f = c.plant.xdot(x, {2.0, 1.5}, up);
  const Vector lin = (w * Th) + sd.offset(x, up);
  EXPECT_NEAR(f[0], lin[0], 1e-12);
  EXPECT_NEAR(f[1], lin[1], 1e-12);
  const auto back = sd.recover(Th);
  ASSERT_TRUE(back);
  EXPECT_NEAR((*back)[0], 2.0, 1e-12);
  EXPECT_NEAR((*back)[1], 1.5, 1e-12);
  EXPECT_FALSE(sd.recover({0.0, 1.0, 1.0}));
}

TEST(StdLreGenerator, FrozenPlantConverges) {
  const Scenario p = ph_example(1, 1);
  const StdLreData& sd = *p.plant.std_lre;
  const Vector x{1.0, 2.0}, up{3.0};
  auto gen = std_make(sd, 10, x, up);
  freeze(gen.bank(), gen.inputs(x, up), 5.0);
  const RegressorSample s = gen.sample(5.0, x);
  // Omega = F[u] I, Y -> -b_f(x) since pF[x] -> 0
  EXPECT_NEAR(s.Omega(0, 0), 3.0, 1e-9);
  EXPECT_NEAR(s.Omega(1, 1), 3.0, 1e-9);
  EXPECT_NEAR(s.Omega(0, 1), 0.0, 1e-9);
  EXPECT_NEAR(s.Y[0], x[1], 1e-9);
  EXPECT_NEAR(s.Y[1], -x[0], 1e-9);
}

TEST(StdLreGenerator, ZeroSystemIsZero) {
  StdLreData sd;
  sd.n = 2;
  sd.n_p = 1;
  sd.n_w = 2;
  const auto gen = std_make(sd, 5, {0.0, 0.0}, {0.0});
  const RegressorSample s = gen.sample(0.0, {0.0, 0.0});
  EXPECT_EQ(max_abs(s.Y), 0.0);
  EXPECT_EQ(max_abs(s.Omega), 0.0);
}
