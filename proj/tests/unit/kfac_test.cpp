#include "curvlab/data.hpp"
#include "curvlab/kfac.hpp"
#include "curvlab/oracle.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

namespace curvlab {
namespace {

using testing::MatNear;
using testing::random_matrix;
using testing::random_spd;

TEST(EmaFactor, BiasNormalizedCombinationOfTwoUpdates) {
  EmaFactor ema(0.9, 2);
  EXPECT_TRUE(ema.empty());
  const Mat a = Mat::Identity(2, 2);
  const Mat b = 3.0 * Mat::Ones(2, 2);
  ema.update(a);
  EXPECT_TRUE(MatNear(ema.value(), a, 1e-15));
  ema.update(b);
  // raw = 0.9·0.1·a + 0.1·b, weight = 0.19
  const Mat expected = (0.09 * a + 0.1 * b) / 0.19;
  EXPECT_TRUE(MatNear(ema.value(), expected, 1e-14));
}

TEST(EmaFactor, ZeroDecayKeepsLatestOnly) {
  EmaFactor ema(0.0, 2);
  ema.update(Mat::Identity(2, 2));
  ema.update(5.0 * Mat::Identity(2, 2));
  EXPECT_TRUE(MatNear(ema.value(), 5.0 * Mat::Identity(2, 2), 1e-15));
}

TEST(EmaFactor, ConstantInputIsFixedPoint) {
  Rng rng(1);
  const Mat c = random_spd(rng, 3);
  EmaFactor ema(0.95, 3);
  for (int i = 0; i < 50; ++i) ema.update(c);
  EXPECT_TRUE(MatNear(ema.value(), c, 1e-13));
}

TEST(Factors, ActivationAndErrorFactorsAreBatchMoments) {
  Rng rng(2);
  const Mat a = random_matrix(rng, 3, 5);
  EXPECT_TRUE(MatNear(activation_factor(a), a * a.transpose() / 5.0, 1e-14));
  const Mat e = random_matrix(rng, 2, 5);
  EXPECT_TRUE(MatNear(error_factor(e, Vec::Constant(5, 1.0 / std::sqrt(5.0))), e * e.transpose() / 5.0, 1e-14));
}

TEST(DampingSplit, BalancedTracesSplitEvenly) {
  const auto s = damping_split(1.0, 6.0, 4.0, 2, 3);  // r = 2·6 / (3·4) = 1
  EXPECT_NEAR(s.act, 1.0, 1e-15);
  EXPECT_NEAR(s.err, 1.0, 1e-15);
  EXPECT_FALSE(s.clamped);
}

TEST(DampingSplit, RatioFourGivesFourAndOne) {
  const auto s = damping_split(4.0, 8.0, 2.0, 1, 1);  // r = 4
  EXPECT_NEAR(s.act, 4.0, 1e-14);
  EXPECT_NEAR(s.err, 1.0, 1e-14);
  EXPECT_NEAR(s.act * s.err, 4.0, 1e-12);
}

TEST(DampingSplit, VanishingTraceIsClampedAndFlagged) {
  const auto s = damping_split(0.5, 1.0, 0.0, 3, 3);
  EXPECT_TRUE(s.clamped);
  EXPECT_TRUE(std::isfinite(s.act));
  EXPECT_TRUE(std::isfinite(s.err));
  EXPECT_NEAR(s.act * s.err, 0.5, 1e-12);
  EXPECT_NEAR(s.act / s.err, 1e12, 1e-3 * 1e12);
}

TEST(Amortization, PeriodAndWindowPattern) {
  int refreshes = 0;
  for (std::int64_t t = 0; t < 1500; ++t) {
    const auto s = amortization_schedule(t, 500, 10);
    refreshes += s.refresh_inverse;
    const std::int64_t phase = t % 500;
    EXPECT_EQ(s.refresh_inverse, phase == 0) << t;
    EXPECT_EQ(s.accumulate, phase >= 490) << t;
  }
  EXPECT_EQ(refreshes, 3);
  EXPECT_FALSE(amortization_schedule(0, 500, 10).accumulate);
  EXPECT_TRUE(amortization_schedule(490, 500, 10).accumulate);
  EXPECT_FALSE(amortization_schedule(489, 500, 10).accumulate);
  EXPECT_FALSE(amortization_schedule(1, 500, 10).accumulate);
}

TEST(Amortization, EveryStepWhenPeriodIsOne) {
  for (std::int64_t t = 0; t < 10; ++t) {
    const auto s = amortization_schedule(t, 1, 1);
    EXPECT_TRUE(s.refresh_inverse);
    EXPECT_TRUE(s.accumulate);
  }
}

TEST(Amortization, RejectsWindowLongerThanPeriod) {
  EXPECT_THROW(amortization_schedule(0, 5, 6), std::invalid_argument);
  EXPECT_THROW(amortization_schedule(0, 0, 0), std::invalid_argument);
}

TEST(DampedInverse, InvertsShiftedMatrix) {
  Rng rng(3);
  const Mat s = random_spd(rng, 4);
  const Mat inv = damped_inverse(s, 0.3);
  EXPECT_TRUE(MatNear(inv * (s + 0.3 * Mat::Identity(4, 4)), Mat::Identity(4, 4), 1e-12));
}

TEST(DampedInverse, SingularMatrixThrows) {
  EXPECT_THROW(damped_inverse(Mat::Zero(2, 2), 0.0), FactorizationError);
}

TEST(KfacHeuristic, IdentityFactorsHalveGradient) {
  Rng rng(4);
  const Mat g = random_matrix(rng, 3, 4);
  const Mat inv_a = damped_inverse(Mat::Identity(4, 4), 1.0);
  const Mat inv_e = damped_inverse(Mat::Identity(3, 3), 1.0);
  EXPECT_TRUE(MatNear(kfac_heuristic_direction(g, inv_a, inv_e), g / 4.0, 1e-15));
}

TEST(KfacHeuristic, ZeroFactorsReduceToScaledGradient) {
  Rng rng(5);
  const Mat g = random_matrix(rng, 2, 3);
  const Mat d = kfac_heuristic_direction(g, damped_inverse(Mat::Zero(3, 3), 2.0), damped_inverse(Mat::Zero(2, 2), 0.5));
  EXPECT_TRUE(MatNear(d, g / 1.0, 1e-15));
}

TEST(KfacHeuristic, MatchesDenseKroneckerSolve) {
  Rng rng(6);
  const Mat sa = random_spd(rng, 4);
  const Mat se = random_spd(rng, 3);
  const Mat g = random_matrix(rng, 3, 4);
  const Mat dense = oracle::dense_kron_curvature(sa, se, oracle::KronDamping::kHeuristic, 0.0, 0.2, 0.7);
  EXPECT_TRUE(MatNear(kfac_heuristic_direction(g, damped_inverse(sa, 0.2), damped_inverse(se, 0.7)),
                      oracle::dense_kron_solve(dense, g), 1e-10));
}

TEST(KfacStandard, EigenbasisSolveMatchesDense) {
  Rng rng(7);
  const Mat sa = random_spd(rng, 5);
  const Mat se = random_spd(rng, 3);
  const Mat g = random_matrix(rng, 3, 5);
  const Mat dense = oracle::dense_kron_curvature(sa, se, oracle::KronDamping::kStandard, 0.4);
  EXPECT_TRUE(MatNear(kfac_standard_direction(g, eigenbasis(sa), eigenbasis(se), 0.4),
                      oracle::dense_kron_solve(dense, g), 1e-10));
}

TEST(KfacStandard, HeuristicDiffersByCrossTerms) {
  Rng rng(8);
  const Mat sa = random_spd(rng, 3);
  const Mat se = random_spd(rng, 2);
  const double la = 0.5, le = 0.2;
  const Mat heuristic = oracle::dense_kron_curvature(sa, se, oracle::KronDamping::kHeuristic, 0.0, la, le);
  const Mat standard = oracle::dense_kron_curvature(sa, se, oracle::KronDamping::kStandard, la * le);
  const Mat cross = le * oracle::kron(Mat::Identity(2, 2), sa) + la * oracle::kron(se, Mat::Identity(3, 3));
  EXPECT_TRUE(MatNear(heuristic, standard + cross, 1e-12));
}

TEST(Eigenbasis, ReconstructsMatrix) {
  Rng rng(9);
  const Mat s = random_spd(rng, 4);
  const auto e = eigenbasis(s);
  EXPECT_TRUE(MatNear(e.vectors * e.values.asDiagonal() * e.vectors.transpose(), s, 1e-12));
}

TEST(Foof, SingleDatapointMatchesShermanMorrison) {
  Rng rng(10);
  const Mat a = random_matrix(rng, 4, 1);
  const Mat g = random_matrix(rng, 2, 4);
  const double lambda = 0.3;
  // (λI + aaᵀ)⁻¹ = (I - aaᵀ / (λ + aᵀa)) / λ
  const double aa = (a.transpose() * a)(0, 0);
  const Mat inv = (Mat::Identity(4, 4) - a * a.transpose() / (lambda + aa)) / lambda;
  EXPECT_TRUE(MatNear(foof_direction(g, damped_inverse(activation_factor(a), lambda)), g * inv, 1e-12));
}

TEST(Foof, ToyExampleUndampedUpdate) {
  const Dataset toy = synth_toy();
  Network net = synth_toy_network();
  BatchTrace trace = forward(net, toy.inputs);
  const auto grads = backward(net, trace, toy.targets);
  const Mat d = foof_direction(grads[0], damped_inverse(activation_factor(toy.inputs), 0.0));
  Mat expected(1, 2);
  expected << -1, 4;
  EXPECT_TRUE(MatNear(-d, expected, 1e-12));
  net.apply_update(std::vector<Mat>{-d});
  EXPECT_NEAR(loss(net, toy.inputs, toy.targets), 0.0, 1e-24);
}

}  // namespace
}  // namespace curvlab
