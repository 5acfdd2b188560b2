#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "robustcam/objective.hpp"
#include "robustcam/ops.hpp"
#include "support.hpp"

using namespace robustcam;

namespace {

LabelBatch random_labels(Rng& rng, std::size_t rows, std::size_t cols, double p = 0.3) {
  std::vector<std::uint8_t> v(rows * cols);
  for (auto& x : v) x = rng.bernoulli(p) ? 1 : 0;
  return LabelBatch(rows, cols, v);
}

}  // namespace

TEST(LabelBatch, RejectsNonBinaryEntries) {
  EXPECT_THROW(LabelBatch(1, 2, {0, 2}), DataError);
  EXPECT_THROW(LabelBatch(2, 2, {0, 1, 1}), ShapeError);
}

TEST(ComputeBeta, RatioOfZerosToOnes) {
  const LabelBatch y(3, 4, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0});
  EXPECT_DOUBLE_EQ(compute_beta(y).values.at(0), 3.0);
}

TEST(ComputeBeta, AllOnesClampsToInverseCap) {
  const LabelBatch y(2, 2, {1, 1, 1, 1});
  EXPECT_DOUBLE_EQ(compute_beta(y).values.at(0), 1.0 / 100.0);
  BetaPolicy p;
  p.cap = 10;
  EXPECT_DOUBLE_EQ(compute_beta(y, p).values.at(0), 0.1);
}

TEST(ComputeBeta, ZeroPositivesUseFallback) {
  const LabelBatch y(2, 2, {0, 0, 0, 0});
  EXPECT_DOUBLE_EQ(compute_beta(y).values.at(0), 100.0);
  BetaPolicy p;
  p.mode = BetaPolicy::Mode::per_class;
  p.cap = 50;
  p.zero_positive_fallback = 7;
  const LabelBatch z(2, 2, {1, 0, 0, 0});
  const Beta b = compute_beta(z, p);
  EXPECT_DOUBLE_EQ(b.for_class(0), 1.0);
  EXPECT_DOUBLE_EQ(b.for_class(1), 7.0);
}

TEST(ComputeBeta, MatchesCountingOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const LabelBatch y = random_labels(rng, 32, 4, rng.uniform(0.0, 0.6));
    EXPECT_EQ(compute_beta(y).values.at(0), oracles::beta_ratio(y.values(), 100, 100));
    BetaPolicy p;
    p.mode = BetaPolicy::Mode::per_class;
    const Beta b = compute_beta(y, p);
    for (std::size_t c = 0; c < 4; ++c) {
      std::vector<std::uint8_t> col;
      for (std::size_t r = 0; r < 32; ++r) col.push_back(y(r, c));
      EXPECT_EQ(b.for_class(c), oracles::beta_ratio(col, 100, 100));
    }
  }
}

TEST(ComputeBeta, RejectsCapBelowOne) {
  BetaPolicy p;
  p.cap = 0.5;
  EXPECT_THROW(compute_beta(LabelBatch(1, 1, {1}), p), ConfigError);
}

TEST(WeightedBce, HandEvaluatedExample) {
  const BasicTensor<double> probs(Shape{1, 2}, {0.8, 0.3});
  const auto loss = weighted_bce_per_sample(probs, LabelBatch(1, 2, {1, 0}), Beta{{2.0}});
  EXPECT_NEAR(loss[0], -(2 * std::log(0.8) + std::log(0.7)), 1e-12);
  EXPECT_NEAR(loss[0], 0.8029, 1e-4);
}

TEST(WeightedBce, PerfectPredictionIsNearZero) {
  const double p = 1 - kProbabilityClamp;
  const auto loss = weighted_bce_per_sample(BasicTensor<double>(Shape{1, 1}, {p}), LabelBatch(1, 1, {1}), Beta{{3.0}});
  EXPECT_LE(loss[0], 3.0 * kProbabilityClamp * 2);
  // Exactly 1.0 is clamped rather than producing log(0).
  const auto clamped = weighted_bce_per_sample(BasicTensor<double>(Shape{1, 2}, {1.0, 0.0}),
                                               LabelBatch(1, 2, {0, 1}), Beta{{1.0}});
  EXPECT_TRUE(std::isfinite(clamped[0]));
}

TEST(WeightedBce, UnitBetaMatchesPlainBce) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const LabelBatch y = random_labels(rng, 5, 3);
    BasicTensor<double> p(Shape{5, 3});
    for (auto& v : p.data()) v = rng.uniform(0.01, 0.99);
    double plain = 0;
    for (std::size_t i = 0; i < 15; ++i) {
      plain -= y.values()[i] ? std::log(p[i]) : std::log(1 - p[i]);
    }
    Tape<double> tape;
    const double got = weighted_bce(tape.constant(p), y, Beta{{1.0}}).value().item();
    EXPECT_NEAR(got, plain / 5, 1e-7);
  }
}

TEST(WeightedBce, MatchesOracleOnRandomInstances) {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t rows = 1 + rng.index(6), cols = 1 + rng.index(5);
    const LabelBatch y = random_labels(rng, rows, cols);
    BasicTensor<double> p(Shape{rows, cols});
    for (auto& v : p.data()) v = rng.uniform(0.0, 1.0);
    BetaPolicy policy;
    if (trial % 2) policy.mode = BetaPolicy::Mode::per_class;
    const Beta b = compute_beta(y, policy);
    std::vector<double> per_class;
    for (std::size_t c = 0; c < cols; ++c) per_class.push_back(b.for_class(c));
    const double ref = oracles::weighted_bce(p.values(), y.values(), rows, cols, per_class);
    Tape<double> tape;
    const double got = weighted_bce(tape.constant(p), y, b).value().item();
    EXPECT_NEAR(got, ref, 1e-6 * std::max(1.0, std::abs(ref)));
  }
}

TEST(WeightedBce, LogitGradientClosedForm) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const LabelBatch y = random_labels(rng, 4, 3, 0.4);
    const Beta b = compute_beta(y);
    const auto z = testing_support::random_tensor<double>(rng, {4, 3}, -3, 3);
    Tape<double> tape;
    auto zv = tape.variable(z);
    const auto g = tape.gradient(weighted_bce(sigmoid(zv), y, b), zv);
    for (std::size_t i = 0; i < 12; ++i) {
      const double p = 1 / (1 + std::exp(-z[i]));
      const double expected = (y.values()[i] ? b.values[0] * (p - 1) : p) / 4.0;
      EXPECT_NEAR(g[i], expected, 1e-5 * std::max(1.0, std::abs(expected)));
    }
  }
}

TEST(WeightedBce, NonNegativeAndMonotoneTowardLabels) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const LabelBatch y = random_labels(rng, 2, 3);
    BasicTensor<double> p(Shape{2, 3});
    for (auto& v : p.data()) v = rng.uniform(0.0, 1.0);
    const Beta b{{rng.uniform(0.1, 10)}};
    const auto before = weighted_bce_per_sample(p, y, b);
    EXPECT_GE(before[0], 0.0);
    const std::size_t j = rng.index(6);
    const double target = y.values()[j];
    p[j] = p[j] + 0.5 * (target - p[j]);
    const auto after = weighted_bce_per_sample(p, y, b);
    EXPECT_LE(after[j / 3], before[j / 3] + 1e-15);
  }
}

TEST(WeightedBce, GradientCheckThroughSigmoid) {
  Rng rng(6);
  const LabelBatch y = random_labels(rng, 3, 4, 0.5);
  const Beta b = compute_beta(y);
  const auto r = testing_support::check_gradients(
      [&](Tape<double>&, const std::vector<Var<double>>& v) { return weighted_bce(sigmoid(v[0]), y, b); },
      {testing_support::random_tensor<double>(rng, {3, 4}, -3, 3)});
  EXPECT_GE(r.fraction(), 0.99);
}

TEST(WeightedBce, RejectsShapeMismatch) {
  Tape<float> tape;
  EXPECT_THROW(weighted_bce(tape.constant(Tensor(Shape{2, 3}, 0.5f)), LabelBatch(2, 2, {0, 1, 0, 1}), Beta{{1.0}}),
               ShapeError);
  EXPECT_THROW(weighted_bce(tape.constant(Tensor(Shape{1, 3}, 0.5f)), LabelBatch(1, 3, {0, 1, 0}), Beta{{1.0, 2.0}}),
               ShapeError);
}
