#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ertest/criteria.hpp"
#include "support/gradcheck.hpp"

using namespace ertest;
namespace cr = ertest::criteria;

namespace {

using V = std::vector<double>;
using M = std::vector<int>;

double value(Criterion c, const V& r_hat, const M& r_dot) {
  CriterionConfig cfg;
  cfg.kind = c;
  return cr::evaluate(cfg, r_hat, r_dot);
}

}  // namespace

TEST(Criteria, MseExamples) {
  EXPECT_EQ(cr::mse(V{1, 0}, M{1, 0}), 0.0);
  EXPECT_NEAR(cr::mse(V{0.5, 0.5}, M{1, 0}), 0.25, 1e-15);
  EXPECT_NEAR(cr::mse(V{0, 1}, M{1, 0}), 1.0, 1e-15);
}

TEST(Criteria, MaeExamples) {
  EXPECT_EQ(cr::mae(V{0.3, 0.7}, M{0, 1}) > 0.0, true);
  EXPECT_EQ(cr::mae(V{1, 0}, M{1, 0}), 0.0);
  EXPECT_NEAR(cr::mae(V{0.5, 0.5}, M{1, 0}), 0.5, 1e-15);
  EXPECT_NEAR(cr::mae(V{0, 1}, M{1, 0}), 1.0, 1e-15);
}

TEST(Criteria, HuberExamples) {
  EXPECT_EQ(cr::huber(V{1, 0}, M{1, 0}), 0.0);
  EXPECT_NEAR(cr::huber(V{0.5, 0.5}, M{1, 0}), 0.125, 1e-15);
  EXPECT_NEAR(cr::huber(V{0, 1}, M{1, 0}), 0.5, 1e-15);
}

TEST(Criteria, BceExamples) {
  EXPECT_NEAR(cr::bce(V{0.5, 0.5}, M{1, 0}), 0.5 * std::log(2.0), 1e-15);
  EXPECT_NEAR(cr::bce(V{0.5, 0.5}, M{1, 0}), 0.3466, 1e-4);
  EXPECT_NEAR(cr::bce(V{std::exp(-1.0), 0.9}, M{1, 1}), (1.0 - std::log(0.9)) / 2.0, 1e-15);
  EXPECT_NEAR(cr::bce(V{1.0 - 1e-12, 0.3}, M{1, 0}), 0.0, 1e-11);
}

TEST(Criteria, BceRejectsNonpositiveProbabilities) {
  EXPECT_THROW(cr::bce(V{0.0, 0.5}, M{1, 0}), ValueError);
  EXPECT_THROW(cr::kldiv(V{-0.1, 0.5}, M{1, 0}), ValueError);
}

TEST(Criteria, BceTwoTermAddsUnimportantPenalty) {
  const double one = cr::bce(V{0.5, 0.3}, M{1, 0}, false);
  const double two = cr::bce(V{0.5, 0.3}, M{1, 0}, true);
  EXPECT_NEAR(two - one, -std::log(0.7) / 2.0, 1e-15);
}

TEST(Criteria, KlDivExamples) {
  EXPECT_NEAR(cr::kldiv(V{1.0 - 1e-12, 0.5}, M{1, 0}), 0.0, 1e-11);
  EXPECT_NEAR(cr::kldiv(V{0.5, 0.5}, M{1, 0}), 0.3466, 1e-4);
}

TEST(Criteria, OrderExamples) {
  EXPECT_EQ(cr::order(V{0.9, 0.1}, M{1, 0}), 0.0);
  EXPECT_NEAR(cr::order(V{0.2, 0.4}, M{1, 0}), 0.25, 1e-15);
  EXPECT_NEAR(cr::order(V{0.1, 0.3, 0.6}, M{1, 1, 0}), 0.6944444444444444 + 0.25, 1e-12);
}

TEST(Criteria, LengthMismatchThrows) {
  for (Criterion c : kAllCriteria) EXPECT_THROW(value(c, V{0.5, 0.5}, M{1}), ShapeError) << to_string(c);
}

TEST(Criteria, KlDivEqualsBceOnBinaryMasks) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(1e-6, 1.0 - 1e-6);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + trial % 9;
    V r_hat(n);
    M r_dot(n);
    for (std::size_t t = 0; t < n; ++t) {
      r_hat[t] = u(rng);
      r_dot[t] = static_cast<int>(rng() & 1u);
    }
    EXPECT_NEAR(cr::kldiv(r_hat, r_dot), cr::bce(r_hat, r_dot), 1e-12);
  }
}

TEST(Criteria, AllCriteriaNonnegativeAndZeroAtTarget) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + trial % 6;
    V r_hat(n);
    M r_dot(n);
    for (std::size_t t = 0; t < n; ++t) {
      r_hat[t] = u(rng);
      r_dot[t] = static_cast<int>(rng() & 1u);
    }
    for (Criterion c : kAllCriteria) EXPECT_GE(value(c, r_hat, r_dot), 0.0);
    V exact(r_dot.begin(), r_dot.end());
    for (Criterion c : {Criterion::mse, Criterion::mae, Criterion::huber})
      EXPECT_EQ(value(c, exact, r_dot), 0.0);
    V near(n);
    for (std::size_t t = 0; t < n; ++t) near[t] = r_dot[t] ? 1.0 - 1e-13 : 0.5;
    EXPECT_NEAR(value(Criterion::bce, near, r_dot), 0.0, 1e-12);
    EXPECT_NEAR(value(Criterion::kldiv, near, r_dot), 0.0, 1e-12);
    EXPECT_EQ(value(Criterion::order, near, r_dot), 0.0);
  }
}

TEST(Criteria, OrderZeroExactlyWhenRankingSatisfied) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + trial % 7;
    V r_hat(n);
    M r_dot(n);
    for (std::size_t t = 0; t < n; ++t) {
      r_hat[t] = u(rng);
      r_dot[t] = t == 0 ? 1 : t == 1 ? 0 : static_cast<int>(rng() & 1u);
    }
    double min_imp = 2.0, max_unimp = -1.0;
    for (std::size_t t = 0; t < n; ++t) {
      if (r_dot[t]) min_imp = std::min(min_imp, r_hat[t]);
      else max_unimp = std::max(max_unimp, r_hat[t]);
    }
    EXPECT_EQ(cr::order(r_hat, r_dot) == 0.0, min_imp >= max_unimp);
  }
}

TEST(Criteria, OrderInvariantToCommonScaling) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + trial % 5;
    V r_hat(n), scaled(n);
    M r_dot(n);
    for (std::size_t t = 0; t < n; ++t) {
      r_hat[t] = u(rng);
      scaled[t] = 0.37 * r_hat[t];
      r_dot[t] = t % 2 == 0;
    }
    EXPECT_NEAR(cr::order(r_hat, r_dot), cr::order(scaled, r_dot), 1e-12);
  }
}

TEST(Criteria, OrderWithOneEmptyGroupIsZero) {
  EXPECT_EQ(cr::order(V{0.1, 0.2}, M{1, 1}), 0.0);
  EXPECT_EQ(cr::order(V{0.1, 0.2}, M{0, 0}), 0.0);
}

TEST(Criteria, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (Criterion c : kAllCriteria) {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t n = 2 + trial % 5;
      V r0(n);
      M r_dot(n);
      for (std::size_t t = 0; t < n; ++t) {
        r0[t] = u(rng);
        r_dot[t] = t == 0 ? 1 : t == 1 ? 0 : static_cast<int>(rng() & 1u);
      }
      CriterionConfig cfg;
      cfg.kind = c;
      cfg.bce_two_term = trial % 2 == 1;
      const auto r = support::check_gradients(
          [&](ad::Graph& g, std::vector<ad::Tensor>& values, std::vector<ad::Var>& leaves) {
            if (values.empty()) values.push_back(ad::Tensor::vector(r0));
            leaves.push_back(g.leaf(values[0]));
            return cr::apply(cfg, leaves[0], r_dot);
          },
          1e-7);
      EXPECT_LE(r.max_rel_error, 1e-4) << to_string(c) << " trial " << trial;
    }
  }
}

TEST(Criteria, ErLossIsMeanTimesLambda) {
  ad::Graph g;
  const M zero{0};
  auto a = g.leaf(ad::Tensor::vector({std::sqrt(0.2)}));
  auto b = g.leaf(ad::Tensor::vector({std::sqrt(0.4)}));
  CriterionConfig cfg;
  cfg.kind = Criterion::mse;
  const RationalePair pairs[] = {{a, zero}, {b, zero}};
  const ErLoss two = er_loss(g, pairs, cfg, 2.0);
  EXPECT_NEAR(two.mean.item(), 0.3, 1e-15);
  EXPECT_NEAR(two.contribution.item(), 0.6, 1e-15);
  EXPECT_EQ(two.annotated, 2u);

  const ErLoss one = er_loss(g, std::span(pairs, 1), cfg, 1.0);
  EXPECT_NEAR(one.mean.item(), 0.2, 1e-15);

  const ErLoss off = er_loss(g, pairs, cfg, 0.0);
  EXPECT_EQ(off.contribution.item(), 0.0);
}

TEST(Criteria, ErLossWithoutAnnotationsIsFlagged) {
  ad::Graph g;
  CriterionConfig cfg;
  const ErLoss e = er_loss(g, std::span<const RationalePair>{}, cfg, 1.0);
  EXPECT_TRUE(e.flagged);
  EXPECT_EQ(e.contribution.item(), 0.0);
}

TEST(Criteria, ParseRoundTrip) {
  for (Criterion c : kAllCriteria) EXPECT_EQ(parse_criterion(to_string(c)), c);
  EXPECT_THROW(parse_criterion("cosine"), ValueError);
}
