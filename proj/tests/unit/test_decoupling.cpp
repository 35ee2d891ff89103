#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "deref/decoupling.hpp"
#include "fd.hpp"

using namespace deref;
using deref::testing::max_rel_error;
using deref::testing::numeric_gradient;
using deref::testing::random_vec;

namespace {

RcaParams identity_rca(std::size_t d) {
  RcaParams p(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    p.fc1.weight(i, i) = 1.0;
    p.fc2.weight(i, i) = 1.0;
  }
  return p;
}

RcaParams random_rca(std::size_t c1, std::size_t c2, std::uint64_t seed) {
  RcaParams p(c1, c2);
  std::mt19937_64 rng(seed);
  p.init(rng);
  return p;
}

// Literal evaluation from the 2d x 2d matrix M = [v1, v2]^T [v2, v1]:
// branch A attends over the columns of [M_m1m2; M_m2m2] (left half of M),
// branch B over the columns of [M_m1m2, M_m1m1]^T (top half, transposed).
// Independent of the per-column fast path.
Vec rca_reference(const Vec& v1, const Vec& v2) {
  const std::size_t d = v1.size();
  const Tensor m = rca_attention_matrix(v1, v2);
  Tensor block_a(2 * d, d), block_b(2 * d, d);
  for (std::size_t i = 0; i < 2 * d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      block_a(i, j) = m(i, j);
      block_b(i, j) = m(j, i);
    }
  }
  const Tensor pa = column_softmax(block_a), pb = column_softmax(block_b);
  Vec a(v1), b(v2);
  a.insert(a.end(), v2.begin(), v2.end());
  b.insert(b.end(), v1.begin(), v1.end());
  Vec out(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double ya = 0.0, yb = 0.0;
    for (std::size_t i = 0; i < 2 * d; ++i) {
      ya += a[i] * pa(i, j);
      yb += b[i] * pb(i, j);
    }
    out[j] = 0.5 * (ya + yb);
  }
  return out;
}

}  // namespace

TEST(SpecificHead, ZeroParametersGiveZeroOutput) {
  const Linear p(6, 4);
  const Vec out = specific_head(Vec(6, 1.5), p);
  ASSERT_EQ(out.size(), 4u);
  for (double v : out) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(specific_head(Vec(256, 0.3), Linear(256, 128)).size(), 128u);
}

TEST(SpecificHead, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  Linear p(5, 3);
  p.init_uniform(rng);
  const Vec v = random_vec(5, rng), w = random_vec(3, rng);
  auto f = [&](const Vec& x) {
    const Vec y = specific_head(x, p);
    return std::inner_product(y.begin(), y.end(), w.begin(), 0.0);
  };
  Linear grad(5, 3);
  Vec dv(5, 0.0);
  specific_head_backward(v, p, specific_head(v, p), w, grad, dv);
  EXPECT_LT(max_rel_error(dv, numeric_gradient(f, v)), 1e-7);
}

TEST(Rca, HandFixtureForScalarEmbeddings) {
  const double e = std::exp(1.0);
  const double a = (1 * e * e + 2 * std::pow(e, 4)) / (e * e + std::pow(e, 4));
  const double b = (2 * e * e + 1 * e) / (e * e + e);
  EXPECT_NEAR(a, 1.8808, 1e-4);
  EXPECT_NEAR(b, 1.7311, 1e-4);
  const Vec out = regional_cross_attention(Vec{1.0}, Vec{2.0}, identity_rca(1));
  ASSERT_EQ(out.size(), 1u);
  EXPECT_NEAR(out[0], 0.5 * (a + b), 1e-9);
  EXPECT_NEAR(out[0], 1.8059, 1e-4);

  const Tensor m = rca_attention_matrix(Vec{1.0}, Vec{2.0});
  EXPECT_EQ(m, Tensor::from_rows({{2, 1}, {4, 2}}));
}

TEST(Rca, MatchesLiteralBlockConstruction) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Vec v1 = random_vec(6, rng), v2 = random_vec(6, rng);
    const Vec fast = rca_from_embeddings(v1, v2);
    const Vec slow = rca_reference(v1, v2);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(fast[j], slow[j], 1e-12);
  }
}

TEST(Rca, EqualEmbeddingsCollapseBothBranches) {
  std::mt19937_64 rng(3);
  const Vec v = random_vec(16, rng);
  RcaCache cache;
  const Vec out = rca_from_embeddings(v, v, {}, &cache);
  for (std::size_t j = 0; j < v.size(); ++j) {
    EXPECT_NEAR(cache.branch_a[j], cache.branch_b[j], 1e-12);
    EXPECT_NEAR(out[j], cache.branch_a[j], 1e-12);
  }
}

TEST(Rca, ZeroParametersGiveZeroOutput) {
  const Vec out = regional_cross_attention(Vec(8, 0.7), Vec(8, -0.2), RcaParams(8, 4));
  for (double v : out) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(regional_cross_attention(Vec(256, 0.1), Vec(256, 0.2), random_rca(256, 128, 4)).size(), 128u);
}

TEST(Rca, ColumnSoftmaxColumnsSumToOne) {
  std::mt19937_64 rng(5);
  const Tensor m = rca_attention_matrix(random_vec(10, rng, 3.0), random_vec(10, rng, 3.0));
  const Tensor p = column_softmax(m);
  for (std::size_t c = 0; c < p.cols; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < p.rows; ++r) s += p(r, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Rca, OutputIsConvexCombinationOfEntries) {
  std::mt19937_64 rng(6);
  const Vec v1 = random_vec(12, rng), v2 = random_vec(12, rng);
  double lo = 1e300, hi = -1e300;
  for (const auto& v : {v1, v2}) {
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  for (double y : rca_from_embeddings(v1, v2)) {
    EXPECT_GE(y, lo - 1e-12);
    EXPECT_LE(y, hi + 1e-12);
  }
}

TEST(Rca, GradientsMatchFiniteDifferences) {
  for (bool scaled : {false, true}) {
    const RcaOptions opts{scaled};
    const auto p = random_rca(5, 4, 7);
    std::mt19937_64 rng(8);
    const Vec vm1 = random_vec(5, rng), vm2 = random_vec(5, rng), w = random_vec(4, rng);
    auto loss = [&](const RcaParams& pp, const Vec& a, const Vec& b) {
      const Vec y = regional_cross_attention(a, b, pp, opts);
      return std::inner_product(y.begin(), y.end(), w.begin(), 0.0);
    };
    RcaCache cache;
    (void)regional_cross_attention(vm1, vm2, p, opts, &cache);
    RcaParams grad(5, 4);
    Vec d1(5, 0.0), d2(5, 0.0);
    regional_cross_attention_backward(vm1, vm2, p, opts, cache, w, grad, d1, d2);

    EXPECT_LT(max_rel_error(d1, numeric_gradient([&](const Vec& x) { return loss(p, x, vm2); }, vm1)), 1e-6);
    EXPECT_LT(max_rel_error(d2, numeric_gradient([&](const Vec& x) { return loss(p, vm1, x); }, vm2)), 1e-6);
    auto wrt = [&](Linear RcaParams::*layer, bool bias) {
      const Tensor& t = bias ? (p.*layer).bias : (p.*layer).weight;
      return numeric_gradient(
          [&](const Vec& flat) {
            RcaParams q = p;
            (bias ? (q.*layer).bias : (q.*layer).weight).data = flat;
            return loss(q, vm1, vm2);
          },
          t.data);
    };
    EXPECT_LT(max_rel_error(grad.fc1.weight.data, wrt(&RcaParams::fc1, false)), 1e-6);
    EXPECT_LT(max_rel_error(grad.fc1.bias.data, wrt(&RcaParams::fc1, true)), 1e-6);
    EXPECT_LT(max_rel_error(grad.fc2.weight.data, wrt(&RcaParams::fc2, false)), 1e-6);
    EXPECT_LT(max_rel_error(grad.fc2.bias.data, wrt(&RcaParams::fc2, true)), 1e-6);
  }
}

TEST(Rca, IndependentInstancesDoNotInteract) {
  const auto share = random_rca(6, 4, 9);
  auto explore = random_rca(6, 4, 10);
  const Vec a(6, 0.4), b(6, -0.3);
  const Vec before = regional_cross_attention(a, b, share);
  explore.fc1.weight.data[0] += 5.0;
  EXPECT_EQ(regional_cross_attention(a, b, share), before);
}

TEST(Distance, HandValues) {
  EXPECT_DOUBLE_EQ(distance(Vec{0, 0}, Vec{1, 1}, DistanceMetric::MSE), 1.0);
  EXPECT_DOUBLE_EQ(distance(Vec{0, 0}, Vec{1, 3}, DistanceMetric::L1), 2.0);
  EXPECT_DOUBLE_EQ(distance(Vec{1, 0}, Vec{0, 1}, DistanceMetric::COS), 1.0);
  EXPECT_DOUBLE_EQ(distance(Vec{0, 0}, Vec{0, 1}, DistanceMetric::COS), 1.0);
  // Symmetric KL of softmax([0, ln 3]) = [1/4, 3/4] against the uniform vector.
  const double kl = (0.25 - 0.5) * std::log(0.25 / 0.5) + (0.75 - 0.5) * std::log(0.75 / 0.5);
  EXPECT_NEAR(distance(Vec{0, std::log(3.0)}, Vec{0, 0}, DistanceMetric::KL), kl, 1e-15);
}

TEST(Distance, SelfDistanceIsZeroAndKlIsSymmetric) {
  std::mt19937_64 rng(11);
  const Vec u = random_vec(9, rng), v = random_vec(9, rng);
  for (auto m : {DistanceMetric::MSE, DistanceMetric::L1, DistanceMetric::KL, DistanceMetric::COS}) {
    EXPECT_NEAR(distance(u, u, m), 0.0, 1e-15) << to_string(m);
    EXPECT_GE(distance(u, v, m), 0.0);
    EXPECT_NEAR(distance(u, v, m), distance(v, u, m), 1e-14) << to_string(m);
  }
}

TEST(Distance, ParseRoundTripsAndRejectsUnknown) {
  for (auto m : {DistanceMetric::MSE, DistanceMetric::L1, DistanceMetric::KL, DistanceMetric::COS}) {
    EXPECT_EQ(parse_distance_metric(to_string(m)), m);
  }
  EXPECT_THROW(parse_distance_metric("hamming"), ConfigError);
}

TEST(Distance, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(12);
  for (auto m : {DistanceMetric::MSE, DistanceMetric::L1, DistanceMetric::KL, DistanceMetric::COS}) {
    const Vec u = random_vec(6, rng), v = random_vec(6, rng);
    Vec du(6, 0.0), dv(6, 0.0);
    distance_backward(u, v, m, 1.0, du, dv);
    EXPECT_LT(max_rel_error(du, numeric_gradient([&](const Vec& x) { return distance(x, v, m); }, u)), 1e-6)
        << to_string(m);
    EXPECT_LT(max_rel_error(dv, numeric_gradient([&](const Vec& x) { return distance(u, x, m); }, v)), 1e-6)
        << to_string(m);
  }
}

TEST(DecouplingLoss, HandFixture) {
  DecoupledBundle b{Vec{1, 0}, Vec{0, 1}, Vec{0.5, 0.5}, Vec{0.5, 0.5}};
  EXPECT_NEAR(decoupling_loss(b), 0.0, 1e-12);
}

TEST(DecouplingLoss, EqualAndZeroBundlesGiveZero) {
  const Vec v{0.3, -1.2, 2.0};
  EXPECT_EQ(decoupling_loss(DecoupledBundle{v, v, v, v}), 0.0);
  const Vec z(3, 0.0);
  for (auto m : {DistanceMetric::MSE, DistanceMetric::L1}) {
    EXPECT_EQ(decoupling_loss(DecoupledBundle{z, z, z, z}, {m, std::nullopt}), 0.0);
  }
}

TEST(DecouplingLoss, WithoutExploreDropsItsTerms) {
  DecoupledBundle b{Vec{1, 0}, Vec{0, 1}, Vec{0.5, 0.5}, std::nullopt};
  // Dis(sp1, share) + Dis(sp2, share) - Dis(sp1, sp2) = 0.25 + 0.25 - 1.
  EXPECT_NEAR(decoupling_loss(b), -0.5, 1e-15);
  EXPECT_EQ(b.arity(), 3u);
}

TEST(DecouplingLoss, CapBoundsTheRepulsiveTerm) {
  DecoupledBundle b{Vec{10, 0}, Vec{0, 10}, Vec{0, 0}, Vec{0, 0}};
  const double raw = decoupling_loss(b);
  const double capped = decoupling_loss(b, {DistanceMetric::MSE, 2.0});
  EXPECT_NEAR(capped - raw, distance(b.sp1, b.sp2, DistanceMetric::MSE) - 2.0, 1e-12);
}

TEST(DecouplingLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  for (auto m : {DistanceMetric::MSE, DistanceMetric::L1, DistanceMetric::KL, DistanceMetric::COS}) {
    for (bool with_explore : {true, false}) {
      DecoupledBundle b{random_vec(5, rng), random_vec(5, rng), random_vec(5, rng), std::nullopt};
      if (with_explore) b.explore = random_vec(5, rng);
      const DecouplingLossOptions opts{m, std::nullopt};
      DecoupledBundle g = zeros_like(b);
      decoupling_loss_backward(b, opts, 1.0, g);
      auto check = [&](Vec DecoupledBundle::*field, const Vec& analytic) {
        auto f = [&](const Vec& x) {
          DecoupledBundle c = b;
          c.*field = x;
          return decoupling_loss(c, opts);
        };
        EXPECT_LT(max_rel_error(analytic, numeric_gradient(f, b.*field), 1e-3), 1e-6) << to_string(m);
      };
      check(&DecoupledBundle::sp1, g.sp1);
      check(&DecoupledBundle::sp2, g.sp2);
      check(&DecoupledBundle::share, g.share);
      if (with_explore) {
        auto f = [&](const Vec& x) {
          DecoupledBundle c = b;
          c.explore = x;
          return decoupling_loss(c, opts);
        };
        EXPECT_LT(max_rel_error(*g.explore, numeric_gradient(f, *b.explore), 1e-3), 1e-6) << to_string(m);
      }
    }
  }
}
