#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "deref/moe.hpp"
#include "fd.hpp"

using namespace deref;
using deref::testing::max_rel_error;
using deref::testing::numeric_gradient;
using deref::testing::random_tensor;
using deref::testing::random_vec;

namespace {

MoeParams random_moe(std::size_t fused, std::size_t c2, std::size_t n, std::size_t bins, std::uint64_t seed) {
  MoeParams p(fused, c2, n, bins);
  std::mt19937_64 rng(seed);
  p.init(rng);
  return p;
}

}  // namespace

TEST(Gate, ZeroWeightsGiveExactlyUniform) {
  const GateWeights g = gate(Vec(12, 0.7), Tensor(12, 4));
  for (double w : g) EXPECT_EQ(w, 0.25);
}

TEST(Gate, LogWeightsRecoverTheirProportions) {
  const Tensor w = Tensor::from_rows({{std::log(1.0), std::log(2.0), std::log(3.0), std::log(4.0)}});
  const GateWeights g = gate(Vec{1.0}, w);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g[i], 0.1 * static_cast<double>(i + 1), 1e-15);
}

TEST(Gate, ShiftInvariantAndOnTheSimplex) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const Vec v = random_vec(6, rng, 5.0);
    const Tensor w = random_tensor(6, 4, rng, 3.0);
    const GateWeights g = gate(v, w);
    double s = 0.0;
    for (double x : g) {
      ASSERT_GE(x, 0.0);
      s += x;
    }
    ASSERT_NEAR(s, 1.0, 1e-12);
  }
  // A constant added to every logit: append an input coordinate with equal weights.
  const Vec v{0.3, -0.8};
  const Tensor w = Tensor::from_rows({{0.1, 0.5, -0.2, 0.9}, {1.0, -1.0, 0.25, 0.0}});
  Tensor shifted(3, 4);
  std::copy(w.data.begin(), w.data.end(), shifted.data.begin());
  for (std::size_t j = 0; j < 4; ++j) shifted(2, j) = 7.0;
  const GateWeights a = gate(v, w), b = gate(Vec{0.3, -0.8, 1.0}, shifted);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(Expert, ZeroParametersGiveZeroOutput) {
  const Expert e(8, 4);
  for (double x : expert_forward(Vec(8, 1.0), e)) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(expert_forward(Vec(512, 0.1), Expert(512, 128)).size(), 128u);
}

TEST(MoeFuse, NearOneHotGateSelectsTheFirstExpert) {
  auto p = random_moe(1, 3, 4, 2, 2);
  p.gate = Tensor::from_rows({{100.0, 0.0, 0.0, 0.0}});
  const Vec v{1.0};
  const Vec out = moe_fuse(v, p);
  const Vec e1 = expert_forward(v, p.experts[0]);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out[j], e1[j], 1e-15 * std::abs(e1[j]) + 1e-300);
  for (std::size_t i = 1; i < 4; ++i) {
    const double ei = l2_norm(expert_forward(v, p.experts[i]));
    double blk = 0.0;
    for (std::size_t j = 0; j < 3; ++j) blk += out[3 * i + j] * out[3 * i + j];
    EXPECT_LE(std::sqrt(blk), 1e-20 * ei);
  }
}

TEST(MoeFuse, UniformGateWithIdenticalExpertsTilesTheOutput) {
  auto p = random_moe(5, 3, 4, 2, 3);
  p.gate.fill(0.0);
  for (auto& e : p.experts) e = p.experts[0];
  const Vec v{0.2, -0.4, 1.1, 0.0, 0.9};
  const Vec e = expert_forward(v, p.experts[0]);
  const Vec out = moe_fuse(v, p);
  ASSERT_EQ(out.size(), 12u);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out[3 * i + j], 0.25 * e[j]);
  }
}

TEST(MoeFuse, BlockNormsAreGateScaledExpertNorms) {
  const auto p = random_moe(6, 4, 4, 3, 4);
  std::mt19937_64 rng(5);
  const Vec v = random_vec(6, rng);
  MoeCache cache;
  const Vec out = moe_fuse(v, p, &cache);
  for (std::size_t i = 0; i < 4; ++i) {
    const Vec blk(out.begin() + static_cast<long>(4 * i), out.begin() + static_cast<long>(4 * i + 4));
    EXPECT_NEAR(l2_norm(blk), cache.gates[i] * l2_norm(expert_forward(v, p.experts[i])), 1e-15);
  }
  EXPECT_THROW(moe_fuse(Vec(5, 0.0), p), DimensionError);
}

TEST(Hazards, HandValues) {
  Linear head(2, 2);
  for (double h : predict_hazards(Vec{0.3, 0.4}, head)) EXPECT_EQ(h, 0.5);
  head.bias.data = {0.0, std::log(3.0)};
  const Vec h = predict_hazards(Vec{0.3, 0.4}, head);
  EXPECT_DOUBLE_EQ(h[0], 0.5);
  EXPECT_NEAR(h[1], 0.75, 1e-15);
  EXPECT_EQ(predict_hazards(Vec(512, 0.0), Linear(512, 4)).size(), 4u);
}

TEST(MoeFuse, GradientsMatchFiniteDifferences) {
  const std::size_t fused = 6, c2 = 3, n = 4, bins = 3;
  const auto p = random_moe(fused, c2, n, bins, 6);
  std::mt19937_64 rng(7);
  const Vec v = random_vec(fused, rng);
  const Vec w = random_vec(bins, rng);
  auto loss = [&](const MoeParams& pp, const Vec& x) {
    const Vec h = predict_hazards(moe_fuse(x, pp), pp.head);
    return std::inner_product(h.begin(), h.end(), w.begin(), 0.0);
  };
  MoeCache cache;
  const Vec e = moe_fuse(v, p, &cache);
  const Vec h = predict_hazards(e, p.head);
  MoeParams grad(fused, c2, n, bins);
  Vec d_e(e.size(), 0.0), d_v(fused, 0.0);
  predict_hazards_backward(e, p.head, h, w, grad.head, d_e);
  moe_fuse_backward(v, p, cache, d_e, grad, d_v);

  EXPECT_LT(max_rel_error(d_v, numeric_gradient([&](const Vec& x) { return loss(p, x); }, v, 1e-5)), 1e-6);
  std::vector<const Tensor*> g;
  MoeParams::visit(grad, "moe", [&](const std::string&, const Tensor& t) { g.push_back(&t); });
  std::size_t k = 0;
  MoeParams::visit(p, "moe", [&](const std::string& path, const Tensor& t) {
    auto f = [&](const Vec& flat) {
      MoeParams q = p;
      MoeParams::visit(q, "moe", [&](const std::string& qp, Tensor& u) {
        if (qp == path) u.data = flat;
      });
      return loss(q, v);
    };
    EXPECT_LT(max_rel_error(g[k]->data, numeric_gradient(f, t.data, 1e-5)), 1e-6) << path;
    ++k;
  });
}
