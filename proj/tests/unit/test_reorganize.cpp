#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numeric>
#include <random>

#include "deref/reorganize.hpp"
#include "fd.hpp"

using namespace deref;
using deref::testing::max_rel_error;
using deref::testing::numeric_gradient;
using deref::testing::random_vec;

namespace {

// Labels feature o, element j as 10 * (o + 1) + (j + 1): a1 = 11, b3 = 23, ...
DecoupledBundle labelled(std::size_t c2, std::size_t f) {
  std::vector<Vec> feats(f, Vec(c2));
  for (std::size_t o = 0; o < f; ++o) {
    for (std::size_t j = 0; j < c2; ++j) feats[o][j] = static_cast<double>(10 * (o + 1) + (j + 1));
  }
  DecoupledBundle b{feats[0], feats[1], feats[2], std::nullopt};
  if (f == 4) b.explore = feats[3];
  return b;
}

}  // namespace

TEST(SegmentSet, RejectsNonDivisorsAndEmptySets) {
  EXPECT_THROW(SegmentSet({3}, 128), ConfigError);
  EXPECT_THROW(SegmentSet({2, 8, 3}, 128), ConfigError);
  EXPECT_THROW(SegmentSet({}, 128), ConfigError);
  EXPECT_THROW(SegmentSet({0}, 128), ConfigError);
  EXPECT_EQ(SegmentSet({64, 2, 8, 16, 32}, 128).max(), 64);
}

TEST(SegmentSet, SingletonAlwaysDrawsItsValue) {
  const SegmentSet s({8}, 128);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_segment_length(s, rng), 8);
}

TEST(SegmentSet, DrawsAreUniformWithinThreeSigma) {
  const SegmentSet s({2, 8, 16, 32, 64}, 128);
  std::mt19937_64 rng(2);
  constexpr int kDraws = 100000;
  std::map<int, int> counts;
  for (int i = 0; i < kDraws; ++i) ++counts[sample_segment_length(s, rng)];
  const double p = 0.2, sigma = std::sqrt(kDraws * p * (1 - p));
  ASSERT_EQ(counts.size(), 5u);
  for (const auto& [value, n] : counts) EXPECT_LT(std::abs(n - kDraws * p), 3 * sigma) << value;
}

TEST(BuildPlan, InterleavesPairsForC2Four) {
  const Vec out = reorganize(labelled(4, 4), build_plan(4, 2, 4));
  const Vec expected{11, 12, 21, 22, 31, 32, 41, 42, 13, 14, 23, 24, 33, 34, 43, 44};
  EXPECT_EQ(out, expected);
}

TEST(BuildPlan, UnitSegmentsAlternateFeatures) {
  const Vec out = reorganize(labelled(2, 4), build_plan(2, 1, 4));
  EXPECT_EQ(out, (Vec{11, 21, 31, 41, 12, 22, 32, 42}));
}

TEST(BuildPlan, FullSegmentIsPlainConcatenation) {
  for (std::size_t f : {3u, 4u}) {
    const auto b = labelled(128, f);
    EXPECT_EQ(reorganize(b, build_plan(128, 128, f)), concatenate(b));
  }
}

TEST(BuildPlan, RejectsSegmentThatDoesNotDivide) {
  EXPECT_THROW(build_plan(128, 3, 4), ConfigError);
  EXPECT_THROW(build_plan(128, 0, 4), ConfigError);
}

TEST(BuildPlan, IsABijectionForEveryDivisor) {
  for (std::size_t s = 1; s <= 128; ++s) {
    if (128 % s != 0) continue;
    const ReorgPlan plan = build_plan(128, s, 4);
    std::vector<std::size_t> sorted = plan.dest;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t k = 0; k < sorted.size(); ++k) ASSERT_EQ(sorted[k], k) << "s=" << s;
    const auto inv = inverse_permutation(plan.dest);
    for (std::size_t k = 0; k < plan.size(); ++k) ASSERT_EQ(inv[plan.dest[k]], k);
  }
}

TEST(Reorganize, PreservesValuesAndNorm) {
  std::mt19937_64 rng(3);
  DecoupledBundle b{random_vec(128, rng), random_vec(128, rng), random_vec(128, rng), random_vec(128, rng)};
  const Vec cat = concatenate(b);
  for (std::size_t s : {2u, 8u, 16u, 32u, 64u}) {
    const ReorgPlan plan = build_plan(128, s, 4);
    const Vec out = reorganize(b, plan);
    const auto inv = inverse_permutation(plan.dest);
    Vec back(out.size());
    for (std::size_t k = 0; k < out.size(); ++k) back[k] = out[plan.dest[k]];
    EXPECT_EQ(back, cat);
    (void)inv;
    Vec a = out, c = cat;
    std::sort(a.begin(), a.end());
    std::sort(c.begin(), c.end());
    EXPECT_EQ(a, c);
    EXPECT_NEAR(l2_norm(out), l2_norm(cat), 1e-12);
  }
}

TEST(Reorganize, ArityMismatchIsADimensionError) {
  EXPECT_THROW(reorganize(labelled(8, 3), build_plan(8, 2, 4)), DimensionError);
  EXPECT_THROW(reorganize(labelled(8, 4), build_plan(16, 2, 4)), DimensionError);
}

TEST(Reorganize, BackwardIsTheInversePermutation) {
  std::mt19937_64 rng(4);
  DecoupledBundle b{random_vec(8, rng), random_vec(8, rng), random_vec(8, rng), random_vec(8, rng)};
  const ReorgPlan plan = build_plan(8, 2, 4);
  const Vec w = random_vec(32, rng);
  DecoupledBundle g = zeros_like(b);
  reorganize_backward(w, plan, g);
  const Vec flat_grad = concatenate(g);
  auto f = [&](const Vec& cat) {
    DecoupledBundle c{Vec(cat.begin(), cat.begin() + 8), Vec(cat.begin() + 8, cat.begin() + 16),
                      Vec(cat.begin() + 16, cat.begin() + 24), Vec(cat.begin() + 24, cat.end())};
    const Vec out = reorganize(c, plan);
    return std::inner_product(out.begin(), out.end(), w.begin(), 0.0);
  };
  EXPECT_LT(max_rel_error(flat_grad, numeric_gradient(f, concatenate(b))), 1e-8);
  for (std::size_t k = 0; k < plan.size(); ++k) EXPECT_EQ(flat_grad[k], w[plan.dest[k]]);
}
