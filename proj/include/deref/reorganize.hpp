#pragma once

// Random feature reorganization: each of the F decoupled features (length C2)
// is cut into L = C2 / s segments of length s, and the fused vector is
// [f1 seg1, f2 seg1, ..., fF seg1, f1 seg2, ...].

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "deref/decoupling.hpp"
#include "deref/errors.hpp"
#include "deref/tensor.hpp"

namespace deref {

class SegmentSet {
 public:
  SegmentSet(std::vector<int> values, std::size_t c2) : values_(std::move(values)) {
    if (values_.empty()) throw ConfigError("segment set is empty");
    std::sort(values_.begin(), values_.end());
    values_.erase(std::unique(values_.begin(), values_.end()), values_.end());
    for (int s : values_) {
      if (s < 1 || c2 % static_cast<std::size_t>(s) != 0) {
        throw ConfigError("segment length " + std::to_string(s) + " does not divide C2=" + std::to_string(c2));
      }
    }
  }

  [[nodiscard]] const std::vector<int>& values() const { return values_; }
  [[nodiscard]] int max() const { return values_.back(); }

 private:
  std::vector<int> values_;
};

/// Uniform draw from the set.
template <class Rng>
int sample_segment_length(const SegmentSet& set, Rng& rng) {
  const auto& v = set.values();
  std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
  return v[pick(rng)];
}

struct ReorgPlan {
  std::size_t segment = 1;
  std::size_t features = 4;
  std::size_t c2 = 0;
  // dest[k]: output position of element k of the concatenation [f1 | f2 | ... | fF].
  std::vector<std::size_t> dest;

  [[nodiscard]] std::size_t size() const { return dest.size(); }
  bool operator==(const ReorgPlan&) const = default;
};

inline ReorgPlan build_plan(std::size_t c2, std::size_t s, std::size_t f) {
  if (s == 0 || c2 % s != 0) {
    throw ConfigError("segment length " + std::to_string(s) + " does not divide C2=" + std::to_string(c2));
  }
  if (f == 0) throw ConfigError("build_plan: feature count must be positive");
  ReorgPlan plan{s, f, c2, std::vector<std::size_t>(f * c2)};
  for (std::size_t o = 0; o < f; ++o) {
    for (std::size_t j = 0; j < c2; ++j) {
      const std::size_t block = j / s;
      plan.dest[o * c2 + j] = block * f * s + o * s + (j % s);
    }
  }
  return plan;
}

/// src[p]: which concatenation index lands at output position p.
inline std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> dest) {
  std::vector<std::size_t> src(dest.size());
  for (std::size_t k = 0; k < dest.size(); ++k) src[dest[k]] = k;
  return src;
}

inline Vec concatenate(const DecoupledBundle& b) {
  Vec cat;
  cat.reserve(b.arity() * b.dim());
  for (auto f : b.features()) cat.insert(cat.end(), f.begin(), f.end());
  return cat;
}

inline Vec apply_plan(std::span<const double> concatenated, const ReorgPlan& plan) {
  if (concatenated.size() != plan.size()) throw DimensionError("apply_plan: input length does not match plan");
  Vec out(plan.size());
  for (std::size_t k = 0; k < plan.size(); ++k) out[plan.dest[k]] = concatenated[k];
  return out;
}

inline Vec reorganize(const DecoupledBundle& b, const ReorgPlan& plan) {
  if (b.arity() != plan.features || b.dim() != plan.c2) {
    throw DimensionError("reorganize: bundle has " + std::to_string(b.arity()) + " features of length " +
                         std::to_string(b.dim()) + ", plan expects " + std::to_string(plan.features) + " x " +
                         std::to_string(plan.c2));
  }
  return apply_plan(concatenate(b), plan);
}

/// Backward of reorganize: gathers the upstream gradient back into
/// concatenation order and accumulates it into the per-feature gradients.
inline void reorganize_backward(std::span<const double> d_fused, const ReorgPlan& plan, DecoupledBundle& grad) {
  std::vector<std::span<double>> parts{grad.sp1, grad.sp2, grad.share};
  if (grad.explore) parts.emplace_back(*grad.explore);
  if (parts.size() != plan.features) throw DimensionError("reorganize_backward: arity mismatch");
  for (std::size_t o = 0; o < plan.features; ++o) {
    for (std::size_t j = 0; j < plan.c2; ++j) parts[o][j] += d_fused[plan.dest[o * plan.c2 + j]];
  }
}

}  // namespace deref
