#pragma once

// Discrete-time survival: per-bin hazards h_1..h_n, survival S(k) = prod_{j<=k}(1 - h_j).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "deref/errors.hpp"

namespace deref {

inline constexpr double kLogFloor = 1e-12;

struct SurvivalLabel {
  int bin = 1;       // 1-based time bin
  int censored = 0;  // 1 = censored
};

inline double survival_function(std::span<const double> h, int k) {
  if (k < 0 || static_cast<std::size_t>(k) > h.size()) {
    throw DataError("survival_function: k=" + std::to_string(k) + " outside [0, " + std::to_string(h.size()) + "]");
  }
  double s = 1.0;
  for (int j = 0; j < k; ++j) s *= (1 - h[static_cast<std::size_t>(j)]);
  return s;
}

struct NllResult {
  double value = 0.0;
  int clamp_events = 0;  // log arguments that fell below the floor
};

namespace detail {

inline void check_label(std::size_t n_bins, const SurvivalLabel& label) {
  if (label.bin < 1 || static_cast<std::size_t>(label.bin) > n_bins) {
    throw DataError("survival label bin " + std::to_string(label.bin) + " outside [1, " + std::to_string(n_bins) + "]");
  }
  if (label.censored != 0 && label.censored != 1) throw DataError("survival label censored flag must be 0 or 1");
}

}  // namespace detail

/// -c log S(n) - (1-c) log h_n - (1-c) log S(n-1), logs floored at 1e-12.
inline NllResult nll_loss(std::span<const double> h, const SurvivalLabel& label) {
  detail::check_label(h.size(), label);
  NllResult r;
  auto safe_log = [&](double x) {
    if (x < kLogFloor) {
      ++r.clamp_events;
      return std::log(kLogFloor);
    }
    return std::log(x);
  };
  const int n = label.bin;
  if (label.censored == 1) {
    r.value = -safe_log(survival_function(h, n));
  } else {
    r.value = -safe_log(h[static_cast<std::size_t>(n - 1)]) - safe_log(survival_function(h, n - 1));
  }
  return r;
}

/// dL/dh for nll_loss. Terms whose log argument hit the floor contribute zero.
inline std::vector<double> nll_loss_grad(std::span<const double> h, const SurvivalLabel& label) {
  detail::check_label(h.size(), label);
  std::vector<double> g(h.size(), 0.0);
  const int n = label.bin;
  auto survival_terms = [&](int k) {
    if (survival_function(h, k) < kLogFloor) return;
    for (int j = 0; j < k; ++j) {
      const auto idx = static_cast<std::size_t>(j);
      g[idx] += 1.0 / (1.0 - h[idx]);
    }
  };
  if (label.censored == 1) {
    survival_terms(n);
  } else {
    const auto idx = static_cast<std::size_t>(n - 1);
    if (h[idx] >= kLogFloor) g[idx] -= 1.0 / h[idx];
    survival_terms(n - 1);
  }
  return g;
}

inline double total_loss(double l_surv, double l_dis, double alpha) { return l_surv + alpha * l_dis; }

/// -sum_{k=1..n} S(k); strictly increasing in every hazard.
inline double risk_score(std::span<const double> h) {
  double s = 1.0, acc = 0.0;
  for (double hj : h) {
    s *= (1 - hj);
    acc += s;
  }
  return -acc;
}

}  // namespace deref
