#pragma once

// Survival statistics: Harrell's C-index, Kaplan-Meier, two-group log-rank,
// and median-risk stratification.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deref/errors.hpp"

namespace deref {

struct RiskRecord {
  double risk = 0.0;
  double time = 1.0;
  int event = 1;
};

struct ConcordanceCounts {
  std::int64_t concordant = 0;
  std::int64_t tied_risk = 0;
  std::int64_t comparable = 0;

  [[nodiscard]] double index() const {
    return static_cast<double>(2 * concordant + tied_risk) / static_cast<double>(2 * comparable);
  }
};

namespace detail {

class Fenwick {
 public:
  explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t i) {
    for (++i; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
  }
  // Count of inserted ranks < i.
  [[nodiscard]] std::int64_t prefix(std::size_t i) const {
    std::int64_t s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<std::int64_t> tree_;
};

}  // namespace detail

/// Pair counts in O(N log N). A pair (i, j) is comparable when t_i < t_j and
/// subject i had the event; pairs with equal times are never comparable.
inline ConcordanceCounts concordance_counts(std::span<const RiskRecord> records) {
  const std::size_t n = records.size();
  std::vector<double> risks;
  risks.reserve(n);
  for (const auto& r : records) {
    if (!std::isfinite(r.risk)) throw DataError("concordance_index: non-finite risk");
    risks.push_back(r.risk);
  }
  std::sort(risks.begin(), risks.end());
  risks.erase(std::unique(risks.begin(), risks.end()), risks.end());
  auto rank_of = [&](double v) {
    return static_cast<std::size_t>(std::lower_bound(risks.begin(), risks.end(), v) - risks.begin());
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return records[a].time > records[b].time; });

  ConcordanceCounts c;
  detail::Fenwick later(risks.size());
  std::int64_t inserted = 0;
  std::size_t g = 0;
  while (g < n) {
    std::size_t end = g;
    while (end < n && records[order[end]].time == records[order[g]].time) ++end;
    for (std::size_t k = g; k < end; ++k) {
      const auto& r = records[order[k]];
      if (r.event != 1) continue;
      const std::size_t rank = rank_of(r.risk);
      const std::int64_t below = later.prefix(rank);
      const std::int64_t equal = later.prefix(rank + 1) - below;
      c.concordant += below;
      c.tied_risk += equal;
      c.comparable += inserted;
    }
    for (std::size_t k = g; k < end; ++k) {
      later.add(rank_of(records[order[k]].risk));
      ++inserted;
    }
    g = end;
  }
  return c;
}

inline double concordance_index(std::span<const RiskRecord> records) {
  if (records.size() < 2) throw UndefinedMetricError("concordance_index: need at least two records");
  const auto c = concordance_counts(records);
  if (c.comparable == 0) throw UndefinedMetricError("concordance_index: no comparable pairs");
  return c.index();
}

struct KmCurve {
  std::vector<double> times;  // distinct event times, ascending
  std::vector<double> survival;
  std::vector<int> at_risk;
  std::vector<int> events;

  /// Step function value at time t (right-continuous, 1 before the first event).
  [[nodiscard]] double survival_at(double t) const {
    double s = 1.0;
    for (std::size_t i = 0; i < times.size() && times[i] <= t; ++i) s = survival[i];
    return s;
  }
};

inline KmCurve kaplan_meier(std::span<const double> times, std::span<const int> events) {
  if (times.empty() || times.size() != events.size()) {
    throw DataError("kaplan_meier: need matching nonempty times and events");
  }
  std::vector<std::size_t> order(times.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });

  KmCurve km;
  double s = 1.0;
  int at_risk = static_cast<int>(times.size());
  std::size_t g = 0;
  while (g < order.size()) {
    std::size_t end = g;
    int deaths = 0;
    while (end < order.size() && times[order[end]] == times[order[g]]) {
      deaths += events[order[end]] == 1 ? 1 : 0;
      ++end;
    }
    if (deaths > 0) {
      s *= static_cast<double>(at_risk - deaths) / at_risk;
      km.times.push_back(times[order[g]]);
      km.survival.push_back(s);
      km.at_risk.push_back(at_risk);
      km.events.push_back(deaths);
    }
    at_risk -= static_cast<int>(end - g);
    g = end;
  }
  return km;
}

inline KmCurve kaplan_meier(std::span<const RiskRecord> records) {
  std::vector<double> t;
  std::vector<int> e;
  for (const auto& r : records) {
    t.push_back(r.time);
    e.push_back(r.event);
  }
  return kaplan_meier(t, e);
}

/// Regularized upper incomplete gamma Q(a, x): series below a + 1, Lentz
/// continued fraction above.
inline double regularized_gamma_q(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw DataError("regularized_gamma_q: need a > 0, x >= 0");
  if (x == 0.0) return 1.0;
  constexpr int kMaxIter = 1000;
  constexpr double kEps = 1e-16;
  const double log_prefix = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a, sum = 1.0 / a, del = sum;
    for (int n = 0; n < kMaxIter; ++n) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * kEps) break;
    }
    return 1.0 - sum * std::exp(log_prefix);
  }
  constexpr double kTiny = std::numeric_limits<double>::min() / kEps;
  double b = x + 1.0 - a, c = 1.0 / kTiny, d = 1.0 / b, h = d;
  for (int i = 1; i <= kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return std::exp(log_prefix) * h;
}

inline double chi_square_sf(double x, double dof) { return regularized_gamma_q(0.5 * dof, 0.5 * x); }

struct LogRankResult {
  double chi2 = 0.0;
  double p = 1.0;
  double observed_a = 0.0;
  double expected_a = 0.0;
};

inline LogRankResult logrank_test(std::span<const RiskRecord> group_a, std::span<const RiskRecord> group_b) {
  if (group_a.empty() || group_b.empty()) throw DataError("logrank_test: both groups must be nonempty");
  std::vector<double> event_times;
  for (auto grp : {group_a, group_b}) {
    for (const auto& r : grp) {
      if (r.event == 1) event_times.push_back(r.time);
    }
  }
  if (event_times.empty()) throw UndefinedMetricError("logrank_test: no events in either group");
  std::sort(event_times.begin(), event_times.end());
  event_times.erase(std::unique(event_times.begin(), event_times.end()), event_times.end());

  auto tally = [](std::span<const RiskRecord> g, double t, int& at_risk, int& deaths) {
    at_risk = 0;
    deaths = 0;
    for (const auto& r : g) {
      if (r.time >= t) ++at_risk;
      if (r.time == t && r.event == 1) ++deaths;
    }
  };

  LogRankResult res;
  double variance = 0.0;
  for (double t : event_times) {
    int n_a = 0, d_a = 0, n_b = 0, d_b = 0;
    tally(group_a, t, n_a, d_a);
    tally(group_b, t, n_b, d_b);
    const double n = n_a + n_b, d = d_a + d_b;
    res.observed_a += d_a;
    res.expected_a += d * n_a / n;
    if (n > 1.0) variance += static_cast<double>(n_a) * n_b * d * (n - d) / (n * n * (n - 1.0));
  }
  const double diff = res.observed_a - res.expected_a;
  if (variance > 0.0) {
    res.chi2 = diff * diff / variance;
    res.p = chi_square_sf(res.chi2, 1.0);
  }
  return res;
}

struct RiskGroups {
  std::vector<RiskRecord> high;
  std::vector<RiskRecord> low;
  double median = 0.0;
};

/// risk > median -> high, otherwise low.
inline RiskGroups stratify_by_median(std::span<const RiskRecord> records) {
  if (records.size() < 2) throw DataError("stratify_by_median: need at least two records");
  std::vector<double> r;
  for (const auto& rec : records) r.push_back(rec.risk);
  std::sort(r.begin(), r.end());
  const std::size_t m = r.size() / 2;
  RiskGroups g;
  g.median = r.size() % 2 == 1 ? r[m] : 0.5 * (r[m - 1] + r[m]);
  for (const auto& rec : records) (rec.risk > g.median ? g.high : g.low).push_back(rec);
  if (g.high.empty() || g.low.empty()) throw DataError("stratify_by_median: degenerate split (all risks equal)");
  return g;
}

}  // namespace deref
