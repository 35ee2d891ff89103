#pragma once

// Feature decoupling: modality-specific heads, regional cross-attention (RCA)
// for the shared/explored features, and the decoupling loss.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deref/errors.hpp"
#include "deref/tensor.hpp"

namespace deref {

// ---------------------------------------------------------------------------
// Modality-specific head: tanh(x W + b)

inline Vec specific_head(std::span<const double> v, const Linear& p) {
  Vec y = p.forward(v);
  for (auto& x : y) x = std::tanh(x);
  return y;
}

/// out is the forward result of specific_head; accumulates into grad and dx.
inline void specific_head_backward(std::span<const double> v, const Linear& p, std::span<const double> out,
                                   std::span<const double> d_out, Linear& grad, std::span<double> dx) {
  Vec d_pre(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) d_pre[i] = d_out[i] * (1.0 - out[i] * out[i]);
  p.backward(v, d_pre, grad, dx);
}

// ---------------------------------------------------------------------------
// Regional cross-attention

struct RcaParams {
  Linear fc1;  // C1 -> C2, applied to modality 1
  Linear fc2;  // C1 -> C2, applied to modality 2

  RcaParams() = default;
  RcaParams(std::size_t c1, std::size_t c2) : fc1(c1, c2), fc2(c1, c2) {}

  template <class Rng>
  void init(Rng& rng) {
    fc1.init_uniform(rng);
    fc2.init_uniform(rng);
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    Linear::visit(self.fc1, prefix + ".fc1", f);
    Linear::visit(self.fc2, prefix + ".fc2", f);
  }
};

struct RcaOptions {
  // Scale attention logits by 1/sqrt(d). Off by default.
  bool scale_logits = false;
};

/// Normalizes every column of m over its rows (max-subtracted).
inline Tensor column_softmax(const Tensor& m) {
  Tensor out = m;
  Vec col(m.rows);
  for (std::size_t c = 0; c < m.cols; ++c) {
    for (std::size_t r = 0; r < m.rows; ++r) col[r] = m(r, c);
    softmax_inplace<double>(col);
    for (std::size_t r = 0; r < m.rows; ++r) out(r, c) = col[r];
  }
  return out;
}

/// M = [v1, v2]^T [v2, v1], shape 2d x 2d.
inline Tensor rca_attention_matrix(std::span<const double> v1, std::span<const double> v2) {
  if (v1.size() != v2.size()) throw DimensionError("rca_attention_matrix: embedding lengths differ");
  const std::size_t d = v1.size();
  Vec left(v1.begin(), v1.end());
  left.insert(left.end(), v2.begin(), v2.end());
  Vec right(v2.begin(), v2.end());
  right.insert(right.end(), v1.begin(), v1.end());
  Tensor m(2 * d, 2 * d);
  for (std::size_t i = 0; i < 2 * d; ++i) {
    for (std::size_t j = 0; j < 2 * d; ++j) m(i, j) = left[i] * right[j];
  }
  return m;
}

struct RcaCache {
  Vec v1, v2;  // FC embeddings
  Vec branch_a, branch_b;
};

namespace detail {

// Each RCA output coordinate is y = sum_i x_i softmax_i(s x_i t) over the 2d
// concatenated entries x with a per-column scalar t. Branch A uses
// x = [v1, v2], t = v2_j (columns of [M_m1m2; M_m2m2]); branch B uses
// x = [v2, v1], t = v1_j (columns of [M_m1m2, M_m1m1]^T).
struct ColumnInputs {
  std::span<const double> x;
  double x_min, x_max;
};

inline ColumnInputs column_inputs(std::span<const double> x) {
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  return {x, *lo, *hi};
}

// Fills probs with softmax_i(s x_i t); the max logit is s t max(x) or s t min(x).
inline double column_probs(const ColumnInputs& in, double st, std::span<double> probs) {
  const double mx = st >= 0.0 ? st * in.x_max : st * in.x_min;
  const double* x = in.x.data();
  double* p = probs.data();
  const std::size_t n = in.x.size();
  double z = 0.0, y = 0.0;
#pragma omp simd reduction(+ : z, y)
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = exp_nonpositive(st * x[i] - mx);
    z += p[i];
    y += x[i] * p[i];
  }
  const double inv = 1.0 / z;
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) p[i] *= inv;
  return y * inv;
}

// dy/dx_i = p_i (1 + s t (x_i - y)),  dy/dt = s sum_i p_i (x_i - y) x_i.
inline void column_backward(const ColumnInputs& in, double t, double s, std::span<double> scratch, double dy,
                            std::span<double> dx, double& dt) {
  const double st = s * t;
  const double y = column_probs(in, st, scratch);
  const double* x = in.x.data();
  const double* p = scratch.data();
  double* g = dx.data();
  const std::size_t n = in.x.size();
  double acc_t = 0.0;
#pragma omp simd reduction(+ : acc_t)
  for (std::size_t i = 0; i < n; ++i) {
    const double centred = p[i] * (x[i] - y);
    g[i] += dy * (p[i] + st * centred);
    acc_t += centred * x[i];
  }
  dt += dy * s * acc_t;
}

}  // namespace detail

/// RCA applied directly to embeddings v1, v2 (the part after the FC layers).
inline Vec rca_from_embeddings(std::span<const double> v1, std::span<const double> v2, const RcaOptions& opts = {},
                               RcaCache* cache = nullptr) {
  if (v1.size() != v2.size()) throw DimensionError("regional_cross_attention: embedding lengths differ");
  const std::size_t d = v1.size();
  const double s = opts.scale_logits ? 1.0 / std::sqrt(static_cast<double>(d)) : 1.0;

  Vec a(v1.begin(), v1.end());
  a.insert(a.end(), v2.begin(), v2.end());
  Vec b(v2.begin(), v2.end());
  b.insert(b.end(), v1.begin(), v1.end());
  const auto in_a = detail::column_inputs(a);
  const auto in_b = detail::column_inputs(b);

  Vec scratch(2 * d), branch_a(d), branch_b(d), out(d);
  for (std::size_t j = 0; j < d; ++j) {
    branch_a[j] = detail::column_probs(in_a, s * v2[j], scratch);
    branch_b[j] = detail::column_probs(in_b, s * v1[j], scratch);
    out[j] = 0.5 * (branch_a[j] + branch_b[j]);
  }
  if (!all_finite(out)) throw NumericError("regional_cross_attention: non-finite output");
  if (cache) {
    cache->v1.assign(v1.begin(), v1.end());
    cache->v2.assign(v2.begin(), v2.end());
    cache->branch_a = std::move(branch_a);
    cache->branch_b = std::move(branch_b);
  }
  return out;
}

/// Accumulates into dv1, dv2 given dL/dout. Attention columns are recomputed.
inline void rca_from_embeddings_backward(const RcaCache& cache, const RcaOptions& opts, std::span<const double> d_out,
                                         std::span<double> dv1, std::span<double> dv2) {
  const std::size_t d = cache.v1.size();
  const double s = opts.scale_logits ? 1.0 / std::sqrt(static_cast<double>(d)) : 1.0;
  Vec a(cache.v1);
  a.insert(a.end(), cache.v2.begin(), cache.v2.end());
  Vec b(cache.v2);
  b.insert(b.end(), cache.v1.begin(), cache.v1.end());
  const auto in_a = detail::column_inputs(a);
  const auto in_b = detail::column_inputs(b);

  Vec scratch(2 * d), da(2 * d, 0.0), db(2 * d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    const double dy = 0.5 * d_out[j];
    detail::column_backward(in_a, cache.v2[j], s, scratch, dy, da, dv2[j]);
    detail::column_backward(in_b, cache.v1[j], s, scratch, dy, db, dv1[j]);
  }
  for (std::size_t i = 0; i < d; ++i) {
    dv1[i] += da[i] + db[d + i];
    dv2[i] += da[d + i] + db[i];
  }
}

inline Vec regional_cross_attention(std::span<const double> v_m1, std::span<const double> v_m2, const RcaParams& p,
                                    const RcaOptions& opts = {}, RcaCache* cache = nullptr) {
  const Vec v1 = p.fc1.forward(v_m1);
  const Vec v2 = p.fc2.forward(v_m2);
  return rca_from_embeddings(v1, v2, opts, cache);
}

/// Accumulates parameter gradients and dL/dV_m1, dL/dV_m2.
inline void regional_cross_attention_backward(std::span<const double> v_m1, std::span<const double> v_m2,
                                              const RcaParams& p, const RcaOptions& opts, const RcaCache& cache,
                                              std::span<const double> d_out, RcaParams& grad,
                                              std::span<double> d_vm1, std::span<double> d_vm2) {
  const std::size_t d = cache.v1.size();
  Vec dv1(d, 0.0), dv2(d, 0.0);
  rca_from_embeddings_backward(cache, opts, d_out, dv1, dv2);
  p.fc1.backward(v_m1, dv1, grad.fc1, d_vm1);
  p.fc2.backward(v_m2, dv2, grad.fc2, d_vm2);
}

// ---------------------------------------------------------------------------
// Distances

enum class DistanceMetric { MSE, L1, KL, COS };

inline std::string_view to_string(DistanceMetric m) {
  switch (m) {
    case DistanceMetric::MSE: return "mse";
    case DistanceMetric::L1: return "l1";
    case DistanceMetric::KL: return "kl";
    case DistanceMetric::COS: return "cos";
  }
  return "?";
}

inline DistanceMetric parse_distance_metric(std::string_view s) {
  if (s == "mse" || s == "MSE") return DistanceMetric::MSE;
  if (s == "l1" || s == "L1") return DistanceMetric::L1;
  if (s == "kl" || s == "KL") return DistanceMetric::KL;
  if (s == "cos" || s == "COS") return DistanceMetric::COS;
  throw ConfigError("unknown distance metric '" + std::string(s) + "'");
}

/// MSE and L1 are means over coordinates. COS is 1 - cosine similarity, and
/// 1 when either vector is zero. KL is the symmetrized divergence
/// KL(P||Q) + KL(Q||P) between softmax(u) and softmax(v), which reduces to
/// sum_i (P_i - Q_i)(u_i - v_i).
inline double distance(std::span<const double> u, std::span<const double> v, DistanceMetric metric) {
  if (u.size() != v.size() || u.empty()) throw DimensionError("distance: vectors must have equal nonzero length");
  const auto n = static_cast<double>(u.size());
  switch (metric) {
    case DistanceMetric::MSE: {
      double s = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) s += (u[i] - v[i]) * (u[i] - v[i]);
      return s / n;
    }
    case DistanceMetric::L1: {
      double s = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) s += std::abs(u[i] - v[i]);
      return s / n;
    }
    case DistanceMetric::COS: {
      const double nu = l2_norm(u), nv = l2_norm(v);
      if (nu == 0.0 || nv == 0.0) return 1.0;
      double dot = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) dot += u[i] * v[i];
      return 1.0 - dot / (nu * nv);
    }
    case DistanceMetric::KL: {
      const Vec p = softmax<double>(u), q = softmax<double>(v);
      double s = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) s += (p[i] - q[i]) * (u[i] - v[i]);
      return s;
    }
  }
  throw ConfigError("distance: unknown metric");
}

/// Accumulates scale * d distance / du into du and likewise for dv.
inline void distance_backward(std::span<const double> u, std::span<const double> v, DistanceMetric metric,
                              double scale, std::span<double> du, std::span<double> dv) {
  const std::size_t n = u.size();
  const auto nd = static_cast<double>(n);
  switch (metric) {
    case DistanceMetric::MSE:
      for (std::size_t i = 0; i < n; ++i) {
        const double g = scale * 2.0 * (u[i] - v[i]) / nd;
        du[i] += g;
        dv[i] -= g;
      }
      return;
    case DistanceMetric::L1:
      for (std::size_t i = 0; i < n; ++i) {
        const double diff = u[i] - v[i];
        const double g = scale * static_cast<double>((diff > 0) - (diff < 0)) / nd;
        du[i] += g;
        dv[i] -= g;
      }
      return;
    case DistanceMetric::COS: {
      const double nu = l2_norm(u), nv = l2_norm(v);
      if (nu == 0.0 || nv == 0.0) return;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += u[i] * v[i];
      const double cos = dot / (nu * nv);
      for (std::size_t i = 0; i < n; ++i) {
        du[i] -= scale * (v[i] / (nu * nv) - cos * u[i] / (nu * nu));
        dv[i] -= scale * (u[i] / (nu * nv) - cos * v[i] / (nv * nv));
      }
      return;
    }
    case DistanceMetric::KL: {
      const Vec p = softmax<double>(u), q = softmax<double>(v);
      double p_dot = 0.0, q_dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        p_dot += p[i] * (u[i] - v[i]);
        q_dot += q[i] * (u[i] - v[i]);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double delta = u[i] - v[i];
        du[i] += scale * (p[i] * (delta - p_dot) + p[i] - q[i]);
        dv[i] += scale * (q[i] * (q_dot - delta) + q[i] - p[i]);
      }
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// Decoupled bundle and loss

struct DecoupledBundle {
  Vec sp1, sp2, share;
  std::optional<Vec> explore;  // absent under the no-explore ablation

  [[nodiscard]] std::size_t arity() const { return explore ? 4 : 3; }
  [[nodiscard]] std::size_t dim() const { return sp1.size(); }

  /// Features in reorganization order: sp1, sp2, share[, explore].
  [[nodiscard]] std::vector<std::span<const double>> features() const {
    std::vector<std::span<const double>> f{sp1, sp2, share};
    if (explore) f.emplace_back(*explore);
    return f;
  }

  bool operator==(const DecoupledBundle&) const = default;
};

inline constexpr std::string_view kFeatureNames[] = {"sp1", "sp2", "share", "explore"};

struct DecouplingLossOptions {
  DistanceMetric metric = DistanceMetric::MSE;
  // When set, the repulsive term becomes -min(Dis(sp1, sp2), cap).
  std::optional<double> sp_distance_cap;
};

inline double decoupling_loss(const DecoupledBundle& b, const DecouplingLossOptions& opts = {}) {
  const auto m = opts.metric;
  double repulse = distance(b.sp1, b.sp2, m);
  if (opts.sp_distance_cap) repulse = std::min(repulse, *opts.sp_distance_cap);
  double loss = distance(b.sp1, b.share, m) + distance(b.sp2, b.share, m) - repulse;
  if (b.explore) {
    loss += distance(b.sp1, *b.explore, m) + distance(b.sp2, *b.explore, m) + distance(b.share, *b.explore, m);
  }
  return loss;
}

inline DecoupledBundle zeros_like(const DecoupledBundle& b) {
  DecoupledBundle g{Vec(b.sp1.size(), 0.0), Vec(b.sp2.size(), 0.0), Vec(b.share.size(), 0.0), std::nullopt};
  if (b.explore) g.explore = Vec(b.explore->size(), 0.0);
  return g;
}

/// Accumulates scale * dL_dis/d(bundle) into grad (same arity as b).
inline void decoupling_loss_backward(const DecoupledBundle& b, const DecouplingLossOptions& opts, double scale,
                                     DecoupledBundle& grad) {
  const auto m = opts.metric;
  distance_backward(b.sp1, b.share, m, scale, grad.sp1, grad.share);
  distance_backward(b.sp2, b.share, m, scale, grad.sp2, grad.share);
  const bool capped = opts.sp_distance_cap && distance(b.sp1, b.sp2, m) > *opts.sp_distance_cap;
  if (!capped) distance_backward(b.sp1, b.sp2, m, -scale, grad.sp1, grad.sp2);
  if (b.explore) {
    distance_backward(b.sp1, *b.explore, m, scale, grad.sp1, *grad.explore);
    distance_backward(b.sp2, *b.explore, m, scale, grad.sp2, *grad.explore);
    distance_backward(b.share, *b.explore, m, scale, grad.share, *grad.explore);
  }
}

}  // namespace deref
