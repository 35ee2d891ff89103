#pragma once

// Dense mixture of experts: softmax gate over N experts, each expert a
// two-layer ReLU network, gate-weighted outputs concatenated in expert order,
// then a sigmoid hazard head.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "deref/errors.hpp"
#include "deref/tensor.hpp"

namespace deref {

struct Expert {
  Linear fc1;  // F*C2 -> C2
  Linear fc2;  // C2 -> C2

  Expert() = default;
  Expert(std::size_t in, std::size_t c2) : fc1(in, c2), fc2(c2, c2) {}

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    Linear::visit(self.fc1, prefix + ".fc1", f);
    Linear::visit(self.fc2, prefix + ".fc2", f);
  }
};

struct MoeParams {
  Tensor gate;                 // (F*C2) x N
  std::vector<Expert> experts;
  Linear head;                 // (N*C2) -> n_bins

  MoeParams() = default;
  MoeParams(std::size_t fused_dim, std::size_t c2, std::size_t n_experts, std::size_t n_bins)
      : gate(fused_dim, n_experts), head(n_experts * c2, n_bins) {
    if (n_experts == 0) throw ConfigError("MoE needs at least one expert");
    experts.assign(n_experts, Expert(fused_dim, c2));
  }

  [[nodiscard]] std::size_t n_experts() const { return experts.size(); }

  template <class Rng>
  void init(Rng& rng) {
    init_uniform(gate, gate.rows, rng);
    for (auto& e : experts) {
      e.fc1.init_uniform(rng);
      e.fc2.init_uniform(rng);
    }
    head.init_uniform(rng);
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".gate", self.gate);
    for (std::size_t i = 0; i < self.experts.size(); ++i) {
      Expert::visit(self.experts[i], prefix + ".expert" + std::to_string(i), f);
    }
    Linear::visit(self.head, prefix + ".head", f);
  }
};

using GateWeights = Vec;

/// softmax(V_fusion W).
inline GateWeights gate(std::span<const double> v_fusion, const Tensor& w) {
  Vec logits(w.cols, 0.0);
  gemv_acc(v_fusion, w, logits);
  softmax_inplace<double>(logits);
  return logits;
}

struct ExpertCache {
  Vec hidden;  // post-ReLU
  Vec out;
};

inline Vec expert_forward(std::span<const double> v_fusion, const Expert& e, ExpertCache* cache = nullptr) {
  Vec h = e.fc1.forward(v_fusion);
  for (auto& x : h) x = x > 0.0 ? x : 0.0;
  Vec out = e.fc2.forward(h);
  if (cache) {
    cache->hidden = std::move(h);
    cache->out = out;
  }
  return out;
}

inline void expert_backward(std::span<const double> v_fusion, const Expert& e, const ExpertCache& cache,
                            std::span<const double> d_out, Expert& grad, std::span<double> d_fusion) {
  Vec d_hidden(cache.hidden.size(), 0.0);
  e.fc2.backward(cache.hidden, d_out, grad.fc2, d_hidden);
  for (std::size_t i = 0; i < d_hidden.size(); ++i) {
    if (cache.hidden[i] <= 0.0) d_hidden[i] = 0.0;
  }
  e.fc1.backward(v_fusion, d_hidden, grad.fc1, d_fusion);
}

struct MoeCache {
  GateWeights gates;
  std::vector<ExpertCache> experts;
};

/// Concat_i(g_i * E_i(V_fusion)), length N * C2.
inline Vec moe_fuse(std::span<const double> v_fusion, const MoeParams& p, MoeCache* cache = nullptr) {
  if (v_fusion.size() != p.gate.rows) {
    throw DimensionError("moe_fuse: fused vector length " + std::to_string(v_fusion.size()) + " != gate input " +
                         std::to_string(p.gate.rows));
  }
  GateWeights g = gate(v_fusion, p.gate);
  std::vector<ExpertCache> caches(p.n_experts());
  Vec out;
  for (std::size_t i = 0; i < p.n_experts(); ++i) {
    const Vec e = expert_forward(v_fusion, p.experts[i], &caches[i]);
    for (double x : e) out.push_back(g[i] * x);
  }
  if (cache) {
    cache->gates = std::move(g);
    cache->experts = std::move(caches);
  }
  return out;
}

inline void moe_fuse_backward(std::span<const double> v_fusion, const MoeParams& p, const MoeCache& cache,
                              std::span<const double> d_out, MoeParams& grad, std::span<double> d_fusion) {
  const std::size_t n = p.n_experts();
  Vec d_gates(n, 0.0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e_out = cache.experts[i].out;
    Vec d_e(e_out.size());
    double dg = 0.0;
    for (std::size_t j = 0; j < e_out.size(); ++j) {
      dg += e_out[j] * d_out[offset + j];
      d_e[j] = cache.gates[i] * d_out[offset + j];
    }
    d_gates[i] = dg;
    expert_backward(v_fusion, p.experts[i], cache.experts[i], d_e, grad.experts[i], d_fusion);
    offset += e_out.size();
  }
  const Vec d_logits = softmax_backward(cache.gates, d_gates);
  outer_acc(v_fusion, d_logits, grad.gate);
  gemv_t_acc(p.gate, d_logits, d_fusion);
}

/// sigmoid(V head.W + head.b), one hazard per time bin.
inline Vec predict_hazards(std::span<const double> v_expert, const Linear& head) {
  Vec h = head.forward(v_expert);
  for (auto& x : h) x = sigmoid(x);
  return h;
}

/// d_hazards -> parameter grads and dL/dV.
inline void predict_hazards_backward(std::span<const double> v_expert, const Linear& head,
                                     std::span<const double> hazards, std::span<const double> d_hazards,
                                     Linear& grad, std::span<double> d_input) {
  Vec d_logits(hazards.size());
  for (std::size_t i = 0; i < hazards.size(); ++i) d_logits[i] = d_hazards[i] * hazards[i] * (1.0 - hazards[i]);
  head.backward(v_expert, d_logits, grad, d_input);
}

}  // namespace deref
