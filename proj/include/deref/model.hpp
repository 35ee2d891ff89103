#pragma once

// Full pipeline assembly:
//   tokens -> encoders -> {specific heads, RCA share, RCA explore} -> bundle
//          -> reorganize -> dense MoE -> hazard head
// plus the per-sample loss and its hand-derived reverse pass.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "deref/datasets.hpp"
#include "deref/decoupling.hpp"
#include "deref/encoders.hpp"
#include "deref/errors.hpp"
#include "deref/moe.hpp"
#include "deref/reorganize.hpp"
#include "deref/survival.hpp"
#include "deref/tensor.hpp"

namespace deref {

enum class Ablation { none, no_explore, no_rca, no_rfr, no_moe };

inline std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "full";
    case Ablation::no_explore: return "no-explore";
    case Ablation::no_rca: return "no-rca";
    case Ablation::no_rfr: return "no-rfr";
    case Ablation::no_moe: return "no-moe";
  }
  return "?";
}

/// Accepts both dashed and underscored spellings; "none" and "full" are the full model.
inline Ablation parse_ablation(std::string_view s) {
  std::string k(s);
  for (auto& ch : k) {
    if (ch == '_') ch = '-';
  }
  if (k == "none" || k == "full") return Ablation::none;
  if (k == "no-explore") return Ablation::no_explore;
  if (k == "no-rca") return Ablation::no_rca;
  if (k == "no-rfr") return Ablation::no_rfr;
  if (k == "no-moe") return Ablation::no_moe;
  throw ConfigError("unknown ablation variant '" + std::string(s) + "'");
}

struct TrainConfig {
  std::size_t c0 = 16;  // token dim, taken from the cohort
  std::size_t c1 = 256;
  std::size_t c2 = 128;
  int n_bins = 4;
  std::size_t n_experts = 4;
  std::vector<int> segments{2, 8, 16, 32, 64};
  std::optional<int> eval_segment;  // defaults to max(segments)
  double alpha = 1.0;
  double learning_rate = 5e-4;
  double weight_decay = 1e-5;
  int epochs = 30;
  int batch_size = 16;
  std::uint64_t seed = 0;
  DistanceMetric metric = DistanceMetric::MSE;
  Ablation ablation = Ablation::none;
  bool rca_scale_logits = false;
  std::optional<double> sp_distance_cap;

  [[nodiscard]] std::size_t n_features() const { return ablation == Ablation::no_explore ? 3 : 4; }
  [[nodiscard]] std::size_t fused_dim() const { return n_features() * c2; }
  [[nodiscard]] bool has_explore() const { return ablation != Ablation::no_explore; }
  [[nodiscard]] bool has_moe() const { return ablation != Ablation::no_moe; }
  [[nodiscard]] SegmentSet segment_set() const { return SegmentSet(segments, c2); }
  [[nodiscard]] RcaOptions rca_options() const { return RcaOptions{rca_scale_logits}; }
  [[nodiscard]] DecouplingLossOptions loss_options() const { return DecouplingLossOptions{metric, sp_distance_cap}; }

  void validate() const {
    if (c0 == 0 || c1 == 0 || c2 == 0) throw ConfigError("dimensions C0, C1, C2 must be positive");
    if (n_bins < 1) throw ConfigError("n_bins must be >= 1");
    if (n_experts == 0) throw ConfigError("n_experts must be >= 1");
    (void)segment_set();
    if (eval_segment && (*eval_segment < 1 || c2 % static_cast<std::size_t>(*eval_segment) != 0)) {
      throw ConfigError("eval_segment must divide C2");
    }
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  }
};

struct ModelParams {
  EncoderParams encoder_m1, encoder_m2;
  Linear specific_m1, specific_m2;
  RcaParams rca_share;
  std::optional<RcaParams> rca_explore;
  std::optional<MoeParams> moe;
  std::optional<Linear> head;  // fused vector -> hazards when the MoE is ablated

  /// Zero-filled parameters shaped for cfg.
  static ModelParams zeros(const TrainConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.encoder_m1 = EncoderParams(cfg.c0, cfg.c1);
    p.encoder_m2 = EncoderParams(cfg.c0, cfg.c1);
    p.specific_m1 = Linear(cfg.c1, cfg.c2);
    p.specific_m2 = Linear(cfg.c1, cfg.c2);
    p.rca_share = RcaParams(cfg.c1, cfg.c2);
    if (cfg.has_explore()) p.rca_explore = RcaParams(cfg.c1, cfg.c2);
    const auto nb = static_cast<std::size_t>(cfg.n_bins);
    if (cfg.has_moe()) {
      p.moe = MoeParams(cfg.fused_dim(), cfg.c2, cfg.n_experts, nb);
    } else {
      p.head = Linear(cfg.fused_dim(), nb);
    }
    return p;
  }

  /// Uniform(+-1/sqrt(fan_in)) initialization, a pure function of seed.
  static ModelParams initialize(const TrainConfig& cfg, std::uint64_t seed) {
    ModelParams p = zeros(cfg);
    std::mt19937_64 rng(seed);
    p.encoder_m1.init(rng);
    p.encoder_m2.init(rng);
    p.specific_m1.init_uniform(rng);
    p.specific_m2.init_uniform(rng);
    p.rca_share.init(rng);
    if (p.rca_explore) p.rca_explore->init(rng);
    if (p.moe) p.moe->init(rng);
    if (p.head) p.head->init_uniform(rng);
    return p;
  }

  /// Calls f(path, tensor) for every parameter tensor in a fixed order.
  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    EncoderParams::visit(self.encoder_m1, "encoder_m1", f);
    EncoderParams::visit(self.encoder_m2, "encoder_m2", f);
    Linear::visit(self.specific_m1, "specific_m1", f);
    Linear::visit(self.specific_m2, "specific_m2", f);
    RcaParams::visit(self.rca_share, "rca_share", f);
    if (self.rca_explore) RcaParams::visit(*self.rca_explore, "rca_explore", f);
    if (self.moe) MoeParams::visit(*self.moe, "moe", f);
    if (self.head) Linear::visit(*self.head, "head", f);
  }

  [[nodiscard]] std::vector<std::string> paths() const {
    std::vector<std::string> out;
    visit(*this, [&](const std::string& path, const Tensor&) { out.push_back(path); });
    return out;
  }

  Tensor* find(std::string_view path) {
    Tensor* hit = nullptr;
    visit(*this, [&](const std::string& p, Tensor& t) {
      if (p == path) hit = &t;
    });
    return hit;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    visit(*this, [&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  [[nodiscard]] ModelParams zeros_like() const {
    ModelParams z = *this;
    visit(z, [](const std::string&, Tensor& t) { t.fill(0.0); });
    return z;
  }
};

/// Closed-form parameter count for cfg.
///   encoders:  2 (C0 C1 + 2 C1 + 3 C1^2)
///   specific:  2 (C1 C2 + C2)
///   RCA:       R * 2 (C1 C2 + C2), R = 2 (1 without explore)
///   MoE:       F C2 N + N (F C2^2 + 2 C2 + C2^2) + N C2 B + B
///   no MoE:    F C2 B + B
inline std::size_t expected_parameter_count(const TrainConfig& cfg) {
  const std::size_t c0 = cfg.c0, c1 = cfg.c1, c2 = cfg.c2, n = cfg.n_experts, f = cfg.n_features();
  const auto b = static_cast<std::size_t>(cfg.n_bins);
  std::size_t total = 2 * (c0 * c1 + 2 * c1 + 3 * c1 * c1);
  total += 2 * (c1 * c2 + c2);
  total += (cfg.has_explore() ? 2 : 1) * 2 * (c1 * c2 + c2);
  if (cfg.has_moe()) {
    total += f * c2 * n + n * (f * c2 * c2 + 2 * c2 + c2 * c2) + n * c2 * b + b;
  } else {
    total += f * c2 * b + b;
  }
  return total;
}

enum class Mode { train, eval };

/// Segment length policy: no-rfr always uses s = C2 (plain concatenation);
/// evaluation uses a fixed s (eval_segment or max of the set); training draws
/// uniformly from the set.
template <class Rng>
ReorgPlan select_plan(const TrainConfig& cfg, Mode mode, Rng& rng) {
  std::size_t s = cfg.c2;
  if (cfg.ablation != Ablation::no_rfr) {
    if (mode == Mode::train) {
      s = static_cast<std::size_t>(sample_segment_length(cfg.segment_set(), rng));
    } else {
      s = static_cast<std::size_t>(cfg.eval_segment.value_or(cfg.segment_set().max()));
    }
  }
  return build_plan(cfg.c2, s, cfg.n_features());
}

inline ReorgPlan eval_plan(const TrainConfig& cfg) {
  std::mt19937_64 unused(0);
  return select_plan(cfg, Mode::eval, unused);
}

struct ForwardResult {
  Vec hazards;
  DecoupledBundle bundle;
  GateWeights gate_weights;  // empty when the MoE is ablated
};

struct ForwardCache {
  Vec v_m1, v_m2;
  EncoderCache enc_m1, enc_m2;
  RcaCache rca_share, rca_explore;
  Vec fused;
  MoeCache moe;
  Vec expert_out;
};

namespace detail {

// no-rca replacement: mean of the two FC embeddings.
inline Vec mean_embedding(std::span<const double> v_m1, std::span<const double> v_m2, const RcaParams& p) {
  Vec a = p.fc1.forward(v_m1);
  const Vec b = p.fc2.forward(v_m2);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.5 * (a[i] + b[i]);
  return a;
}

inline void mean_embedding_backward(std::span<const double> v_m1, std::span<const double> v_m2, const RcaParams& p,
                                    std::span<const double> d_out, RcaParams& grad, std::span<double> d_vm1,
                                    std::span<double> d_vm2) {
  Vec half(d_out.begin(), d_out.end());
  for (auto& x : half) x *= 0.5;
  p.fc1.backward(v_m1, half, grad.fc1, d_vm1);
  p.fc2.backward(v_m2, half, grad.fc2, d_vm2);
}

}  // namespace detail

inline ForwardResult forward(const PatientRecord& patient, const ModelParams& params, const TrainConfig& cfg,
                             const ReorgPlan& plan, ForwardCache* cache = nullptr) {
  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.v_m1 = encode_modality(patient.tokens_m1, params.encoder_m1, &c.enc_m1);
  c.v_m2 = encode_modality(patient.tokens_m2, params.encoder_m2, &c.enc_m2);

  ForwardResult out;
  out.bundle.sp1 = specific_head(c.v_m1, params.specific_m1);
  out.bundle.sp2 = specific_head(c.v_m2, params.specific_m2);
  const auto opts = cfg.rca_options();
  if (cfg.ablation == Ablation::no_rca) {
    out.bundle.share = detail::mean_embedding(c.v_m1, c.v_m2, params.rca_share);
    if (params.rca_explore) out.bundle.explore = detail::mean_embedding(c.v_m1, c.v_m2, *params.rca_explore);
  } else {
    out.bundle.share = regional_cross_attention(c.v_m1, c.v_m2, params.rca_share, opts, &c.rca_share);
    if (params.rca_explore) {
      out.bundle.explore = regional_cross_attention(c.v_m1, c.v_m2, *params.rca_explore, opts, &c.rca_explore);
    }
  }

  c.fused = reorganize(out.bundle, plan);
  if (params.moe) {
    c.expert_out = moe_fuse(c.fused, *params.moe, &c.moe);
    out.gate_weights = c.moe.gates;
    out.hazards = predict_hazards(c.expert_out, params.moe->head);
  } else {
    out.hazards = predict_hazards(c.fused, *params.head);
  }
  return out;
}

/// Forward in training mode with a segment length drawn from rng.
template <class Rng>
ForwardResult forward(const PatientRecord& patient, const ModelParams& params, const TrainConfig& cfg, Rng& rng) {
  return forward(patient, params, cfg, select_plan(cfg, Mode::train, rng));
}

/// Reverse pass. d_hazards is dL/dhazards, d_bundle holds any loss gradient
/// applied directly to the decoupled features. Gradients accumulate into grads.
inline void backward(const PatientRecord& patient, const ModelParams& params, const TrainConfig& cfg,
                     const ReorgPlan& plan, const ForwardCache& c, const ForwardResult& fwd,
                     std::span<const double> d_hazards, DecoupledBundle d_bundle, ModelParams& grads) {
  Vec d_fused(c.fused.size(), 0.0);
  if (params.moe) {
    Vec d_expert(c.expert_out.size(), 0.0);
    predict_hazards_backward(c.expert_out, params.moe->head, fwd.hazards, d_hazards, grads.moe->head, d_expert);
    moe_fuse_backward(c.fused, *params.moe, c.moe, d_expert, *grads.moe, d_fused);
  } else {
    predict_hazards_backward(c.fused, *params.head, fwd.hazards, d_hazards, *grads.head, d_fused);
  }
  reorganize_backward(d_fused, plan, d_bundle);

  Vec d_vm1(c.v_m1.size(), 0.0), d_vm2(c.v_m2.size(), 0.0);
  specific_head_backward(c.v_m1, params.specific_m1, fwd.bundle.sp1, d_bundle.sp1, grads.specific_m1, d_vm1);
  specific_head_backward(c.v_m2, params.specific_m2, fwd.bundle.sp2, d_bundle.sp2, grads.specific_m2, d_vm2);
  const auto opts = cfg.rca_options();
  if (cfg.ablation == Ablation::no_rca) {
    detail::mean_embedding_backward(c.v_m1, c.v_m2, params.rca_share, d_bundle.share, grads.rca_share, d_vm1, d_vm2);
    if (params.rca_explore) {
      detail::mean_embedding_backward(c.v_m1, c.v_m2, *params.rca_explore, *d_bundle.explore, *grads.rca_explore,
                                      d_vm1, d_vm2);
    }
  } else {
    regional_cross_attention_backward(c.v_m1, c.v_m2, params.rca_share, opts, c.rca_share, d_bundle.share,
                                      grads.rca_share, d_vm1, d_vm2);
    if (params.rca_explore) {
      regional_cross_attention_backward(c.v_m1, c.v_m2, *params.rca_explore, opts, c.rca_explore, *d_bundle.explore,
                                        *grads.rca_explore, d_vm1, d_vm2);
    }
  }
  encode_modality_backward(patient.tokens_m1, params.encoder_m1, c.enc_m1, d_vm1, grads.encoder_m1);
  encode_modality_backward(patient.tokens_m2, params.encoder_m2, c.enc_m2, d_vm2, grads.encoder_m2);
}

inline SurvivalLabel label_of(const PatientRecord& p) {
  if (!p.bin) throw DataError("patient " + p.id + " has no time bin; bin the cohort first");
  return SurvivalLabel{*p.bin, p.censored()};
}

struct SampleLoss {
  double l_surv = 0.0;
  double l_dis = 0.0;
  double total = 0.0;
  int clamp_events = 0;
};

/// Loss for one patient; when grads is non-null, accumulates weight * dL/dparams.
inline SampleLoss sample_loss(const PatientRecord& patient, const ModelParams& params, const TrainConfig& cfg,
                              const ReorgPlan& plan, ModelParams* grads = nullptr, double weight = 1.0) {
  ForwardCache cache;
  const ForwardResult fwd = forward(patient, params, cfg, plan, &cache);
  const SurvivalLabel label = label_of(patient);
  const auto nll = nll_loss(fwd.hazards, label);
  SampleLoss out;
  out.l_surv = nll.value;
  out.clamp_events = nll.clamp_events;
  out.l_dis = decoupling_loss(fwd.bundle, cfg.loss_options());
  out.total = total_loss(out.l_surv, out.l_dis, cfg.alpha);
  if (grads) {
    Vec d_h = nll_loss_grad(fwd.hazards, label);
    for (auto& g : d_h) g *= weight;
    DecoupledBundle d_bundle = zeros_like(fwd.bundle);
    if (cfg.alpha != 0.0) decoupling_loss_backward(fwd.bundle, cfg.loss_options(), weight * cfg.alpha, d_bundle);
    backward(patient, params, cfg, plan, cache, fwd, d_h, std::move(d_bundle), *grads);
  }
  return out;
}

}  // namespace deref
