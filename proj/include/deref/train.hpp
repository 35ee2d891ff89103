#pragma once

// Optimization and evaluation harness: Adam with decoupled weight decay,
// seeded mini-batch training, stratified k-fold cross-validation, ablation
// runs, and a central-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <future>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "deref/datasets.hpp"
#include "deref/errors.hpp"
#include "deref/eval.hpp"
#include "deref/model.hpp"
#include "deref/survival.hpp"

namespace deref {

namespace detail {

template <class P>
auto tensor_list(P& params) {
  using T = std::conditional_t<std::is_const_v<P>, const Tensor*, Tensor*>;
  std::vector<T> out;
  ModelParams::visit(params, [&](const std::string&, auto& t) { out.push_back(&t); });
  return out;
}

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace detail

struct AdamOptions {
  double learning_rate = 5e-4;
  double weight_decay = 1e-5;  // decoupled: p -= lr * wd * p
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const ModelParams& like, AdamOptions opts) : opts_(opts), m_(like.zeros_like()), v_(like.zeros_like()) {}

  void step(ModelParams& params, const ModelParams& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    auto p = detail::tensor_list(params);
    auto g = detail::tensor_list(grads);
    auto m = detail::tensor_list(m_);
    auto v = detail::tensor_list(v_);
    for (std::size_t k = 0; k < p.size(); ++k) {
      auto& pd = p[k]->data;
      const auto& gd = g[k]->data;
      auto& md = m[k]->data;
      auto& vd = v[k]->data;
      for (std::size_t i = 0; i < pd.size(); ++i) {
        md[i] = opts_.beta1 * md[i] + (1.0 - opts_.beta1) * gd[i];
        vd[i] = opts_.beta2 * vd[i] + (1.0 - opts_.beta2) * gd[i] * gd[i];
        const double update = (md[i] / bc1) / (std::sqrt(vd[i] / bc2) + opts_.eps);
        pd[i] -= opts_.learning_rate * (update + opts_.weight_decay * pd[i]);
      }
    }
  }

  [[nodiscard]] long steps() const { return t_; }

 private:
  AdamOptions opts_;
  ModelParams m_, v_;
  long t_ = 0;
};

struct EpochStats {
  double l_surv = 0.0;
  double l_dis = 0.0;
  double total = 0.0;
  int clamp_events = 0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  std::vector<double> fold_c_index;
};

struct TrainResult {
  ModelParams params;
  TrainHistory history;
};

/// Checks that cfg matches the cohort (token dim, bin count) before any work.
inline void check_compatible(const Cohort& cohort, const TrainConfig& cfg) {
  cfg.validate();
  if (!cohort.binned()) throw DataError("cohort is not binned; run assign_time_bins first");
  if (*cohort.n_bins != cfg.n_bins) {
    throw ConfigError("config n_bins=" + std::to_string(cfg.n_bins) + " but cohort has " +
                      std::to_string(*cohort.n_bins) + " bins");
  }
  for (const auto& p : cohort.patients) {
    if (p.tokens_m1.cols != cfg.c0 || p.tokens_m2.cols != cfg.c0) {
      throw ConfigError("patient " + p.id + " token dim does not match config C0=" + std::to_string(cfg.c0));
    }
  }
}

/// Copy of cfg with the cohort-derived fields (C0, n_bins) filled in.
inline TrainConfig configured_for(const Cohort& cohort, TrainConfig cfg) {
  if (cohort.patients.empty()) throw DataError("cohort is empty");
  cfg.c0 = cohort.token_dim();
  if (cohort.n_bins) cfg.n_bins = *cohort.n_bins;
  return cfg;
}

inline std::uint64_t init_seed(const TrainConfig& cfg) { return mix_seed(cfg.seed, 0x1A17); }

/// Minimizes mean(L_surv + alpha L_dis) over mini-batches; one segment draw per step.
inline TrainResult train_model(const Cohort& cohort, const TrainConfig& cfg) {
  check_compatible(cohort, cfg);
  if (cohort.patients.empty()) throw DataError("train_model: empty cohort");
  TrainResult result{ModelParams::initialize(cfg, init_seed(cfg)), {}};
  ModelParams grads = result.params.zeros_like();
  Adam adam(result.params, AdamOptions{cfg.learning_rate, cfg.weight_decay});
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x5EED));

  const std::size_t n = cohort.size();
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats stats;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      const ReorgPlan plan = select_plan(cfg, Mode::train, rng);
      ModelParams::visit(grads, [](const std::string&, Tensor& t) { t.fill(0.0); });
      const double weight = 1.0 / static_cast<double>(end - start);
      for (std::size_t k = start; k < end; ++k) {
        SampleLoss loss;
        try {
          loss = sample_loss(cohort.patients[order[k]], result.params, cfg, plan, &grads, weight);
        } catch (const NumericError& e) {
          throw TrainingError("epoch " + std::to_string(epoch) + ", patient " + cohort.patients[order[k]].id + ": " +
                              e.what());
        }
        if (!std::isfinite(loss.l_surv)) {
          throw TrainingError("non-finite L_surv at epoch " + std::to_string(epoch) + ", patient " +
                              cohort.patients[order[k]].id);
        }
        if (!std::isfinite(loss.l_dis)) {
          throw TrainingError("non-finite L_dis at epoch " + std::to_string(epoch) + ", patient " +
                              cohort.patients[order[k]].id);
        }
        stats.l_surv += loss.l_surv;
        stats.l_dis += loss.l_dis;
        stats.total += loss.total;
        stats.clamp_events += loss.clamp_events;
      }
      adam.step(result.params, grads);
    }
    stats.l_surv /= static_cast<double>(n);
    stats.l_dis /= static_cast<double>(n);
    stats.total /= static_cast<double>(n);
    result.history.epochs.push_back(stats);
  }
  return result;
}

/// Evaluation-mode forward for every patient.
inline std::vector<ForwardResult> predict(const Cohort& cohort, const ModelParams& params, const TrainConfig& cfg) {
  const ReorgPlan plan = eval_plan(cfg);
  std::vector<ForwardResult> out;
  out.reserve(cohort.size());
  for (const auto& p : cohort.patients) out.push_back(forward(p, params, cfg, plan));
  return out;
}

inline std::vector<RiskRecord> risk_records(const Cohort& cohort, const ModelParams& params, const TrainConfig& cfg) {
  const auto preds = predict(cohort, params, cfg);
  std::vector<RiskRecord> out;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    out.push_back(RiskRecord{risk_score(preds[i].hazards), cohort.patients[i].time, cohort.patients[i].event});
  }
  return out;
}

/// Stratified by event flag: each stratum is shuffled and dealt round-robin
/// with one running counter, so fold sizes differ by at most one.
inline std::vector<int> assign_folds(const Cohort& cohort, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("cross-validation needs k >= 2");
  if (cohort.size() < static_cast<std::size_t>(k)) {
    throw ConfigError("cohort of size " + std::to_string(cohort.size()) + " cannot be split into " +
                      std::to_string(k) + " folds");
  }
  std::mt19937_64 rng(mix_seed(seed, 0xF01D));
  std::vector<int> folds(cohort.size(), -1);
  std::size_t counter = 0;
  for (int stratum : {1, 0}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
      if (cohort.patients[i].event == stratum) idx.push_back(i);
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i : idx) folds[i] = static_cast<int>(counter++ % static_cast<std::size_t>(k));
  }
  return folds;
}

struct FoldMetrics {
  int fold = 0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  double c_index = detail::kNaN;
  double chi2 = detail::kNaN;
  double p = detail::kNaN;
  bool flagged = false;  // C-index undefined; excluded from the mean
  std::string note;
};

struct CvResult {
  Ablation variant = Ablation::none;
  std::uint64_t seed = 0;
  std::vector<FoldMetrics> folds;
  std::vector<TrainHistory> histories;
  double mean = detail::kNaN;
  double std = detail::kNaN;  // sample standard deviation over unflagged folds
  std::size_t folds_used = 0;
  std::vector<std::string> warnings;
};

struct CvOptions {
  int k = 5;
  bool parallel = false;  // train folds on worker threads
};

namespace detail {

inline Cohort subset(const Cohort& cohort, const std::vector<int>& folds, int fold, bool want_fold) {
  Cohort out;
  out.n_bins = cohort.n_bins;
  out.bin_edges = cohort.bin_edges;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    if ((folds[i] == fold) == want_fold) out.patients.push_back(cohort.patients[i]);
  }
  return out;
}

struct FoldOutcome {
  FoldMetrics metrics;
  TrainHistory history;
};

inline FoldOutcome run_fold(const Cohort& cohort, const std::vector<int>& folds, int fold, const TrainConfig& cfg) {
  const Cohort train = subset(cohort, folds, fold, false);
  const Cohort val = subset(cohort, folds, fold, true);
  TrainConfig fold_cfg = cfg;
  fold_cfg.seed = mix_seed(cfg.seed, 100 + static_cast<std::uint64_t>(fold));

  FoldOutcome out;
  out.metrics.fold = fold;
  out.metrics.n_train = train.size();
  out.metrics.n_val = val.size();
  TrainResult trained = train_model(train, fold_cfg);
  const auto records = risk_records(val, trained.params, fold_cfg);
  try {
    out.metrics.c_index = concordance_index(records);
  } catch (const UndefinedMetricError& e) {
    out.metrics.flagged = true;
    out.metrics.note = e.what();
  }
  try {
    const auto groups = stratify_by_median(records);
    const auto lr = logrank_test(groups.low, groups.high);
    out.metrics.chi2 = lr.chi2;
    out.metrics.p = lr.p;
  } catch (const Error&) {
    // log-rank undefined for this fold; chi2/p stay NaN
  }
  trained.history.fold_c_index.push_back(out.metrics.c_index);
  out.history = std::move(trained.history);
  return out;
}

}  // namespace detail

inline CvResult cross_validate(const Cohort& cohort, const TrainConfig& cfg, const CvOptions& opts = {}) {
  check_compatible(cohort, cfg);
  const std::vector<int> folds = assign_folds(cohort, opts.k, cfg.seed);

  std::vector<detail::FoldOutcome> outcomes(static_cast<std::size_t>(opts.k));
  if (opts.parallel) {
    std::vector<std::future<detail::FoldOutcome>> jobs;
    for (int f = 0; f < opts.k; ++f) {
      jobs.push_back(std::async(std::launch::async, [&, f] { return detail::run_fold(cohort, folds, f, cfg); }));
    }
    for (int f = 0; f < opts.k; ++f) outcomes[static_cast<std::size_t>(f)] = jobs[static_cast<std::size_t>(f)].get();
  } else {
    for (int f = 0; f < opts.k; ++f) outcomes[static_cast<std::size_t>(f)] = detail::run_fold(cohort, folds, f, cfg);
  }

  CvResult res;
  res.variant = cfg.ablation;
  res.seed = cfg.seed;
  std::vector<double> used;
  for (auto& o : outcomes) {
    if (o.metrics.flagged) {
      res.warnings.push_back("fold " + std::to_string(o.metrics.fold) + " excluded: " + o.metrics.note);
    } else {
      used.push_back(o.metrics.c_index);
    }
    res.folds.push_back(o.metrics);
    res.histories.push_back(std::move(o.history));
  }
  res.folds_used = used.size();
  if (!used.empty()) {
    res.mean = std::accumulate(used.begin(), used.end(), 0.0) / static_cast<double>(used.size());
    double ss = 0.0;
    for (double c : used) ss += (c - res.mean) * (c - res.mean);
    res.std = used.size() > 1 ? std::sqrt(ss / static_cast<double>(used.size() - 1)) : 0.0;
  }
  return res;
}

/// Cross-validation of one ablation variant; same result schema as cross_validate.
inline CvResult run_ablation(const Cohort& cohort, Ablation variant, TrainConfig cfg, const CvOptions& opts = {}) {
  cfg.ablation = variant;
  return cross_validate(cohort, cfg, opts);
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckRow {
  std::string path;
  std::size_t size = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t kink_skips = 0;  // coordinates whose probes straddled a ReLU kink
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double worst = 0.0;
  std::string worst_path;
  std::size_t checked = 0;
  std::size_t kink_skips = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  // Relative error is |a - n| / max(|a|, |n|, denominator_floor).
  double denominator_floor = 1e-6;
  // Test hook: added to the analytic gradient of this path before comparison.
  std::optional<std::string> perturb_path;
  double perturbation = 1e-3;
  // Central differences are meaningless across a ReLU kink. When set, a
  // coordinate whose +step and -step probes leave any expert ReLU in a
  // different on/off state is excluded from the error and counted instead.
  bool skip_kinks = true;
};

/// Mean total loss over the cohort at a fixed plan.
inline double batch_loss(const Cohort& cohort, const ModelParams& params, const TrainConfig& cfg,
                         const ReorgPlan& plan, ModelParams* grads = nullptr) {
  const double w = 1.0 / static_cast<double>(cohort.size());
  double total = 0.0;
  for (const auto& p : cohort.patients) total += w * sample_loss(p, params, cfg, plan, grads, w).total;
  return total;
}

namespace detail {

// Same value as batch_loss, plus the on/off state of every expert ReLU unit.
inline double probe_loss(const Cohort& cohort, const ModelParams& params, const TrainConfig& cfg, const ReorgPlan& plan,
                         std::vector<char>& relu_on) {
  relu_on.clear();
  const double w = 1.0 / static_cast<double>(cohort.size());
  double total = 0.0;
  for (const auto& p : cohort.patients) {
    ForwardCache cache;
    const ForwardResult fwd = forward(p, params, cfg, plan, &cache);
    const double l_surv = nll_loss(fwd.hazards, label_of(p)).value;
    total += w * total_loss(l_surv, decoupling_loss(fwd.bundle, cfg.loss_options()), cfg.alpha);
    for (const auto& e : cache.moe.experts) {
      for (double h : e.hidden) relu_on.push_back(h > 0.0 ? 1 : 0);
    }
  }
  return total;
}

}  // namespace detail

inline GradCheckReport gradient_check(const Cohort& cohort, const ModelParams& params, const TrainConfig& cfg,
                                      const ReorgPlan& plan, const GradCheckOptions& opts = {}) {
  check_compatible(cohort, cfg);
  ModelParams analytic = params.zeros_like();
  batch_loss(cohort, params, cfg, plan, &analytic);

  ModelParams probe = params;
  GradCheckReport report;
  std::vector<std::pair<std::string, Tensor*>> probe_tensors;
  ModelParams::visit(probe, [&](const std::string& path, Tensor& t) { probe_tensors.emplace_back(path, &t); });
  std::vector<const Tensor*> analytic_tensors = detail::tensor_list(std::as_const(analytic));

  std::vector<char> relu_up, relu_down;
  for (std::size_t k = 0; k < probe_tensors.size(); ++k) {
    auto& [path, tensor] = probe_tensors[k];
    GradCheckRow row{path, tensor->size(), 0.0, 0.0, 0};
    const double bump = opts.perturb_path && *opts.perturb_path == path ? opts.perturbation : 0.0;
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      const double saved = tensor->data[i];
      tensor->data[i] = saved + opts.step;
      const double up = detail::probe_loss(cohort, probe, cfg, plan, relu_up);
      tensor->data[i] = saved - opts.step;
      const double down = detail::probe_loss(cohort, probe, cfg, plan, relu_down);
      tensor->data[i] = saved;
      if (opts.skip_kinks && relu_up != relu_down) {
        ++row.kink_skips;
        continue;
      }
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = analytic_tensors[k]->data[i] + bump;
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opts.denominator_floor});
      row.max_abs_error = std::max(row.max_abs_error, abs_err);
      row.max_rel_error = std::max(row.max_rel_error, rel);
    }
    report.checked += row.size - row.kink_skips;
    report.kink_skips += row.kink_skips;
    if (report.rows.empty() || row.max_rel_error > report.worst) {
      report.worst = row.max_rel_error;
      report.worst_path = path;
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

/// Small-configuration check: C1 = C2 = 8, N = 4, four bins, a tiny synthetic
/// cohort and freshly initialized parameters, all derived from seed.
inline TrainConfig small_check_config(Ablation ablation = Ablation::none) {
  TrainConfig cfg;
  cfg.c0 = 4;
  cfg.c1 = 8;
  cfg.c2 = 8;
  cfg.n_experts = 4;
  cfg.n_bins = 4;
  cfg.segments = {1, 2, 4, 8};
  cfg.ablation = ablation;
  return cfg;
}

inline Cohort small_check_cohort(std::uint64_t seed, std::size_t c0, int n_bins, int n_patients = 8) {
  SynthConfig sc;
  sc.n_patients = n_patients;
  sc.token_dim = static_cast<int>(c0);
  sc.tokens_m1 = 3;
  sc.tokens_m2 = 4;
  sc.censor_horizon = std::numeric_limits<double>::infinity();
  sc.seed = seed;
  Cohort c = generate_synthetic_cohort(sc);
  // Alternate censoring so both likelihood branches are exercised.
  for (std::size_t i = 0; i < c.size(); ++i) c.patients[i].event = i % 2 == 0 ? 1 : 0;
  return assign_time_bins(std::move(c), n_bins);
}

inline GradCheckReport gradient_check(const TrainConfig& cfg_small, std::uint64_t seed, std::size_t segment,
                                      const GradCheckOptions& opts = {}) {
  TrainConfig cfg = cfg_small;
  cfg.seed = seed;
  const Cohort cohort = small_check_cohort(seed, cfg.c0, cfg.n_bins);
  const ModelParams params = ModelParams::initialize(cfg, init_seed(cfg));
  const std::size_t s = cfg.ablation == Ablation::no_rfr ? cfg.c2 : segment;
  return gradient_check(cohort, params, cfg, build_plan(cfg.c2, s, cfg.n_features()), opts);
}

}  // namespace deref
