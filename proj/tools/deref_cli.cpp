// Command-line front end: cohort synthesis, training, cross-validation,
// ablations, evaluation, plots and embedding export.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "deref/deref.hpp"

namespace fs = std::filesystem;
using namespace deref;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;

struct Options {
  SynthConfig synth;
  int synth_bins = 4;

  TrainConfig train;
  std::string metric = "mse";
  std::string ablation = "full";
  std::vector<std::string> variants{"full", "no-explore", "no-rca", "no-rfr", "no-moe"};
  int eval_segment = 0;
  double sp_cap = 0.0;

  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;
  int folds = 5;
  bool parallel = false;

  std::string cohort;
  std::string checkpoint;
  std::string risk;
  std::string out;
  std::string history;
  std::string points;

  int check_seeds = 20;
  std::vector<int> check_segments{1, 2, 4, 8};
  double tolerance = 1e-4;
};

void add_seed_out(CLI::App* cmd, Options& o, const std::string& out_help, bool out_required = true) {
  cmd->add_option("--seed", o.seed, "Random seed")->capture_default_str();
  auto* opt = cmd->add_option("--out", o.out, out_help);
  if (out_required) opt->required();
}

void add_cohort(CLI::App* cmd, Options& o) {
  cmd->add_option("--cohort", o.cohort, "Cohort JSON produced by synth")->required();
}

void add_train_flags(CLI::App* cmd, Options& o) {
  auto& t = o.train;
  cmd->add_option("--c1", t.c1, "Encoder width C1")->capture_default_str();
  cmd->add_option("--c2", t.c2, "Decoupled feature width C2")->capture_default_str();
  cmd->add_option("--experts", t.n_experts, "Number of experts N")->capture_default_str();
  cmd->add_option("--segments", t.segments, "Segment-length set S")->delimiter(',')->capture_default_str();
  cmd->add_option("--eval-segment", o.eval_segment, "Segment length at evaluation (0 = max of S)");
  cmd->add_option("--alpha", t.alpha, "Weight of the decoupling loss")->capture_default_str();
  cmd->add_option("--lr", t.learning_rate, "Adam learning rate")->capture_default_str();
  cmd->add_option("--wd", t.weight_decay, "Decoupled weight decay")->capture_default_str();
  cmd->add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--batch-size", t.batch_size, "Patients per optimizer step")->capture_default_str();
  cmd->add_option("--metric", o.metric, "Distance for the decoupling loss: mse, l1, kl, cos")->capture_default_str();
  cmd->add_flag("--rca-scale", t.rca_scale_logits, "Scale attention logits by 1/sqrt(d)");
  cmd->add_option("--sp-cap", o.sp_cap, "Cap on the sp1/sp2 repulsion term (0 = none)");
}

TrainConfig finish_train_config(const Options& o, const Cohort& cohort, const std::string& ablation) {
  TrainConfig cfg = configured_for(cohort, o.train);
  cfg.seed = o.seed;
  cfg.metric = parse_distance_metric(o.metric);
  cfg.ablation = parse_ablation(ablation);
  if (o.eval_segment > 0) cfg.eval_segment = o.eval_segment;
  if (o.sp_cap > 0) cfg.sp_distance_cap = o.sp_cap;
  cfg.validate();
  return cfg;
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string summary_line(const CvResult& r) {
  std::ostringstream os;
  os << "variant=" << to_string(r.variant) << " seed=" << r.seed << " C-index " << fixed(r.mean) << "±"
     << fixed(r.std) << " (" << r.folds_used << "/" << r.folds.size() << " folds)";
  return os.str();
}

void report_warnings(const CvResult& r) {
  for (const auto& w : r.warnings) std::cerr << "warning: " << to_string(r.variant) << ": " << w << '\n';
}

Checkpoint load_matching(const Options& o, Cohort& cohort) {
  Checkpoint ck = load_checkpoint(o.checkpoint);
  cohort = load_cohort(o.cohort);
  check_compatible(cohort, ck.config);
  return ck;
}

std::vector<std::string> ids_of(const Cohort& c) {
  std::vector<std::string> ids;
  for (const auto& p : c.patients) ids.push_back(p.id);
  return ids;
}

// ---------------------------------------------------------------------------

int cmd_synth(const Options& o) {
  SynthConfig sc = o.synth;
  sc.seed = o.seed;
  sc.validate();
  Cohort c = assign_time_bins(generate_synthetic_cohort(sc), o.synth_bins);
  save_cohort(c, o.out);
  std::size_t events = 0;
  for (const auto& p : c.patients) events += static_cast<std::size_t>(p.event);
  std::cout << "patients " << c.size() << '\n'
            << "event_rate " << fixed(static_cast<double>(events) / static_cast<double>(c.size())) << '\n'
            << "bin_edges";
  for (double e : c.bin_edges) std::cout << ' ' << format_number(e);
  std::cout << '\n';
  return kExitOk;
}

int cmd_train(const Options& o) {
  const Cohort cohort = load_cohort(o.cohort);
  const TrainConfig cfg = finish_train_config(o, cohort, o.ablation);
  const TrainResult r = train_model(cohort, cfg);
  save_checkpoint(r.params, cfg, o.out);
  if (!o.history.empty()) write_text(o.history, history_csv(r.history));
  if (!r.history.epochs.empty()) {
    const auto& last = r.history.epochs.back();
    std::cout << "epochs " << r.history.epochs.size() << " l_surv " << fixed(last.l_surv) << " l_dis "
              << fixed(last.l_dis) << " total " << fixed(last.total) << '\n';
  }
  std::cout << "parameters " << r.params.parameter_count() << '\n';
  return kExitOk;
}

std::vector<std::uint64_t> seed_list(const Options& o) {
  return o.seeds.empty() ? std::vector<std::uint64_t>{o.seed} : o.seeds;
}

int run_cv(const Options& o, const std::vector<std::string>& variants) {
  const Cohort cohort = load_cohort(o.cohort);
  std::vector<CvResult> results;
  for (const auto& v : variants) {
    for (std::uint64_t seed : seed_list(o)) {
      Options per = o;
      per.seed = seed;
      const TrainConfig cfg = finish_train_config(per, cohort, v);
      results.push_back(cross_validate(cohort, cfg, CvOptions{o.folds, o.parallel}));
      report_warnings(results.back());
      std::cout << summary_line(results.back()) << '\n';
    }
  }
  write_text(o.out, metrics_csv(results));
  return kExitOk;
}

int cmd_eval(const Options& o) {
  Cohort cohort;
  const Checkpoint ck = load_matching(o, cohort);
  const auto records = risk_records(cohort, ck.params, ck.config);
  std::vector<RiskRow> rows;
  for (std::size_t i = 0; i < records.size(); ++i) rows.push_back({cohort.patients[i].id, records[i]});
  write_text(o.out, risk_csv(rows));
  try {
    std::cout << "C-index " << fixed(concordance_index(records)) << '\n';
  } catch (const UndefinedMetricError& e) {
    std::cerr << "warning: " << e.what() << '\n';
    std::cout << "C-index nan\n";
  }
  return kExitOk;
}

int cmd_plot_km(const Options& o) {
  std::vector<RiskRecord> records;
  for (const auto& r : read_risk_csv(o.risk)) records.push_back(r.record);
  const RiskGroups g = stratify_by_median(records);
  const KmCurve low = kaplan_meier(g.low), high = kaplan_meier(g.high);
  const LogRankResult lr = logrank_test(g.low, g.high);
  double t_max = 0.0;
  for (const auto& r : records) t_max = std::max(t_max, r.time);
  write_text(o.out, render_km_svg(low, high, lr.p, t_max));
  const std::string points = o.points.empty() ? fs::path(o.out).replace_extension(".csv").string() : o.points;
  write_text(points, km_curve_csv(low, high));
  std::cout << "median " << format_number(g.median) << " low " << g.low.size() << " high " << g.high.size() << " chi2 "
            << fixed(lr.chi2) << ' ' << format_p_value(lr.p) << '\n';
  return kExitOk;
}

int cmd_plot_gates(const Options& o) {
  Cohort cohort;
  const Checkpoint ck = load_matching(o, cohort);
  if (!ck.config.has_moe()) throw ConfigError("checkpoint was trained without the MoE; there are no gates to plot");
  const auto preds = predict(cohort, ck.params, ck.config);
  std::vector<double> mean(ck.config.n_experts, 0.0);
  std::vector<GateWeights> gates;
  for (const auto& p : preds) {
    gates.push_back(p.gate_weights);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += p.gate_weights[i];
  }
  for (auto& m : mean) m /= static_cast<double>(preds.size());
  write_text(o.out, render_gates_svg(mean));
  if (!o.points.empty()) write_text(o.points, gates_csv(ids_of(cohort), gates));
  std::cout << "mean_gates";
  for (double g : mean) std::cout << ' ' << fixed(g, 6);
  std::cout << '\n';
  return kExitOk;
}

int cmd_export_embeddings(const Options& o) {
  Cohort cohort;
  const Checkpoint ck = load_matching(o, cohort);
  std::vector<DecoupledBundle> bundles;
  for (auto& p : predict(cohort, ck.params, ck.config)) bundles.push_back(std::move(p.bundle));
  write_text(o.out, embeddings_csv(ids_of(cohort), bundles));
  std::cout << "rows " << bundles.size() * ck.config.n_features() << '\n';
  return kExitOk;
}

int cmd_gradcheck(const Options& o) {
  TrainConfig cfg = small_check_config(parse_ablation(o.ablation));
  cfg.metric = parse_distance_metric(o.metric);
  cfg.validate();
  double worst = 0.0;
  std::string where;
  std::size_t skipped = 0;
  for (int k = 0; k < o.check_seeds; ++k) {
    for (int s : o.check_segments) {
      const std::uint64_t seed = o.seed + static_cast<std::uint64_t>(k);
      const auto rep = gradient_check(cfg, seed, static_cast<std::size_t>(s));
      skipped += rep.kink_skips;
      if (rep.worst > worst) {
        worst = rep.worst;
        where = rep.worst_path + " seed=" + std::to_string(seed) + " s=" + std::to_string(s);
      }
    }
  }
  std::cout << "worst_rel_error " << format_number(worst) << " at " << where << '\n'
            << "kink_skips " << skipped << '\n';
  const bool ok = worst < o.tolerance;
  std::cout << (ok ? "OK" : "MISMATCH") << '\n';
  return ok ? kExitOk : kExitInternal;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Decoupled multimodal survival model: synthesis, training, evaluation"};
  app.set_config("--config", "", "Key-value config file; command-line flags take precedence");
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic two-modality cohort");
  add_seed_out(synth, o, "Cohort JSON to write");
  synth->add_option("--n", o.synth.n_patients, "Patients")->capture_default_str();
  synth->add_option("--k-shared", o.synth.k_shared, "Shared latent factors")->capture_default_str();
  synth->add_option("--k-spec", o.synth.k_spec, "Modality-specific latent factors")->capture_default_str();
  synth->add_option("--tokens-m1", o.synth.tokens_m1, "Tokens per patient, modality 1")->capture_default_str();
  synth->add_option("--tokens-m2", o.synth.tokens_m2, "Tokens per patient, modality 2")->capture_default_str();
  synth->add_option("--token-dim", o.synth.token_dim, "Token width C0")->capture_default_str();
  synth->add_option("--w-shared", o.synth.w_shared, "Weight of the shared factor")->capture_default_str();
  synth->add_option("--w-spec1", o.synth.w_spec1, "Weight of the modality-1 factor")->capture_default_str();
  synth->add_option("--w-spec2", o.synth.w_spec2, "Weight of the modality-2 factor")->capture_default_str();
  synth->add_option("--w-interact", o.synth.w_interact, "Weight of the cross-modal interaction")->capture_default_str();
  synth->add_option("--noise", o.synth.noise_sigma, "Token noise sigma")->capture_default_str();
  synth->add_option("--censor-horizon", o.synth.censor_horizon, "Censoring horizon (inf disables)")
      ->capture_default_str();
  synth->add_option("--bins", o.synth_bins, "Discrete time bins")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train on a full cohort and write a checkpoint");
  add_cohort(train, o);
  add_seed_out(train, o, "Checkpoint JSON to write");
  add_train_flags(train, o);
  train->add_option("--ablate", o.ablation, "Variant: full, no-explore, no-rca, no-rfr, no-moe")->capture_default_str();
  train->add_option("--history", o.history, "Optional per-epoch loss CSV");

  auto* cv = app.add_subcommand("cv", "k-fold cross-validation");
  add_cohort(cv, o);
  add_seed_out(cv, o, "Metrics CSV to write");
  add_train_flags(cv, o);
  cv->add_option("--ablate", o.ablation, "Variant: full, no-explore, no-rca, no-rfr, no-moe")->capture_default_str();
  cv->add_option("--seeds", o.seeds, "Run once per seed (overrides --seed)")->delimiter(',');
  cv->add_option("--k", o.folds, "Folds")->capture_default_str();
  cv->add_flag("--parallel", o.parallel, "Train folds on worker threads");

  auto* ablate = app.add_subcommand("ablate", "Cross-validate several model variants");
  add_cohort(ablate, o);
  add_seed_out(ablate, o, "Metrics CSV to write");
  add_train_flags(ablate, o);
  ablate->add_option("--variants", o.variants, "Variants to run")->delimiter(',')->capture_default_str();
  ablate->add_option("--seeds", o.seeds, "Run once per seed (overrides --seed)")->delimiter(',');
  ablate->add_option("--k", o.folds, "Folds")->capture_default_str();
  ablate->add_flag("--parallel", o.parallel, "Train folds on worker threads");

  auto* eval = app.add_subcommand("eval", "Score a cohort with a checkpoint; writes id,risk,time,event");
  add_cohort(eval, o);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON")->required();
  add_seed_out(eval, o, "Risk CSV to write");

  auto* km = app.add_subcommand("plot-km", "Median-split Kaplan-Meier plot with log-rank p");
  km->add_option("--risk", o.risk, "CSV with risk,time,event columns")->required();
  add_seed_out(km, o, "SVG to write");
  km->add_option("--points", o.points, "Curve points CSV (default: --out with .csv)");

  auto* pg = app.add_subcommand("plot-gates", "Bar chart of mean gate weights over a cohort");
  add_cohort(pg, o);
  pg->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON")->required();
  add_seed_out(pg, o, "SVG to write");
  pg->add_option("--points", o.points, "Optional per-patient gate CSV");

  auto* emb = app.add_subcommand("export-embeddings", "Per-patient decoupled features as CSV");
  add_cohort(emb, o);
  emb->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON")->required();
  add_seed_out(emb, o, "CSV to write");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of all analytic gradients");
  add_seed_out(gc, o, "unused", false);
  gc->add_option("--seeds", o.check_seeds, "Number of consecutive seeds")->capture_default_str();
  gc->add_option("--segments", o.check_segments, "Segment lengths")->delimiter(',')->capture_default_str();
  gc->add_option("--ablate", o.ablation, "Variant")->capture_default_str();
  gc->add_option("--metric", o.metric, "Distance metric")->capture_default_str();
  gc->add_option("--tolerance", o.tolerance, "Pass threshold on the worst relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(o);
    if (*train) return cmd_train(o);
    if (*cv) return run_cv(o, {o.ablation});
    if (*ablate) return run_cv(o, o.variants);
    if (*eval) return cmd_eval(o);
    if (*km) return cmd_plot_km(o);
    if (*pg) return cmd_plot_gates(o);
    if (*emb) return cmd_export_embeddings(o);
    if (*gc) return cmd_gradcheck(o);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const SchemaError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}
