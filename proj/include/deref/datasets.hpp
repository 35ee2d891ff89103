#pragma once

// Synthetic two-modality survival cohorts, time-bin discretization and the
// cohort JSON format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "deref/errors.hpp"
#include "deref/tensor.hpp"

namespace deref {

struct PatientRecord {
  std::string id;
  Tensor tokens_m1;  // I1 x C0
  Tensor tokens_m2;  // I2 x C0
  double time = 1.0;
  int event = 1;  // 1 = event observed, 0 = censored
  std::optional<int> bin;

  [[nodiscard]] int censored() const { return 1 - event; }
  bool operator==(const PatientRecord&) const = default;
};

struct Cohort {
  std::vector<PatientRecord> patients;
  std::optional<int> n_bins;
  std::vector<double> bin_edges;

  [[nodiscard]] bool binned() const { return n_bins.has_value(); }
  [[nodiscard]] std::size_t size() const { return patients.size(); }
  [[nodiscard]] std::size_t token_dim() const {
    return patients.empty() ? 0 : patients.front().tokens_m1.cols;
  }
  bool operator==(const Cohort&) const = default;
};

struct SynthConfig {
  int n_patients = 500;
  int k_shared = 2;
  int k_spec = 2;
  int tokens_m1 = 8;
  int tokens_m2 = 8;
  int token_dim = 16;
  double w_shared = 1.0;
  double w_spec1 = 0.0;
  double w_spec2 = 0.0;
  double w_interact = 1.0;
  double noise_sigma = 0.5;
  // +infinity disables censoring.
  double censor_horizon = 3.0;
  std::uint64_t seed = 0;

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) throw ConfigError(std::string(name) + " must be >= 1, got " + std::to_string(v));
    };
    positive(n_patients, "n_patients");
    positive(k_shared, "k_shared");
    positive(k_spec, "k_spec");
    positive(tokens_m1, "tokens_m1");
    positive(tokens_m2, "tokens_m2");
    positive(token_dim, "token_dim");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
    if (!(censor_horizon > 0.0)) throw ConfigError("censor_horizon must be > 0");
    for (double w : {w_shared, w_spec1, w_spec2, w_interact}) {
      if (!std::isfinite(w)) throw ConfigError("signal weights must be finite");
    }
  }
};

namespace detail {

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

/// Ground-truth log-hazard used by the generator. Exposed so tests can score
/// the planted signal directly.
inline double planted_risk(const SynthConfig& cfg, std::span<const double> z_shared,
                           std::span<const double> z_1, std::span<const double> z_2) {
  Vec inter(z_1.size());
  for (std::size_t i = 0; i < z_1.size(); ++i) inter[i] = z_1[i] * z_2[i];
  return cfg.w_shared * detail::mean_of(z_shared) + cfg.w_spec1 * detail::mean_of(z_1) +
         cfg.w_spec2 * detail::mean_of(z_2) + cfg.w_interact * detail::mean_of(inter);
}

/// Generated cohort plus the per-patient planted risk (not persisted).
struct SyntheticCohort {
  Cohort cohort;
  std::vector<double> true_risk;
};

inline SyntheticCohort generate_synthetic_cohort_with_risk(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const auto ks = static_cast<std::size_t>(cfg.k_shared);
  const auto kp = static_cast<std::size_t>(cfg.k_spec);
  const auto c0 = static_cast<std::size_t>(cfg.token_dim);

  // Fixed per-cohort linear maps from latent factors to token space.
  auto draw_map = [&](std::size_t rows) {
    Tensor m(rows, c0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
    for (auto& v : m.data) v = normal(rng) * scale;
    return m;
  };
  const Tensor map_m1 = draw_map(ks + kp);
  const Tensor map_m2 = draw_map(ks + kp);

  auto make_tokens = [&](const Tensor& map, std::span<const double> z_s, std::span<const double> z_m,
                         int n_tokens) {
    Vec latent(z_s.begin(), z_s.end());
    latent.insert(latent.end(), z_m.begin(), z_m.end());
    Vec clean(c0, 0.0);
    gemv_acc(latent, map, clean);
    Tensor tokens(static_cast<std::size_t>(n_tokens), c0);
    for (std::size_t t = 0; t < tokens.rows; ++t) {
      for (std::size_t c = 0; c < c0; ++c) tokens(t, c) = clean[c] + cfg.noise_sigma * normal(rng);
    }
    return tokens;
  };

  SyntheticCohort out;
  out.cohort.patients.reserve(static_cast<std::size_t>(cfg.n_patients));
  out.true_risk.reserve(static_cast<std::size_t>(cfg.n_patients));
  const bool no_censoring = std::isinf(cfg.censor_horizon);
  for (int p = 0; p < cfg.n_patients; ++p) {
    Vec z_s(ks), z_1(kp), z_2(kp);
    for (auto& v : z_s) v = normal(rng);
    for (auto& v : z_1) v = normal(rng);
    for (auto& v : z_2) v = normal(rng);
    const double r = planted_risk(cfg, z_s, z_1, z_2);

    // Exponential(rate = exp(r)) by inversion; 1 - U keeps the log argument in (0, 1].
    const double event_time = -std::log(1.0 - unit(rng)) / std::exp(r);
    const double censor_time = no_censoring ? std::numeric_limits<double>::infinity()
                                            : cfg.censor_horizon * unit(rng);

    PatientRecord rec;
    rec.id = "P" + std::to_string(p);
    rec.tokens_m1 = make_tokens(map_m1, z_s, z_1, cfg.tokens_m1);
    rec.tokens_m2 = make_tokens(map_m2, z_s, z_2, cfg.tokens_m2);
    rec.event = event_time <= censor_time ? 1 : 0;
    rec.time = std::min(event_time, censor_time);
    if (!(rec.time > 0.0)) rec.time = std::numeric_limits<double>::min();
    out.cohort.patients.push_back(std::move(rec));
    out.true_risk.push_back(r);
  }
  return out;
}

inline Cohort generate_synthetic_cohort(const SynthConfig& cfg) {
  return generate_synthetic_cohort_with_risk(cfg).cohort;
}

/// Quantile of sorted data with linear interpolation between order
/// statistics: position (n - 1) * level, 0-based.
inline double interpolated_quantile(std::span<const double> sorted, double level) {
  if (sorted.empty()) throw DataError("quantile of empty sample");
  const double pos = level * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

/// Bin index in [1, n_bins] for a time given ascending edges.
inline int bin_for_time(double time, std::span<const double> edges, int n_bins) {
  const auto below = std::count_if(edges.begin(), edges.end(), [&](double e) { return e < time; });
  return std::clamp(1 + static_cast<int>(below), 1, n_bins);
}

/// Edges are interpolated quantiles of the uncensored times at levels j / n_bins.
inline Cohort assign_time_bins(Cohort cohort, int n_bins) {
  if (n_bins < 1) throw ConfigError("n_bins must be >= 1");
  std::vector<double> event_times;
  for (const auto& p : cohort.patients) {
    if (p.event == 1) event_times.push_back(p.time);
  }
  std::sort(event_times.begin(), event_times.end());
  Vec uniq = event_times;
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  if (static_cast<int>(uniq.size()) < n_bins) {
    throw DataError("binning into " + std::to_string(n_bins) + " bins needs at least that many distinct " +
                    "uncensored times, cohort has " + std::to_string(uniq.size()));
  }

  std::vector<double> edges;
  for (int j = 1; j < n_bins; ++j) {
    edges.push_back(interpolated_quantile(event_times, static_cast<double>(j) / n_bins));
  }
  for (std::size_t j = 1; j < edges.size(); ++j) {
    if (!(edges[j] > edges[j - 1])) throw DataError("bin edges are not strictly increasing (tied event times)");
  }

  cohort.n_bins = n_bins;
  cohort.bin_edges = edges;
  for (auto& p : cohort.patients) p.bin = bin_for_time(p.time, edges, n_bins);
  return cohort;
}

inline constexpr int kCohortSchemaVersion = 1;

namespace detail {

inline nlohmann::json tokens_to_json(const Tensor& t) {
  auto rows = nlohmann::json::array();
  for (std::size_t r = 0; r < t.rows; ++r) {
    auto row = t.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

inline const nlohmann::json& require_field(const nlohmann::json& obj, const std::string& key,
                                           const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw SchemaError(where + key + ": missing field");
  return obj.at(key);
}

inline Tensor tokens_from_json(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array() || j.empty()) throw SchemaError(field + ": expected a non-empty array of rows");
  std::vector<Vec> rows;
  for (const auto& r : j) {
    if (!r.is_array()) throw SchemaError(field + ": rows must be arrays of numbers");
    Vec row;
    for (const auto& v : r) {
      if (!v.is_number()) throw SchemaError(field + ": non-numeric entry");
      row.push_back(v.get<double>());
    }
    rows.push_back(std::move(row));
  }
  try {
    return Tensor::from_rows(rows);
  } catch (const DimensionError&) {
    throw SchemaError(field + ": ragged token rows");
  }
}

}  // namespace detail

inline nlohmann::json cohort_to_json(const Cohort& c) {
  nlohmann::json j;
  j["schema"] = kCohortSchemaVersion;
  j["n_bins"] = c.n_bins ? nlohmann::json(*c.n_bins) : nlohmann::json(nullptr);
  j["bin_edges"] = c.bin_edges;
  auto patients = nlohmann::json::array();
  for (const auto& p : c.patients) {
    nlohmann::json jp;
    jp["id"] = p.id;
    jp["time"] = p.time;
    jp["event"] = p.event;
    jp["bin"] = p.bin ? nlohmann::json(*p.bin) : nlohmann::json(nullptr);
    jp["m1_tokens"] = detail::tokens_to_json(p.tokens_m1);
    jp["m2_tokens"] = detail::tokens_to_json(p.tokens_m2);
    patients.push_back(std::move(jp));
  }
  j["patients"] = std::move(patients);
  return j;
}

inline Cohort cohort_from_json(const nlohmann::json& j) {
  using detail::require_field;
  const auto& schema = require_field(j, "schema", "");
  if (!schema.is_number_integer() || schema.get<int>() != kCohortSchemaVersion) {
    throw SchemaError("schema: unsupported version");
  }
  Cohort c;
  const auto& nb = require_field(j, "n_bins", "");
  if (!nb.is_null()) {
    if (!nb.is_number_integer() || nb.get<int>() < 1) throw SchemaError("n_bins: expected integer >= 1 or null");
    c.n_bins = nb.get<int>();
  }
  const auto& edges = require_field(j, "bin_edges", "");
  if (!edges.is_array()) throw SchemaError("bin_edges: expected array");
  for (const auto& e : edges) {
    if (!e.is_number()) throw SchemaError("bin_edges: non-numeric entry");
    c.bin_edges.push_back(e.get<double>());
  }
  const auto& patients = require_field(j, "patients", "");
  if (!patients.is_array()) throw SchemaError("patients: expected array");
  for (std::size_t i = 0; i < patients.size(); ++i) {
    const auto& jp = patients[i];
    const std::string where = "patients[" + std::to_string(i) + "].";
    PatientRecord p;
    const auto& id = require_field(jp, "id", where);
    if (!id.is_string()) throw SchemaError(where + "id: expected string");
    p.id = id.get<std::string>();
    const auto& time = require_field(jp, "time", where);
    if (!time.is_number() || !(time.get<double>() > 0.0)) throw SchemaError(where + "time: expected positive number");
    p.time = time.get<double>();
    const auto& event = require_field(jp, "event", where);
    if (!event.is_number_integer() || (event.get<int>() != 0 && event.get<int>() != 1)) {
      throw SchemaError(where + "event: expected 0 or 1");
    }
    p.event = event.get<int>();
    const auto& bin = require_field(jp, "bin", where);
    if (!bin.is_null()) {
      if (!bin.is_number_integer()) throw SchemaError(where + "bin: expected integer or null");
      p.bin = bin.get<int>();
      if (!c.n_bins || *p.bin < 1 || *p.bin > *c.n_bins) throw SchemaError(where + "bin: out of range");
    } else if (c.n_bins) {
      throw SchemaError(where + "bin: binned cohort requires a bin per patient");
    }
    p.tokens_m1 = detail::tokens_from_json(require_field(jp, "m1_tokens", where), where + "m1_tokens");
    p.tokens_m2 = detail::tokens_from_json(require_field(jp, "m2_tokens", where), where + "m2_tokens");
    if (p.tokens_m1.cols != p.tokens_m2.cols) throw SchemaError(where + "m2_tokens: token dim differs from m1_tokens");
    c.patients.push_back(std::move(p));
  }
  return c;
}

inline void save_cohort(const Cohort& cohort, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << cohort_to_json(cohort).dump() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline Cohort load_cohort(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("cohort file is not valid JSON: ") + e.what());
  }
  return cohort_from_json(j);
}

}  // namespace deref
