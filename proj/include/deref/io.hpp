#pragma once

// Checkpoints (JSON: config echo + parameter path -> flat array) and the CSV
// files exchanged between CLI commands.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "deref/decoupling.hpp"
#include "deref/errors.hpp"
#include "deref/eval.hpp"
#include "deref/model.hpp"
#include "deref/train.hpp"

namespace deref {

inline constexpr int kCheckpointSchemaVersion = 1;

/// Shortest-exact decimal for CSV cells (17 significant digits), "nan" for NaN.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline nlohmann::json config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["c0"] = cfg.c0;
  j["c1"] = cfg.c1;
  j["c2"] = cfg.c2;
  j["n_bins"] = cfg.n_bins;
  j["n_experts"] = cfg.n_experts;
  j["segments"] = cfg.segments;
  j["eval_segment"] = cfg.eval_segment ? nlohmann::json(*cfg.eval_segment) : nlohmann::json(nullptr);
  j["alpha"] = cfg.alpha;
  j["learning_rate"] = cfg.learning_rate;
  j["weight_decay"] = cfg.weight_decay;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["seed"] = cfg.seed;
  j["metric"] = std::string(to_string(cfg.metric));
  j["ablation"] = std::string(to_string(cfg.ablation));
  j["rca_scale_logits"] = cfg.rca_scale_logits;
  j["sp_distance_cap"] = cfg.sp_distance_cap ? nlohmann::json(*cfg.sp_distance_cap) : nlohmann::json(nullptr);
  return j;
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  try {
    cfg.c0 = j.at("c0").get<std::size_t>();
    cfg.c1 = j.at("c1").get<std::size_t>();
    cfg.c2 = j.at("c2").get<std::size_t>();
    cfg.n_bins = j.at("n_bins").get<int>();
    cfg.n_experts = j.at("n_experts").get<std::size_t>();
    cfg.segments = j.at("segments").get<std::vector<int>>();
    if (!j.at("eval_segment").is_null()) cfg.eval_segment = j.at("eval_segment").get<int>();
    cfg.alpha = j.at("alpha").get<double>();
    cfg.learning_rate = j.at("learning_rate").get<double>();
    cfg.weight_decay = j.at("weight_decay").get<double>();
    cfg.epochs = j.at("epochs").get<int>();
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.metric = parse_distance_metric(j.at("metric").get<std::string>());
    cfg.ablation = parse_ablation(j.at("ablation").get<std::string>());
    cfg.rca_scale_logits = j.at("rca_scale_logits").get<bool>();
    if (!j.at("sp_distance_cap").is_null()) cfg.sp_distance_cap = j.at("sp_distance_cap").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("config: ") + e.what());
  }
  return cfg;
}

inline void save_checkpoint(const ModelParams& params, const TrainConfig& cfg, const std::filesystem::path& path) {
  nlohmann::json j;
  j["schema"] = kCheckpointSchemaVersion;
  j["config"] = config_to_json(cfg);
  nlohmann::json tensors = nlohmann::json::object();
  ModelParams::visit(params, [&](const std::string& name, const Tensor& t) {
    tensors[name] = {{"rows", t.rows}, {"cols", t.cols}, {"data", t.data}};
  });
  j["params"] = std::move(tensors);
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

struct Checkpoint {
  TrainConfig config;
  ModelParams params;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  if (!j.contains("schema") || j["schema"] != kCheckpointSchemaVersion) throw SchemaError("schema: unsupported version");
  if (!j.contains("config")) throw SchemaError("config: missing field");
  if (!j.contains("params") || !j["params"].is_object()) throw SchemaError("params: missing field");
  Checkpoint ck{config_from_json(j["config"]), {}};
  ck.params = ModelParams::zeros(ck.config);
  const auto& tensors = j["params"];
  std::size_t seen = 0;
  ModelParams::visit(ck.params, [&](const std::string& name, Tensor& t) {
    if (!tensors.contains(name)) throw SchemaError("params." + name + ": missing field");
    const auto& e = tensors[name];
    try {
      if (e.at("rows").get<std::size_t>() != t.rows || e.at("cols").get<std::size_t>() != t.cols) {
        throw SchemaError("params." + name + ": shape does not match config");
      }
      auto data = e.at("data").get<std::vector<double>>();
      if (data.size() != t.size()) throw SchemaError("params." + name + ": wrong element count");
      t.data = std::move(data);
    } catch (const nlohmann::json::exception& ex) {
      throw SchemaError("params." + name + ": " + ex.what());
    }
    ++seen;
  });
  if (seen != tensors.size()) throw SchemaError("params: unexpected extra tensors for this config");
  return ck;
}

// ---------------------------------------------------------------------------
// CSV

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

inline constexpr const char* kMetricsHeader = "fold,c_index,chi2,p,variant,seed";

inline std::string metrics_csv_rows(const CvResult& r) {
  std::ostringstream os;
  for (const auto& f : r.folds) {
    os << f.fold << ',' << format_number(f.flagged ? detail::kNaN : f.c_index) << ',' << format_number(f.chi2) << ','
       << format_number(f.p) << ',' << to_string(r.variant) << ',' << r.seed << '\n';
  }
  return os.str();
}

inline std::string metrics_csv(const std::vector<CvResult>& results) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : results) out += metrics_csv_rows(r);
  return out;
}

inline std::string history_csv(const TrainHistory& h) {
  std::ostringstream os;
  os << "epoch,l_surv,l_dis,total,clamp_events\n";
  for (std::size_t e = 0; e < h.epochs.size(); ++e) {
    const auto& s = h.epochs[e];
    os << e << ',' << format_number(s.l_surv) << ',' << format_number(s.l_dis) << ',' << format_number(s.total) << ','
       << s.clamp_events << '\n';
  }
  return os.str();
}

struct RiskRow {
  std::string id;
  RiskRecord record;
};

inline std::string risk_csv(const std::vector<RiskRow>& rows) {
  std::ostringstream os;
  os << "id,risk,time,event\n";
  for (const auto& r : rows) {
    os << r.id << ',' << format_number(r.record.risk) << ',' << format_number(r.record.time) << ',' << r.record.event
       << '\n';
  }
  return os.str();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

/// Reads a risk CSV with columns risk, time, event (id optional, any order).
inline std::vector<RiskRow> read_risk_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(path.string() + ": empty file");
  const auto header = split_csv_line(line);
  auto col = [&](const std::string& name) -> long {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<long>(i);
    }
    return -1;
  };
  const long c_id = col("id"), c_risk = col("risk"), c_time = col("time"), c_event = col("event");
  if (c_risk < 0) throw SchemaError("risk: missing column");
  if (c_time < 0) throw SchemaError("time: missing column");
  if (c_event < 0) throw SchemaError("event: missing column");
  std::vector<RiskRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const auto need = static_cast<std::size_t>(std::max({c_id, c_risk, c_time, c_event}));
    if (cells.size() <= need) throw SchemaError("line " + std::to_string(lineno) + ": too few columns");
    RiskRow r;
    try {
      r.id = c_id >= 0 ? cells[static_cast<std::size_t>(c_id)] : std::to_string(rows.size());
      r.record.risk = std::stod(cells[static_cast<std::size_t>(c_risk)]);
      r.record.time = std::stod(cells[static_cast<std::size_t>(c_time)]);
      r.record.event = std::stoi(cells[static_cast<std::size_t>(c_event)]);
    } catch (const std::exception&) {
      throw SchemaError("line " + std::to_string(lineno) + ": unparsable number");
    }
    if (r.record.event != 0 && r.record.event != 1) throw SchemaError("line " + std::to_string(lineno) + ": event must be 0 or 1");
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::string km_curve_csv(const KmCurve& low, const KmCurve& high) {
  std::ostringstream os;
  os << "group,time,survival,at_risk\n";
  auto emit = [&](const char* name, const KmCurve& km) {
    for (std::size_t i = 0; i < km.times.size(); ++i) {
      os << name << ',' << format_number(km.times[i]) << ',' << format_number(km.survival[i]) << ',' << km.at_risk[i]
         << '\n';
    }
  };
  emit("low", low);
  emit("high", high);
  return os.str();
}

/// One row per (patient, feature) with C2 values.
inline std::string embeddings_csv(const std::vector<std::string>& ids, const std::vector<DecoupledBundle>& bundles) {
  std::ostringstream os;
  const std::size_t c2 = bundles.empty() ? 0 : bundles.front().dim();
  os << "patient_id,feature";
  for (std::size_t i = 0; i < c2; ++i) os << ",v" << i;
  os << '\n';
  for (std::size_t p = 0; p < bundles.size(); ++p) {
    const auto feats = bundles[p].features();
    for (std::size_t f = 0; f < feats.size(); ++f) {
      os << ids[p] << ',' << kFeatureNames[f];
      for (double v : feats[f]) os << ',' << format_number(v);
      os << '\n';
    }
  }
  return os.str();
}

inline std::string gates_csv(const std::vector<std::string>& ids, const std::vector<GateWeights>& gates) {
  std::ostringstream os;
  const std::size_t n = gates.empty() ? 0 : gates.front().size();
  os << "patient_id";
  for (std::size_t i = 0; i < n; ++i) os << ",g" << i;
  os << '\n';
  for (std::size_t p = 0; p < gates.size(); ++p) {
    os << ids[p];
    for (double g : gates[p]) os << ',' << format_number(g);
    os << '\n';
  }
  return os.str();
}

}  // namespace deref
