#include <gtest/gtest.h>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "deref/io.hpp"
#include "deref/plot.hpp"

using namespace deref;
namespace fs = std::filesystem;
namespace pt = boost::property_tree;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "deref_io_test";
  fs::create_directories(dir);
  return dir / name;
}

pt::ptree parse_svg(const std::string& svg) {
  std::istringstream is(svg);
  pt::ptree tree;
  pt::read_xml(is, tree);
  return tree;
}

std::vector<pt::ptree> children_named(const pt::ptree& svg, const std::string& tag) {
  std::vector<pt::ptree> out;
  for (const auto& [name, child] : svg) {
    if (name == tag) out.push_back(child);
  }
  return out;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  auto cfg = small_check_config(Ablation::no_explore);
  cfg.eval_segment = 4;
  cfg.sp_distance_cap = 2.5;
  const ModelParams p = ModelParams::initialize(cfg, 9);
  const fs::path path = scratch("ck.json");
  save_checkpoint(p, cfg, path);
  Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(ck.params.paths(), p.paths());
  ModelParams copy = p;
  ModelParams::visit(copy, [&](const std::string& name, const Tensor& t) { EXPECT_EQ(ck.params.find(name)->data, t.data); });
  EXPECT_EQ(ck.config.ablation, Ablation::no_explore);
  EXPECT_EQ(ck.config.eval_segment, 4);
  EXPECT_EQ(ck.config.sp_distance_cap, 2.5);
  EXPECT_EQ(ck.config.segments, cfg.segments);
}

TEST(Checkpoint, ShapeMismatchIsSchemaError) {
  const auto cfg = small_check_config();
  const fs::path path = scratch("bad.json");
  save_checkpoint(ModelParams::initialize(cfg, 1), cfg, path);
  nlohmann::json j;
  std::ifstream(path) >> j;
  j["config"]["c2"] = 16;  // tensors are still C2 = 8
  std::ofstream(path) << j.dump();
  EXPECT_THROW(load_checkpoint(path), SchemaError);

  save_checkpoint(ModelParams::initialize(cfg, 1), cfg, path);
  std::ifstream(path) >> j;
  j["params"]["moe.gate"]["data"].erase(0);
  std::ofstream(path) << j.dump();
  EXPECT_THROW(load_checkpoint(path), SchemaError);

  std::ofstream(path) << "{not json";
  EXPECT_THROW(load_checkpoint(path), SchemaError);
  EXPECT_THROW(load_checkpoint(scratch("missing.json")), IoError);
}

TEST(Csv, MetricsRowsAndFlaggedFolds) {
  CvResult r;
  r.variant = Ablation::no_rfr;
  r.seed = 2;
  FoldMetrics a;
  a.fold = 0;
  a.c_index = 0.75;
  a.chi2 = 4.0;
  a.p = 0.0455;
  FoldMetrics b;
  b.fold = 1;
  b.flagged = true;
  r.folds = {a, b};
  const std::string csv = metrics_csv({r});
  EXPECT_EQ(csv, "fold,c_index,chi2,p,variant,seed\n0,0.75,4,0.045499999999999999,no-rfr,2\n1,nan,nan,nan,no-rfr,2\n");
}

TEST(Csv, RiskRoundTripAndSchemaErrors) {
  const std::vector<RiskRow> rows{{"p0", {0.25, 1.5, 1}}, {"p1", {-1.0 / 3.0, 2.0, 0}}};
  const fs::path path = scratch("risk.csv");
  write_text(path, risk_csv(rows));
  const auto back = read_risk_csv(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].id, "p1");
  EXPECT_EQ(back[1].record.risk, -1.0 / 3.0);
  EXPECT_EQ(back[1].record.event, 0);

  write_text(path, "id,risk,time\np0,1,2\n");
  EXPECT_THROW(read_risk_csv(path), SchemaError);
  write_text(path, "risk,time,event\nabc,1,1\n");
  EXPECT_THROW(read_risk_csv(path), SchemaError);
  write_text(path, "risk,time,event\n1,1,7\n");
  EXPECT_THROW(read_risk_csv(path), SchemaError);
  write_text(path, "time,event,risk\n3,1,0.5\n");
  EXPECT_EQ(read_risk_csv(path).front().record.risk, 0.5);
}

TEST(Csv, EmbeddingsHaveOneRowPerPatientFeature) {
  for (Ablation a : {Ablation::none, Ablation::no_explore}) {
    const auto cfg = small_check_config(a);
    const Cohort c = small_check_cohort(1, cfg.c0, cfg.n_bins, 10);
    const auto params = ModelParams::initialize(cfg, 1);
    std::vector<DecoupledBundle> bundles;
    std::vector<std::string> ids;
    for (const auto& p : c.patients) {
      bundles.push_back(forward(p, params, cfg, eval_plan(cfg)).bundle);
      ids.push_back(p.id);
    }
    const std::string csv = embeddings_csv(ids, bundles);
    EXPECT_EQ(count_lines(csv), 1 + 10 * cfg.n_features());
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "patient_id,feature,v0,v1,v2,v3,v4,v5,v6,v7");
  }
}

TEST(Csv, HistoryHasOneRowPerEpoch) {
  TrainHistory h;
  h.epochs = {{1.5, -0.25, 1.25, 0}, {1.0, -0.5, 0.5, 2}};
  EXPECT_EQ(history_csv(h), "epoch,l_surv,l_dis,total,clamp_events\n0,1.5,-0.25,1.25,0\n1,1,-0.5,0.5,2\n");
}

TEST(Svg, KaplanMeierPlotIsWellFormedAndAnnotated) {
  const KmCurve low = kaplan_meier(std::vector<double>{1, 2, 3}, std::vector<int>{1, 0, 1});
  const KmCurve high = kaplan_meier(std::vector<double>{0.5, 1}, std::vector<int>{1, 1});
  const auto tree = parse_svg(render_km_svg(low, high, 0.0123, 3.0));
  const auto& svg = tree.get_child("svg");
  const auto lines = children_named(svg, "polyline");
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0].get<std::string>("<xmlattr>.data-group"), "low");
  EXPECT_EQ(lines[0].get<std::string>("<xmlattr>.stroke"), kLowRiskColor);
  EXPECT_EQ(lines[1].get<std::string>("<xmlattr>.stroke"), kHighRiskColor);
  bool found = false;
  for (const auto& t : children_named(svg, "text")) {
    if (t.get<std::string>("<xmlattr>.id", "") == "p-value") {
      EXPECT_EQ(t.data(), "p = 0.0123");
      found = true;
    }
  }
  EXPECT_TRUE(found);
  EXPECT_EQ(format_p_value(1.0), "p = 1.0000");
  EXPECT_EQ(format_p_value(3.2e-7), "p = 3.20e-07");
}

TEST(Svg, GateBarsSumToOne) {
  const std::vector<double> g{0.1, 0.2, 0.3, 0.4};
  const auto tree = parse_svg(render_gates_svg(g));
  double sum = 0.0;
  int bars = 0;
  for (const auto& r : children_named(tree.get_child("svg"), "rect")) {
    if (r.get<std::string>("<xmlattr>.class", "") != "bar") continue;
    sum += r.get<double>("<xmlattr>.data-value");
    ++bars;
  }
  EXPECT_EQ(bars, 4);
  EXPECT_NEAR(sum, 1.0, 1e-12);
}
