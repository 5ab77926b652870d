#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "d2dmoe/checkpoint.hpp"
#include "d2dmoe/sweep.hpp"

using namespace d2dmoe;
namespace fs = std::filesystem;

namespace {

ExperimentSpec tiny_spec(const std::string& out) {
  ExperimentSpec s = desk_spec();
  s.data.seq_len = 8;
  s.data.train_size = 64;
  s.data.val_size = 16;
  s.model.vocab_size = s.data.vocab_size;
  s.model.context_length = 8;
  s.model.num_layers = 1;
  s.model.model_dim = 16;
  s.model.num_heads = 2;
  s.model.expansion = 2;
  s.train.steps = 20;
  s.train.batch_size = 8;
  s.sparsify.train.steps = 10;
  s.sparsify.train.batch_size = 8;
  s.cluster.n_experts = 4;
  s.routers.train.steps = 50;
  s.routers.max_sequences = 32;
  s.grid.tau = {0.0, 0.5, 1.0};
  s.output_dir = out;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(ExperimentSpec, JsonRoundTrip) {
  ExperimentSpec s = desk_spec();
  s.methods.push_back({"m", MethodKind::moefication, std::nullopt, 16, 7});
  s.seeds = {0, 1, 2};
  const Json j = to_json(s);
  EXPECT_EQ(to_json(experiment_spec_from_json(j)).dump(), j.dump());
  // Partial specs fill in the desk defaults.
  const ExperimentSpec p = experiment_spec_from_json(Json{{"seeds", {4}}});
  EXPECT_EQ(p.seeds, std::vector<std::uint64_t>{4});
  EXPECT_EQ(p.model.model_dim, 64);
}

TEST(ExperimentSpec, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(experiment_spec_from_json(Json{{"sede", {1}}}), ValidationError);
  EXPECT_THROW(experiment_spec_from_json(Json{{"cluster", {{"n_expert", 4}}}}), ValidationError);
  EXPECT_THROW(experiment_spec_from_json(Json{{"cluster", {{"n_experts", 3}}}}), ValidationError);
  EXPECT_THROW(experiment_spec_from_json(Json{{"methods", {{{"name", "x"}, {"kind", "moefication"}, {"alpha", 0.1}}}}}),
               ValidationError);
  EXPECT_THROW(experiment_spec_from_json(Json{{"methods", {{{"name", "a"}}, {{"name", "a"}}}}}), ValidationError);
  EXPECT_THROW(experiment_spec_from_json(Json{{"grid", {{"k", {0}}}}}), ValidationError);
  EXPECT_THROW(experiment_spec_from_json(Json{{"methods", {{{"name", "a/b"}}}}}), ValidationError);
  try {
    experiment_spec_from_json(Json{{"threads", 0}, {"budgets", {-1.0}}});
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("threads"), std::string::npos);
    EXPECT_NE(msg.find("budgets"), std::string::npos);
  }
}

TEST(Pipeline, RunsResumesAndRerunsFromChangedStage) {
  TempDir tmp("d2dmoe_pipeline_resume");
  ExperimentSpec spec = tiny_spec(tmp.path.string());
  const Dataset data = generate_dataset(spec.data);
  const MethodSpec m = spec.methods.front();
  const PipelineResult a = run_pipeline(spec, data, m, 0);
  ASSERT_EQ(a.logs.size(), 5u);
  EXPECT_TRUE(a.resumed.empty());
  for (const char* f : {"sparsify", "cluster", "routers", "convert"}) {
    EXPECT_TRUE(fs::exists(a.dir / (std::string(f) + ".ckpt"))) << f;
    EXPECT_TRUE(fs::exists(a.dir / (std::string(f) + ".json"))) << f;
  }
  EXPECT_EQ(a.model.moe_sites().size(), 1u);

  const PipelineResult b = run_pipeline(spec, data, m, 0);
  EXPECT_EQ(b.resumed, (std::vector<std::string>{"train", "sparsify", "cluster", "routers", "convert"}));
  EXPECT_EQ(serialize_model(a.model), serialize_model(b.model));

  spec.routers.train.steps = 60;
  const PipelineResult c = run_pipeline(spec, data, m, 0);
  EXPECT_EQ(c.resumed, (std::vector<std::string>{"train", "sparsify", "cluster"}));
}

TEST(Pipeline, UntilStopsEarlyAndUnknownStageIsRejected) {
  TempDir tmp("d2dmoe_pipeline_until");
  const ExperimentSpec spec = tiny_spec(tmp.path.string());
  const Dataset data = generate_dataset(spec.data);
  const PipelineResult r = run_pipeline(spec, data, spec.methods.front(), 0, "cluster");
  EXPECT_EQ(r.logs.back().stage, "cluster");
  EXPECT_FALSE(fs::exists(r.dir / "routers.ckpt"));
  EXPECT_EQ(r.model.partitions.size(), 1u);
  EXPECT_THROW(run_pipeline(spec, data, spec.methods.front(), 0, "polish"), ValidationError);
  EXPECT_THROW(run_pipeline(spec, data, spec.methods.front(), 0, "relufy"), ValidationError);
}

TEST(Pipeline, FailedStageLeavesReport) {
  TempDir tmp("d2dmoe_pipeline_fail");
  ExperimentSpec spec = tiny_spec(tmp.path.string());
  spec.sparsify.alpha = 1e300;
  spec.sparsify.ramp = false;
  const Dataset data = generate_dataset(spec.data);
  const MethodSpec m = spec.methods.front();
  EXPECT_THROW(run_pipeline(spec, data, m, 0), NumericError);
  const fs::path failed = method_dir(spec, m, 0) / "failed.json";
  ASSERT_TRUE(fs::exists(failed));
  const Json j = Json::parse(slurp(failed));
  EXPECT_EQ(j.at("stage"), "sparsify");
  EXPECT_FALSE(fs::exists(method_dir(spec, m, 0) / "sparsify.ckpt"));
  EXPECT_TRUE(fs::exists(base_dir(spec, 0) / "train.ckpt"));
}

TEST(Pipeline, StageTokensMatchPlan) {
  TempDir tmp("d2dmoe_pipeline_tokens");
  ExperimentSpec spec = tiny_spec(tmp.path.string());
  spec.mha.enabled = true;
  spec.mha.distill.steps = 20;
  spec.mha.max_sequences = 16;
  spec.methods = {{"d", MethodKind::d2dmoe, std::nullopt, std::nullopt, std::nullopt},
                  {"m", MethodKind::moefication, std::nullopt, std::nullopt, std::nullopt}};
  const Dataset data = generate_dataset(spec.data);
  for (const auto& m : spec.methods) {
    const auto plan = planned_tokens(spec, m, data);
    const PipelineResult r = run_pipeline(spec, data, m, 0);
    for (const auto& l : r.logs) EXPECT_EQ(l.tokens, plan.at(l.stage)) << m.name << " " << l.stage;
    EXPECT_EQ(r.model.moe_sites().size(), 5u);
  }
  EXPECT_NO_THROW(check_budget_parity(spec, data));
}

TEST(Sweep, EndpointsMatchDenseAndFilesAreReproducible) {
  TempDir t1("d2dmoe_sweep_a"), t2("d2dmoe_sweep_b");
  ExperimentSpec spec = tiny_spec(t1.path.string());
  const Dataset data = generate_dataset(spec.data);
  const MethodSpec m = spec.methods.front();
  const MethodRun a = run_method(spec, data, m, 0);
  const double dense_loss = a.logs[a.logs.size() - 2].val_loss;  // routers stage, still dense
  ASSERT_EQ(a.sweep.points.size(), 3u + 4u);
  EXPECT_EQ(a.sweep.points.front().policy, GatePolicy::dynamic(0.0));
  EXPECT_NEAR(a.sweep.points.front().loss, dense_loss, 1e-5);
  EXPECT_NEAR(a.sweep.points.back().loss, dense_loss, 1e-5);  // top-k with k = n
  EXPECT_DOUBLE_EQ(a.sweep.points.back().selected_fraction, 1.0);

  spec.output_dir = t2.path.string();
  const MethodRun b = run_method(spec, data, m, 0);
  const fs::path da = method_dir(tiny_spec(t1.path.string()), m, 0), db = method_dir(spec, m, 0);
  for (const char* f : {"sweep-dynamic_k.csv", "sweep-top_k.csv", "summary.csv", "expert-counts.csv", "meta.json",
                        "convert.ckpt"}) {
    ASSERT_TRUE(fs::exists(da / f)) << f;
    EXPECT_EQ(slurp(da / f), slurp(db / f)) << f;
  }
}

TEST(Sweep, SummaryIsSortedByAnalyticFlops) {
  TempDir tmp("d2dmoe_sweep_sorted");
  const ExperimentSpec spec = tiny_spec(tmp.path.string());
  const Dataset data = generate_dataset(spec.data);
  const MethodRun r = run_method(spec, data, spec.methods.front(), 0);
  std::istringstream lines(summary_csv({r.sweep}));
  std::string line;
  std::getline(lines, line);
  double prev = -1.0;
  int rows = 0;
  while (std::getline(lines, line)) {
    std::stringstream ss(line);
    std::string cell;
    for (int i = 0; i < 4; ++i) std::getline(ss, cell, ',');
    const double f = std::stod(cell);
    EXPECT_GE(f, prev);
    prev = f;
    ++rows;
  }
  EXPECT_EQ(rows, 7);
}

TEST(Compare, NeedsTwoMethodsAndWritesMatchedRows) {
  TempDir tmp("d2dmoe_compare");
  ExperimentSpec spec = tiny_spec(tmp.path.string());
  const Dataset data = generate_dataset(spec.data);
  EXPECT_THROW(compare_methods(spec, data), ValidationError);
  spec.methods = {{"dense-a0", MethodKind::d2dmoe, 0.0, std::nullopt, std::nullopt},
                  {"moef", MethodKind::moefication, std::nullopt, std::nullopt, std::nullopt}};
  spec.budgets = {0.5, 5.0};
  const Comparison c = compare_methods(spec, data);
  EXPECT_EQ(c.runs.size(), 2u);
  EXPECT_TRUE(fs::exists(tmp.path / "compare.csv"));
  EXPECT_TRUE(fs::exists(tmp.path / "matched.csv"));
  int unreachable = 0;
  for (const auto& r : c.matched) {
    if (r.axis == MatchAxis::moe_ratio && r.target == 5.0) {
      EXPECT_FALSE(r.loss.has_value());
      ++unreachable;
    }
  }
  EXPECT_EQ(unreachable, 3);  // dynamic and top-k for d2dmoe, top-k for moefication
  // Both methods share the base checkpoint.
  EXPECT_EQ(c.runs[0].logs.front().key, c.runs[1].logs.front().key);
}

TEST(Interpolate, LinearBetweenSortedPoints) {
  EXPECT_DOUBLE_EQ(*interpolate({{1.0, 10.0}, {0.0, 0.0}}, 0.25), 2.5);
  EXPECT_DOUBLE_EQ(*interpolate({{0.0, 1.0}, {0.5, 3.0}, {1.0, 2.0}}, 0.75), 2.5);
  EXPECT_DOUBLE_EQ(*interpolate({{0.0, 1.0}, {0.5, 3.0}}, 0.5), 3.0);
  EXPECT_FALSE(interpolate({{0.0, 1.0}, {0.5, 3.0}}, 0.6).has_value());
  EXPECT_FALSE(interpolate({}, 0.0).has_value());
}

TEST(Compare, BudgetMismatchIsRejectedBeforeRunning) {
  TempDir tmp("d2dmoe_compare_budget");
  ExperimentSpec spec = tiny_spec(tmp.path.string());
  spec.methods = {{"a", MethodKind::d2dmoe, std::nullopt, std::nullopt, std::nullopt},
                  {"b", MethodKind::moefication, std::nullopt, std::nullopt, 5}};
  const Dataset data = generate_dataset(spec.data);
  EXPECT_THROW(check_budget_parity(spec, data), ValidationError);
  EXPECT_THROW(compare_methods(spec, data), ValidationError);
  EXPECT_FALSE(fs::exists(tmp.path));
  spec.methods[0].finetune_steps = 5;
  EXPECT_NO_THROW(check_budget_parity(spec, data));
}

TEST(Compare, IdenticalMethodsGiveBitwiseIdenticalCurves) {
  TempDir tmp("d2dmoe_compare_twins");
  ExperimentSpec spec = tiny_spec(tmp.path.string());
  spec.methods = {{"twin-a", MethodKind::d2dmoe, 0.01, std::nullopt, std::nullopt},
                  {"twin-b", MethodKind::d2dmoe, 0.01, std::nullopt, std::nullopt}};
  const Comparison c = compare_methods(spec, generate_dataset(spec.data));
  const auto strip = [](std::string csv) {
    std::string out;
    std::istringstream in(csv);
    for (std::string line; std::getline(in, line);) out += line.substr(line.find(',')) + "\n";
    return out;
  };
  EXPECT_EQ(strip(summary_csv({c.runs[0].sweep})), strip(summary_csv({c.runs[1].sweep})));
  const fs::path a = method_dir(spec, spec.methods[0], 0), b = method_dir(spec, spec.methods[1], 0);
  EXPECT_EQ(slurp(a / "convert.ckpt"), slurp(b / "convert.ckpt"));
}
