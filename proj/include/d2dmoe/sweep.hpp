#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "d2dmoe/cost.hpp"
#include "d2dmoe/pipeline.hpp"

namespace d2dmoe {

struct SweepPoint {
  GatePolicy policy;
  double loss = 0.0;
  double accuracy = 0.0;
  double selected_fraction = 0.0;  // mean over MoE sites of executed / n
  FlopsReport flops;
};

struct SweepResult {
  std::string method;
  std::vector<SweepPoint> points;  // in grid order
  std::string expert_counts_csv;   // dynamic-k policies only
};

// d2dmoe: every tau, then every k; moefication: k only.
std::vector<GatePolicy> policy_grid(const ExperimentSpec& spec, const MethodSpec& method);

// Evaluates a converted model once per policy on the validation split.
SweepResult run_sweep(const DenseModel& model, const Dataset& data, const std::vector<GatePolicy>& grid,
                      const std::string& method, std::size_t max_sequences = 0);

// Columns method, policy, param, analytic_flops, measured_flops, dense_flops,
// moe_ratio, model_ratio, selected_fraction, loss, accuracy; rows sorted by
// analytic FLOPs (ties: method, policy, param).
std::string summary_csv(const std::vector<SweepResult>& sweeps);

// One policy kind in the cost report layout (metric = validation loss).
std::string sweep_cost_csv(const SweepResult& sweep, GatePolicy::Kind kind);

// Writes sweep-dynamic_k.csv / sweep-top_k.csv (when present), summary.csv,
// expert-counts.csv and meta.json into `dir`.
void write_sweep(const std::filesystem::path& dir, const SweepResult& sweep, const Json& meta);

// Piecewise-linear y(x) through the points sorted by x (ties keep input
// order). nullopt outside the covered range.
std::optional<double> interpolate(std::vector<std::pair<double, double>> points, double x);

enum class MatchAxis { moe_ratio, selected_fraction };
std::string to_string(MatchAxis a);

struct MatchedRow {
  std::uint64_t seed = 0;
  std::string method;
  std::string policy;  // "dynamic_k" or "top_k"
  MatchAxis axis = MatchAxis::moe_ratio;
  double target = 0.0;
  std::optional<double> loss;
};

// Validation loss of each policy curve at the given compute levels.
std::vector<MatchedRow> matched_losses(const SweepResult& sweep, std::uint64_t seed, MatchAxis axis,
                                       const std::vector<double>& targets);

// Columns seed, method, policy, axis, target, loss (empty when unreachable).
std::string matched_csv(const std::vector<MatchedRow>& rows);

// Selected-fraction levels used for the dynamic-k vs top-k comparison.
inline const std::vector<double> kMatchedFractions{0.25, 0.5, 0.75};

// Every method must consume the same number of data tokens. ValidationError
// naming the methods otherwise.
void check_budget_parity(const ExperimentSpec& spec, const Dataset& data);

struct MethodRun {
  std::uint64_t seed = 0;
  MethodSpec method;
  std::vector<StageLog> logs;
  SweepResult sweep;
};

struct Comparison {
  std::vector<MethodRun> runs;
  std::vector<MatchedRow> matched;
};

using ProgressFn = std::function<void(const std::string&)>;

// Every method for every seed through the pipeline and the sweep; writes the
// per-run sweep files, then compare.csv (all rows with a seed column) and
// matched.csv under the experiment's output_dir. Needs at least two methods.
Comparison compare_methods(const ExperimentSpec& spec, const Dataset& data, const ProgressFn& progress = {});

// Runs one method for one seed end to end and writes its sweep files.
MethodRun run_method(const ExperimentSpec& spec, const Dataset& data, const MethodSpec& method, std::uint64_t seed);

}  // namespace d2dmoe
