#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "d2dmoe/experiment.hpp"

namespace d2dmoe {

// Stage names in pipeline order. "train" is shared by every method of a seed.
inline const std::vector<std::string> kStages{"train", "relufy", "replace-mha", "sparsify", "cluster", "routers",
                                              "convert"};

struct StageLog {
  std::string stage;
  std::string method;  // empty for the shared base stage
  std::uint64_t seed = 0;
  std::uint64_t stage_seed = 0;
  std::string key;  // chained hash of every config the stage depends on
  std::uint64_t dataset_hash = 0;
  std::int64_t tokens = 0;  // data tokens pushed through the model
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  Json details = Json::object();
};

Json to_json(const StageLog& l);
StageLog stage_log_from_json(const Json& j);

// Stage bodies on an in-memory model. Each returns its log with tokens,
// details and the validation metrics after the stage.
DenseModel initial_model(const ExperimentSpec& spec, std::uint64_t seed);
StageLog train_stage(DenseModel& model, const ExperimentSpec& spec, const Dataset& data, std::uint64_t seed);
StageLog relufy_stage(DenseModel& model, const ExperimentSpec& spec, const Dataset& data, std::uint64_t seed);
StageLog replace_mha_stage(DenseModel& model, const ExperimentSpec& spec, const Dataset& data, std::uint64_t seed);
StageLog sparsify_stage(DenseModel& model, const ExperimentSpec& spec, const MethodSpec& method, const Dataset& data,
                        std::uint64_t seed);
StageLog cluster_stage(DenseModel& model, const ExperimentSpec& spec, const MethodSpec& method, const Dataset& data,
                       std::uint64_t seed);
StageLog routers_stage(DenseModel& model, const ExperimentSpec& spec, const MethodSpec& method, const Dataset& data,
                       std::uint64_t seed);
StageLog convert_stage(DenseModel& model, const ExperimentSpec& spec, const MethodSpec& method, const Dataset& data,
                       std::uint64_t seed);

// Stages a method runs after the shared base, in order.
std::vector<std::string> method_stages(const ExperimentSpec& spec, const MethodSpec& method);

// Data tokens each stage will consume, for budget checks before running.
std::map<std::string, std::int64_t> planned_tokens(const ExperimentSpec& spec, const MethodSpec& method,
                                                   const Dataset& data);

std::filesystem::path seed_dir(const ExperimentSpec& spec, std::uint64_t seed);
std::filesystem::path base_dir(const ExperimentSpec& spec, std::uint64_t seed);
std::filesystem::path method_dir(const ExperimentSpec& spec, const MethodSpec& method, std::uint64_t seed);

struct PipelineResult {
  DenseModel model;
  std::vector<StageLog> logs;  // base stage first
  std::filesystem::path dir;
  std::vector<std::string> resumed;  // stages loaded from disk instead of run
};

// Runs (or resumes) the shared base stage and then the method's stages up to
// and including `until`. Each stage writes <stage>.ckpt and <stage>.json; a
// stage whose log carries the same key is loaded instead of rerun. On a stage
// failure failed.json names the stage and the artifacts on disk, and the
// error is rethrown.
PipelineResult run_pipeline(const ExperimentSpec& spec, const Dataset& data, const MethodSpec& method,
                            std::uint64_t seed, const std::string& until = "convert");

// Shared base only.
PipelineResult run_base(const ExperimentSpec& spec, const Dataset& data, std::uint64_t seed);

}  // namespace d2dmoe
