#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "d2dmoe/clustering.hpp"
#include "d2dmoe/data.hpp"
#include "d2dmoe/mha.hpp"
#include "d2dmoe/routing.hpp"
#include "d2dmoe/sparsity.hpp"
#include "d2dmoe/train.hpp"

namespace d2dmoe {

// d2dmoe: sparsify, cluster, regression routers, dynamic-k (top-k also swept).
// moefication: relufy, plain fine-tune, cluster, classifier routers, top-k.
enum class MethodKind { d2dmoe, moefication };

std::string to_string(MethodKind k);
MethodKind parse_method_kind(const std::string& s);

struct MethodSpec {
  std::string name;
  MethodKind kind = MethodKind::d2dmoe;
  std::optional<double> alpha;     // overrides sparsify.alpha (d2dmoe only)
  std::optional<int> n_experts;    // overrides cluster.n_experts
  std::optional<int> finetune_steps;  // overrides sparsify.train.steps

  bool operator==(const MethodSpec&) const = default;
};

struct MhaStage {
  bool enabled = false;
  DistillConfig distill;
  std::size_t max_sequences = 256;  // capture budget per site
  TrainConfig recovery;             // steps replaced by recovery_epochs when > 0
  int recovery_epochs = 1;
};

struct ClusterStage {
  int n_experts = 8;
  bool include_mha = true;  // also convert replaced projections
  KMeansOptions kmeans;
};

struct RouterStage {
  RouterTrainConfig train{.steps = 2000};
  std::size_t max_sequences = 512;
};

struct PolicyGrid {
  std::vector<double> tau{0.0, 0.025, 0.05, 0.075, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<int> k;  // empty: 1..n
};

struct ExperimentSpec {
  std::string name = "experiment";
  DatasetSpec data;
  TransformerConfig model;
  TrainConfig train;
  bool relufy = false;  // d2dmoe only; moefication always relufies
  MhaStage mha;
  SparsityConfig sparsify;
  ClusterStage cluster;
  RouterStage routers;
  PolicyGrid grid;
  std::vector<MethodSpec> methods{{"d2dmoe", MethodKind::d2dmoe, std::nullopt, std::nullopt, std::nullopt}};
  std::vector<std::uint64_t> seeds{0};
  std::vector<double> budgets{0.4, 0.5, 0.6};  // matched-FLOPs comparison points
  std::size_t eval_max_sequences = 0;         // 0: the whole validation split
  std::string output_dir = "runs";
  int threads = 1;

  // Throws ValidationError listing every problem.
  void validate() const;
  const MethodSpec& method(const std::string& name) const;
  int n_experts(const MethodSpec& m) const { return m.n_experts.value_or(cluster.n_experts); }
  double alpha(const MethodSpec& m) const;
  SparsityConfig finetune(const MethodSpec& m) const;
  std::vector<int> k_grid(int n_experts) const;
};

// The desk-scale defaults: byte-LM, d_m 64, 4 heads, 2 layers, context 32.
ExperimentSpec desk_spec();

Json to_json(const ExperimentSpec& s);
// Keys missing from the JSON keep the desk defaults. Unknown top-level keys
// are rejected.
ExperimentSpec experiment_spec_from_json(const Json& j);
ExperimentSpec load_experiment_spec(const std::filesystem::path& path);

Json to_json(const RouterTrainConfig& c);
RouterTrainConfig router_config_from_json(const Json& j, RouterTrainConfig defaults = {});
Json to_json(const KMeansOptions& o);
KMeansOptions kmeans_options_from_json(const Json& j, KMeansOptions defaults = {});

// Identifier of the build the results came from.
std::string build_id();

}  // namespace d2dmoe
