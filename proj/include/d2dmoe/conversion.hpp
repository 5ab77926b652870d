#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "d2dmoe/clustering.hpp"
#include "d2dmoe/data.hpp"
#include "d2dmoe/model.hpp"
#include "d2dmoe/routing.hpp"

namespace d2dmoe {

// Rows of the tensor a site consumes (post-layernorm FFN input, or the input
// of an attention projection), gathered over the first `max_sequences`
// sequences of a split with the model frozen.
Tensor capture_site_inputs(const DenseModel& model, SiteId site, const Dataset& data, Split split,
                           std::size_t max_sequences = 0, std::size_t batch_size = 32);

// All FFN sites, plus the replaced attention projections when asked.
std::vector<SiteId> convertible_sites(const DenseModel& model, bool include_mha);

// Clusters a site's neurons and records the partition on the model.
SplitResult cluster_site(DenseModel& model, SiteId site, int n_experts, std::uint64_t seed,
                         const KMeansOptions& opts = {});

// Router regression data for a clustered site: inputs z and per-expert
// output norms computed with the frozen model. ContractError when the site
// has not been clustered.
RouterDataset collect_router_dataset(const DenseModel& model, SiteId site, const Dataset& data,
                                     std::size_t max_sequences = 0);

// MoEfication labels: per-expert hidden activation sums normalized by their
// maximum within each collection batch of `label_batch` sequences.
struct BaselineCollection {
  RouterDataset data;
  std::size_t all_zero_batches = 0;
};
BaselineCollection collect_baseline_dataset(const DenseModel& model, SiteId site, const Dataset& data,
                                            std::size_t max_sequences = 0, std::size_t label_batch = 32);

// Replaces every listed site by an MoE layer built from its recorded
// partition and router. A raw attention projection is a ContractError:
// projections must be replaced by MLPs first.
void convert_model(DenseModel& model, const std::vector<SiteId>& sites, const GatePolicy& policy);

// Sets the gate policy of every MoE site.
void set_policy(DenseModel& model, const GatePolicy& policy);

struct PolicyTrace {
  GatePolicy policy;
  ExecutionTrace trace;
  double loss = 0.0;
  double accuracy = 0.0;
};

// Runs the split once per policy and records executed-expert counts.
std::vector<PolicyTrace> per_token_expert_counts(const DenseModel& model, const Dataset& data,
                                                 const std::vector<GatePolicy>& grid, Split split = Split::val,
                                                 std::size_t max_sequences = 0);

// Columns site, policy_param, bucket, count; bucket = executed experts.
std::string expert_histogram_csv(const std::vector<PolicyTrace>& traces);

}  // namespace d2dmoe
