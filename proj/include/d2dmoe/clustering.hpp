#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "d2dmoe/weights.hpp"

namespace d2dmoe {

struct KMeansOptions {
  int max_iters = 100;
  int n_init = 1;             // restarts from independent seeds, best objective kept
  bool swap_refine = true;    // pairwise-swap local search after the assignment loop
};

struct KMeansResult {
  std::vector<int> assignment;  // point -> cluster
  double objective = 0.0;       // within-cluster sum of squares
  std::vector<double> history;  // objective after every accepted step
  int iterations = 0;
  int swaps = 0;
};

// Minimum-cost perfect matching on a square cost matrix (row-major, n x n).
// Returns the column assigned to each row.
std::vector<int> hungarian(const std::vector<double>& cost, std::size_t n);

// Within-cluster sum of squared distances to the cluster means.
double balanced_objective(const Tensor& points, const std::vector<int>& assignment, int n_clusters);

// Equal-size k-means over the rows of `points`. Every cluster receives
// exactly rows / n_clusters points.
KMeansResult balanced_kmeans(const Tensor& points, int n_clusters, std::uint64_t seed,
                             const KMeansOptions& opts = {});

struct ExpertPartition {
  int layer = 0;
  int n_experts = 1;
  int expert_size = 0;
  std::vector<int> assignment;  // neuron -> expert

  // Neuron indices of one expert, ascending.
  std::vector<int> members(int expert) const;
  // Throws ValidationError unless the partition is balanced over `hidden` neurons.
  void validate(std::size_t hidden) const;
  bool operator==(const ExpertPartition&) const = default;
};

Json to_json(const ExpertPartition& p);
ExpertPartition partition_from_json(const Json& j);

struct ExpertSlice {
  Tensor W1;  // d_m x s
  Tensor b1;  // s
  Tensor W2;  // s x d_m
  std::optional<Tensor> Wg;

  FfnCoreView view() const { return FfnCoreView{W1, b1, W2, Wg ? &*Wg : nullptr}; }
};

struct ExpertSlices {
  std::vector<ExpertSlice> experts;
  Tensor b2;  // shared, added once after the expert sum
  std::uint64_t source = 0;  // fingerprint of the sliced FFN

  std::size_t size() const { return experts.size(); }
};

ExpertSlices slice_ffn(const FfnWeights& ffn, const ExpertPartition& partition);

struct SplitResult {
  ExpertPartition partition;
  ExpertSlices slices;
  KMeansResult kmeans;
};

// Clusters neurons on their input weights (W1 columns, or Wg columns for the
// gated kind) and slices the FFN accordingly.
SplitResult split_ffn(const FfnWeights& ffn, int n_experts, std::uint64_t seed, const KMeansOptions& opts = {});

// Output of one expert without b2.
Tensor expert_output(const ExpertSlice& slice, const Tensor& z, Activation act);

// max |dense(z) - (b2 + sum_i expert_i(z))| over the batch.
double reconstruct_check(const FfnWeights& ffn, const ExpertSlices& slices, const Tensor& z, Activation act);

}  // namespace d2dmoe
