#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "d2dmoe/clustering.hpp"
#include "d2dmoe/optimizer.hpp"
#include "d2dmoe/weights.hpp"

namespace d2dmoe {

// abs: regression router predicting expert output norms.
// sigmoid: classifier router of the MoEfication baseline.
enum class RouterOutput { abs, sigmoid };

std::string to_string(RouterOutput o);
RouterOutput parse_router_output(const std::string& s);

struct RouterWeights {
  Tensor Wh;  // d_m x d_h
  Tensor bh;  // d_h
  Tensor Wo;  // d_h x n
  Tensor bo;  // n
  RouterOutput output = RouterOutput::abs;

  std::size_t model_dim() const { return Wh.dim(0); }
  std::size_t hidden() const { return Wh.dim(1); }
  std::size_t n_experts() const { return Wo.dim(1); }
  void check() const;
};

// Default router width: d_m / 6, at least 1.
int default_router_hidden(int model_dim);

RouterWeights init_router(int model_dim, int hidden, int n_experts, RouterOutput output, std::uint64_t seed);

// Scores for rows of z (tokens x d_m): |.| or sigmoid of the second layer.
Tensor router_scores(const RouterWeights& r, const Tensor& z);

struct RouterDataset {
  Tensor inputs;   // tokens x d_m
  Tensor targets;  // tokens x n

  std::size_t size() const { return inputs.dim(0); }
  void check() const;
};

// Per-expert output norms ||E_i(z)||_2 for rows of z.
Tensor expert_norm_targets(const ExpertSlices& slices, const Tensor& z, Activation act);

struct RouterTrainConfig {
  int hidden = 0;  // 0 selects default_router_hidden(d_m)
  int steps = 1000;
  int batch_size = 256;
  ad::AdamConfig adam{.lr = 3e-3, .schedule = ad::Schedule::cosine};
  int val_modulus = 10;  // a token is held out when hash(index) % val_modulus == 0
};

struct RouterTrainResult {
  RouterWeights router;
  double train_loss = 0.0;
  double val_loss = 0.0;
  // Mean per-expert variance of the validation targets: the loss of the
  // best constant predictor.
  double val_target_variance = 0.0;
  std::size_t train_tokens = 0;
  std::size_t val_tokens = 0;
};

bool is_validation_token(std::size_t index, int modulus);

// Regression router trained by MSE against expert norms.
RouterTrainResult train_router(const RouterTrainConfig& cfg, const RouterDataset& data, std::uint64_t seed);

// Classifier router (sigmoid output) trained by binary cross-entropy on
// [0, 1] labels. Losses in the result are BCE values.
RouterTrainResult train_baseline_router(const RouterTrainConfig& cfg, const RouterDataset& data, std::uint64_t seed);

struct GatePolicy {
  enum class Kind { dynamic_k, top_k };
  Kind kind = Kind::dynamic_k;
  double tau = 0.0;
  int k = 1;

  static GatePolicy dynamic(double tau) { return GatePolicy{Kind::dynamic_k, tau, 1}; }
  static GatePolicy top(int k) { return GatePolicy{Kind::top_k, 0.0, k}; }
  // Numeric grid coordinate: tau or k.
  double param() const { return kind == Kind::dynamic_k ? tau : static_cast<double>(k); }
  std::string str() const;
  void validate(int n_experts) const;
  bool operator==(const GatePolicy&) const = default;
};

Json to_json(const GatePolicy& p);
GatePolicy policy_from_json(const Json& j);

struct GateDecision {
  std::vector<std::uint8_t> mask;
  int selected_count = 0;
  bool all_zero = false;  // dynamic-k saw an all-zero score vector
};

// Selects every expert with score >= tau * max(score). An all-zero score
// vector selects all experts and sets all_zero.
GateDecision dynamic_k_gate(std::span<const float> scores, double tau);

// Selects the k largest scores, ties to the lower index.
GateDecision top_k_gate(std::span<const float> scores, int k);

GateDecision apply_gate(const GatePolicy& policy, std::span<const float> scores);

struct BaselineLabels {
  Tensor labels;  // tokens x n, in [0, 1]
  bool all_zero = false;
};

// Per-token, per-expert sums of hidden activations (tokens x H) grouped by
// the partition.
Tensor expert_activation_sums(const Tensor& hidden, const ExpertPartition& partition);

// y_{k,j} = sum_i a_{k,j,i} / max_{l,m} sum_i a_{l,m,i} over a batch of
// activations shaped tokens x n x expert_size (non-negative).
BaselineLabels moefication_labels(const Tensor& activations);

// Same normalization applied to precomputed sums (tokens x n).
BaselineLabels labels_from_sums(const Tensor& sums);

}  // namespace d2dmoe
