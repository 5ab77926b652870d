#pragma once

#include <cstdint>
#include <optional>

#include "d2dmoe/conversion.hpp"
#include "d2dmoe/experiment.hpp"

namespace d2dmoe {

// Adds `offset` to b1[channel] of a dense standard FFN, so the channel fires
// at roughly that magnitude on every token.
void inject_massive_activation(DenseModel& model, int layer, int channel, float offset);

// Mean of the non-zero hidden activations of an FFN site over `z`.
double typical_activation(const FfnWeights& ffn, const Tensor& z, Activation act);

struct MassiveActivationConfig {
  int layer = 0;
  int channel = 0;
  double factor = 1000.0;  // outlier = factor x typical activation
  // The outlier expert's own labels stay near 1, which caps the share of
  // small labels at (n-1)/n; n must be well above 10 for a 90% share.
  int n_experts = 32;
  std::size_t max_sequences = 256;
  double label_threshold = 0.01;
  KMeansOptions kmeans;
  std::optional<RouterTrainConfig> routers;  // also train both router kinds when set
};

struct MassiveActivationReport {
  SiteId site;
  int channel = 0;
  int outlier_expert = 0;
  ExpertPartition partition;  // clustered on the clean weights
  double typical = 0.0;
  double offset = 0.0;
  std::size_t tokens = 0;
  // Share of MoEfication labels below the threshold.
  double labels_below_clean = 0.0;
  double labels_below_injected = 0.0;
  // Regression targets of the other experts: relative Frobenius change and
  // largest absolute change.
  double target_change = 0.0;
  double target_max_abs_change = 0.0;
  double outlier_target_growth = 0.0;  // mean outlier-expert target, injected / clean
  bool routers_trained = false;
  // Held-out tokens, non-outlier experts only.
  double regression_nmse_clean = 0.0;  // mean over experts of MSE / variance
  double regression_nmse_injected = 0.0;
  double baseline_top1_clean = 0.0;  // router argmax agrees with the clean expert-sum argmax
  double baseline_top1_injected = 0.0;
};

// Same site inputs, same partition (clustered before injection), clean vs
// injected FFN weights. Standard relu FFN sites only.
MassiveActivationReport massive_activation_study(const DenseModel& model, const Dataset& data,
                                                 const MassiveActivationConfig& cfg, std::uint64_t seed);

Json to_json(const MassiveActivationReport& r);

}  // namespace d2dmoe
