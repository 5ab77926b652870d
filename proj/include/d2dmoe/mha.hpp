#pragma once

#include <cstdint>
#include <vector>

#include "d2dmoe/data.hpp"
#include "d2dmoe/model.hpp"
#include "d2dmoe/optimizer.hpp"

namespace d2dmoe {

// floor(d_m / 2), at least 1: the MLP then costs 2 d_m h = d_m^2 MACs, the
// same as the projection it replaces (odd d_m lands just under). Parameters
// exceed the projection's by h / (d_m^2 + d_m), under 5% once d_m >= 10.
int replacement_hidden(int model_dim);

struct DistillConfig {
  int hidden = 0;  // 0 selects replacement_hidden(d_m)
  int steps = 1500;
  int batch_size = 256;
  ad::AdamConfig adam{.lr = 3e-3, .schedule = ad::Schedule::cosine};
  int val_modulus = 10;
  int threads = 1;  // sites distilled concurrently by replace_mha

  void validate() const;
};

Json to_json(const DistillConfig& c);
DistillConfig distill_config_from_json(const Json& j, DistillConfig defaults = {});

struct DistillResult {
  ReplacementMlp mlp;
  double train_mse = 0.0;
  double val_mse = 0.0;
  // Mean per-dimension variance of the held-out targets.
  double val_output_variance = 0.0;
  std::size_t train_tokens = 0;
  std::size_t val_tokens = 0;
};

// Trains a relu MLP to imitate x W + b on the given input rows by mean
// squared error. Rows with is_validation_token(i, val_modulus) are held out.
// NumericError carrying the step on divergence.
DistillResult distill_projection(const LinearWeights& original, const Tensor& inputs, const DistillConfig& cfg,
                                 SiteId provenance, std::uint64_t seed);

struct SiteDistillation {
  SiteId site;
  DistillResult result;
};

// Captures every site's inputs from the unmodified model first, distills each
// site independently, then swaps the MLPs in. Sites must hold raw projections.
std::vector<SiteDistillation> replace_mha(DenseModel& model, const std::vector<SiteId>& sites, const Dataset& data,
                                          const DistillConfig& cfg, std::uint64_t seed, std::size_t max_sequences = 0);

// Every q, k, v, o site of the model.
std::vector<SiteId> all_projection_sites(const DenseModel& model);

Json to_json(const SiteDistillation& s);

}  // namespace d2dmoe
