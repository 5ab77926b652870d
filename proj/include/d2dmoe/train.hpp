#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "d2dmoe/data.hpp"
#include "d2dmoe/model.hpp"
#include "d2dmoe/optimizer.hpp"

namespace d2dmoe {

struct TrainConfig {
  int steps = 500;
  int batch_size = 16;
  ad::AdamConfig adam{.lr = 3e-3, .weight_decay = 0.0, .schedule = ad::Schedule::cosine, .warmup_steps = 20, .clip_norm = 1.0};
  int log_interval = 50;

  void validate() const;
  std::int64_t tokens(const Dataset& d) const;  // token budget consumed by one run
};
Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const Json& j, TrainConfig defaults = {});

// Extra loss term evaluated on each training forward pass.
struct AuxTerm {
  ad::Var<float> weighted;  // added to the task loss; may be invalid for "none"
  double raw = 0.0;         // unweighted value, for logging
  double weight = 0.0;
  double nonzero_fraction = -1.0;
};
using AuxLossFn = std::function<AuxTerm(const DenseModel&, const ForwardResult&, std::int64_t step)>;

struct TrainOptions {
  TraceFlags trace;  // requested on every training forward
  AuxLossFn aux;
  // Parameters to update; empty means every dense parameter.
  std::function<bool(const std::string&)> trainable;
};

struct TrainLogEntry {
  std::int64_t step = 0;
  double loss = 0.0;  // task loss of the step's batch
  double aux = 0.0;
  double aux_weight = 0.0;
  double nonzero_fraction = -1.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::int64_t steps = 0;
  std::int64_t tokens = 0;
};
Json to_json(const TrainResult& r);

// Adam on the task loss (+ aux). A non-finite loss or gradient throws
// NumericError carrying the step; the model then holds the last good weights.
TrainResult train_model(DenseModel& model, const Dataset& data, const TrainConfig& cfg, std::uint64_t seed,
                        const TrainOptions& opts = {});

struct EvalResult {
  double loss = 0.0;      // mean cross-entropy per prediction
  double accuracy = 0.0;  // next-token or class accuracy
  std::int64_t predictions = 0;
  ExecutionTrace exec;
};

EvalResult evaluate(const DenseModel& model, const Dataset& data, Split split, std::size_t batch_size = 32,
                    const GatePolicy* policy_override = nullptr, std::size_t max_sequences = 0);

}  // namespace d2dmoe
