#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "d2dmoe/tensor.hpp"

namespace d2dmoe::ad {

enum class Schedule { constant, cosine, linear };

Schedule parse_schedule(const std::string& s);
std::string to_string(Schedule s);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW-style)
  Schedule schedule = Schedule::constant;
  std::int64_t total_steps = 0;  // horizon for cosine/linear decay
  std::int64_t warmup_steps = 0;
  double min_lr_ratio = 0.0;
  double clip_norm = 0.0;  // global gradient-norm clip, 0 disables
};

// Learning rate at a 0-based step under the config's schedule.
double scheduled_lr(const AdamConfig& cfg, std::int64_t step);

template <class Real>
struct ParamSlot {
  std::string name;
  Tensor<Real>* value;
  const Tensor<Real>* grad;
};

// Adaptive-moment optimizer with bias correction. Moment buffers are keyed
// by parameter name and created on first use.
template <class Real>
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void step(const std::vector<ParamSlot<Real>>& params);

  std::int64_t step_count() const { return steps_; }
  double current_lr() const { return scheduled_lr(cfg_, steps_); }
  const AdamConfig& config() const { return cfg_; }
  const Tensor<Real>& first_moment(const std::string& name) const { return moments_.at(name).m; }
  const Tensor<Real>& second_moment(const std::string& name) const { return moments_.at(name).v; }

 private:
  struct Moments {
    Tensor<Real> m;
    Tensor<Real> v;
  };
  AdamConfig cfg_;
  std::int64_t steps_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace d2dmoe::ad
