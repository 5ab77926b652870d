#include "d2dmoe/optimizer.hpp"

#include <cmath>
#include <numbers>

namespace d2dmoe::ad {

Schedule parse_schedule(const std::string& s) {
  if (s == "constant") return Schedule::constant;
  if (s == "cosine") return Schedule::cosine;
  if (s == "linear") return Schedule::linear;
  throw ValidationError("unknown learning-rate schedule '" + s + "'");
}

std::string to_string(Schedule s) {
  switch (s) {
    case Schedule::constant: return "constant";
    case Schedule::cosine: return "cosine";
    case Schedule::linear: return "linear";
  }
  return "constant";
}

double scheduled_lr(const AdamConfig& cfg, std::int64_t step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.schedule == Schedule::constant || cfg.total_steps <= cfg.warmup_steps) return cfg.lr;
  const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  const double t = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
  const double floor = cfg.lr * cfg.min_lr_ratio;
  const double decay = cfg.schedule == Schedule::cosine ? 0.5 * (1.0 + std::cos(std::numbers::pi * t)) : 1.0 - t;
  return floor + (cfg.lr - floor) * decay;
}

template <class Real>
void Adam<Real>::step(const std::vector<ParamSlot<Real>>& params) {
  for (const auto& p : params) {
    if (p.value->shape() != p.grad->shape()) {
      throw ContractError("optimizer: gradient shape " + shape_str(p.grad->shape()) + " does not match parameter '" +
                          p.name + "' " + shape_str(p.value->shape()));
    }
  }
  double clip_scale = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : params) {
      for (Real g : p.grad->data()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) clip_scale = cfg_.clip_norm / norm;
  }

  const double lr = scheduled_lr(cfg_, steps_);
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  const auto b1 = static_cast<Real>(cfg_.beta1);
  const auto b2 = static_cast<Real>(cfg_.beta2);
  const auto step_size = static_cast<Real>(lr / bc1);
  const auto inv_bc2 = static_cast<Real>(1.0 / bc2);
  const auto eps = static_cast<Real>(cfg_.eps);
  const auto decay = static_cast<Real>(lr * cfg_.weight_decay);
  const auto cs = static_cast<Real>(clip_scale);

  for (const auto& p : params) {
    auto it = moments_.find(p.name);
    if (it == moments_.end()) {
      it = moments_.emplace(p.name, Moments{Tensor<Real>(p.value->shape()), Tensor<Real>(p.value->shape())}).first;
    } else if (it->second.m.shape() != p.value->shape()) {
      throw ContractError("optimizer: parameter '" + p.name + "' changed shape between steps");
    }
    Tensor<Real>& m = it->second.m;
    Tensor<Real>& v = it->second.v;
    Tensor<Real>& w = *p.value;
    const Tensor<Real>& g = *p.grad;
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const Real gi = g[i] * cs;
      m[i] = b1 * m[i] + (Real(1) - b1) * gi;
      v[i] = b2 * v[i] + (Real(1) - b2) * gi * gi;
      if (decay != Real(0)) w[i] -= decay * w[i];
      w[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace d2dmoe::ad
