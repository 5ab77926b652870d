#include "d2dmoe/train.hpp"

#include <cmath>

#include "d2dmoe/hash.hpp"

namespace d2dmoe {

void TrainConfig::validate() const {
  std::vector<std::string> v;
  if (steps < 0) v.push_back("steps must be non-negative");
  if (batch_size < 1) v.push_back("batch_size must be positive");
  if (!(adam.lr > 0.0)) v.push_back("lr must be positive");
  if (log_interval < 1) v.push_back("log_interval must be positive");
  if (!v.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& s : v) msg += " " + s + ";";
    throw ValidationError(msg);
  }
}

std::int64_t TrainConfig::tokens(const Dataset& d) const {
  return static_cast<std::int64_t>(steps) * batch_size * d.seq_len;
}

Json to_json(const TrainConfig& c) {
  return Json{{"steps", c.steps},
              {"batch_size", c.batch_size},
              {"lr", c.adam.lr},
              {"weight_decay", c.adam.weight_decay},
              {"schedule", ad::to_string(c.adam.schedule)},
              {"warmup_steps", c.adam.warmup_steps},
              {"clip_norm", c.adam.clip_norm},
              {"log_interval", c.log_interval}};
}

TrainConfig train_config_from_json(const Json& j, TrainConfig c) {
  try {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.weight_decay = j.value("weight_decay", c.adam.weight_decay);
    if (j.contains("schedule")) c.adam.schedule = ad::parse_schedule(j.at("schedule").get<std::string>());
    c.adam.warmup_steps = j.value("warmup_steps", c.adam.warmup_steps);
    c.adam.clip_norm = j.value("clip_norm", c.adam.clip_norm);
    c.log_interval = j.value("log_interval", c.log_interval);
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

Json to_json(const TrainResult& r) {
  Json log = Json::array();
  for (const auto& e : r.log) {
    Json row{{"step", e.step}, {"loss", e.loss}, {"lr", e.lr}};
    if (e.aux_weight != 0.0 || e.aux != 0.0) {
      row["aux"] = e.aux;
      row["aux_weight"] = e.aux_weight;
    }
    if (e.nonzero_fraction >= 0.0) row["nonzero_fraction"] = e.nonzero_fraction;
    log.push_back(std::move(row));
  }
  return Json{{"steps", r.steps}, {"tokens", r.tokens}, {"log", std::move(log)}};
}

namespace {

bool all_finite(const Tensor& t) {
  for (float x : t.data()) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace

TrainResult train_model(DenseModel& model, const Dataset& data, const TrainConfig& cfg, std::uint64_t seed,
                        const TrainOptions& opts) {
  cfg.validate();
  data.validate();
  data.check_compatible(model.config);
  ad::AdamConfig adam_cfg = cfg.adam;
  adam_cfg.total_steps = cfg.steps;
  ad::Adam<float> adam(adam_cfg);
  BatchSampler sampler(data.size(Split::train), static_cast<std::size_t>(cfg.batch_size), derive_seed(seed, "batches"));
  std::function<bool(const std::string&)> trainable = opts.trainable;
  if (!trainable) trainable = [](const std::string&) { return true; };

  TrainResult res;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next();
    const TokenBatch batch = make_batch(data, Split::train, idx);
    ad::Tape<float> tape;
    ParamBinder binder(tape, trainable);
    ForwardOptions fo;
    fo.trace = opts.trace;
    fo.binder = &binder;
    const ForwardResult out = forward(model, batch, fo);
    const ad::Var<float> ce = task_loss(model, out, batch);
    ad::Var<float> total = ce;
    AuxTerm aux;
    if (opts.aux) {
      aux = opts.aux(model, out, step);
      if (aux.weighted.valid()) total = ad::add(total, aux.weighted);
    }
    const double loss = ce.value().item();
    if (!std::isfinite(loss) || !std::isfinite(total.value().item())) {
      throw NumericError("non-finite training loss at step " + std::to_string(step), step);
    }
    const auto grads = ad::backward(tape, total);

    std::vector<ad::ParamSlot<float>> slots;
    for (NamedTensor& p : named_parameters(model)) {
      auto it = binder.leaves().find(p.name);
      if (it == binder.leaves().end() || !it->second.requires_grad()) continue;
      const Tensor& g = grads[it->second];
      if (!all_finite(g)) throw NumericError("non-finite gradient for " + p.name + " at step " + std::to_string(step), step);
      slots.push_back({p.name, p.tensor, &g});
    }
    const double lr = adam.current_lr();
    adam.step(slots);
    res.steps = step + 1;
    res.tokens += static_cast<std::int64_t>(batch.ids.size());
    if (step % cfg.log_interval == 0 || step + 1 == cfg.steps) {
      res.log.push_back({step, loss, aux.raw, aux.weight, aux.nonzero_fraction, lr});
    }
  }
  return res;
}

EvalResult evaluate(const DenseModel& model, const Dataset& data, Split split, std::size_t batch_size,
                    const GatePolicy* policy_override, std::size_t max_sequences) {
  data.validate();
  data.check_compatible(model.config);
  ad::NoGradGuard no_grad;
  EvalResult r;
  double loss_sum = 0.0;
  std::int64_t correct = 0;
  for (const auto& idx : eval_batches(data.size(split), batch_size, max_sequences)) {
    const TokenBatch batch = make_batch(data, split, idx);
    ForwardOptions fo;
    fo.policy_override = policy_override;
    ForwardResult out = forward(model, batch, fo);
    const Tensor& logits = out.logits.value();
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    for (std::size_t i = 0; i < rows; ++i) {
      const float* row = logits.ptr() + i * cols;
      double mx = row[0];
      std::size_t arg = 0;
      for (std::size_t c = 1; c < cols; ++c) {
        if (row[c] > mx) {
          mx = row[c];
          arg = c;
        }
      }
      double z = 0.0;
      for (std::size_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
      const int target = batch.targets[i];
      loss_sum += mx + std::log(z) - static_cast<double>(row[target]);
      if (static_cast<int>(arg) == target) ++correct;
    }
    r.predictions += static_cast<std::int64_t>(rows);
    r.exec.merge(out.exec);
  }
  if (r.predictions == 0) throw InputError("evaluation split is empty");
  r.loss = loss_sum / static_cast<double>(r.predictions);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.predictions);
  if (!std::isfinite(r.loss)) throw NumericError("non-finite evaluation loss");
  return r;
}

}  // namespace d2dmoe
