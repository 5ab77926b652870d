#include "d2dmoe/sparsity.hpp"

#include <cmath>
#include <sstream>

namespace d2dmoe {

void SparsityConfig::validate() const {
  std::vector<std::string> v;
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) v.push_back("alpha must be a finite value >= 0");
  if (!(nonzero_threshold >= 0.0)) v.push_back("nonzero_threshold must be >= 0");
  if (!std::isfinite(displacement)) v.push_back("displacement must be finite");
  if (!v.empty()) {
    std::string msg = "invalid sparsity config:";
    for (const auto& s : v) msg += " " + s + ";";
    throw ValidationError(msg);
  }
  train.validate();
}

double SparsityConfig::alpha_at(std::int64_t step) const {
  if (!ramp) return alpha;
  if (train.steps <= 1) return alpha;
  if (step >= train.steps - 1) return alpha;
  return alpha * static_cast<double>(step) / static_cast<double>(train.steps - 1);
}

Json to_json(const SparsityConfig& c) {
  return Json{{"alpha", c.alpha},
              {"ramp", c.ramp},
              {"displacement", c.displacement},
              {"nonzero_threshold", c.nonzero_threshold},
              {"include_mha", c.include_mha},
              {"train", to_json(c.train)}};
}

SparsityConfig sparsity_config_from_json(const Json& j, SparsityConfig c) {
  try {
    c.alpha = j.value("alpha", c.alpha);
    c.ramp = j.value("ramp", c.ramp);
    c.displacement = j.value("displacement", c.displacement);
    c.nonzero_threshold = j.value("nonzero_threshold", c.nonzero_threshold);
    c.include_mha = j.value("include_mha", c.include_mha);
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("sparsity config: ") + e.what());
  }
  c.validate();
  return c;
}

TraceFlags sparsity_trace_flags() {
  TraceFlags f;
  f.ffn_pre = true;
  f.ffn_hidden = true;
  f.mha_hidden = true;
  return f;
}

std::vector<ad::Var<float>> sparsity_targets(const DenseModel& model, const ActivationTrace& trace,
                                             const SparsityConfig& cfg) {
  std::vector<ad::Var<float>> out;
  const bool gelu = model.config.activation == Activation::gelu;
  for (const LayerTrace& lt : trace.layers) {
    if (gelu) {
      if (!lt.ffn_pre.valid()) throw ContractError("sparsity targets need ffn pre-activations in the trace");
      out.push_back(displaced_preactivation(lt.ffn_pre, cfg.displacement));
    } else {
      if (!lt.ffn_hidden.valid()) throw ContractError("sparsity targets need ffn activations in the trace");
      out.push_back(lt.ffn_hidden);
    }
    if (cfg.include_mha) {
      for (const auto& [kind, h] : lt.mha_hidden) out.push_back(h);
    }
  }
  return out;
}

double nonzero_fraction(const ActivationTrace& trace, double threshold) {
  std::int64_t nz = 0, total = 0;
  for (const LayerTrace& lt : trace.layers) {
    if (!lt.ffn_hidden.valid()) continue;
    for (float x : lt.ffn_hidden.value().data()) {
      if (std::abs(x) > threshold) ++nz;
    }
    total += static_cast<std::int64_t>(lt.ffn_hidden.value().numel());
  }
  return total == 0 ? 0.0 : static_cast<double>(nz) / static_cast<double>(total);
}

TrainResult sparsify_finetune(DenseModel& model, const Dataset& data, const SparsityConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TrainOptions opts;
  opts.trace = sparsity_trace_flags();
  opts.aux = [&cfg](const DenseModel& m, const ForwardResult& out, std::int64_t step) {
    AuxTerm t;
    t.weight = cfg.alpha_at(step);
    t.nonzero_fraction = nonzero_fraction(out.trace, cfg.nonzero_threshold);
    const auto targets = sparsity_targets(m, out.trace, cfg);
    const HoyerValue<float> h = hoyer_loss<float>(targets);
    t.raw = h.loss.value().item();
    if (t.weight > 0.0) t.weighted = ad::sum(h.loss, ad::Axis::all, t.weight);
    return t;
  };
  return train_model(model, data, cfg.train, seed, opts);
}

void accumulate_counts(const Tensor& post, double threshold, LayerActivationStats& stats) {
  const std::size_t rows = post.dim(0), cols = post.dim(1);
  if (stats.histogram.size() < cols + 1) stats.histogram.resize(cols + 1, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t c = 0;
    const float* row = post.ptr() + r * cols;
    for (std::size_t j = 0; j < cols; ++j) {
      if (std::abs(row[j]) > threshold) ++c;
    }
    ++stats.histogram[c];
    ++stats.tokens;
  }
}

void finalize_stats(LayerActivationStats& s) {
  if (s.tokens == 0) return;
  double sum = 0.0;
  for (std::size_t c = 0; c < s.histogram.size(); ++c) sum += static_cast<double>(c) * static_cast<double>(s.histogram[c]);
  s.mean = sum / static_cast<double>(s.tokens);
  double var = 0.0;
  for (std::size_t c = 0; c < s.histogram.size(); ++c) {
    const double d = static_cast<double>(c) - s.mean;
    var += d * d * static_cast<double>(s.histogram[c]);
  }
  s.variance = var / static_cast<double>(s.tokens);
}

ActivationStats activation_stats(const DenseModel& model, const Dataset& data, Split split, double threshold,
                                 std::size_t batch_size, std::size_t max_sequences) {
  data.validate();
  data.check_compatible(model.config);
  if (data.size(split) == 0) throw InputError("activation_stats on an empty split");
  ad::NoGradGuard no_grad;
  ActivationStats s;
  s.threshold = threshold;
  s.layers.resize(model.layers.size());
  for (const auto& idx : eval_batches(data.size(split), batch_size, max_sequences)) {
    ForwardOptions fo;
    fo.trace.ffn_hidden = true;
    const ForwardResult out = forward(model, make_batch(data, split, idx), fo);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      accumulate_counts(out.trace.layers[l].ffn_hidden.value(), threshold, s.layers[l]);
    }
  }
  for (auto& l : s.layers) finalize_stats(l);
  return s;
}

std::string histogram_csv(const ActivationStats& s, int bucket_width) {
  if (bucket_width < 1) throw ValidationError("bucket width must be positive");
  std::ostringstream os;
  os << "layer,bucket_lo,bucket_hi,count\n";
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    const auto& h = s.layers[l].histogram;
    for (std::size_t lo = 0; lo < h.size(); lo += static_cast<std::size_t>(bucket_width)) {
      std::int64_t c = 0;
      for (std::size_t i = lo; i < std::min(h.size(), lo + static_cast<std::size_t>(bucket_width)); ++i) c += h[i];
      os << l << ',' << lo << ',' << lo + static_cast<std::size_t>(bucket_width) << ',' << c << '\n';
    }
  }
  return os.str();
}

std::string summary_csv(const ActivationStats& s) {
  std::ostringstream os;
  os.precision(17);
  os << "layer,mean,variance,tokens\n";
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    os << l << ',' << s.layers[l].mean << ',' << s.layers[l].variance << ',' << s.layers[l].tokens << '\n';
  }
  return os.str();
}

}  // namespace d2dmoe
