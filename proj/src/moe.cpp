#include "d2dmoe/moe.hpp"

#include "d2dmoe/linalg.hpp"

namespace d2dmoe {

MoeLayer MoeLayer::build(SiteId site, FfnWeights source, ExpertPartition partition, RouterWeights router,
                         GatePolicy policy, Activation act) {
  MoeLayer m;
  m.site = site;
  m.slices = slice_ffn(source, partition);
  m.source = std::move(source);
  m.partition = std::move(partition);
  m.router = std::move(router);
  m.policy = policy;
  m.act = act;
  m.check();
  return m;
}

void MoeLayer::check() const {
  router.check();
  partition.validate(source.hidden());
  if (router.n_experts() != static_cast<std::size_t>(partition.n_experts)) {
    throw ContractError("moe " + site.str() + ": router predicts " + std::to_string(router.n_experts()) +
                        " experts, partition has " + std::to_string(partition.n_experts));
  }
  if (router.model_dim() != source.model_dim()) {
    throw ContractError("moe " + site.str() + ": router input width differs from the layer input");
  }
  if (slices.size() != static_cast<std::size_t>(partition.n_experts) || slices.source != fingerprint(source)) {
    throw ContractError("moe " + site.str() + ": slices do not match the source weights");
  }
  policy.validate(partition.n_experts);
}

std::int64_t SiteTrace::total_selected() const {
  std::int64_t s = 0;
  for (int c : counts) s += c;
  return s;
}

double SiteTrace::mean_selected() const {
  return counts.empty() ? 0.0 : static_cast<double>(total_selected()) / static_cast<double>(counts.size());
}

void ExecutionTrace::merge(const ExecutionTrace& other) {
  for (const auto& [site, t] : other.sites) {
    SiteTrace& dst = sites[site];
    if (dst.n_experts == 0) dst.n_experts = t.n_experts;
    dst.counts.insert(dst.counts.end(), t.counts.begin(), t.counts.end());
    dst.masks.insert(dst.masks.end(), t.masks.begin(), t.masks.end());
    dst.all_zero_events += t.all_zero_events;
  }
}

Tensor moe_forward(const MoeLayer& layer, const Tensor& z, SiteTrace* trace, const MoeRunOptions& opts) {
  const std::size_t d = layer.source.model_dim();
  if (z.rank() != 2 || z.dim(1) != d) {
    throw DimensionError("moe_forward " + layer.site.str() + ": input " + ad::shape_str(z.shape()) +
                         " does not have " + std::to_string(d) + " columns");
  }
  const GatePolicy& policy = opts.policy_override ? *opts.policy_override : layer.policy;
  const int n = layer.n_experts();
  policy.validate(n);
  const std::size_t tokens = z.dim(0);
  const Tensor scores = router_scores(layer.router, z);

  std::vector<std::vector<std::size_t>> rows(static_cast<std::size_t>(n));
  if (trace) {
    trace->n_experts = n;
    trace->counts.reserve(trace->counts.size() + tokens);
  }
  for (std::size_t t = 0; t < tokens; ++t) {
    const GateDecision g =
        apply_gate(policy, std::span<const float>(scores.ptr() + t * static_cast<std::size_t>(n), static_cast<std::size_t>(n)));
    for (int e = 0; e < n; ++e) {
      if (g.mask[static_cast<std::size_t>(e)]) rows[static_cast<std::size_t>(e)].push_back(t);
    }
    if (trace) {
      trace->counts.push_back(g.selected_count);
      if (g.all_zero) ++trace->all_zero_events;
      if (opts.record_masks) trace->masks.push_back(g.mask);
    }
  }

  Tensor out({tokens, d});
  for (int e = 0; e < n; ++e) {
    const auto& idx = rows[static_cast<std::size_t>(e)];
    if (idx.empty()) continue;
    const ExpertSlice& slice = layer.slices.experts[static_cast<std::size_t>(e)];
    if (idx.size() == tokens) {
      const Tensor y = expert_output(slice, z, layer.act);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] += y[i];
      continue;
    }
    Tensor zg({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(z.ptr() + idx[r] * d, d, zg.ptr() + r * d);
    const Tensor y = expert_output(slice, zg, layer.act);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      float* dst = out.ptr() + idx[r] * d;
      const float* src = y.ptr() + r * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  }
  ad::add_bias_rows(out, layer.slices.b2);
  return out;
}

}  // namespace d2dmoe
