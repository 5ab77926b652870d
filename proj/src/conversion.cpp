#include "d2dmoe/conversion.hpp"

#include <cstring>
#include <sstream>

#include "d2dmoe/train.hpp"

namespace d2dmoe {

namespace {

Tensor stack_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InputError("no rows captured");
  const std::size_t cols = parts.front().dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) rows += p.dim(0);
  Tensor out({rows, cols});
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::memcpy(out.ptr() + at * cols, p.ptr(), p.numel() * sizeof(float));
    at += p.dim(0);
  }
  return out;
}

template <class Fn>
void for_each_capture(const DenseModel& model, SiteId site, const Dataset& data, Split split, std::size_t max_sequences,
                      std::size_t batch_size, Fn&& fn) {
  data.validate();
  data.check_compatible(model.config);
  ad::NoGradGuard no_grad;
  for (const auto& idx : eval_batches(data.size(split), batch_size, max_sequences)) {
    ForwardOptions fo;
    fo.trace.layer = site.layer;
    if (site.kind == SiteKind::ffn) {
      fo.trace.ffn_input = true;
    } else {
      fo.trace.mha_io = true;
    }
    const ForwardResult out = forward(model, make_batch(data, split, idx), fo);
    const LayerTrace& lt = out.trace.layers[static_cast<std::size_t>(site.layer)];
    fn(site.kind == SiteKind::ffn ? lt.ffn_input : lt.mha_in.at(site.kind));
  }
}

ExpertPartition partition_of(const DenseModel& model, SiteId site) {
  if (auto it = model.partitions.find(site); it != model.partitions.end()) return it->second;
  if (model.is_moe(site)) {
    const ProjectionSlot* p = site.kind == SiteKind::ffn ? nullptr : &model.projection(site.layer, site.kind);
    const MoeLayer& m = p ? std::get<MoeLayer>(*p) : std::get<MoeLayer>(model.layers[static_cast<std::size_t>(site.layer)].ffn);
    return m.partition;
  }
  throw ContractError("site " + site.str() + " has not been clustered into experts");
}

}  // namespace

Tensor capture_site_inputs(const DenseModel& model, SiteId site, const Dataset& data, Split split,
                           std::size_t max_sequences, std::size_t batch_size) {
  std::vector<Tensor> parts;
  for_each_capture(model, site, data, split, max_sequences, batch_size, [&](const Tensor& z) { parts.push_back(z); });
  return stack_rows(parts);
}

std::vector<SiteId> convertible_sites(const DenseModel& model, bool include_mha) {
  std::vector<SiteId> out;
  for (int l = 0; l < model.config.num_layers; ++l) {
    if (include_mha) {
      for (SiteKind k : kProjectionKinds) {
        if (model.form({l, k}) == "replaced-mha") out.push_back({l, k});
      }
    }
    out.push_back({l, SiteKind::ffn});
  }
  return out;
}

SplitResult cluster_site(DenseModel& model, SiteId site, int n_experts, std::uint64_t seed, const KMeansOptions& opts) {
  const FfnWeights ffn = model.site_ffn(site);
  SplitResult r = split_ffn(ffn, n_experts, seed, opts);
  r.partition.layer = site.layer;
  model.partitions[site] = r.partition;
  return r;
}

RouterDataset collect_router_dataset(const DenseModel& model, SiteId site, const Dataset& data, std::size_t max_sequences) {
  const ExpertPartition partition = partition_of(model, site);
  const ExpertSlices slices = slice_ffn(model.site_ffn(site), partition);
  const Activation act = model.site_activation(site);
  std::vector<Tensor> inputs, targets;
  for_each_capture(model, site, data, Split::train, max_sequences, 32, [&](const Tensor& z) {
    inputs.push_back(z);
    targets.push_back(expert_norm_targets(slices, z, act));
  });
  RouterDataset d{stack_rows(inputs), stack_rows(targets)};
  d.check();
  return d;
}

BaselineCollection collect_baseline_dataset(const DenseModel& model, SiteId site, const Dataset& data,
                                            std::size_t max_sequences, std::size_t label_batch) {
  const ExpertPartition partition = partition_of(model, site);
  const FfnWeights ffn = model.site_ffn(site);
  const Activation act = model.site_activation(site);
  BaselineCollection out;
  std::vector<Tensor> inputs, labels;
  for_each_capture(model, site, data, Split::train, max_sequences, label_batch, [&](const Tensor& z) {
    const Tensor hidden = ffn_hidden_activations(ffn, z, act);
    BaselineLabels y = labels_from_sums(expert_activation_sums(hidden, partition));
    if (y.all_zero) ++out.all_zero_batches;
    inputs.push_back(z);
    labels.push_back(std::move(y.labels));
  });
  out.data = RouterDataset{stack_rows(inputs), stack_rows(labels)};
  out.data.check();
  return out;
}

void convert_model(DenseModel& model, const std::vector<SiteId>& sites, const GatePolicy& policy) {
  // Validate everything before touching the model.
  for (SiteId s : sites) {
    if (model.is_moe(s)) throw ContractError("site " + s.str() + " is already an MoE layer");
    model.site_ffn(s);
    if (!model.partitions.count(s)) throw ContractError("site " + s.str() + " has no expert partition");
    if (!model.routers.count(s)) throw ContractError("site " + s.str() + " has no trained router");
    policy.validate(model.partitions.at(s).n_experts);
  }
  for (SiteId s : sites) {
    MoeLayer moe = MoeLayer::build(s, model.site_ffn(s), model.partitions.at(s), model.routers.at(s), policy,
                                   model.site_activation(s));
    if (s.kind == SiteKind::ffn) {
      model.layers[static_cast<std::size_t>(s.layer)].ffn = std::move(moe);
    } else {
      model.projection(s.layer, s.kind) = std::move(moe);
    }
    model.partitions.erase(s);
    model.routers.erase(s);
  }
}

void set_policy(DenseModel& model, const GatePolicy& policy) {
  for (auto& b : model.layers) {
    if (auto* m = std::get_if<MoeLayer>(&b.ffn)) {
      policy.validate(m->n_experts());
      m->policy = policy;
    }
    for (auto& p : b.proj) {
      if (auto* m = std::get_if<MoeLayer>(&p)) {
        policy.validate(m->n_experts());
        m->policy = policy;
      }
    }
  }
}

std::vector<PolicyTrace> per_token_expert_counts(const DenseModel& model, const Dataset& data,
                                                 const std::vector<GatePolicy>& grid, Split split,
                                                 std::size_t max_sequences) {
  if (model.moe_sites().empty()) throw ContractError("model has no MoE sites");
  std::vector<PolicyTrace> out;
  for (const GatePolicy& p : grid) {
    EvalResult r = evaluate(model, data, split, 32, &p, max_sequences);
    out.push_back({p, std::move(r.exec), r.loss, r.accuracy});
  }
  return out;
}

std::string expert_histogram_csv(const std::vector<PolicyTrace>& traces) {
  std::ostringstream os;
  os.precision(17);
  os << "site,policy_param,bucket,count\n";
  for (const auto& t : traces) {
    for (const auto& [site, st] : t.trace.sites) {
      std::vector<std::int64_t> hist(static_cast<std::size_t>(st.n_experts) + 1, 0);
      for (int c : st.counts) ++hist[static_cast<std::size_t>(c)];
      for (std::size_t b = 0; b < hist.size(); ++b) {
        os << site.str() << ',' << t.policy.param() << ',' << b << ',' << hist[b] << '\n';
      }
    }
  }
  return os.str();
}

}  // namespace d2dmoe
