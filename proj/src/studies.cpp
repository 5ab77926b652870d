#include "d2dmoe/studies.hpp"

#include <cmath>
#include <cstring>

#include "d2dmoe/hash.hpp"

namespace d2dmoe {

void inject_massive_activation(DenseModel& model, int layer, int channel, float offset) {
  if (layer < 0 || layer >= model.config.num_layers) throw ValidationError("layer out of range");
  auto* ffn = std::get_if<FfnWeights>(&model.layers[static_cast<std::size_t>(layer)].ffn);
  if (!ffn) throw ContractError("layer " + std::to_string(layer) + " FFN is not dense");
  if (ffn->gated()) throw ContractError("outlier injection expects a standard FFN");
  if (channel < 0 || static_cast<std::size_t>(channel) >= ffn->hidden()) throw ValidationError("channel out of range");
  ffn->b1[static_cast<std::size_t>(channel)] += offset;
}

double typical_activation(const FfnWeights& ffn, const Tensor& z, Activation act) {
  const Tensor h = ffn_hidden_activations(ffn, z, act);
  double sum = 0.0;
  std::size_t n = 0;
  for (float v : h.data()) {
    if (v != 0.0f) {
      sum += std::abs(v);
      ++n;
    }
  }
  if (n == 0) throw NumericError("site has no active hidden units");
  return sum / static_cast<double>(n);
}

namespace {

Tensor row_block(const Tensor& t, std::size_t begin, std::size_t end) {
  const std::size_t cols = t.dim(1);
  Tensor out({end - begin, cols});
  std::memcpy(out.ptr(), t.ptr() + begin * cols, (end - begin) * cols * sizeof(float));
  return out;
}

// MoEfication labels with one shared maximum per collection batch.
Tensor batched_labels(const Tensor& hidden, const ExpertPartition& p, std::size_t rows_per_batch) {
  const std::size_t n = static_cast<std::size_t>(p.n_experts);
  Tensor out({hidden.dim(0), n});
  for (std::size_t b = 0; b < hidden.dim(0); b += rows_per_batch) {
    const std::size_t e = std::min(hidden.dim(0), b + rows_per_batch);
    const BaselineLabels y = labels_from_sums(expert_activation_sums(row_block(hidden, b, e), p));
    std::memcpy(out.ptr() + b * n, y.labels.ptr(), y.labels.numel() * sizeof(float));
  }
  return out;
}

double share_below(const Tensor& t, double thr) {
  std::size_t c = 0;
  for (float v : t.data()) c += v < thr;
  return static_cast<double>(c) / static_cast<double>(t.numel());
}

double nmse_other_experts(const RouterWeights& r, const Tensor& z, const Tensor& targets, int skip, int val_modulus) {
  const Tensor s = router_scores(r, z);
  double total = 0.0;
  int experts = 0;
  for (std::size_t j = 0; j < targets.dim(1); ++j) {
    if (static_cast<int>(j) == skip) continue;
    double mean = 0.0, se = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < z.dim(0); ++i) {
      if (!is_validation_token(i, val_modulus)) continue;
      mean += targets(i, j);
      ++n;
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < z.dim(0); ++i) {
      if (!is_validation_token(i, val_modulus)) continue;
      const double d = static_cast<double>(s(i, j)) - targets(i, j);
      se += d * d;
      var += (targets(i, j) - mean) * (targets(i, j) - mean);
    }
    if (var > 0.0) {
      total += se / var;
      ++experts;
    }
  }
  return experts ? total / experts : 0.0;
}

int argmax_skipping(const float* row, std::size_t n, int skip) {
  int best = -1;
  for (std::size_t j = 0; j < n; ++j) {
    if (static_cast<int>(j) == skip) continue;
    if (best < 0 || row[j] > row[best]) best = static_cast<int>(j);
  }
  return best;
}

double top1_agreement(const RouterWeights& r, const Tensor& z, const Tensor& reference, int skip, int val_modulus) {
  const Tensor s = router_scores(r, z);
  const std::size_t n = reference.dim(1);
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    if (!is_validation_token(i, val_modulus)) continue;
    hit += argmax_skipping(s.ptr() + i * n, n, skip) == argmax_skipping(reference.ptr() + i * n, n, skip);
    ++total;
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace

MassiveActivationReport massive_activation_study(const DenseModel& model, const Dataset& data,
                                                 const MassiveActivationConfig& cfg, std::uint64_t seed) {
  if (!(cfg.factor > 0.0)) throw ValidationError("factor must be positive");
  if (cfg.n_experts < 2) throw ValidationError("the study needs at least two experts");
  const SiteId site{cfg.layer, SiteKind::ffn};
  if (cfg.layer < 0 || cfg.layer >= model.config.num_layers) throw ValidationError("layer out of range");
  const FfnWeights clean = model.site_ffn(site);
  const Activation act = model.site_activation(site);
  if (clean.gated() || act != Activation::relu) throw ContractError("the study expects a standard relu FFN");
  if (cfg.channel < 0 || static_cast<std::size_t>(cfg.channel) >= clean.hidden()) {
    throw ValidationError("channel out of range");
  }
  if (clean.hidden() % static_cast<std::size_t>(cfg.n_experts) != 0) {
    throw ValidationError("n_experts must divide the FFN width");
  }

  MassiveActivationReport rep;
  rep.site = site;
  rep.channel = cfg.channel;
  const Tensor z = capture_site_inputs(model, site, data, Split::train, cfg.max_sequences);
  rep.tokens = z.dim(0);
  rep.typical = typical_activation(clean, z, act);
  rep.offset = cfg.factor * rep.typical;

  DenseModel dirty = model;
  inject_massive_activation(dirty, cfg.layer, cfg.channel, static_cast<float>(rep.offset));
  const FfnWeights injected = dirty.site_ffn(site);

  // Clustering looks at weight columns only, so one partition serves both.
  SplitResult split = split_ffn(clean, cfg.n_experts, derive_seed(seed, "cluster"), cfg.kmeans);
  const ExpertPartition& part = split.partition;
  rep.partition = part;
  rep.outlier_expert = part.assignment[static_cast<std::size_t>(cfg.channel)];

  const std::size_t rows_per_batch = 32 * static_cast<std::size_t>(data.seq_len);
  const Tensor labels_clean = batched_labels(ffn_hidden_activations(clean, z, act), part, rows_per_batch);
  const Tensor labels_dirty = batched_labels(ffn_hidden_activations(injected, z, act), part, rows_per_batch);
  rep.labels_below_clean = share_below(labels_clean, cfg.label_threshold);
  rep.labels_below_injected = share_below(labels_dirty, cfg.label_threshold);

  const Tensor t_clean = expert_norm_targets(slice_ffn(clean, part), z, act);
  const Tensor t_dirty = expert_norm_targets(slice_ffn(injected, part), z, act);
  double diff = 0.0, base = 0.0, out_clean = 0.0, out_dirty = 0.0;
  const std::size_t n = static_cast<std::size_t>(part.n_experts);
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (static_cast<int>(j) == rep.outlier_expert) {
        out_clean += t_clean(i, j);
        out_dirty += t_dirty(i, j);
        continue;
      }
      const double d = static_cast<double>(t_dirty(i, j)) - t_clean(i, j);
      diff += d * d;
      base += static_cast<double>(t_clean(i, j)) * t_clean(i, j);
      rep.target_max_abs_change = std::max(rep.target_max_abs_change, std::abs(d));
    }
  }
  rep.target_change = base > 0.0 ? std::sqrt(diff / base) : 0.0;
  rep.outlier_target_growth = out_clean > 0.0 ? out_dirty / out_clean : 0.0;

  if (cfg.routers) {
    const RouterTrainConfig& rc = *cfg.routers;
    const std::uint64_t rs = derive_seed(seed, "routers");
    rep.routers_trained = true;
    const auto reg_clean = train_router(rc, RouterDataset{z, t_clean}, rs);
    const auto reg_dirty = train_router(rc, RouterDataset{z, t_dirty}, rs);
    rep.regression_nmse_clean = nmse_other_experts(reg_clean.router, z, t_clean, rep.outlier_expert, rc.val_modulus);
    rep.regression_nmse_injected = nmse_other_experts(reg_dirty.router, z, t_dirty, rep.outlier_expert, rc.val_modulus);
    const auto base_clean = train_baseline_router(rc, RouterDataset{z, labels_clean}, rs);
    const auto base_dirty = train_baseline_router(rc, RouterDataset{z, labels_dirty}, rs);
    rep.baseline_top1_clean = top1_agreement(base_clean.router, z, labels_clean, rep.outlier_expert, rc.val_modulus);
    rep.baseline_top1_injected = top1_agreement(base_dirty.router, z, labels_clean, rep.outlier_expert, rc.val_modulus);
  }
  return rep;
}

Json to_json(const MassiveActivationReport& r) {
  Json j{{"site", r.site.str()},
         {"channel", r.channel},
         {"outlier_expert", r.outlier_expert},
         {"typical", r.typical},
         {"offset", r.offset},
         {"tokens", r.tokens},
         {"labels_below_clean", r.labels_below_clean},
         {"labels_below_injected", r.labels_below_injected},
         {"target_change", r.target_change},
         {"target_max_abs_change", r.target_max_abs_change},
         {"outlier_target_growth", r.outlier_target_growth}};
  if (r.routers_trained) {
    j["regression_nmse_clean"] = r.regression_nmse_clean;
    j["regression_nmse_injected"] = r.regression_nmse_injected;
    j["baseline_top1_clean"] = r.baseline_top1_clean;
    j["baseline_top1_injected"] = r.baseline_top1_injected;
  }
  return j;
}

}  // namespace d2dmoe
