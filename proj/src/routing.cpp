#include "d2dmoe/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "d2dmoe/hash.hpp"
#include "d2dmoe/linalg.hpp"

namespace d2dmoe {

std::string to_string(RouterOutput o) { return o == RouterOutput::abs ? "abs" : "sigmoid"; }

RouterOutput parse_router_output(const std::string& s) {
  if (s == "abs") return RouterOutput::abs;
  if (s == "sigmoid") return RouterOutput::sigmoid;
  throw ValidationError("unknown router output '" + s + "'");
}

void RouterWeights::check() const {
  if (Wh.rank() != 2 || Wo.rank() != 2) throw DimensionError("router: weights must be matrices");
  if (bh.shape() != ad::Shape{Wh.dim(1)} || Wo.dim(0) != Wh.dim(1) || bo.shape() != ad::Shape{Wo.dim(1)}) {
    throw DimensionError("router: inconsistent shapes Wh " + ad::shape_str(Wh.shape()) + " Wo " +
                         ad::shape_str(Wo.shape()));
  }
}

int default_router_hidden(int model_dim) { return std::max(1, model_dim / 6); }

RouterWeights init_router(int model_dim, int hidden, int n_experts, RouterOutput output, std::uint64_t seed) {
  if (model_dim < 1 || hidden < 1 || n_experts < 1) throw ValidationError("router dimensions must be positive");
  std::mt19937_64 rng(seed);
  auto fill = [&rng](Tensor& t, double stddev) {
    std::normal_distribution<float> nd(0.0f, static_cast<float>(stddev));
    for (float& x : t.data()) x = nd(rng);
  };
  const auto d = static_cast<std::size_t>(model_dim);
  const auto h = static_cast<std::size_t>(hidden);
  const auto n = static_cast<std::size_t>(n_experts);
  RouterWeights r{Tensor({d, h}), Tensor({h}), Tensor({h, n}), Tensor({n}), output};
  fill(r.Wh, 1.0 / std::sqrt(static_cast<double>(d)));
  fill(r.Wo, 1.0 / std::sqrt(static_cast<double>(h)));
  return r;
}

Tensor router_scores(const RouterWeights& r, const Tensor& z) {
  Tensor h = ad::mm(z, r.Wh);
  ad::add_bias_rows(h, r.bh);
  for (float& x : h.data()) x = std::max(x, 0.0f);
  Tensor o = ad::mm(h, r.Wo);
  ad::add_bias_rows(o, r.bo);
  if (r.output == RouterOutput::abs) {
    for (float& x : o.data()) x = std::abs(x);
  } else {
    for (float& x : o.data()) x = 1.0f / (1.0f + std::exp(-x));
  }
  return o;
}

void RouterDataset::check() const {
  if (inputs.rank() != 2 || targets.rank() != 2 || inputs.dim(0) != targets.dim(0)) {
    throw DimensionError("router dataset: inputs " + ad::shape_str(inputs.shape()) + " vs targets " +
                         ad::shape_str(targets.shape()));
  }
}

Tensor expert_norm_targets(const ExpertSlices& slices, const Tensor& z, Activation act) {
  const std::size_t t = z.dim(0);
  Tensor out({t, slices.size()});
  for (std::size_t e = 0; e < slices.size(); ++e) {
    const Tensor y = expert_output(slices.experts[e], z, act);
    for (std::size_t r = 0; r < t; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < y.dim(1); ++c) s += static_cast<double>(y(r, c)) * y(r, c);
      out(r, e) = static_cast<float>(std::sqrt(s));
    }
  }
  return out;
}

bool is_validation_token(std::size_t index, int modulus) {
  return modulus > 0 && mix64(index + 0x5bd1e995ULL) % static_cast<std::uint64_t>(modulus) == 0;
}

namespace {

Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& rows) {
  const std::size_t c = src.dim(1);
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(src.ptr() + rows[i] * c, c, out.ptr() + i * c);
  }
  return out;
}

// Mean over entries of the per-column variance.
double column_variance(const Tensor& t) {
  const std::size_t r = t.dim(0);
  const std::size_t c = t.dim(1);
  double total = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < r; ++i) mean += t(i, j);
    mean /= static_cast<double>(r);
    double v = 0.0;
    for (std::size_t i = 0; i < r; ++i) v += (t(i, j) - mean) * (t(i, j) - mean);
    total += v / static_cast<double>(r);
  }
  return total / static_cast<double>(c);
}

double bce_value(const Tensor& logits, const Tensor& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double x = logits[i];
    s += std::max(x, 0.0) - x * y[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return s / static_cast<double>(logits.numel());
}

double eval_loss(const RouterWeights& r, const Tensor& z, const Tensor& y) {
  if (r.output == RouterOutput::abs) {
    const Tensor p = router_scores(r, z);
    double s = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) s += (static_cast<double>(p[i]) - y[i]) * (static_cast<double>(p[i]) - y[i]);
    return s / static_cast<double>(p.numel());
  }
  Tensor h = ad::mm(z, r.Wh);
  ad::add_bias_rows(h, r.bh);
  for (float& x : h.data()) x = std::max(x, 0.0f);
  Tensor o = ad::mm(h, r.Wo);
  ad::add_bias_rows(o, r.bo);
  return bce_value(o, y);
}

RouterTrainResult fit(const RouterTrainConfig& cfg, const RouterDataset& data, std::uint64_t seed, RouterOutput output) {
  data.check();
  if (data.size() == 0) throw InputError("router training: empty dataset");
  const int d_m = static_cast<int>(data.inputs.dim(1));
  const int n = static_cast<int>(data.targets.dim(1));
  const int hidden = cfg.hidden > 0 ? cfg.hidden : default_router_hidden(d_m);

  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < data.size(); ++i) {
    (is_validation_token(i, cfg.val_modulus) ? val_idx : train_idx).push_back(i);
  }
  if (train_idx.empty()) std::swap(train_idx, val_idx);
  const Tensor train_x = gather_rows(data.inputs, train_idx);
  const Tensor train_y = gather_rows(data.targets, train_idx);

  RouterTrainResult res;
  res.router = init_router(d_m, hidden, n, output, derive_seed(seed, "router-init"));
  // zero output layer: the router starts at a constant and hidden units pick
  // up gradient through Wo as it grows
  res.router.Wo.fill(0.0f);
  if (output == RouterOutput::abs) {
    // start on the positive branch of |.| at the target means; the output
    // layer then only has to learn the residual
    for (std::size_t j = 0; j < static_cast<std::size_t>(n); ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < train_y.dim(0); ++i) m += train_y(i, j);
      res.router.bo[j] = static_cast<float>(m / static_cast<double>(train_y.dim(0)));
    }
  }
  res.train_tokens = train_idx.size();
  res.val_tokens = val_idx.size();

  ad::AdamConfig adam = cfg.adam;
  if (adam.total_steps <= 0) adam.total_steps = cfg.steps;
  ad::Adam<float> opt(adam);
  std::mt19937_64 rng(derive_seed(seed, "router-batches"));
  std::uniform_int_distribution<std::size_t> pick(0, train_idx.size() - 1);
  const bool full_batch = train_idx.size() <= static_cast<std::size_t>(cfg.batch_size);

  RouterWeights& r = res.router;
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor bx, by;
    if (full_batch) {
      bx = train_x;
      by = train_y;
    } else {
      std::vector<std::size_t> rows(static_cast<std::size_t>(cfg.batch_size));
      for (auto& v : rows) v = pick(rng);
      bx = gather_rows(train_x, rows);
      by = gather_rows(train_y, rows);
    }
    ad::Tape<float> tape;
    Var wh = tape.leaf(r.Wh), bh = tape.leaf(r.bh), wo = tape.leaf(r.Wo), bo = tape.leaf(r.bo);
    Var x = ad::constant(std::move(bx));
    Var y = ad::constant(std::move(by));
    Var h = ad::relu(ad::add_bias(ad::matmul(x, wh), bh));
    Var o = ad::add_bias(ad::matmul(h, wo), bo);
    Var loss = output == RouterOutput::abs ? ad::mse(ad::abs(o), y) : ad::bce_with_logits(o, y);
    if (!std::isfinite(loss.value().item())) {
      throw NumericError("router training diverged at step " + std::to_string(step), step);
    }
    const auto g = ad::backward(tape, loss);
    opt.step({{"Wh", &r.Wh, &g[wh]}, {"bh", &r.bh, &g[bh]}, {"Wo", &r.Wo, &g[wo]}, {"bo", &r.bo, &g[bo]}});
  }

  res.train_loss = eval_loss(r, train_x, train_y);
  if (val_idx.empty()) {
    res.val_loss = res.train_loss;
    res.val_target_variance = column_variance(train_y);
  } else {
    const Tensor vx = gather_rows(data.inputs, val_idx);
    const Tensor vy = gather_rows(data.targets, val_idx);
    res.val_loss = eval_loss(r, vx, vy);
    res.val_target_variance = column_variance(vy);
  }
  if (!std::isfinite(res.train_loss) || !std::isfinite(res.val_loss)) {
    throw NumericError("router training produced a non-finite loss", cfg.steps);
  }
  return res;
}

}  // namespace

RouterTrainResult train_router(const RouterTrainConfig& cfg, const RouterDataset& data, std::uint64_t seed) {
  return fit(cfg, data, seed, RouterOutput::abs);
}

RouterTrainResult train_baseline_router(const RouterTrainConfig& cfg, const RouterDataset& data, std::uint64_t seed) {
  return fit(cfg, data, seed, RouterOutput::sigmoid);
}

std::string GatePolicy::str() const {
  if (kind == Kind::top_k) return "top_k=" + std::to_string(k);
  char buf[32];
  std::snprintf(buf, sizeof buf, "tau=%g", tau);
  return buf;
}

void GatePolicy::validate(int n_experts) const {
  if (kind == Kind::dynamic_k) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("dynamic-k tau must lie in [0, 1], got " + std::to_string(tau));
  } else if (k < 1 || (n_experts > 0 && k > n_experts)) {
    throw ValidationError("top-k k must lie in [1, " + std::to_string(n_experts) + "], got " + std::to_string(k));
  }
}

Json to_json(const GatePolicy& p) {
  if (p.kind == GatePolicy::Kind::dynamic_k) return Json{{"kind", "dynamic_k"}, {"tau", p.tau}};
  return Json{{"kind", "top_k"}, {"k", p.k}};
}

GatePolicy policy_from_json(const Json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "dynamic_k") return GatePolicy::dynamic(j.at("tau").get<double>());
  if (kind == "top_k") return GatePolicy::top(j.at("k").get<int>());
  throw ValidationError("unknown gate policy '" + kind + "'");
}

GateDecision dynamic_k_gate(std::span<const float> scores, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("dynamic-k tau must lie in [0, 1]");
  GateDecision g;
  g.mask.assign(scores.size(), 0);
  float mx = 0.0f;
  for (float s : scores) {
    if (!(s >= 0.0f)) throw InputError("dynamic-k gate: scores must be non-negative");
    mx = std::max(mx, s);
  }
  if (mx == 0.0f) {
    std::fill(g.mask.begin(), g.mask.end(), 1);
    g.selected_count = static_cast<int>(scores.size());
    g.all_zero = true;
    return g;
  }
  const double bar = tau * static_cast<double>(mx);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (static_cast<double>(scores[i]) >= bar) {
      g.mask[i] = 1;
      ++g.selected_count;
    }
  }
  return g;
}

GateDecision top_k_gate(std::span<const float> scores, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > scores.size()) {
    throw ValidationError("top-k gate: k=" + std::to_string(k) + " outside [1, " + std::to_string(scores.size()) + "]");
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  GateDecision g;
  g.mask.assign(scores.size(), 0);
  for (int i = 0; i < k; ++i) g.mask[idx[static_cast<std::size_t>(i)]] = 1;
  g.selected_count = k;
  return g;
}

GateDecision apply_gate(const GatePolicy& policy, std::span<const float> scores) {
  return policy.kind == GatePolicy::Kind::dynamic_k ? dynamic_k_gate(scores, policy.tau) : top_k_gate(scores, policy.k);
}

Tensor expert_activation_sums(const Tensor& hidden, const ExpertPartition& partition) {
  partition.validate(hidden.dim(1));
  const std::size_t t = hidden.dim(0);
  Tensor sums({t, static_cast<std::size_t>(partition.n_experts)});
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t c = 0; c < hidden.dim(1); ++c) {
      sums(r, static_cast<std::size_t>(partition.assignment[c])) += hidden(r, c);
    }
  }
  return sums;
}

BaselineLabels labels_from_sums(const Tensor& sums) {
  BaselineLabels out{sums, false};
  float mx = 0.0f;
  for (float s : sums.data()) {
    if (s < 0.0f) throw InputError("moefication labels: activations must be non-negative");
    mx = std::max(mx, s);
  }
  if (mx == 0.0f) {
    out.labels.fill(0.0f);
    out.all_zero = true;
    return out;
  }
  for (float& v : out.labels.data()) v /= mx;
  return out;
}

BaselineLabels moefication_labels(const Tensor& activations) {
  if (activations.rank() != 3) {
    throw DimensionError("moefication labels: expected tokens x experts x expert_size, got " +
                         ad::shape_str(activations.shape()));
  }
  const std::size_t t = activations.dim(0), n = activations.dim(1), s = activations.dim(2);
  Tensor sums({t, n});
  for (std::size_t k = 0; k < t; ++k) {
    for (std::size_t j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (std::size_t i = 0; i < s; ++i) {
        const float a = activations[(k * n + j) * s + i];
        if (a < 0.0f) throw InputError("moefication labels: activations must be non-negative");
        acc += a;
      }
      sums(k, j) = acc;
    }
  }
  return labels_from_sums(sums);
}

}  // namespace d2dmoe
