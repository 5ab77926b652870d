#include "d2dmoe/mha.hpp"

#include <cmath>
#include <future>
#include <random>

#include "d2dmoe/conversion.hpp"
#include "d2dmoe/hash.hpp"
#include "d2dmoe/linalg.hpp"
#include "d2dmoe/routing.hpp"

namespace d2dmoe {

int replacement_hidden(int model_dim) { return std::max(1, model_dim / 2); }

void DistillConfig::validate() const {
  std::vector<std::string> v;
  if (hidden < 0) v.push_back("hidden must be >= 0");
  if (steps < 1) v.push_back("steps must be >= 1");
  if (batch_size < 1) v.push_back("batch_size must be >= 1");
  if (!(adam.lr > 0.0)) v.push_back("lr must be positive");
  if (val_modulus < 0 || val_modulus == 1) v.push_back("val_modulus must be 0 or >= 2");
  if (threads < 1) v.push_back("threads must be >= 1");
  if (!v.empty()) {
    std::string msg = "invalid distill config:";
    for (const auto& s : v) msg += " " + s + ";";
    throw ValidationError(msg);
  }
}

Json to_json(const DistillConfig& c) {
  return Json{{"hidden", c.hidden},
              {"steps", c.steps},
              {"batch_size", c.batch_size},
              {"lr", c.adam.lr},
              {"schedule", ad::to_string(c.adam.schedule)},
              {"val_modulus", c.val_modulus}};
}

DistillConfig distill_config_from_json(const Json& j, DistillConfig c) {
  try {
    c.hidden = j.value("hidden", c.hidden);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.adam.lr = j.value("lr", c.adam.lr);
    if (j.contains("schedule")) c.adam.schedule = ad::parse_schedule(j.at("schedule").get<std::string>());
    c.val_modulus = j.value("val_modulus", c.val_modulus);
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("distill config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

Tensor rows_of(const Tensor& src, const std::vector<std::size_t>& rows) {
  const std::size_t c = src.dim(1);
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(src.ptr() + rows[i] * c, c, out.ptr() + i * c);
  return out;
}

Tensor linear_apply(const LinearWeights& w, const Tensor& x) {
  Tensor y = ad::mm(x, w.W);
  ad::add_bias_rows(y, w.b);
  return y;
}

Tensor mlp_apply(const ReplacementMlp& m, const Tensor& x) {
  Tensor h = ad::mm(x, m.W_in);
  ad::add_bias_rows(h, m.b_in);
  for (float& v : h.data()) v = std::max(v, 0.0f);
  Tensor y = ad::mm(h, m.W_out);
  ad::add_bias_rows(y, m.b_out);
  return y;
}

double mse(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.numel());
}

double mean_column_variance(const Tensor& t) {
  const std::size_t r = t.dim(0), c = t.dim(1);
  double total = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < r; ++i) m += t(i, j);
    m /= static_cast<double>(r);
    double v = 0.0;
    for (std::size_t i = 0; i < r; ++i) v += (t(i, j) - m) * (t(i, j) - m);
    total += v / static_cast<double>(r);
  }
  return total / static_cast<double>(c);
}

Tensor normal(ad::Shape s, std::mt19937_64& rng, double stddev) {
  Tensor t(std::move(s));
  std::normal_distribution<float> nd(0.0f, static_cast<float>(stddev));
  for (float& x : t.data()) x = nd(rng);
  return t;
}

}  // namespace

DistillResult distill_projection(const LinearWeights& original, const Tensor& inputs, const DistillConfig& cfg,
                                 SiteId provenance, std::uint64_t seed) {
  cfg.validate();
  if (inputs.rank() != 2 || inputs.dim(0) == 0) throw InputError("distillation needs a non-empty tokens x d_m input");
  const std::size_t d = original.W.dim(0);
  if (inputs.dim(1) != d || original.W.dim(1) != d || original.b.numel() != d) {
    throw DimensionError("distillation: projection " + ad::shape_str(original.W.shape()) + " vs inputs " +
                         ad::shape_str(inputs.shape()));
  }
  const std::size_t h = static_cast<std::size_t>(cfg.hidden > 0 ? cfg.hidden : replacement_hidden(static_cast<int>(d)));

  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < inputs.dim(0); ++i) {
    (is_validation_token(i, cfg.val_modulus) ? val_idx : train_idx).push_back(i);
  }
  if (train_idx.empty()) std::swap(train_idx, val_idx);
  const Tensor train_x = rows_of(inputs, train_idx);
  const Tensor train_y = linear_apply(original, train_x);

  DistillResult res;
  res.train_tokens = train_idx.size();
  res.val_tokens = val_idx.size();
  ReplacementMlp& m = res.mlp;
  m.provenance = provenance;
  std::mt19937_64 init_rng(derive_seed(seed, "distill-init"));
  m.W_in = normal({d, h}, init_rng, 1.0 / std::sqrt(static_cast<double>(d)));
  m.b_in = Tensor({h});
  // zero output layer: starts at the best constant, a zero map stays exact
  m.W_out = Tensor({h, d});
  m.b_out = Tensor({d});
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < train_y.dim(0); ++i) s += train_y(i, j);
    m.b_out[j] = static_cast<float>(s / static_cast<double>(train_y.dim(0)));
  }

  ad::AdamConfig adam = cfg.adam;
  if (adam.total_steps <= 0) adam.total_steps = cfg.steps;
  ad::Adam<float> opt(adam);
  std::mt19937_64 rng(derive_seed(seed, "distill-batches"));
  std::uniform_int_distribution<std::size_t> pick(0, train_idx.size() - 1);
  const bool full_batch = train_idx.size() <= static_cast<std::size_t>(cfg.batch_size);

  for (int step = 0; step < cfg.steps; ++step) {
    Tensor bx, by;
    if (full_batch) {
      bx = train_x;
      by = train_y;
    } else {
      std::vector<std::size_t> rows(static_cast<std::size_t>(cfg.batch_size));
      for (auto& v : rows) v = pick(rng);
      bx = rows_of(train_x, rows);
      by = rows_of(train_y, rows);
    }
    ad::Tape<float> tape;
    Var wi = tape.leaf(m.W_in), bi = tape.leaf(m.b_in), wo = tape.leaf(m.W_out), bo = tape.leaf(m.b_out);
    Var hid = ad::relu(ad::add_bias(ad::matmul(ad::constant(std::move(bx)), wi), bi));
    Var out = ad::add_bias(ad::matmul(hid, wo), bo);
    Var loss = ad::mse(out, ad::constant(std::move(by)));
    if (!std::isfinite(loss.value().item())) {
      throw NumericError("distillation of " + provenance.str() + " diverged at step " + std::to_string(step), step);
    }
    const auto g = ad::backward(tape, loss);
    opt.step({{"W_in", &m.W_in, &g[wi]}, {"b_in", &m.b_in, &g[bi]}, {"W_out", &m.W_out, &g[wo]}, {"b_out", &m.b_out, &g[bo]}});
  }

  res.train_mse = mse(mlp_apply(m, train_x), train_y);
  if (val_idx.empty()) {
    res.val_mse = res.train_mse;
    res.val_output_variance = mean_column_variance(train_y);
  } else {
    const Tensor vx = rows_of(inputs, val_idx);
    const Tensor vy = linear_apply(original, vx);
    res.val_mse = mse(mlp_apply(m, vx), vy);
    res.val_output_variance = mean_column_variance(vy);
  }
  if (!std::isfinite(res.train_mse) || !std::isfinite(res.val_mse)) {
    throw NumericError("distillation of " + provenance.str() + " produced a non-finite loss", cfg.steps);
  }
  return res;
}

std::vector<SiteId> all_projection_sites(const DenseModel& model) {
  std::vector<SiteId> out;
  for (int l = 0; l < model.config.num_layers; ++l) {
    for (SiteKind k : kProjectionKinds) out.push_back({l, k});
  }
  return out;
}

std::vector<SiteDistillation> replace_mha(DenseModel& model, const std::vector<SiteId>& sites, const Dataset& data,
                                          const DistillConfig& cfg, std::uint64_t seed, std::size_t max_sequences) {
  cfg.validate();
  std::vector<const LinearWeights*> originals;
  for (SiteId s : sites) {
    if (s.kind == SiteKind::ffn) throw ContractError("site " + s.str() + " is not an attention projection");
    if (s.layer < 0 || s.layer >= model.config.num_layers) throw ContractError("site " + s.str() + " is out of range");
    const auto* lin = std::get_if<LinearWeights>(&model.projection(s.layer, s.kind));
    if (!lin) throw ContractError("site " + s.str() + " is not a raw projection (form " + model.form(s) + ")");
    originals.push_back(lin);
  }
  std::vector<Tensor> inputs;
  for (SiteId s : sites) inputs.push_back(capture_site_inputs(model, s, data, Split::train, max_sequences));

  std::vector<SiteDistillation> out(sites.size());
  auto run = [&](std::size_t i) {
    out[i] = {sites[i], distill_projection(*originals[i], inputs[i], cfg, sites[i],
                                           derive_seed(seed, "distill/" + sites[i].str()))};
  };
  if (cfg.threads <= 1) {
    for (std::size_t i = 0; i < sites.size(); ++i) run(i);
  } else {
    for (std::size_t start = 0; start < sites.size(); start += static_cast<std::size_t>(cfg.threads)) {
      std::vector<std::future<void>> jobs;
      for (std::size_t i = start; i < std::min(sites.size(), start + static_cast<std::size_t>(cfg.threads)); ++i) {
        jobs.push_back(std::async(std::launch::async, run, i));
      }
      for (auto& j : jobs) j.get();
    }
  }
  for (const auto& r : out) model.projection(r.site.layer, r.site.kind) = r.result.mlp;
  model.validate();
  return out;
}

Json to_json(const SiteDistillation& s) {
  return Json{{"site", s.site.str()},
              {"hidden", s.result.mlp.hidden()},
              {"train_mse", s.result.train_mse},
              {"val_mse", s.result.val_mse},
              {"val_output_variance", s.result.val_output_variance},
              {"train_tokens", s.result.train_tokens},
              {"val_tokens", s.result.val_tokens}};
}

}  // namespace d2dmoe
