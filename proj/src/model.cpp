#include "d2dmoe/model.hpp"

#include <cmath>
#include <random>

#include "d2dmoe/linalg.hpp"

namespace d2dmoe {

namespace {

std::size_t kind_index(SiteKind k) {
  switch (k) {
    case SiteKind::q: return 0;
    case SiteKind::k: return 1;
    case SiteKind::v: return 2;
    case SiteKind::o: return 3;
    case SiteKind::ffn: break;
  }
  throw ContractError("ffn is not an attention projection");
}

void check_layer(const DenseModel& m, int layer) {
  if (layer < 0 || static_cast<std::size_t>(layer) >= m.layers.size()) {
    throw ContractError("layer " + std::to_string(layer) + " out of range");
  }
}

Var act_op(Activation a, const Var& x) { return a == Activation::relu ? ad::relu(x) : ad::gelu(x); }

}  // namespace

std::string projection_param(int layer, SiteKind kind, const std::string& leaf) {
  return "layer." + std::to_string(layer) + ".attn." + to_string(kind) + "." + leaf;
}
std::string replaced_param(int layer, SiteKind kind, const std::string& leaf) {
  return "mha." + std::to_string(layer) + "." + to_string(kind) + "." + leaf;
}
std::string ffn_param(int layer, const std::string& leaf) { return "layer." + std::to_string(layer) + ".ffn." + leaf; }
std::string router_param(SiteId site, const std::string& leaf) {
  return "router." + std::to_string(site.layer) + "." + to_string(site.kind) + "." + leaf;
}

const ProjectionSlot& DenseModel::projection(int layer, SiteKind kind) const {
  check_layer(*this, layer);
  return layers[static_cast<std::size_t>(layer)].proj[kind_index(kind)];
}

ProjectionSlot& DenseModel::projection(int layer, SiteKind kind) {
  check_layer(*this, layer);
  return layers[static_cast<std::size_t>(layer)].proj[kind_index(kind)];
}

std::string DenseModel::form(SiteId site) const {
  check_layer(*this, site.layer);
  if (site.kind == SiteKind::ffn) {
    return std::holds_alternative<MoeLayer>(layers[static_cast<std::size_t>(site.layer)].ffn) ? "moe" : "dense";
  }
  const ProjectionSlot& s = projection(site.layer, site.kind);
  if (std::holds_alternative<MoeLayer>(s)) return "moe";
  if (std::holds_alternative<ReplacementMlp>(s)) return "replaced-mha";
  return "dense";
}

FfnWeights DenseModel::site_ffn(SiteId site) const {
  check_layer(*this, site.layer);
  if (site.kind == SiteKind::ffn) {
    const FfnSlot& s = layers[static_cast<std::size_t>(site.layer)].ffn;
    if (const auto* m = std::get_if<MoeLayer>(&s)) return m->source;
    return std::get<FfnWeights>(s);
  }
  const ProjectionSlot& s = projection(site.layer, site.kind);
  if (const auto* m = std::get_if<MoeLayer>(&s)) return m->source;
  if (const auto* r = std::get_if<ReplacementMlp>(&s)) return r->as_ffn();
  throw ContractError("site " + site.str() +
                      " is a raw attention projection; replace it with an MLP before clustering or conversion");
}

Activation DenseModel::site_activation(SiteId site) const {
  return site.kind == SiteKind::ffn ? config.activation : Activation::relu;
}

std::vector<SiteId> DenseModel::moe_sites() const {
  std::vector<SiteId> out;
  for (int l = 0; l < static_cast<int>(layers.size()); ++l) {
    for (SiteKind k : {SiteKind::q, SiteKind::k, SiteKind::v, SiteKind::o, SiteKind::ffn}) {
      if (is_moe({l, k})) out.push_back({l, k});
    }
  }
  return out;
}

void DenseModel::validate() const {
  config.validate();
  const auto d = static_cast<std::size_t>(config.model_dim);
  const auto h = static_cast<std::size_t>(config.hidden_dim());
  auto expect = [](const Tensor& t, const ad::Shape& s, const std::string& what) {
    if (t.shape() != s) {
      throw DimensionError(what + " has shape " + ad::shape_str(t.shape()) + ", expected " + ad::shape_str(s));
    }
  };
  expect(token_embedding, {static_cast<std::size_t>(config.vocab_size), d}, "token_embedding");
  expect(position_embedding, {static_cast<std::size_t>(config.context_length), d}, "position_embedding");
  if (layers.size() != static_cast<std::size_t>(config.num_layers)) throw DimensionError("layer count differs from config");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Block& b = layers[l];
    for (const auto* ln : {&b.ln1, &b.ln2}) {
      expect(ln->gamma, {d}, "layernorm gamma");
      expect(ln->beta, {d}, "layernorm beta");
    }
    for (std::size_t k = 0; k < 4; ++k) {
      if (const auto* lin = std::get_if<LinearWeights>(&b.proj[k])) {
        expect(lin->W, {d, d}, "projection W");
        expect(lin->b, {d}, "projection b");
      } else if (const auto* r = std::get_if<ReplacementMlp>(&b.proj[k])) {
        r->as_ffn().check();
        if (r->W_in.dim(0) != d) throw DimensionError("replacement MLP input width");
      } else {
        std::get<MoeLayer>(b.proj[k]).check();
      }
    }
    const FfnWeights ffn = site_ffn({static_cast<int>(l), SiteKind::ffn});
    ffn.check();
    expect(ffn.W1, {d, h}, "ffn W1");
    if (ffn.gated() != (config.ffn_kind == FfnKind::gated)) throw DimensionError("ffn gate presence differs from ffn_kind");
    if (const auto* m = std::get_if<MoeLayer>(&b.ffn)) m->check();
  }
  expect(final_ln.gamma, {d}, "final layernorm gamma");
  expect(head.W, {d, static_cast<std::size_t>(config.output_dim())}, "head W");
  expect(head.b, {static_cast<std::size_t>(config.output_dim())}, "head b");
}

DenseModel build_model(const TransformerConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(config.model_dim);
  const auto h = static_cast<std::size_t>(config.hidden_dim());
  const double resid_std = 0.02 / std::sqrt(2.0 * config.num_layers);
  auto normal = [&rng](ad::Shape s, double stddev) {
    Tensor t(std::move(s));
    std::normal_distribution<float> nd(0.0f, static_cast<float>(stddev));
    for (float& x : t.data()) x = nd(rng);
    return t;
  };
  auto ln = [d]() { return LayerNormWeights{Tensor({d}, 1.0f), Tensor({d})}; };

  DenseModel m;
  m.config = config;
  m.token_embedding = normal({static_cast<std::size_t>(config.vocab_size), d}, 0.02);
  m.position_embedding = normal({static_cast<std::size_t>(config.context_length), d}, 0.02);
  for (int l = 0; l < config.num_layers; ++l) {
    Block b;
    b.ln1 = ln();
    b.ln2 = ln();
    for (std::size_t k = 0; k < 4; ++k) {
      b.proj[k] = LinearWeights{normal({d, d}, k == 3 ? resid_std : 0.02), Tensor({d})};
    }
    FfnWeights f{normal({d, h}, 0.02), Tensor({h}), normal({h, d}, resid_std), Tensor({d}), std::nullopt};
    if (config.ffn_kind == FfnKind::gated) f.Wg = normal({d, h}, 0.02);
    b.ffn = std::move(f);
    m.layers.push_back(std::move(b));
  }
  m.final_ln = ln();
  const auto out = static_cast<std::size_t>(config.output_dim());
  m.head = LinearWeights{normal({d, out}, 0.02), Tensor({out})};
  return m;
}

namespace {

template <class M, class Fn>
void visit_tensors(M& m, bool include_frozen, Fn&& fn) {
  fn(std::string("token_embedding"), m.token_embedding);
  fn(std::string("position_embedding"), m.position_embedding);
  for (int l = 0; l < static_cast<int>(m.layers.size()); ++l) {
    auto& b = m.layers[static_cast<std::size_t>(l)];
    const std::string pre = "layer." + std::to_string(l);
    fn(pre + ".ln1.gamma", b.ln1.gamma);
    fn(pre + ".ln1.beta", b.ln1.beta);
    for (SiteKind k : kProjectionKinds) {
      auto& slot = b.proj[kind_index(k)];
      if (auto* lin = std::get_if<LinearWeights>(&slot)) {
        fn(projection_param(l, k, "W"), lin->W);
        fn(projection_param(l, k, "b"), lin->b);
      } else if (auto* r = std::get_if<ReplacementMlp>(&slot)) {
        fn(replaced_param(l, k, "W_in"), r->W_in);
        fn(replaced_param(l, k, "b_in"), r->b_in);
        fn(replaced_param(l, k, "W_out"), r->W_out);
        fn(replaced_param(l, k, "b_out"), r->b_out);
      } else if (include_frozen) {
        auto& moe = std::get<MoeLayer>(slot);
        fn(replaced_param(l, k, "W_in"), moe.source.W1);
        fn(replaced_param(l, k, "b_in"), moe.source.b1);
        fn(replaced_param(l, k, "W_out"), moe.source.W2);
        fn(replaced_param(l, k, "b_out"), moe.source.b2);
        fn(router_param({l, k}, "Wh"), moe.router.Wh);
        fn(router_param({l, k}, "bh"), moe.router.bh);
        fn(router_param({l, k}, "Wo"), moe.router.Wo);
        fn(router_param({l, k}, "bo"), moe.router.bo);
      }
    }
    fn(pre + ".ln2.gamma", b.ln2.gamma);
    fn(pre + ".ln2.beta", b.ln2.beta);
    auto emit_ffn = [&](auto& f) {
      fn(ffn_param(l, "W1"), f.W1);
      fn(ffn_param(l, "b1"), f.b1);
      fn(ffn_param(l, "W2"), f.W2);
      fn(ffn_param(l, "b2"), f.b2);
      if (f.Wg) fn(ffn_param(l, "Wg"), *f.Wg);
    };
    if (auto* f = std::get_if<FfnWeights>(&b.ffn)) {
      emit_ffn(*f);
    } else if (include_frozen) {
      auto& moe = std::get<MoeLayer>(b.ffn);
      emit_ffn(moe.source);
      const SiteId s{l, SiteKind::ffn};
      fn(router_param(s, "Wh"), moe.router.Wh);
      fn(router_param(s, "bh"), moe.router.bh);
      fn(router_param(s, "Wo"), moe.router.Wo);
      fn(router_param(s, "bo"), moe.router.bo);
    }
  }
  fn(std::string("final_ln.gamma"), m.final_ln.gamma);
  fn(std::string("final_ln.beta"), m.final_ln.beta);
  fn(std::string("head.W"), m.head.W);
  fn(std::string("head.b"), m.head.b);
  if (include_frozen) {
    for (auto& [site, r] : m.routers) {
      fn(router_param(site, "Wh"), r.Wh);
      fn(router_param(site, "bh"), r.bh);
      fn(router_param(site, "Wo"), r.Wo);
      fn(router_param(site, "bo"), r.bo);
    }
  }
}

}  // namespace

std::vector<NamedTensor> named_parameters(DenseModel& model) {
  std::vector<NamedTensor> out;
  visit_tensors(model, false, [&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> model_tensors(const DenseModel& model) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  visit_tensors(model, true, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

std::size_t parameter_count(const DenseModel& model) {
  std::size_t n = 0;
  for (const auto& [name, t] : model_tensors(model)) {
    if (name.rfind("router.", 0) != 0) n += t->numel();
  }
  return n;
}

RelufyStatus relufy(DenseModel& model) {
  if (model.config.activation == Activation::relu) return RelufyStatus::already_relu;
  model.config.activation = Activation::relu;
  for (auto& b : model.layers) {
    if (auto* m = std::get_if<MoeLayer>(&b.ffn)) m->act = Activation::relu;
  }
  return RelufyStatus::converted;
}

ParamBinder::ParamBinder(ad::Tape<float>& tape, std::function<bool(const std::string&)> trainable)
    : tape_(tape), trainable_(std::move(trainable)) {}

Var ParamBinder::bind(const std::string& name, const Tensor& value) {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) return it->second;
  Var v = trainable_ && trainable_(name) ? tape_.leaf(value) : ad::constant(value);
  leaves_.emplace(name, v);
  return v;
}

ForwardResult forward(const DenseModel& model, const TokenBatch& batch, const ForwardOptions& opts) {
  const TransformerConfig& cfg = model.config;
  if (batch.batch == 0 || batch.seq == 0 || batch.ids.size() != batch.batch * batch.seq) {
    throw InputError("token batch of " + std::to_string(batch.ids.size()) + " ids does not match " +
                     std::to_string(batch.batch) + " x " + std::to_string(batch.seq));
  }
  if (batch.seq > static_cast<std::size_t>(cfg.context_length)) {
    throw InputError("sequence length " + std::to_string(batch.seq) + " exceeds context length " +
                     std::to_string(cfg.context_length));
  }
  for (int id : batch.ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
    }
  }

  auto P = [&](const std::string& name, const Tensor& t) {
    return opts.binder ? opts.binder->bind(name, t) : ad::constant(t);
  };
  const TraceFlags& tf = opts.trace;
  ForwardResult res;
  res.trace.layers.resize(model.layers.size());
  const MoeRunOptions moe_opts{opts.policy_override, tf.record_masks};

  std::vector<int> pos(batch.ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i % batch.seq);
  Var x = ad::add(ad::embedding(P("token_embedding", model.token_embedding), batch.ids),
                  ad::embedding(P("position_embedding", model.position_embedding), pos));

  const bool causal = cfg.head == HeadKind::lm;
  for (int l = 0; l < static_cast<int>(model.layers.size()); ++l) {
    const Block& b = model.layers[static_cast<std::size_t>(l)];
    const std::string pre = "layer." + std::to_string(l);
    LayerTrace& lt = res.trace.layers[static_cast<std::size_t>(l)];
    const bool capture = tf.any() && (tf.layer < 0 || tf.layer == l);
    lt.captured = capture;

    auto projection = [&](SiteKind kind, const Var& in) {
      const ProjectionSlot& slot = b.proj[kind_index(kind)];
      Var out;
      if (const auto* lin = std::get_if<LinearWeights>(&slot)) {
        out = ad::add_bias(ad::matmul(in, P(projection_param(l, kind, "W"), lin->W)), P(projection_param(l, kind, "b"), lin->b));
      } else if (const auto* r = std::get_if<ReplacementMlp>(&slot)) {
        Var hid = ad::relu(ad::add_bias(ad::matmul(in, P(replaced_param(l, kind, "W_in"), r->W_in)),
                                        P(replaced_param(l, kind, "b_in"), r->b_in)));
        if (capture && tf.mha_hidden) lt.mha_hidden[kind] = hid;
        out = ad::add_bias(ad::matmul(hid, P(replaced_param(l, kind, "W_out"), r->W_out)),
                           P(replaced_param(l, kind, "b_out"), r->b_out));
      } else {
        const MoeLayer& moe = std::get<MoeLayer>(slot);
        out = ad::constant(moe_forward(moe, in.value(), &res.exec.sites[moe.site], moe_opts));
        if (capture && tf.mha_hidden) {
          lt.mha_hidden[kind] = ad::constant(ffn_hidden_activations(moe.source, in.value(), Activation::relu));
        }
      }
      if (capture && tf.mha_io) {
        lt.mha_in[kind] = in.value();
        lt.mha_out[kind] = out.value();
      }
      return out;
    };

    Var h = ad::layernorm(x, P(pre + ".ln1.gamma", b.ln1.gamma), P(pre + ".ln1.beta", b.ln1.beta));
    Var q = projection(SiteKind::q, h);
    Var k = projection(SiteKind::k, h);
    Var v = projection(SiteKind::v, h);
    Var a = ad::attention(q, k, v, ad::AttentionAttrs{batch.batch, batch.seq, static_cast<std::size_t>(cfg.num_heads), causal});
    x = ad::add(x, projection(SiteKind::o, a));

    Var h2 = ad::layernorm(x, P(pre + ".ln2.gamma", b.ln2.gamma), P(pre + ".ln2.beta", b.ln2.beta));
    if (capture && tf.ffn_input) lt.ffn_input = h2.value();
    Var f;
    if (const auto* w = std::get_if<FfnWeights>(&b.ffn)) {
      Var w1 = P(ffn_param(l, "W1"), w->W1);
      Var b1 = P(ffn_param(l, "b1"), w->b1);
      Var hidden;
      if (w->Wg) {
        Var gpre = ad::matmul(h2, P(ffn_param(l, "Wg"), *w->Wg));
        Var gate = act_op(cfg.activation, gpre);
        hidden = ad::mul(gate, ad::add_bias(ad::matmul(h2, w1), b1));
        lt.ffn_pre = gpre;
        lt.ffn_hidden = gate;
      } else {
        Var hpre = ad::add_bias(ad::matmul(h2, w1), b1);
        hidden = act_op(cfg.activation, hpre);
        lt.ffn_pre = hpre;
        lt.ffn_hidden = hidden;
      }
      if (!(capture && tf.ffn_pre)) lt.ffn_pre = Var();
      if (!(capture && tf.ffn_hidden)) lt.ffn_hidden = Var();
      f = ad::add_bias(ad::matmul(hidden, P(ffn_param(l, "W2"), w->W2)), P(ffn_param(l, "b2"), w->b2));
    } else {
      const MoeLayer& moe = std::get<MoeLayer>(b.ffn);
      f = ad::constant(moe_forward(moe, h2.value(), &res.exec.sites[moe.site], moe_opts));
      if (capture && (tf.ffn_pre || tf.ffn_hidden)) {
        Tensor p = moe.source.Wg ? ad::mm(h2.value(), *moe.source.Wg) : ad::mm(h2.value(), moe.source.W1);
        if (!moe.source.Wg) ad::add_bias_rows(p, moe.source.b1);
        Tensor post = p;
        for (float& y : post.data()) y = activate(moe.act, y);
        if (tf.ffn_pre) lt.ffn_pre = ad::constant(std::move(p));
        if (tf.ffn_hidden) lt.ffn_hidden = ad::constant(std::move(post));
      }
    }
    x = ad::add(x, f);
  }

  Var xf = ad::layernorm(x, P("final_ln.gamma", model.final_ln.gamma), P("final_ln.beta", model.final_ln.beta));
  Var head_w = P("head.W", model.head.W);
  Var head_b = P("head.b", model.head.b);
  if (cfg.head == HeadKind::lm) {
    res.logits = ad::add_bias(ad::matmul(xf, head_w), head_b);
  } else {
    Tensor pool({batch.batch, batch.ids.size()});
    const float w = 1.0f / static_cast<float>(batch.seq);
    for (std::size_t s = 0; s < batch.batch; ++s) {
      for (std::size_t t = 0; t < batch.seq; ++t) pool(s, s * batch.seq + t) = w;
    }
    res.logits = ad::add_bias(ad::matmul(ad::matmul(ad::constant(std::move(pool)), xf), head_w), head_b);
  }
  return res;
}

ad::Var<float> task_loss(const DenseModel& model, const ForwardResult& out, const TokenBatch& batch) {
  const std::size_t rows = out.logits.value().dim(0);
  if (batch.targets.size() != rows) {
    throw InputError("batch has " + std::to_string(batch.targets.size()) + " targets for " + std::to_string(rows) +
                     " logit rows");
  }
  (void)model;
  return ad::cross_entropy(out.logits, batch.targets);
}

}  // namespace d2dmoe
