#include "d2dmoe/weights.hpp"

#include "d2dmoe/hash.hpp"
#include "d2dmoe/linalg.hpp"

namespace d2dmoe {

std::string to_string(FfnKind k) { return k == FfnKind::standard ? "standard" : "gated"; }
std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }
std::string to_string(HeadKind h) { return h == HeadKind::lm ? "lm" : "classifier"; }

FfnKind parse_ffn_kind(const std::string& s) {
  if (s == "standard") return FfnKind::standard;
  if (s == "gated") return FfnKind::gated;
  throw ValidationError("unknown ffn_kind '" + s + "'");
}

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "gelu") return Activation::gelu;
  throw ValidationError("unknown activation '" + s + "'");
}

HeadKind parse_head_kind(const std::string& s) {
  if (s == "lm") return HeadKind::lm;
  if (s == "classifier") return HeadKind::classifier;
  throw ValidationError("unknown task_head '" + s + "'");
}

float activate(Activation act, float x) {
  return act == Activation::relu ? (x > 0.0f ? x : 0.0f) : ad::gelu_scalar(x);
}

std::vector<std::string> TransformerConfig::violations() const {
  std::vector<std::string> v;
  if (vocab_size < 1) v.push_back("vocab_size must be >= 1");
  if (context_length < 1) v.push_back("context_length must be >= 1");
  if (num_layers < 1) v.push_back("num_layers must be >= 1");
  if (model_dim < 1) v.push_back("model_dim must be >= 1");
  if (num_heads < 1) v.push_back("num_heads must be >= 1");
  if (num_heads >= 1 && model_dim % num_heads != 0) v.push_back("model_dim must be divisible by num_heads");
  if (expansion < 1) v.push_back("expansion_factor must be >= 1");
  if (head == HeadKind::classifier && num_classes < 2) v.push_back("classifier head needs num_classes >= 2");
  return v;
}

void TransformerConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid transformer config:";
  for (const auto& s : v) msg += " " + s + ";";
  throw ValidationError(msg);
}

Json to_json(const TransformerConfig& c) {
  return Json{{"vocab_size", c.vocab_size},
              {"context_length", c.context_length},
              {"num_layers", c.num_layers},
              {"model_dim", c.model_dim},
              {"num_heads", c.num_heads},
              {"expansion_factor", c.expansion},
              {"ffn_kind", to_string(c.ffn_kind)},
              {"activation", to_string(c.activation)},
              {"task_head", to_string(c.head)},
              {"num_classes", c.num_classes}};
}

TransformerConfig config_from_json(const Json& j) {
  TransformerConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.context_length = j.value("context_length", c.context_length);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.model_dim = j.value("model_dim", c.model_dim);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.expansion = j.value("expansion_factor", c.expansion);
    c.ffn_kind = parse_ffn_kind(j.value("ffn_kind", to_string(c.ffn_kind)));
    c.activation = parse_activation(j.value("activation", to_string(c.activation)));
    c.head = parse_head_kind(j.value("task_head", to_string(c.head)));
    c.num_classes = j.value("num_classes", c.num_classes);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed transformer config: ") + e.what());
  }
  return c;
}

std::string to_string(SiteKind k) {
  switch (k) {
    case SiteKind::q: return "q";
    case SiteKind::k: return "k";
    case SiteKind::v: return "v";
    case SiteKind::o: return "o";
    case SiteKind::ffn: return "ffn";
  }
  return "ffn";
}

SiteKind parse_site_kind(const std::string& s) {
  if (s == "q") return SiteKind::q;
  if (s == "k") return SiteKind::k;
  if (s == "v") return SiteKind::v;
  if (s == "o") return SiteKind::o;
  if (s == "ffn") return SiteKind::ffn;
  throw ValidationError("unknown site kind '" + s + "'");
}

SiteId SiteId::parse(const std::string& s) {
  const auto dot = s.find('.');
  if (dot == std::string::npos) throw ValidationError("site '" + s + "' is not of the form <layer>.<kind>");
  try {
    return SiteId{std::stoi(s.substr(0, dot)), parse_site_kind(s.substr(dot + 1))};
  } catch (const std::logic_error&) {
    throw ValidationError("site '" + s + "' has a non-numeric layer");
  }
}

void FfnWeights::check() const {
  auto bad = [](const std::string& what) { throw DimensionError("ffn weights: " + what); };
  if (W1.rank() != 2) bad("W1 must be rank 2");
  const std::size_t d = W1.dim(0);
  const std::size_t h = W1.dim(1);
  if (b1.shape() != ad::Shape{h}) bad("b1 shape " + ad::shape_str(b1.shape()));
  if (W2.shape() != ad::Shape{h, d}) bad("W2 shape " + ad::shape_str(W2.shape()));
  if (b2.shape() != ad::Shape{d}) bad("b2 shape " + ad::shape_str(b2.shape()));
  if (Wg && Wg->shape() != W1.shape()) bad("Wg shape " + ad::shape_str(Wg->shape()));
}

std::uint64_t fingerprint(const FfnWeights& w) {
  Fnv1a h;
  for (const Tensor* t : {&w.W1, &w.b1, &w.W2, &w.b2}) {
    h.span(t->data());
    for (std::size_t d : t->shape()) h.value(d);
  }
  if (w.Wg) h.str("gate").span(w.Wg->data());
  return h.digest();
}

FfnWeights ReplacementMlp::as_ffn() const { return FfnWeights{W_in, b_in, W_out, b_out, std::nullopt}; }

Tensor ffn_core(const FfnCoreView& w, const Tensor& z, Activation act) {
  Tensor hidden = ad::mm(z, w.W1);
  ad::add_bias_rows(hidden, w.b1);
  if (w.Wg) {
    const Tensor gate = ad::mm(z, *w.Wg);
    for (std::size_t i = 0; i < hidden.numel(); ++i) hidden[i] = activate(act, gate[i]) * hidden[i];
  } else {
    for (float& x : hidden.data()) x = activate(act, x);
  }
  return ad::mm(hidden, w.W2);
}

Tensor ffn_apply(const FfnWeights& w, const Tensor& z, Activation act) {
  Tensor out = ffn_core(core_view(w), z, act);
  ad::add_bias_rows(out, w.b2);
  return out;
}

Tensor ffn_hidden_activations(const FfnWeights& w, const Tensor& z, Activation act) {
  Tensor pre = w.Wg ? ad::mm(z, *w.Wg) : ad::mm(z, w.W1);
  if (!w.Wg) ad::add_bias_rows(pre, w.b1);
  for (float& x : pre.data()) x = activate(act, x);
  return pre;
}

}  // namespace d2dmoe
