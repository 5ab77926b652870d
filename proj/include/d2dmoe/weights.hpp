#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "d2dmoe/autodiff.hpp"
#include "d2dmoe/tensor.hpp"
#include "json.hpp"

namespace d2dmoe {

using Tensor = ad::Tensor<float>;
using Var = ad::Var<float>;
using Json = nlohmann::json;

enum class FfnKind { standard, gated };
enum class Activation { relu, gelu };
enum class HeadKind { lm, classifier };

std::string to_string(FfnKind k);
std::string to_string(Activation a);
std::string to_string(HeadKind h);
FfnKind parse_ffn_kind(const std::string& s);
Activation parse_activation(const std::string& s);
HeadKind parse_head_kind(const std::string& s);

float activate(Activation act, float x);

struct TransformerConfig {
  int vocab_size = 256;
  int context_length = 128;
  int num_layers = 2;
  int model_dim = 128;
  int num_heads = 4;
  int expansion = 4;
  FfnKind ffn_kind = FfnKind::standard;
  Activation activation = Activation::relu;
  HeadKind head = HeadKind::lm;
  int num_classes = 0;

  int hidden_dim() const { return expansion * model_dim; }
  int output_dim() const { return head == HeadKind::lm ? vocab_size : num_classes; }

  std::vector<std::string> violations() const;
  // Throws ValidationError listing every violation.
  void validate() const;

  bool operator==(const TransformerConfig&) const = default;
};

Json to_json(const TransformerConfig& c);
TransformerConfig config_from_json(const Json& j);

// Sites that can hold an MoE layer: the four attention projections and the FFN.
enum class SiteKind { q, k, v, o, ffn };

std::string to_string(SiteKind k);
SiteKind parse_site_kind(const std::string& s);

struct SiteId {
  int layer = 0;
  SiteKind kind = SiteKind::ffn;

  std::string str() const { return std::to_string(layer) + "." + to_string(kind); }
  static SiteId parse(const std::string& s);
  auto operator<=>(const SiteId&) const = default;
};

struct LayerNormWeights {
  Tensor gamma;
  Tensor beta;
};

// y = x W + b with W stored d_in x d_out.
struct LinearWeights {
  Tensor W;
  Tensor b;
};

// Two-layer FFN. W1 (d_m x H) is the input projection, W2 (H x d_m) the
// output projection. The gated kind adds Wg (d_m x H) and computes
// W2^T (act(Wg^T z) * (W1^T z + b1)) + b2.
struct FfnWeights {
  Tensor W1;
  Tensor b1;
  Tensor W2;
  Tensor b2;
  std::optional<Tensor> Wg;

  std::size_t model_dim() const { return W1.dim(0); }
  std::size_t hidden() const { return W1.dim(1); }
  bool gated() const { return Wg.has_value(); }
  // Throws DimensionError on inconsistent shapes.
  void check() const;
};

// Two-layer relu MLP standing in for an attention projection.
struct ReplacementMlp {
  Tensor W_in;
  Tensor b_in;
  Tensor W_out;
  Tensor b_out;
  SiteId provenance;

  std::size_t hidden() const { return W_in.dim(1); }
  std::size_t parameter_count() const { return W_in.numel() + b_in.numel() + W_out.numel() + b_out.numel(); }
  // The same weights seen as a standard FFN (for clustering and MoE conversion).
  FfnWeights as_ffn() const;
};

// Content hash of the FFN weights; slices remember the hash of their source.
std::uint64_t fingerprint(const FfnWeights& w);

// Non-owning view of the weights of one FFN or one expert slice; b2 is not
// part of the view.
struct FfnCoreView {
  const Tensor& W1;
  const Tensor& b1;
  const Tensor& W2;
  const Tensor* Wg = nullptr;
};

inline FfnCoreView core_view(const FfnWeights& w) {
  return FfnCoreView{w.W1, w.b1, w.W2, w.Wg ? &*w.Wg : nullptr};
}

// Hidden-path output without the output bias, for rows of z (tokens x d_m).
Tensor ffn_core(const FfnCoreView& w, const Tensor& z, Activation act);

// Full FFN output: ffn_core + b2.
Tensor ffn_apply(const FfnWeights& w, const Tensor& z, Activation act);

// Post-activation hidden values driving sparsity: act(z W1 + b1) for the
// standard kind, act(z Wg) (the gate path) for the gated kind.
Tensor ffn_hidden_activations(const FfnWeights& w, const Tensor& z, Activation act);

}  // namespace d2dmoe
