#pragma once

#include <array>
#include <functional>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "d2dmoe/autodiff.hpp"
#include "d2dmoe/moe.hpp"
#include "d2dmoe/weights.hpp"

namespace d2dmoe {

using ProjectionSlot = std::variant<LinearWeights, ReplacementMlp, MoeLayer>;
using FfnSlot = std::variant<FfnWeights, MoeLayer>;

inline constexpr std::array<SiteKind, 4> kProjectionKinds = {SiteKind::q, SiteKind::k, SiteKind::v, SiteKind::o};

struct Block {
  LayerNormWeights ln1;
  LayerNormWeights ln2;
  std::array<ProjectionSlot, 4> proj;  // q, k, v, o
  FfnSlot ffn;
};

// Pre-layernorm transformer: x += proj_o(attn(LN1 x)); x += ffn(LN2 x);
// final LN; lm head per token or mean-pooled classifier head.
struct DenseModel {
  TransformerConfig config;
  Tensor token_embedding;     // vocab x d_m
  Tensor position_embedding;  // context x d_m
  std::vector<Block> layers;
  LayerNormWeights final_ln;
  LinearWeights head;  // d_m x outputs
  // Clustered / routed sites that are not converted yet.
  std::map<SiteId, ExpertPartition> partitions;
  std::map<SiteId, RouterWeights> routers;

  const ProjectionSlot& projection(int layer, SiteKind kind) const;
  ProjectionSlot& projection(int layer, SiteKind kind);

  // "dense", "replaced-mha" or "moe".
  std::string form(SiteId site) const;
  bool is_moe(SiteId site) const { return form(site) == "moe"; }
  // FFN-shaped weights at a site: the FFN itself, or a replaced projection's
  // MLP. A raw attention projection is a ContractError.
  FfnWeights site_ffn(SiteId site) const;
  Activation site_activation(SiteId site) const;
  std::vector<SiteId> moe_sites() const;
  void validate() const;
};

// Scaled-normal init: std 0.02, residual output projections (attn o, ffn W2)
// std 0.02 / sqrt(2L), biases zero, layernorm identity.
DenseModel build_model(const TransformerConfig& config, std::uint64_t seed);

// Trainable dense parameters (embeddings, layernorms, projections, replaced
// MLPs, dense FFNs, head). MoE sites and routers are frozen.
struct NamedTensor {
  std::string name;
  Tensor* tensor;
};
std::vector<NamedTensor> named_parameters(DenseModel& model);

// Every stored tensor, including MoE source weights and routers.
std::vector<std::pair<std::string, const Tensor*>> model_tensors(const DenseModel& model);

std::size_t parameter_count(const DenseModel& model);

enum class RelufyStatus { converted, already_relu };
RelufyStatus relufy(DenseModel& model);

struct TokenBatch {
  std::vector<int> ids;      // batch * seq, row-major
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> targets;  // lm: next token per position; classifier: label per sequence
};

struct TraceFlags {
  bool ffn_pre = false;     // pre-activation of the sparsity path (gate path for gated FFNs)
  bool ffn_hidden = false;  // post-activation of that path
  bool ffn_input = false;   // the tensor the FFN consumes
  bool mha_io = false;      // projection inputs and outputs
  bool mha_hidden = false;  // post-relu hidden activations of replaced projections
  int layer = -1;           // restrict capture to one layer, -1 for all
  bool record_masks = false;

  bool any() const { return ffn_pre || ffn_hidden || ffn_input || mha_io || mha_hidden; }
};

struct LayerTrace {
  ad::Var<float> ffn_pre;
  ad::Var<float> ffn_hidden;
  Tensor ffn_input;
  std::map<SiteKind, Tensor> mha_in;
  std::map<SiteKind, Tensor> mha_out;
  std::map<SiteKind, ad::Var<float>> mha_hidden;
  bool captured = false;
};

struct ActivationTrace {
  std::vector<LayerTrace> layers;
};

// Binds named parameters as tape leaves for training. Parameters rejected by
// the predicate enter the graph as constants.
class ParamBinder {
 public:
  ParamBinder(ad::Tape<float>& tape, std::function<bool(const std::string&)> trainable);
  ad::Var<float> bind(const std::string& name, const Tensor& value);
  const std::map<std::string, ad::Var<float>>& leaves() const { return leaves_; }

 private:
  ad::Tape<float>& tape_;
  std::function<bool(const std::string&)> trainable_;
  std::map<std::string, ad::Var<float>> leaves_;
};

struct ForwardOptions {
  TraceFlags trace;
  ParamBinder* binder = nullptr;
  const GatePolicy* policy_override = nullptr;
};

struct ForwardResult {
  ad::Var<float> logits;  // (batch*seq) x vocab, or batch x classes
  ActivationTrace trace;
  ExecutionTrace exec;
};

ForwardResult forward(const DenseModel& model, const TokenBatch& batch, const ForwardOptions& opts = {});

// Mean cross-entropy of the logits against the batch targets.
ad::Var<float> task_loss(const DenseModel& model, const ForwardResult& out, const TokenBatch& batch);

// Parameter-name helpers shared with the checkpoint format.
std::string projection_param(int layer, SiteKind kind, const std::string& leaf);
std::string replaced_param(int layer, SiteKind kind, const std::string& leaf);
std::string ffn_param(int layer, const std::string& leaf);
std::string router_param(SiteId site, const std::string& leaf);

}  // namespace d2dmoe
