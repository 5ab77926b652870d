#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "d2dmoe/model.hpp"

namespace d2dmoe {

// Multiply-accumulate counts per token. Biases, activations and norms are
// not counted.
struct CostParams {
  int model_dim = 0;
  double expansion = 0.0;  // hidden width = expansion * model_dim
  int n_experts = 1;
  int router_hidden = 0;
  int matrices = 2;  // 3 for the gated FFN

  std::int64_t hidden() const;
  // Throws ValidationError unless d_m, e, n are positive, d_h >= 0 and n
  // divides the hidden width.
  void validate() const;
  std::int64_t expert_flops() const;  // one expert pass
  std::int64_t router_flops() const;  // d_h (d_m + n)
};

std::int64_t ffn_flops(const CostParams& p);
// k may be fractional (a mean over tokens).
double dynk_flops(const CostParams& p, double k);
double flops_ratio(const CostParams& p, double k);

// Parameters of an MoE site as built.
CostParams site_params(const MoeLayer& layer);

// Closed-form cost of a site in its current form, with `selected` experts
// for MoE sites.
std::int64_t site_flops(const DenseModel& model, SiteId site, int selected);
// Cost of the site's original dense layer (the projection for replaced or
// converted projections).
std::int64_t dense_site_flops(const DenseModel& model, SiteId site);

struct SiteCost {
  SiteId site;
  std::string form;
  double measured = 0.0;  // mean per token
  double analytic = 0.0;  // closed form at the site's mean selected count
  double dense = 0.0;     // the dense layer this site stands in for
};

struct FlopsReport {
  std::size_t tokens = 0;
  std::size_t sequences = 0;
  double measured = 0.0;  // mean whole-model MACs per token
  double analytic = 0.0;
  double dense = 0.0;     // the unconverted, unreplaced model
  std::vector<SiteCost> sites;  // every q, k, v, o and ffn site

  // Summed cost of the MoE sites over their dense counterparts.
  double moe_ratio() const;
  double model_ratio() const { return measured / dense; }
};

// Whole-model cost from an execution trace over `sequences` sequences of
// length `seq_len`. Attention scores and values cost 2 seq_len d_m per token
// per layer; the lm head d_m V per token, the classifier head d_m C per
// sequence. ContractError when the trace sites do not match the model's MoE
// sites or disagree on the token count.
FlopsReport model_flops(const DenseModel& model, const ExecutionTrace& trace, std::size_t sequences,
                        std::size_t seq_len);

// Dense closed form for a config: per layer 4 d_m^2 + 2 T d_m + m e d_m^2,
// plus the head (a classifier head amortized over the T tokens).
double dense_flops_per_token(const TransformerConfig& c, std::size_t seq_len);

struct CostRow {
  double policy_param = 0.0;
  double analytic_flops = 0.0;
  double measured_flops = 0.0;
  double metric = 0.0;
  std::vector<std::pair<std::string, double>> site_flops;
};

CostRow cost_row(double policy_param, double metric, const FlopsReport& r);

// Columns policy_param, analytic_flops, measured_flops, metric, then
// site:{name}_flops for the sites of the first row.
std::string cost_report_csv(const std::vector<CostRow>& rows);

}  // namespace d2dmoe
