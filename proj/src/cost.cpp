#include "d2dmoe/cost.hpp"

#include <cmath>
#include <sstream>

namespace d2dmoe {

std::int64_t CostParams::hidden() const { return std::llround(expansion * model_dim); }

void CostParams::validate() const {
  std::vector<std::string> v;
  if (model_dim <= 0) v.push_back("d_m must be positive");
  if (!(expansion > 0.0)) v.push_back("e must be positive");
  if (n_experts <= 0) v.push_back("n must be positive");
  if (router_hidden < 0) v.push_back("d_h must be >= 0");
  if (matrices != 2 && matrices != 3) v.push_back("matrices must be 2 or 3");
  if (v.empty()) {
    const double h = expansion * model_dim;
    if (std::abs(h - std::round(h)) > 1e-9) {
      v.push_back("e * d_m must be an integer");
    } else if (hidden() % n_experts != 0) {
      v.push_back("n must divide e * d_m");
    }
  }
  if (!v.empty()) {
    std::string msg = "invalid cost params:";
    for (const auto& s : v) msg += " " + s + ";";
    throw ValidationError(msg);
  }
}

std::int64_t CostParams::expert_flops() const {
  return static_cast<std::int64_t>(matrices) * model_dim * (hidden() / n_experts);
}

std::int64_t CostParams::router_flops() const {
  return static_cast<std::int64_t>(router_hidden) * (model_dim + n_experts);
}

std::int64_t ffn_flops(const CostParams& p) {
  p.validate();
  return static_cast<std::int64_t>(p.matrices) * p.model_dim * p.hidden();
}

double dynk_flops(const CostParams& p, double k) {
  p.validate();
  if (!(k >= 0.0) || k > p.n_experts) throw ValidationError("k must lie in [0, n]");
  return k * static_cast<double>(p.expert_flops()) + static_cast<double>(p.router_flops());
}

double flops_ratio(const CostParams& p, double k) {
  p.validate();
  if (!(k >= 0.0) || k > p.n_experts) throw ValidationError("k must lie in [0, n]");
  const double d = p.model_dim, n = p.n_experts;
  return k / n + p.router_hidden * (1.0 + n / d) / (p.matrices * p.expansion * d);
}

CostParams site_params(const MoeLayer& layer) {
  CostParams p;
  p.model_dim = static_cast<int>(layer.source.model_dim());
  p.expansion = static_cast<double>(layer.source.hidden()) / p.model_dim;
  p.n_experts = layer.n_experts();
  p.router_hidden = static_cast<int>(layer.router.hidden());
  p.matrices = layer.source.gated() ? 3 : 2;
  return p;
}

namespace {

const MoeLayer* moe_at(const DenseModel& model, SiteId site) {
  const Block& b = model.layers.at(static_cast<std::size_t>(site.layer));
  if (site.kind == SiteKind::ffn) return std::get_if<MoeLayer>(&b.ffn);
  return std::get_if<MoeLayer>(&model.projection(site.layer, site.kind));
}

std::vector<SiteId> all_sites(const DenseModel& model) {
  std::vector<SiteId> out;
  for (int l = 0; l < model.config.num_layers; ++l) {
    for (SiteKind k : kProjectionKinds) out.push_back({l, k});
    out.push_back({l, SiteKind::ffn});
  }
  return out;
}

}  // namespace

std::int64_t dense_site_flops(const DenseModel& model, SiteId site) {
  const std::int64_t d = model.config.model_dim;
  if (site.kind != SiteKind::ffn) return d * d;
  return (model.config.ffn_kind == FfnKind::gated ? 3 : 2) * d * model.config.hidden_dim();
}

std::int64_t site_flops(const DenseModel& model, SiteId site, int selected) {
  if (const MoeLayer* m = moe_at(model, site)) {
    const CostParams p = site_params(*m);
    if (selected < 0 || selected > p.n_experts) throw ContractError("selected count out of range at " + site.str());
    return selected * p.expert_flops() + p.router_flops();
  }
  const std::int64_t d = model.config.model_dim;
  if (site.kind == SiteKind::ffn) {
    const FfnWeights& f = std::get<FfnWeights>(model.layers.at(static_cast<std::size_t>(site.layer)).ffn);
    return (f.gated() ? 3 : 2) * d * static_cast<std::int64_t>(f.hidden());
  }
  if (const auto* r = std::get_if<ReplacementMlp>(&model.projection(site.layer, site.kind))) {
    return 2 * d * static_cast<std::int64_t>(r->hidden());
  }
  return d * d;
}

double dense_flops_per_token(const TransformerConfig& c, std::size_t seq_len) {
  const double d = c.model_dim;
  const double m = c.ffn_kind == FfnKind::gated ? 3.0 : 2.0;
  const double layer = 4.0 * d * d + 2.0 * static_cast<double>(seq_len) * d + m * c.expansion * d * d;
  const double head = c.head == HeadKind::lm ? d * c.vocab_size : d * c.num_classes / static_cast<double>(seq_len);
  return c.num_layers * layer + head;
}

double FlopsReport::moe_ratio() const {
  double moe = 0.0, dense_sum = 0.0;
  for (const auto& s : sites) {
    if (s.form != "moe") continue;
    moe += s.measured;
    dense_sum += s.dense;
  }
  if (dense_sum == 0.0) throw ContractError("report has no MoE sites");
  return moe / dense_sum;
}

FlopsReport model_flops(const DenseModel& model, const ExecutionTrace& trace, std::size_t sequences,
                        std::size_t seq_len) {
  if (sequences == 0 || seq_len == 0) throw InputError("model_flops needs at least one token");
  const std::size_t tokens = sequences * seq_len;
  const auto moe = model.moe_sites();
  if (moe.size() != trace.sites.size()) throw ContractError("trace sites do not match the model's MoE sites");
  for (SiteId s : moe) {
    auto it = trace.sites.find(s);
    if (it == trace.sites.end()) throw ContractError("trace is missing MoE site " + s.str());
    if (it->second.counts.size() != tokens) {
      throw ContractError("trace for " + s.str() + " covers " + std::to_string(it->second.counts.size()) +
                          " tokens, expected " + std::to_string(tokens));
    }
  }

  const auto& c = model.config;
  const std::int64_t d = c.model_dim;
  const auto T = static_cast<std::int64_t>(tokens);
  FlopsReport r;
  r.tokens = tokens;
  r.sequences = sequences;
  std::int64_t total = 0;
  double analytic_total = 0.0;
  std::int64_t dense_total = 0;
  for (SiteId s : all_sites(model)) {
    SiteCost sc;
    sc.site = s;
    sc.form = model.form(s);
    sc.dense = static_cast<double>(dense_site_flops(model, s));
    std::int64_t site_total = 0;
    if (const MoeLayer* m = moe_at(model, s)) {
      const CostParams p = site_params(*m);
      std::int64_t selected = 0;
      for (int k : trace.sites.at(s).counts) {
        if (k < 0 || k > p.n_experts) throw ContractError("selected count out of range at " + s.str());
        selected += k;
      }
      site_total = selected * p.expert_flops() + T * p.router_flops();
      sc.analytic = dynk_flops(p, static_cast<double>(selected) / static_cast<double>(T));
    } else {
      site_total = T * site_flops(model, s, 0);
      sc.analytic = static_cast<double>(site_flops(model, s, 0));
    }
    sc.measured = static_cast<double>(site_total) / static_cast<double>(T);
    total += site_total;
    analytic_total += sc.analytic;
    dense_total += T * dense_site_flops(model, s);
    r.sites.push_back(sc);
  }
  // attention scores and values, then the head
  const std::int64_t fixed = c.num_layers * 2 * static_cast<std::int64_t>(seq_len) * d * T +
                             (c.head == HeadKind::lm ? d * c.vocab_size * T
                                                     : d * c.num_classes * static_cast<std::int64_t>(sequences));
  total += fixed;
  dense_total += fixed;
  r.measured = static_cast<double>(total) / static_cast<double>(T);
  r.analytic = analytic_total + static_cast<double>(fixed) / static_cast<double>(T);
  r.dense = static_cast<double>(dense_total) / static_cast<double>(T);
  return r;
}

CostRow cost_row(double policy_param, double metric, const FlopsReport& r) {
  CostRow row{policy_param, r.analytic, r.measured, metric, {}};
  for (const auto& s : r.sites) row.site_flops.emplace_back(s.site.str(), s.measured);
  return row;
}

std::string cost_report_csv(const std::vector<CostRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "policy_param,analytic_flops,measured_flops,metric";
  if (!rows.empty()) {
    for (const auto& [name, v] : rows.front().site_flops) os << ",site:" << name << "_flops";
  }
  os << '\n';
  for (const auto& r : rows) {
    if (!rows.empty() && r.site_flops.size() != rows.front().site_flops.size()) {
      throw ContractError("cost rows disagree on their sites");
    }
    os << r.policy_param << ',' << r.analytic_flops << ',' << r.measured_flops << ',' << r.metric;
    for (const auto& [name, v] : r.site_flops) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

}  // namespace d2dmoe
