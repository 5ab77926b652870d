#include "d2dmoe/sweep.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "d2dmoe/checkpoint.hpp"
#include "d2dmoe/conversion.hpp"

namespace d2dmoe {

namespace fs = std::filesystem;

namespace {

std::string kind_name(GatePolicy::Kind k) { return k == GatePolicy::Kind::dynamic_k ? "dynamic_k" : "top_k"; }

std::size_t sequences_used(const Dataset& data, std::size_t max_sequences) {
  const std::size_t n = data.size(Split::val);
  return max_sequences == 0 ? n : std::min(n, max_sequences);
}

}  // namespace

std::vector<GatePolicy> policy_grid(const ExperimentSpec& spec, const MethodSpec& method) {
  std::vector<GatePolicy> out;
  if (method.kind == MethodKind::d2dmoe) {
    for (double t : spec.grid.tau) out.push_back(GatePolicy::dynamic(t));
  }
  for (int k : spec.k_grid(spec.n_experts(method))) out.push_back(GatePolicy::top(k));
  return out;
}

SweepResult run_sweep(const DenseModel& model, const Dataset& data, const std::vector<GatePolicy>& grid,
                      const std::string& method, std::size_t max_sequences) {
  if (grid.empty()) throw ValidationError("empty policy grid");
  const auto sites = model.moe_sites();
  if (sites.empty()) throw ContractError("model has no MoE sites to sweep");
  const std::size_t seqs = sequences_used(data, max_sequences);
  SweepResult res;
  res.method = method;
  std::vector<PolicyTrace> dyn;
  for (const GatePolicy& p : grid) {
    EvalResult r = evaluate(model, data, Split::val, 32, &p, max_sequences);
    SweepPoint pt;
    pt.policy = p;
    pt.loss = r.loss;
    pt.accuracy = r.accuracy;
    pt.flops = model_flops(model, r.exec, seqs, static_cast<std::size_t>(data.seq_len));
    double frac = 0.0;
    for (const auto& [s, t] : r.exec.sites) frac += t.mean_selected() / t.n_experts;
    pt.selected_fraction = frac / static_cast<double>(r.exec.sites.size());
    res.points.push_back(std::move(pt));
    if (p.kind == GatePolicy::Kind::dynamic_k) dyn.push_back({p, std::move(r.exec), r.loss, r.accuracy});
  }
  if (!dyn.empty()) res.expert_counts_csv = expert_histogram_csv(dyn);
  return res;
}

std::string summary_csv(const std::vector<SweepResult>& sweeps) {
  struct Row {
    const std::string* method;
    const SweepPoint* p;
  };
  std::vector<Row> rows;
  for (const auto& s : sweeps) {
    for (const auto& p : s.points) rows.push_back({&s.method, &p});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.p->flops.analytic != b.p->flops.analytic) return a.p->flops.analytic < b.p->flops.analytic;
    if (*a.method != *b.method) return *a.method < *b.method;
    if (a.p->policy.kind != b.p->policy.kind) return a.p->policy.kind < b.p->policy.kind;
    return a.p->policy.param() < b.p->policy.param();
  });
  std::ostringstream os;
  os.precision(17);
  os << "method,policy,param,analytic_flops,measured_flops,dense_flops,moe_ratio,model_ratio,selected_fraction,loss,"
        "accuracy\n";
  for (const auto& r : rows) {
    const SweepPoint& p = *r.p;
    os << *r.method << ',' << kind_name(p.policy.kind) << ',' << p.policy.param() << ',' << p.flops.analytic << ','
       << p.flops.measured << ',' << p.flops.dense << ',' << p.flops.moe_ratio() << ',' << p.flops.model_ratio() << ','
       << p.selected_fraction << ',' << p.loss << ',' << p.accuracy << '\n';
  }
  return os.str();
}

std::string sweep_cost_csv(const SweepResult& sweep, GatePolicy::Kind kind) {
  std::vector<CostRow> rows;
  for (const auto& p : sweep.points) {
    if (p.policy.kind == kind) rows.push_back(cost_row(p.policy.param(), p.loss, p.flops));
  }
  if (rows.empty()) return {};
  return cost_report_csv(rows);
}

void write_sweep(const fs::path& dir, const SweepResult& sweep, const Json& meta) {
  fs::create_directories(dir);
  for (auto k : {GatePolicy::Kind::dynamic_k, GatePolicy::Kind::top_k}) {
    const std::string csv = sweep_cost_csv(sweep, k);
    if (!csv.empty()) write_text_atomic(dir / ("sweep-" + kind_name(k) + ".csv"), csv);
  }
  write_text_atomic(dir / "summary.csv", summary_csv({sweep}));
  if (!sweep.expert_counts_csv.empty()) write_text_atomic(dir / "expert-counts.csv", sweep.expert_counts_csv);
  write_text_atomic(dir / "meta.json", meta.dump(2) + "\n");
}

std::optional<double> interpolate(std::vector<std::pair<double, double>> points, double x) {
  if (points.empty()) return std::nullopt;
  std::stable_sort(points.begin(), points.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  if (x < points.front().first || x > points.back().first) return std::nullopt;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i].first == x) return points[i].second;
    if (i + 1 < points.size() && points[i].first < x && x < points[i + 1].first) {
      const auto [x0, y0] = points[i];
      const auto [x1, y1] = points[i + 1];
      return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
    }
  }
  return std::nullopt;
}

std::string to_string(MatchAxis a) { return a == MatchAxis::moe_ratio ? "moe_ratio" : "selected_fraction"; }

std::vector<MatchedRow> matched_losses(const SweepResult& sweep, std::uint64_t seed, MatchAxis axis,
                                       const std::vector<double>& targets) {
  std::vector<MatchedRow> out;
  for (auto k : {GatePolicy::Kind::dynamic_k, GatePolicy::Kind::top_k}) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& p : sweep.points) {
      if (p.policy.kind != k) continue;
      pts.emplace_back(axis == MatchAxis::moe_ratio ? p.flops.moe_ratio() : p.selected_fraction, p.loss);
    }
    if (pts.empty()) continue;
    for (double t : targets) out.push_back({seed, sweep.method, kind_name(k), axis, t, interpolate(pts, t)});
  }
  return out;
}

std::string matched_csv(const std::vector<MatchedRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "seed,method,policy,axis,target,loss\n";
  for (const auto& r : rows) {
    os << r.seed << ',' << r.method << ',' << r.policy << ',' << to_string(r.axis) << ',' << r.target << ',';
    if (r.loss) os << *r.loss;
    os << '\n';
  }
  return os.str();
}

namespace {

// Stage -> tokens with zero-token stages dropped, so optional stages that
// consume no data (relufy, cluster, convert) do not count as a mismatch.
std::map<std::string, std::int64_t> nonzero(std::map<std::string, std::int64_t> m) {
  std::erase_if(m, [](const auto& kv) { return kv.second == 0; });
  return m;
}

std::string describe(const std::map<std::string, std::int64_t>& m) {
  std::string s;
  for (const auto& [k, v] : m) s += (s.empty() ? "" : ", ") + k + "=" + std::to_string(v);
  return "{" + s + "}";
}

std::map<std::string, std::int64_t> logged_tokens(const std::vector<StageLog>& logs) {
  std::map<std::string, std::int64_t> m;
  for (const auto& l : logs) m[l.stage] += l.tokens;
  return nonzero(std::move(m));
}

}  // namespace

void check_budget_parity(const ExperimentSpec& spec, const Dataset& data) {
  if (spec.methods.empty()) return;
  const MethodSpec& ref = spec.methods.front();
  const auto want = nonzero(planned_tokens(spec, ref, data));
  for (const auto& m : spec.methods) {
    const auto got = nonzero(planned_tokens(spec, m, data));
    if (got != want) {
      throw ValidationError("training budget mismatch: method '" + m.name + "' uses " + describe(got) + ", '" +
                            ref.name + "' uses " + describe(want));
    }
  }
}

MethodRun run_method(const ExperimentSpec& spec, const Dataset& data, const MethodSpec& method, std::uint64_t seed) {
  PipelineResult p = run_pipeline(spec, data, method, seed, "convert");
  MethodRun run;
  run.seed = seed;
  run.method = method;
  run.logs = std::move(p.logs);
  run.sweep = run_sweep(p.model, data, policy_grid(spec, method), method.name, spec.eval_max_sequences);
  Json stages = Json::array();
  std::int64_t tokens = 0;
  for (const auto& l : run.logs) {
    stages.push_back({{"stage", l.stage}, {"key", l.key}, {"tokens", l.tokens}});
    tokens += l.tokens;
  }
  const Json meta{{"seed", seed},
                  {"method", method.name},
                  {"kind", to_string(method.kind)},
                  {"alpha", spec.alpha(method)},
                  {"n_experts", spec.n_experts(method)},
                  {"dataset_hash", data.hash()},
                  {"build", build_id()},
                  {"stages", stages},
                  {"tokens", tokens}};
  write_sweep(p.dir, run.sweep, meta);
  return run;
}

Comparison compare_methods(const ExperimentSpec& spec, const Dataset& data, const ProgressFn& progress) {
  spec.validate();
  if (spec.methods.size() < 2) throw ValidationError("compare needs at least two methods");
  check_budget_parity(spec, data);
  Comparison cmp;
  for (std::uint64_t seed : spec.seeds) {
    std::optional<std::map<std::string, std::int64_t>> ref_tokens;
    for (const auto& m : spec.methods) {
      if (progress) progress("seed " + std::to_string(seed) + " method " + m.name);
      MethodRun run = run_method(spec, data, m, seed);
      const auto tokens = logged_tokens(run.logs);
      if (!ref_tokens) ref_tokens = tokens;
      if (tokens != *ref_tokens) {
        throw ValidationError("method '" + m.name + "' consumed " + describe(tokens) + " tokens, expected " +
                              describe(*ref_tokens));
      }
      for (auto& r : matched_losses(run.sweep, seed, MatchAxis::moe_ratio, spec.budgets)) cmp.matched.push_back(r);
      for (auto& r : matched_losses(run.sweep, seed, MatchAxis::selected_fraction, kMatchedFractions)) {
        cmp.matched.push_back(r);
      }
      cmp.runs.push_back(std::move(run));
    }
  }
  std::ostringstream all;
  for (std::size_t i = 0; i < cmp.runs.size(); ++i) {
    const std::string csv = summary_csv({cmp.runs[i].sweep});
    std::istringstream lines(csv);
    std::string line;
    bool header = true;
    while (std::getline(lines, line)) {
      if (header) {
        if (i == 0) all << "seed," << line << '\n';
        header = false;
        continue;
      }
      all << cmp.runs[i].seed << ',' << line << '\n';
    }
  }
  fs::create_directories(spec.output_dir);
  write_text_atomic(fs::path(spec.output_dir) / "compare.csv", all.str());
  write_text_atomic(fs::path(spec.output_dir) / "matched.csv", matched_csv(cmp.matched));
  return cmp;
}

}  // namespace d2dmoe
