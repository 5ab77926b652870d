// Acceptance run: one PASS/FAIL line per criterion. The long desk runs
// (criteria 6-8) share one comparison, so they are computed once.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "d2dmoe/checkpoint.hpp"
#include "d2dmoe/conversion.hpp"
#include "d2dmoe/cost.hpp"
#include "d2dmoe/sparsity.hpp"
#include "d2dmoe/studies.hpp"
#include "d2dmoe/sweep.hpp"
#include "d2dmoe/train.hpp"
#include "../support/cluster_oracles.hpp"
#include "../support/fixtures.hpp"
#include "../support/op_cases.hpp"
#include "../support/oracles.hpp"

using namespace d2dmoe;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- 1: exactness -------------------------------------------------------

Tensor first_val_logits(const DenseModel& m, const Dataset& d, std::size_t seqs) {
  std::vector<std::size_t> idx(std::min(seqs, d.val.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  ad::NoGradGuard g;
  return forward(m, make_batch(d, Split::val, idx)).logits.value();
}

// Router-inclusive cost ratio written out directly from the layer shapes.
double ratio_oracle(double d, double e, double n, double dh, double k, double matrices) {
  const double width = e * d;
  const double expert = matrices * d * (width / n);
  const double router = dh * (d + n);
  return (k * expert + router) / (matrices * width * d);
}

Outcome exactness() {
  std::ostringstream why;
  bool ok = true;

  DatasetSpec ds;
  const Dataset data = generate_dataset(ds);
  double worst_logits = 0.0, worst_layer = 0.0;
  for (int i = 0; i < 10; ++i) {
    TransformerConfig c = desk_spec().model;
    c.ffn_kind = i % 2 ? FfnKind::gated : FfnKind::standard;
    DenseModel m = build_model(c, 1000 + i);
    const Tensor dense = first_val_logits(m, data, 8);
    const auto sites = convertible_sites(m, false);
    for (SiteId s : sites) {
      const Tensor z = capture_site_inputs(m, s, data, Split::val, 16);
      const SplitResult split = cluster_site(m, s, 8, 77 + i);
      worst_layer = std::max(worst_layer, reconstruct_check(m.site_ffn(s), split.slices, z, m.site_activation(s)));
      m.routers[s] = init_router(c.model_dim, default_router_hidden(c.model_dim), 8, RouterOutput::abs, 5 + i);
    }
    for (const GatePolicy& p : {GatePolicy::top(8), GatePolicy::dynamic(0.0)}) {
      DenseModel moe = m;
      convert_model(moe, sites, p);
      worst_logits = std::max(worst_logits, static_cast<double>(ad::max_abs_diff(dense, first_val_logits(moe, data, 8))));
    }
  }
  ok &= worst_logits < 1e-4 && worst_layer < 1e-5;
  why << fmt("logits %.2e, per-layer %.2e", worst_logits, worst_layer);

  std::mt19937_64 rng(3);
  double worst_rel = 0.0;
  for (int i = 0; i < 200; ++i) {
    CostParams p;
    p.model_dim = 8 << (rng() % 5);
    p.expansion = static_cast<double>(1 + rng() % 8);
    const int width = static_cast<int>(p.model_dim * p.expansion);
    std::vector<int> divisors;
    for (int n = 1; n <= width; ++n)
      if (width % n == 0) divisors.push_back(n);
    p.n_experts = divisors[rng() % divisors.size()];
    p.router_hidden = static_cast<int>(rng() % 129);
    p.matrices = rng() % 2 ? 3 : 2;
    const double k = std::uniform_real_distribution<double>(0.0, p.n_experts)(rng);
    const double via_flops = dynk_flops(p, k) / static_cast<double>(ffn_flops(p));
    const double want = ratio_oracle(p.model_dim, p.expansion, p.n_experts, p.router_hidden, k, p.matrices);
    worst_rel = std::max({worst_rel, std::abs(via_flops - want) / want, std::abs(flops_ratio(p, k) - want) / want});
  }
  CostParams spot;
  spot.model_dim = 64;
  spot.expansion = 4;
  spot.n_experts = 16;
  spot.router_hidden = 8;
  const double spot_value = flops_ratio(spot, 4);
  ok &= worst_rel < 1e-12 && spot_value == 0.26953125;
  why << fmt("; cost grid rel %.1e, spot %.10g", worst_rel, spot_value);

  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::uniform_real_distribution<double> cdist(0.01, 100.0);
  const std::vector<double> taus = {0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0};
  int violations = 0;
  for (int rep = 0; rep < 10000; ++rep) {
    const std::size_t n = 1 + rng() % 16;
    std::vector<float> s(n), scaled(n);
    for (float& x : s) x = rng() % 5 == 0 ? 0.0f : u(rng);
    const double c = cdist(rng);
    for (std::size_t i = 0; i < n; ++i) scaled[i] = static_cast<float>(s[i] * c);
    const float mx = *std::max_element(s.begin(), s.end());
    std::vector<std::uint8_t> prev;
    for (double t : taus) {
      const auto g = dynamic_k_gate(s, t);
      violations += g.mask != dynamic_k_gate(scaled, t).mask;
      for (std::size_t i = 0; i < n; ++i) {
        violations += s[i] == mx && !g.mask[i];
        violations += !prev.empty() && g.mask[i] && !prev[i];
      }
      prev = g.mask;
    }
  }
  ok &= violations == 0;
  why << fmt("; gate violations %d", violations);
  return {ok, why.str()};
}

// ---- 2: gradients -------------------------------------------------------

Outcome gradients() {
  double worst = 0.0;
  std::string worst_name;
  int cases = 0;
  auto note = [&](const std::string& name, double e) {
    ++cases;
    if (e > worst) worst = e, worst_name = name;
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (ad::OpKind k : ad::kAllOps) {
      for (const auto& c : testkit::op_cases(k, seed)) {
        note(c.name, testkit::check_gradients(c.fn, c.inputs, seed).max_rel_error);
      }
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    testkit::TensorD a({4, 6}), b({3, 5});
    for (testkit::TensorD* t : {&a, &b}) {
      for (double& x : t->data()) {
        x = nd(rng);
        if (std::abs(x) < 1e-2) x = x < 0 ? x - 0.1 : x + 0.1;
      }
    }
    note("hoyer_loss", testkit::check_gradients(
                           [](const std::vector<testkit::VarD>& in) {
                             return hoyer_loss<double>(std::vector<testkit::VarD>{in[0], in[1]}).loss;
                           },
                           {a, b}, seed)
                           .max_rel_error);
    std::normal_distribution<double> wide(0.0, 3.0);
    testkit::TensorD z({5, 8});
    for (double& x : z.data()) {
      x = wide(rng);
      if (std::abs(x - 0.5) < 1e-2) x += 0.1;
    }
    note("displaced-gelu", testkit::check_gradients(
                               [](const std::vector<testkit::VarD>& in) {
                                 return hoyer_loss<double>(
                                            std::vector<testkit::VarD>{displaced_preactivation(in[0], 0.5)})
                                     .loss;
                               },
                               {z}, seed)
                               .max_rel_error);
  }
  return {worst < 1e-5, fmt("%d cases over 20 seeds, worst %.2e (%s)", cases, worst, worst_name.c_str())};
}

// ---- 3: clustering ------------------------------------------------------

Outcome clustering() {
  const Tensor pts = Tensor::matrix(4, 2, {0.0f, 0.0f, 10.0f, 10.0f, 0.1f, 0.0f, 10.0f, 10.2f});
  const auto parts = testkit::balanced_two_partitions(4);
  std::vector<int> best;
  double best_sse = 1e300;
  for (const auto& p : parts) {
    const double s = testkit::sse(pts, p, 2);
    if (s < best_sse) best_sse = s, best = p;
  }
  int brute_miss = parts.size() == 3 ? 0 : 100;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    brute_miss += testkit::canonical(balanced_kmeans(pts, 2, seed).assignment) != best;
  }

  std::mt19937_64 meta(5);
  int unbalanced = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const int k = 1 + static_cast<int>(meta() % 6);
    const int size = 1 + static_cast<int>(meta() % 6);
    const std::size_t dims = 1 + meta() % 5;
    const Tensor x = testkit::normal_tensor({static_cast<std::size_t>(k * size), dims}, meta);
    std::vector<int> count(k, 0);
    for (int a : balanced_kmeans(x, k, meta()).assignment) ++count[a];
    unbalanced += std::any_of(count.begin(), count.end(), [&](int c) { return c != size; });
  }

  int not_optimal = 0, checked = 0;
  for (int n = 4; n <= 32; n += 4) {
    for (int k : {2, 4}) {
      if (n % k) continue;
      const Tensor x = testkit::normal_tensor({static_cast<std::size_t>(n), 4}, meta);
      not_optimal += !testkit::swap_locally_optimal(x, balanced_kmeans(x, k, meta()).assignment, k);
      ++checked;
    }
  }
  return {brute_miss == 0 && unbalanced == 0 && not_optimal == 0,
          fmt("brute-force misses %d/10, unbalanced %d/100, swap-improvable %d/%d", brute_miss, unbalanced,
              not_optimal, checked)};
}

// ---- 4: router ----------------------------------------------------------

Outcome router() {
  const RouterDataset data = testkit::planted_router_dataset(4000, 64, 16, 21);
  RouterTrainConfig cfg;
  cfg.steps = 3000;
  cfg.batch_size = 512;
  const auto fit = train_router(cfg, data, 4);
  RouterDataset shuffled = testkit::planted_router_dataset(4000, 64, 16, 22);
  shuffled.targets = testkit::shuffle_rows(shuffled.targets, 5);
  cfg.steps = 1500;
  const auto ctrl = train_router(cfg, shuffled, 4);
  const double r_fit = fit.val_loss / fit.val_target_variance;
  const double r_ctrl = ctrl.val_loss / ctrl.val_target_variance;
  return {r_fit < 1e-3 && r_ctrl > 0.8, fmt("planted val mse/var %.2e, shuffled %.3f", r_fit, r_ctrl)};
}

// ---- 5: massive activation ---------------------------------------------

Outcome massive(const fs::path& out) {
  ExperimentSpec s = desk_spec();
  s.output_dir = (out / "desk").string();
  const Dataset d = generate_dataset(s.data);
  const PipelineResult base = run_base(s, d, 0);
  bool ok = true;
  std::string why;
  for (int layer = 0; layer < s.model.num_layers; ++layer) {
    MassiveActivationConfig c;
    c.layer = layer;
    const auto r = massive_activation_study(base.model, d, c, 0);
    ok &= r.labels_below_injected > 0.9 && r.target_change < 0.01;
    why += fmt("%slayer %d: labels<0.01 %.3f -> %.3f, other-expert targets change %.2e", why.empty() ? "" : "; ",
               layer, r.labels_below_clean, r.labels_below_injected, r.target_change);
  }
  return {ok, why};
}

// ---- 6-8: desk byte-LM comparison --------------------------------------

struct Desk {
  Comparison cmp;
  std::vector<std::uint64_t> seeds;
  double seconds = 0.0;
};

std::optional<double> matched(const Comparison& c, std::uint64_t seed, const std::string& method,
                              const std::string& policy, MatchAxis axis, double target) {
  for (const auto& r : c.matched) {
    if (r.seed == seed && r.method == method && r.policy == policy && r.axis == axis && r.target == target) return r.loss;
  }
  return std::nullopt;
}

const SweepResult& sweep_of(const Comparison& c, std::uint64_t seed, const std::string& method) {
  for (const auto& r : c.runs) {
    if (r.seed == seed && r.method.name == method) return r.sweep;
  }
  throw ContractError("no run for " + method);
}

bool majority(int passed, std::size_t seeds) { return 2 * passed > static_cast<int>(seeds); }

Desk desk_runs(const fs::path& out, const std::vector<std::uint64_t>& seeds) {
  ExperimentSpec s = desk_spec();
  s.output_dir = (out / "desk").string();
  s.seeds = seeds;
  s.methods = {{"d2dmoe", MethodKind::d2dmoe, 0.01, 8, std::nullopt},
               {"alpha0", MethodKind::d2dmoe, 0.0, 8, std::nullopt},
               {"size4", MethodKind::d2dmoe, 0.01, 64, std::nullopt},
               {"size64", MethodKind::d2dmoe, 0.01, 4, std::nullopt}};
  const Dataset d = generate_dataset(s.data);
  const auto t0 = std::chrono::steady_clock::now();
  Desk desk{compare_methods(s, d,
                            [](const std::string& m) {
                              std::fprintf(stderr, "  desk: %s\n", m.c_str());
                            }),
            seeds, 0.0};
  desk.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return desk;
}

Outcome sparsity_wins(const Desk& desk) {
  int passed = 0;
  std::string why;
  for (std::uint64_t seed : desk.seeds) {
    bool all = true;
    why += fmt("%sseed %llu:", why.empty() ? "" : ";", static_cast<unsigned long long>(seed));
    for (double b : desk_spec().budgets) {
      const auto a = matched(desk.cmp, seed, "d2dmoe", "dynamic_k", MatchAxis::moe_ratio, b);
      const auto z = matched(desk.cmp, seed, "alpha0", "dynamic_k", MatchAxis::moe_ratio, b);
      all &= a && z && *a < *z;
      why += a && z ? fmt(" %.1f %.4f<%.4f", b, *a, *z) : fmt(" %.1f n/a", b);
    }
    passed += all;
  }
  return {majority(passed, desk.seeds.size()),
          fmt("%d/%zu seeds (%.0fs) ", passed, desk.seeds.size(), desk.seconds) + why};
}

Outcome dynamic_wins(const Desk& desk) {
  int passed = 0;
  std::string why;
  for (std::uint64_t seed : desk.seeds) {
    bool all = true;
    why += fmt("%sseed %llu:", why.empty() ? "" : ";", static_cast<unsigned long long>(seed));
    for (double f : kMatchedFractions) {
      const auto dyn = matched(desk.cmp, seed, "d2dmoe", "dynamic_k", MatchAxis::selected_fraction, f);
      const auto top = matched(desk.cmp, seed, "d2dmoe", "top_k", MatchAxis::selected_fraction, f);
      all &= dyn && top && *dyn <= *top;
      why += dyn && top ? fmt(" %.2f %.4f<=%.4f", f, *dyn, *top) : fmt(" %.2f n/a", f);
    }
    passed += all;
  }
  return {majority(passed, desk.seeds.size()), fmt("%d/%zu seeds ", passed, desk.seeds.size()) + why};
}

Outcome granularity(const Desk& desk) {
  const std::vector<double> budgets{0.3, 0.35, 0.4, 0.45, 0.5};
  int passed = 0;
  std::string why;
  for (std::uint64_t seed : desk.seeds) {
    const auto fine = matched_losses(sweep_of(desk.cmp, seed, "size4"), seed, MatchAxis::moe_ratio, budgets);
    const auto coarse = matched_losses(sweep_of(desk.cmp, seed, "size64"), seed, MatchAxis::moe_ratio, budgets);
    int compared = 0;
    bool all = true;
    for (std::size_t i = 0; i < fine.size(); ++i) {
      if (fine[i].policy != "dynamic_k") continue;
      for (const auto& c : coarse) {
        if (c.policy != "dynamic_k" || c.target != fine[i].target || !c.loss || !fine[i].loss) continue;
        ++compared;
        all &= *fine[i].loss < *c.loss;
      }
    }
    passed += all && compared > 0;
    why += fmt("%sseed %llu: %d budgets%s", why.empty() ? "" : "; ", static_cast<unsigned long long>(seed), compared,
               all && compared ? " ok" : " fail");
  }
  // Size 1 pays a router sized to n = width: at equal executed fraction it
  // costs more than size 4, which costs more than size 64.
  CostParams p;
  p.model_dim = 64;
  p.expansion = 4;
  p.router_hidden = default_router_hidden(64);
  std::vector<double> ratios;
  for (int size : {1, 4, 64}) {
    p.n_experts = 256 / size;
    ratios.push_back(flops_ratio(p, 0.25 * p.n_experts));
  }
  const bool analytic = ratios[0] > ratios[1] && ratios[1] > ratios[2];
  return {majority(passed, desk.seeds.size()) && analytic,
          fmt("%d/%zu seeds; ", passed, desk.seeds.size()) + why +
              fmt("; ratio at 25%% executed: size1 %.4f, size4 %.4f, size64 %.4f", ratios[0], ratios[1], ratios[2])};
}

// ---- 9: toy classifier --------------------------------------------------

ExperimentSpec toy_spec(const fs::path& dir) {
  ExperimentSpec s = desk_spec();
  s.name = "toy";
  s.output_dir = dir.string();
  s.data.task = Task::toy_classify;
  s.model.head = HeadKind::classifier;
  s.model.num_classes = s.data.num_classes;
  s.mha.enabled = true;
  return s;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                                              [](float x, float y) { return std::memcmp(&x, &y, sizeof x) == 0; });
}

Outcome toy(const fs::path& out) {
  const ExperimentSpec s = toy_spec(out / "toy");
  const Dataset d = generate_dataset(s.data);
  const PipelineResult r = run_pipeline(s, d, s.methods.front(), 0, "cluster");
  const StageLog* rep = nullptr;
  const StageLog* clu = nullptr;
  for (const auto& l : r.logs) {
    if (l.stage == "replace-mha") rep = &l;
    if (l.stage == "cluster") clu = &l;
  }
  if (!rep || !clu) return {false, "pipeline logs missing"};
  const double dense_acc = rep->details["before"]["accuracy"].get<double>();
  const double gap = std::abs(dense_acc - rep->val_accuracy);

  DenseModel planted = run_pipeline(s, d, s.methods.front(), 0, "train").model;
  const Tensor dense = first_val_logits(planted, d, 64);
  for (SiteId site : all_projection_sites(planted)) {
    const LinearWeights lin = std::get<LinearWeights>(planted.projection(site.layer, site.kind));
    planted.projection(site.layer, site.kind) = testkit::planted_exact_replacement(lin, site);
  }
  const bool bitwise = bitwise_equal(dense, first_val_logits(planted, d, 64));

  double worst = 0.0;
  int replaced = 0;
  for (const auto& site : clu->details["sites"]) {
    const std::string name = site["site"].get<std::string>();
    if (name.ends_with(".ffn")) continue;
    ++replaced;
    worst = std::max(worst, site["reconstruct_error"].get<double>());
  }
  return {gap <= 0.02 && bitwise && replaced > 0 && worst < 1e-5,
          fmt("dense acc %.4f, replaced+recovered %.4f; planted logits %s; %d replaced sites, worst reconstruct %.2e",
              dense_acc, rep->val_accuracy, bitwise ? "bitwise equal" : "differ", replaced, worst)};
}

// ---- 10: determinism ----------------------------------------------------

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    files[fs::relative(e.path(), root).string()] = {std::istreambuf_iterator<char>(in), {}};
  }
  return files;
}

Outcome determinism(const fs::path& out) {
  auto spec_for = [](const fs::path& dir) {
    ExperimentSpec s = desk_spec();
    s.output_dir = dir.string();
    s.threads = 1;
    s.train.steps = 200;
    s.sparsify.train.steps = 100;
    s.mha.enabled = true;
    s.mha.distill.steps = 100;
    s.mha.max_sequences = 32;
    s.routers.train.steps = 200;
    s.routers.max_sequences = 64;
    s.eval_max_sequences = 64;
    s.methods = {{"d2dmoe", MethodKind::d2dmoe, std::nullopt, std::nullopt, std::nullopt},
                 {"moefication", MethodKind::moefication, std::nullopt, std::nullopt, std::nullopt}};
    return s;
  };
  std::vector<std::map<std::string, std::string>> trees;
  for (const char* name : {"run-a", "run-b"}) {
    const fs::path dir = out / "determinism" / name;
    fs::remove_all(dir);
    const ExperimentSpec s = spec_for(dir);
    compare_methods(s, generate_dataset(s.data));
    trees.push_back(tree(dir));
  }
  int differ = 0, ckpts = 0, csvs = 0;
  std::string first;
  std::set<std::string> names;
  for (const auto& t : trees)
    for (const auto& [k, v] : t) names.insert(k);
  for (const auto& n : names) {
    ckpts += n.ends_with(".ckpt");
    csvs += n.ends_with(".csv");
    const auto a = trees[0].find(n), b = trees[1].find(n);
    if (a == trees[0].end() || b == trees[1].end() || a->second != b->second) {
      if (!differ++) first = n;
    }
  }
  return {differ == 0 && ckpts > 0 && csvs > 0,
          fmt("%zu files (%d checkpoints, %d CSVs), %d differ%s", names.size(), ckpts, csvs, differ,
              differ ? (", first " + first).c_str() : "")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"d2dmoe acceptance run"};
  std::string out = "acceptance-runs";
  std::vector<int> only;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  app.add_option("--out", out, "working directory for pipeline runs");
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 10));
  app.add_option("--seeds", seeds, "seeds for the desk comparison");
  CLI11_PARSE(app, argc, argv);

  const fs::path root = fs::absolute(out);
  fs::create_directories(root);
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  std::optional<Desk> desk;
  auto with_desk = [&](Outcome (*fn)(const Desk&)) {
    return [&, fn] {
      if (!desk) desk = desk_runs(root, seeds);
      return fn(*desk);
    };
  };
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, exactness},
      {2, gradients},
      {3, clustering},
      {4, router},
      {5, [&] { return massive(root); }},
      {6, with_desk(sparsity_wins)},
      {7, with_desk(dynamic_wins)},
      {8, with_desk(granularity)},
      {9, [&] { return toy(root); }},
      {10, [&] { return determinism(root); }},
  };

  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!wanted(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d: %s (%s) [%.1fs]\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
