#include "d2dmoe/experiment.hpp"

#include <fstream>
#include <set>
#include <sstream>

#ifndef D2DMOE_BUILD_ID
#define D2DMOE_BUILD_ID "dev"
#endif

namespace d2dmoe {

std::string to_string(MethodKind k) { return k == MethodKind::d2dmoe ? "d2dmoe" : "moefication"; }

MethodKind parse_method_kind(const std::string& s) {
  if (s == "d2dmoe") return MethodKind::d2dmoe;
  if (s == "moefication") return MethodKind::moefication;
  throw ValidationError("unknown method kind '" + s + "' (expected d2dmoe or moefication)");
}

std::string build_id() { return D2DMOE_BUILD_ID; }

ExperimentSpec desk_spec() {
  ExperimentSpec s;
  s.name = "desk";
  s.model.vocab_size = s.data.vocab_size;
  s.model.context_length = s.data.seq_len;
  s.model.num_layers = 2;
  s.model.model_dim = 64;
  s.model.num_heads = 4;
  s.model.expansion = 4;
  s.train.steps = 1000;
  s.sparsify.alpha = 0.01;
  s.mha.recovery.steps = 0;
  s.mha.recovery.adam.lr = 3e-4;
  return s;
}

double ExperimentSpec::alpha(const MethodSpec& m) const {
  if (m.kind == MethodKind::moefication) return 0.0;
  return m.alpha.value_or(sparsify.alpha);
}

SparsityConfig ExperimentSpec::finetune(const MethodSpec& m) const {
  SparsityConfig c = sparsify;
  c.alpha = alpha(m);
  if (m.finetune_steps) c.train.steps = *m.finetune_steps;
  return c;
}

std::vector<int> ExperimentSpec::k_grid(int n) const {
  if (!grid.k.empty()) return grid.k;
  std::vector<int> out;
  for (int k = 1; k <= n; ++k) out.push_back(k);
  return out;
}

const MethodSpec& ExperimentSpec::method(const std::string& name) const {
  for (const auto& m : methods) {
    if (m.name == name) return m;
  }
  throw ValidationError("spec has no method named '" + name + "'");
}

void ExperimentSpec::validate() const {
  std::vector<std::string> v;
  auto guard = [&v](const char* what, auto&& fn) {
    try {
      fn();
    } catch (const ValidationError& e) {
      v.push_back(std::string(what) + ": " + e.what());
    }
  };
  guard("data", [&] { data.validate(); });
  guard("model", [&] { model.validate(); });
  guard("train", [&] { train.validate(); });
  guard("sparsify", [&] { sparsify.validate(); });
  guard("mha.distill", [&] { mha.distill.validate(); });
  guard("mha.recovery", [&] { mha.recovery.validate(); });

  if (model.vocab_size != data.vocab_size) v.push_back("model vocab_size must equal the dataset's");
  if (model.context_length < data.seq_len) v.push_back("model context is shorter than the dataset sequences");
  if ((data.task == Task::byte_lm) != (model.head == HeadKind::lm)) v.push_back("model head does not fit the task");
  if (model.head == HeadKind::classifier && model.num_classes != data.num_classes) {
    v.push_back("classifier num_classes must equal the dataset's");
  }
  if (mha.recovery_epochs < 0) v.push_back("mha.recovery_epochs must be >= 0");
  if (routers.train.steps < 1 || routers.train.batch_size < 1) v.push_back("router steps and batch size must be positive");
  if (routers.train.hidden < 0) v.push_back("router hidden must be >= 0");
  if (cluster.kmeans.max_iters < 1 || cluster.kmeans.n_init < 1) v.push_back("kmeans iterations and restarts must be positive");
  if (grid.tau.empty() && grid.k.empty()) v.push_back("policy grid is empty");
  for (double t : grid.tau) {
    if (!(t >= 0.0 && t <= 1.0)) v.push_back("tau values must lie in [0, 1]");
  }
  if (methods.empty()) v.push_back("no methods listed");
  std::set<std::string> names;
  for (const auto& m : methods) {
    if (m.name.empty() || m.name.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.-") !=
                              std::string::npos) {
      v.push_back("method name '" + m.name + "' must be non-empty and use [A-Za-z0-9_.-]");
    }
    if (!names.insert(m.name).second) v.push_back("duplicate method name '" + m.name + "'");
    if (m.kind == MethodKind::moefication && m.alpha) v.push_back("method '" + m.name + "': moefication takes no alpha");
    if (m.finetune_steps && *m.finetune_steps < 0) v.push_back("method '" + m.name + "': finetune_steps must be >= 0");
    if (m.alpha && !(*m.alpha >= 0.0)) v.push_back("method '" + m.name + "': alpha must be >= 0");
    const int n = n_experts(m);
    if (n < 1) {
      v.push_back("method '" + m.name + "': n_experts must be positive");
      continue;
    }
    if (model.hidden_dim() % n != 0) v.push_back("method '" + m.name + "': n_experts must divide the FFN width");
    if (mha.enabled && cluster.include_mha && replacement_hidden(model.model_dim) % n != 0) {
      v.push_back("method '" + m.name + "': n_experts must divide the replaced projection width");
    }
    for (int k : k_grid(n)) {
      if (k < 1 || k > n) v.push_back("method '" + m.name + "': top-k values must lie in [1, n]");
    }
  }
  if (seeds.empty()) v.push_back("no seeds listed");
  for (double b : budgets) {
    if (!(b > 0.0)) v.push_back("budgets must be positive");
  }
  if (threads < 1) v.push_back("threads must be >= 1");
  if (!v.empty()) {
    std::string msg = "invalid experiment spec:";
    for (const auto& s : v) msg += " " + s + ";";
    throw ValidationError(msg);
  }
}

Json to_json(const RouterTrainConfig& c) {
  return Json{{"hidden", c.hidden},
              {"steps", c.steps},
              {"batch_size", c.batch_size},
              {"lr", c.adam.lr},
              {"schedule", ad::to_string(c.adam.schedule)},
              {"val_modulus", c.val_modulus}};
}

RouterTrainConfig router_config_from_json(const Json& j, RouterTrainConfig c) {
  try {
    c.hidden = j.value("hidden", c.hidden);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.adam.lr = j.value("lr", c.adam.lr);
    if (j.contains("schedule")) c.adam.schedule = ad::parse_schedule(j.at("schedule").get<std::string>());
    c.val_modulus = j.value("val_modulus", c.val_modulus);
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("router config: ") + e.what());
  }
  return c;
}

Json to_json(const KMeansOptions& o) {
  return Json{{"max_iters", o.max_iters}, {"n_init", o.n_init}, {"swap_refine", o.swap_refine}};
}

KMeansOptions kmeans_options_from_json(const Json& j, KMeansOptions o) {
  try {
    o.max_iters = j.value("max_iters", o.max_iters);
    o.n_init = j.value("n_init", o.n_init);
    o.swap_refine = j.value("swap_refine", o.swap_refine);
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("kmeans options: ") + e.what());
  }
  return o;
}

Json to_json(const ExperimentSpec& s) {
  Json methods = Json::array();
  for (const auto& m : s.methods) {
    Json jm{{"name", m.name}, {"kind", to_string(m.kind)}};
    if (m.alpha) jm["alpha"] = *m.alpha;
    if (m.n_experts) jm["n_experts"] = *m.n_experts;
    if (m.finetune_steps) jm["finetune_steps"] = *m.finetune_steps;
    methods.push_back(jm);
  }
  return Json{{"name", s.name},
              {"data", to_json(s.data)},
              {"model", to_json(s.model)},
              {"train", to_json(s.train)},
              {"relufy", s.relufy},
              {"mha",
               {{"enabled", s.mha.enabled},
                {"distill", to_json(s.mha.distill)},
                {"max_sequences", s.mha.max_sequences},
                {"recovery", to_json(s.mha.recovery)},
                {"recovery_epochs", s.mha.recovery_epochs}}},
              {"sparsify", to_json(s.sparsify)},
              {"cluster",
               {{"n_experts", s.cluster.n_experts},
                {"include_mha", s.cluster.include_mha},
                {"kmeans", to_json(s.cluster.kmeans)}}},
              {"routers", {{"train", to_json(s.routers.train)}, {"max_sequences", s.routers.max_sequences}}},
              {"grid", {{"tau", s.grid.tau}, {"k", s.grid.k}}},
              {"methods", methods},
              {"seeds", s.seeds},
              {"budgets", s.budgets},
              {"eval_max_sequences", s.eval_max_sequences},
              {"output_dir", s.output_dir},
              {"threads", s.threads}};
}

namespace {

// Every object key in `j` must exist in `reference` (arrays are not checked).
void check_known_keys(const Json& j, const Json& reference, const std::string& path) {
  if (!j.is_object() || !reference.is_object()) return;
  for (const auto& [key, value] : j.items()) {
    if (!reference.contains(key)) throw ValidationError("unknown spec key '" + path + key + "'");
    check_known_keys(value, reference.at(key), path + key + ".");
  }
}

}  // namespace

ExperimentSpec experiment_spec_from_json(const Json& j) {
  if (!j.is_object()) throw ValidationError("experiment spec must be a JSON object");
  const ExperimentSpec d = desk_spec();
  Json base = to_json(d);
  check_known_keys(j, base, "");
  base.merge_patch(j);
  ExperimentSpec s;
  try {
    s.name = base.at("name").get<std::string>();
    s.data = dataset_spec_from_json(base.at("data"));
    s.model = config_from_json(base.at("model"));
    s.train = train_config_from_json(base.at("train"), d.train);
    s.relufy = base.at("relufy").get<bool>();
    const Json& mha = base.at("mha");
    s.mha.enabled = mha.at("enabled").get<bool>();
    s.mha.distill = distill_config_from_json(mha.at("distill"), d.mha.distill);
    s.mha.max_sequences = mha.at("max_sequences").get<std::size_t>();
    s.mha.recovery = train_config_from_json(mha.at("recovery"), d.mha.recovery);
    s.mha.recovery_epochs = mha.at("recovery_epochs").get<int>();
    s.sparsify = sparsity_config_from_json(base.at("sparsify"), d.sparsify);
    const Json& cl = base.at("cluster");
    s.cluster.n_experts = cl.at("n_experts").get<int>();
    s.cluster.include_mha = cl.at("include_mha").get<bool>();
    s.cluster.kmeans = kmeans_options_from_json(cl.at("kmeans"), d.cluster.kmeans);
    s.routers.train = router_config_from_json(base.at("routers").at("train"), d.routers.train);
    s.routers.max_sequences = base.at("routers").at("max_sequences").get<std::size_t>();
    s.grid.tau = base.at("grid").at("tau").get<std::vector<double>>();
    s.grid.k = base.at("grid").at("k").get<std::vector<int>>();
    s.methods.clear();
    for (const auto& jm : base.at("methods")) {
      for (const auto& [key, value] : jm.items()) {
        if (key != "name" && key != "kind" && key != "alpha" && key != "n_experts" &&
            key != "finetune_steps") {
          throw ValidationError("unknown method key '" + key + "'");
        }
      }
      MethodSpec m;
      m.kind = parse_method_kind(jm.value("kind", std::string("d2dmoe")));
      m.name = jm.value("name", to_string(m.kind));
      if (jm.contains("alpha")) m.alpha = jm.at("alpha").get<double>();
      if (jm.contains("n_experts")) m.n_experts = jm.at("n_experts").get<int>();
      if (jm.contains("finetune_steps")) m.finetune_steps = jm.at("finetune_steps").get<int>();
      s.methods.push_back(m);
    }
    s.seeds = base.at("seeds").get<std::vector<std::uint64_t>>();
    s.budgets = base.at("budgets").get<std::vector<double>>();
    s.eval_max_sequences = base.at("eval_max_sequences").get<std::size_t>();
    s.output_dir = base.at("output_dir").get<std::string>();
    s.threads = base.at("threads").get<int>();
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("experiment spec: ") + e.what());
  }
  s.validate();
  return s;
}

ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read spec file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Json j;
  try {
    j = Json::parse(ss.str());
  } catch (const Json::exception& e) {
    throw ValidationError("spec file " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_spec_from_json(j);
}

}  // namespace d2dmoe
