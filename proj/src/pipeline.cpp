#include "d2dmoe/pipeline.hpp"

#include <algorithm>
#include <cstdio>

#include "d2dmoe/checkpoint.hpp"
#include "d2dmoe/conversion.hpp"
#include "d2dmoe/hash.hpp"

namespace d2dmoe {

namespace fs = std::filesystem;

Json to_json(const StageLog& l) {
  return Json{{"stage", l.stage},
              {"method", l.method},
              {"seed", l.seed},
              {"stage_seed", l.stage_seed},
              {"key", l.key},
              {"dataset_hash", l.dataset_hash},
              {"tokens", l.tokens},
              {"val_loss", l.val_loss},
              {"val_accuracy", l.val_accuracy},
              {"details", l.details}};
}

StageLog stage_log_from_json(const Json& j) {
  StageLog l;
  try {
    l.stage = j.at("stage").get<std::string>();
    l.method = j.at("method").get<std::string>();
    l.seed = j.at("seed").get<std::uint64_t>();
    l.stage_seed = j.at("stage_seed").get<std::uint64_t>();
    l.key = j.at("key").get<std::string>();
    l.dataset_hash = j.at("dataset_hash").get<std::uint64_t>();
    l.tokens = j.at("tokens").get<std::int64_t>();
    l.val_loss = j.at("val_loss").get<double>();
    l.val_accuracy = j.at("val_accuracy").get<double>();
    l.details = j.at("details");
  } catch (const Json::exception& e) {
    throw FormatError(std::string("stage log: ") + e.what(), 0);
  }
  return l;
}

namespace {

std::uint64_t stage_seed(std::uint64_t seed, const std::string& stage) { return derive_seed(seed, "stage:" + stage); }

StageLog begin(const std::string& stage, std::uint64_t seed, const Dataset& data) {
  StageLog l;
  l.stage = stage;
  l.seed = seed;
  l.stage_seed = stage_seed(seed, stage);
  l.dataset_hash = data.hash();
  return l;
}

void finish(StageLog& l, const DenseModel& model, const ExperimentSpec& spec, const Dataset& data) {
  const EvalResult r = evaluate(model, data, Split::val, 32, nullptr, spec.eval_max_sequences);
  l.val_loss = r.loss;
  l.val_accuracy = r.accuracy;
}

int recovery_steps(const MhaStage& m, const Dataset& data) {
  if (m.recovery_epochs <= 0) return m.recovery.steps;
  const std::size_t bs = static_cast<std::size_t>(m.recovery.batch_size);
  return static_cast<int>((data.train.size() + bs - 1) / bs) * m.recovery_epochs;
}

std::vector<SiteId> clustered_sites(const DenseModel& model) {
  std::vector<SiteId> out;
  for (const auto& [s, p] : model.partitions) out.push_back(s);
  return out;
}

// Stage-specific configuration that feeds the resume key.
Json stage_config(const std::string& stage, const ExperimentSpec& spec, const MethodSpec& method) {
  const Json s = to_json(spec);
  if (stage == "train") return Json{{"data", s["data"]}, {"model", s["model"]}, {"train", s["train"]}};
  if (stage == "relufy") return Json::object();
  if (stage == "replace-mha") return s["mha"];
  if (stage == "sparsify") {
    return to_json(spec.finetune(method));
  }
  if (stage == "cluster") {
    Json j = s["cluster"];
    j["n_experts"] = spec.n_experts(method);
    return j;
  }
  if (stage == "routers") return Json{{"kind", to_string(method.kind)}, {"routers", s["routers"]}};
  if (stage == "convert") return Json{{"kind", to_string(method.kind)}, {"n_experts", spec.n_experts(method)}};
  throw ValidationError("unknown stage '" + stage + "'");
}

std::string chain_key(const std::string& prev, const std::string& stage, const Json& config, std::uint64_t seed,
                      std::uint64_t dataset_hash) {
  Fnv1a h;
  h.str(prev).str("|").str(stage).str("|").str(config.dump()).value(seed).value(dataset_hash);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h.digest()));
  return buf;
}

}  // namespace

DenseModel initial_model(const ExperimentSpec& spec, std::uint64_t seed) {
  return build_model(spec.model, derive_seed(seed, "init"));
}

StageLog train_stage(DenseModel& model, const ExperimentSpec& spec, const Dataset& data, std::uint64_t seed) {
  StageLog l = begin("train", seed, data);
  const TrainResult r = train_model(model, data, spec.train, l.stage_seed);
  l.tokens = r.tokens;
  l.details = Json{{"train", to_json(r)}};
  finish(l, model, spec, data);
  return l;
}

StageLog relufy_stage(DenseModel& model, const ExperimentSpec& spec, const Dataset& data, std::uint64_t seed) {
  StageLog l = begin("relufy", seed, data);
  const RelufyStatus st = relufy(model);
  l.details = Json{{"status", st == RelufyStatus::converted ? "converted" : "already_relu"}};
  finish(l, model, spec, data);
  return l;
}

StageLog replace_mha_stage(DenseModel& model, const ExperimentSpec& spec, const Dataset& data, std::uint64_t seed) {
  StageLog l = begin("replace-mha", seed, data);
  const EvalResult before = evaluate(model, data, Split::val, 32, nullptr, spec.eval_max_sequences);
  DistillConfig dc = spec.mha.distill;
  dc.threads = std::max(dc.threads, spec.threads);
  const std::vector<SiteId> sites = all_projection_sites(model);
  const auto res = replace_mha(model, sites, data, dc, l.stage_seed, spec.mha.max_sequences);
  Json per_site = Json::array();
  for (const auto& r : res) {
    per_site.push_back(to_json(r));
    l.tokens += static_cast<std::int64_t>(r.result.train_tokens + r.result.val_tokens);
  }
  const EvalResult replaced = evaluate(model, data, Split::val, 32, nullptr, spec.eval_max_sequences);
  TrainConfig rc = spec.mha.recovery;
  rc.steps = recovery_steps(spec.mha, data);
  Json recovery = Json::object();
  if (rc.steps > 0) {
    const TrainResult tr = train_model(model, data, rc, derive_seed(l.stage_seed, "recovery"));
    l.tokens += tr.tokens;
    recovery = to_json(tr);
  }
  l.details = Json{{"sites", per_site},
                   {"before", {{"loss", before.loss}, {"accuracy", before.accuracy}}},
                   {"replaced", {{"loss", replaced.loss}, {"accuracy", replaced.accuracy}}},
                   {"recovery_steps", rc.steps},
                   {"recovery", recovery}};
  finish(l, model, spec, data);
  return l;
}

StageLog sparsify_stage(DenseModel& model, const ExperimentSpec& spec, const MethodSpec& method, const Dataset& data,
                        std::uint64_t seed) {
  StageLog l = begin("sparsify", seed, data);
  const SparsityConfig sc = spec.finetune(method);
  const TrainResult r = sparsify_finetune(model, data, sc, l.stage_seed);
  l.tokens = r.tokens;
  const ActivationStats st =
      activation_stats(model, data, Split::val, sc.nonzero_threshold, 32, spec.eval_max_sequences);
  Json layers = Json::array();
  for (const auto& ls : st.layers) layers.push_back({{"mean", ls.mean}, {"variance", ls.variance}, {"tokens", ls.tokens}});
  l.details = Json{{"alpha", sc.alpha}, {"train", to_json(r)}, {"nonzero", layers}};
  finish(l, model, spec, data);
  return l;
}

StageLog cluster_stage(DenseModel& model, const ExperimentSpec& spec, const MethodSpec& method, const Dataset& data,
                       std::uint64_t seed) {
  StageLog l = begin("cluster", seed, data);
  const int n = spec.n_experts(method);
  Json per_site = Json::array();
  for (SiteId s : convertible_sites(model, spec.cluster.include_mha)) {
    const SplitResult r = cluster_site(model, s, n, derive_seed(l.stage_seed, s.str()), spec.cluster.kmeans);
    const Tensor z = capture_site_inputs(model, s, data, Split::val, 16);
    const double err = reconstruct_check(model.site_ffn(s), r.slices, z, model.site_activation(s));
    per_site.push_back({{"site", s.str()},
                        {"n_experts", r.partition.n_experts},
                        {"expert_size", r.partition.expert_size},
                        {"objective", r.kmeans.objective},
                        {"iterations", r.kmeans.iterations},
                        {"swaps", r.kmeans.swaps},
                        {"reconstruct_error", err}});
  }
  l.details = Json{{"sites", per_site}};
  finish(l, model, spec, data);
  return l;
}

StageLog routers_stage(DenseModel& model, const ExperimentSpec& spec, const MethodSpec& method, const Dataset& data,
                       std::uint64_t seed) {
  StageLog l = begin("routers", seed, data);
  Json per_site = Json::array();
  for (SiteId s : clustered_sites(model)) {
    const std::uint64_t rs = derive_seed(l.stage_seed, s.str());
    Json j{{"site", s.str()}};
    RouterTrainResult r;
    std::size_t rows = 0;
    if (method.kind == MethodKind::d2dmoe) {
      const RouterDataset d = collect_router_dataset(model, s, data, spec.routers.max_sequences);
      rows = d.size();
      r = train_router(spec.routers.train, d, rs);
    } else {
      const BaselineCollection b = collect_baseline_dataset(model, s, data, spec.routers.max_sequences);
      rows = b.data.size();
      j["all_zero_batches"] = b.all_zero_batches;
      r = train_baseline_router(spec.routers.train, b.data, rs);
    }
    l.tokens += static_cast<std::int64_t>(rows);
    j["objective"] = method.kind == MethodKind::d2dmoe ? "mse" : "bce";
    j["train_loss"] = r.train_loss;
    j["val_loss"] = r.val_loss;
    j["val_target_variance"] = r.val_target_variance;
    j["train_tokens"] = r.train_tokens;
    j["val_tokens"] = r.val_tokens;
    per_site.push_back(j);
    model.routers[s] = std::move(r.router);
  }
  l.details = Json{{"sites", per_site}};
  finish(l, model, spec, data);
  return l;
}

StageLog convert_stage(DenseModel& model, const ExperimentSpec& spec, const MethodSpec& method, const Dataset& data,
                       std::uint64_t seed) {
  StageLog l = begin("convert", seed, data);
  const GatePolicy p = method.kind == MethodKind::d2dmoe ? GatePolicy::dynamic(0.0) : GatePolicy::top(spec.n_experts(method));
  const std::vector<SiteId> sites = clustered_sites(model);
  convert_model(model, sites, p);
  Json names = Json::array();
  for (SiteId s : sites) names.push_back(s.str());
  l.details = Json{{"policy", to_json(p)}, {"sites", names}};
  finish(l, model, spec, data);
  return l;
}

std::vector<std::string> method_stages(const ExperimentSpec& spec, const MethodSpec& method) {
  std::vector<std::string> out;
  if (method.kind == MethodKind::moefication || spec.relufy) out.push_back("relufy");
  if (spec.mha.enabled) out.push_back("replace-mha");
  for (const char* s : {"sparsify", "cluster", "routers", "convert"}) out.push_back(s);
  return out;
}

std::map<std::string, std::int64_t> planned_tokens(const ExperimentSpec& spec, const MethodSpec& method,
                                                   const Dataset& data) {
  std::map<std::string, std::int64_t> out{{"train", spec.train.tokens(data)}};
  const auto capped = [&](std::size_t limit) {
    const std::size_t n = limit == 0 ? data.train.size() : std::min(limit, data.train.size());
    return static_cast<std::int64_t>(n) * data.seq_len;
  };
  const std::int64_t proj_sites = static_cast<std::int64_t>(kProjectionKinds.size()) * spec.model.num_layers;
  for (const auto& s : method_stages(spec, method)) {
    std::int64_t t = 0;
    if (s == "replace-mha") {
      TrainConfig rc = spec.mha.recovery;
      rc.steps = recovery_steps(spec.mha, data);
      t = proj_sites * capped(spec.mha.max_sequences) + rc.tokens(data);
    } else if (s == "sparsify") {
      t = spec.finetune(method).train.tokens(data);
    } else if (s == "routers") {
      const std::int64_t sites =
          spec.model.num_layers + (spec.mha.enabled && spec.cluster.include_mha ? proj_sites : 0);
      t = sites * capped(spec.routers.max_sequences);
    }
    out[s] = t;
  }
  return out;
}

fs::path seed_dir(const ExperimentSpec& spec, std::uint64_t seed) {
  return fs::path(spec.output_dir) / ("seed-" + std::to_string(seed));
}
fs::path base_dir(const ExperimentSpec& spec, std::uint64_t seed) { return seed_dir(spec, seed) / "base"; }
fs::path method_dir(const ExperimentSpec& spec, const MethodSpec& method, std::uint64_t seed) {
  return seed_dir(spec, seed) / method.name;
}

namespace {

template <class Fn>
void run_stage(PipelineResult& res, const fs::path& dir, const std::string& stage, const std::string& key,
               const std::string& method, Fn&& body) {
  const fs::path ckpt = dir / (stage + ".ckpt");
  const fs::path log = dir / (stage + ".json");
  if (fs::exists(ckpt) && fs::exists(log)) {
    try {
      const std::vector<std::uint8_t> bytes = read_file_bytes(log);
      StageLog l = stage_log_from_json(Json::parse(bytes.begin(), bytes.end()));
      if (l.key == key) {
        res.model = load_checkpoint(ckpt);
        res.logs.push_back(std::move(l));
        res.resumed.push_back(stage);
        return;
      }
    } catch (const Json::exception&) {
      // unreadable log: rerun the stage
    } catch (const FormatError&) {
    }
  }
  fs::create_directories(dir);
  try {
    StageLog l = body(res.model);
    l.key = key;
    l.method = method;
    save_checkpoint(res.model, ckpt);
    write_text_atomic(log, to_json(l).dump(2) + "\n");
    fs::remove(dir / "failed.json");
    res.logs.push_back(std::move(l));
  } catch (const std::exception& e) {
    Json artifacts = Json::array();
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    for (const auto& n : names) {
      if (n != "failed.json") artifacts.push_back(n);
    }
    write_text_atomic(dir / "failed.json",
                      Json{{"stage", stage}, {"error", e.what()}, {"exit_code", exit_code(e)}, {"artifacts", artifacts}}
                              .dump(2) +
                          "\n");
    throw;
  }
}

}  // namespace

PipelineResult run_base(const ExperimentSpec& spec, const Dataset& data, std::uint64_t seed) {
  spec.validate();
  data.check_compatible(spec.model);
  PipelineResult res;
  res.dir = base_dir(spec, seed);
  const MethodSpec none;
  const std::string key = chain_key("", "train", stage_config("train", spec, none), seed, data.hash());
  run_stage(res, res.dir, "train", key, "", [&](DenseModel& m) {
    m = initial_model(spec, seed);
    return train_stage(m, spec, data, seed);
  });
  return res;
}

PipelineResult run_pipeline(const ExperimentSpec& spec, const Dataset& data, const MethodSpec& method,
                            std::uint64_t seed, const std::string& until) {
  if (std::find(kStages.begin(), kStages.end(), until) == kStages.end()) {
    throw ValidationError("unknown stage '" + until + "'");
  }
  PipelineResult res = run_base(spec, data, seed);
  if (until == "train") return res;
  const std::vector<std::string> stages = method_stages(spec, method);
  if (std::find(stages.begin(), stages.end(), until) == stages.end()) {
    throw ValidationError("method '" + method.name + "' has no stage '" + until + "'");
  }
  res.dir = method_dir(spec, method, seed);
  std::string key = res.logs.back().key;
  for (const auto& stage : stages) {
    key = chain_key(key, stage, stage_config(stage, spec, method), seed, data.hash());
    run_stage(res, res.dir, stage, key, method.name, [&](DenseModel& m) -> StageLog {
      if (stage == "relufy") return relufy_stage(m, spec, data, seed);
      if (stage == "replace-mha") return replace_mha_stage(m, spec, data, seed);
      if (stage == "sparsify") return sparsify_stage(m, spec, method, data, seed);
      if (stage == "cluster") return cluster_stage(m, spec, method, data, seed);
      if (stage == "routers") return routers_stage(m, spec, method, data, seed);
      return convert_stage(m, spec, method, data, seed);
    });
    if (stage == until) break;
  }
  return res;
}

}  // namespace d2dmoe
