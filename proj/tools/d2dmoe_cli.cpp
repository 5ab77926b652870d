#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "d2dmoe/checkpoint.hpp"
#include "d2dmoe/plot.hpp"
#include "d2dmoe/studies.hpp"
#include "d2dmoe/sweep.hpp"

using namespace d2dmoe;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string spec_path;
  std::string data_path;
  std::string out;
  std::vector<std::uint64_t> seeds;
  int threads = 0;
  std::string method;
};

ExperimentSpec load_spec(const Globals& g) {
  ExperimentSpec s = g.spec_path.empty() ? desk_spec() : load_experiment_spec(g.spec_path);
  if (!g.out.empty()) s.output_dir = g.out;
  if (!g.seeds.empty()) s.seeds = g.seeds;
  if (g.threads > 0) s.threads = g.threads;
  s.validate();
  return s;
}

Dataset load_data(const Globals& g, const ExperimentSpec& s) {
  return g.data_path.empty() ? generate_dataset(s.data) : load_dataset(g.data_path);
}

const MethodSpec& pick_method(const Globals& g, const ExperimentSpec& s) {
  return g.method.empty() ? s.methods.front() : s.method(g.method);
}

void print_logs(const PipelineResult& r) {
  for (const auto& l : r.logs) {
    const bool resumed = std::find(r.resumed.begin(), r.resumed.end(), l.stage) != r.resumed.end();
    std::printf("%-12s val_loss %.6f  val_acc %.4f  tokens %lld%s\n", l.stage.c_str(), l.val_loss, l.val_accuracy,
                static_cast<long long>(l.tokens), resumed ? "  (resumed)" : "");
  }
  std::printf("artifacts in %s\n", r.dir.string().c_str());
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void stage_command(CLI::App& app, Globals& g, const std::string& name, const std::string& stage,
                   const std::string& help) {
  auto* cmd = app.add_subcommand(name, help);
  cmd->callback([&g, stage] {
    const ExperimentSpec s = load_spec(g);
    const Dataset d = load_data(g, s);
    const MethodSpec& m = pick_method(g, s);
    for (std::uint64_t seed : s.seeds) {
      std::printf("seed %llu method %s\n", static_cast<unsigned long long>(seed), m.name.c_str());
      print_logs(stage == "train" ? run_base(s, d, seed) : run_pipeline(s, d, m, seed, stage));
    }
  });
}

void print_sweep(const MethodRun& run) {
  std::printf("%-10s %8s %12s %10s %10s %10s\n", "policy", "param", "moe_ratio", "selected", "loss", "accuracy");
  for (const auto& p : run.sweep.points) {
    std::printf("%-10s %8.4g %12.6f %10.4f %10.6f %10.4f\n",
                p.policy.kind == GatePolicy::Kind::dynamic_k ? "dynamic_k" : "top_k", p.policy.param(),
                p.flops.moe_ratio(), p.selected_fraction, p.loss, p.accuracy);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense-to-dynamic-MoE conversion toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--spec", g.spec_path, "Experiment spec JSON (desk defaults when omitted)")->check(CLI::ExistingFile);
  app.add_option("--data", g.data_path, "Dataset JSON written by gen-data (generated from the experiment when omitted)")
      ->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "Output directory (overrides the experiment file)");
  app.add_option("--seed", g.seeds, "Seed(s) to run (overrides the experiment file)");
  app.add_option("--threads", g.threads, "Worker threads (overrides the experiment file)")->check(CLI::PositiveNumber);
  app.add_option("--method", g.method, "Method name from the experiment file (default: the first)");

  auto* show = app.add_subcommand("show-spec", "Print the resolved experiment spec");
  show->callback([&] { std::cout << to_json(load_spec(g)).dump(2) << "\n"; });

  std::string data_out;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset and save it as JSON");
  gen->add_option("-o,--output", data_out, "Output file (default: <out>/dataset.json)");
  gen->callback([&] {
    const ExperimentSpec s = load_spec(g);
    const Dataset d = generate_dataset(s.data);
    const fs::path p = data_out.empty() ? fs::path(s.output_dir) / "dataset.json" : fs::path(data_out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    save_dataset(d, p);
    std::printf("%s: %zu train / %zu val sequences, hash %016llx\n", p.string().c_str(), d.train.size(),
                d.val.size(), static_cast<unsigned long long>(d.hash()));
  });

  stage_command(app, g, "train", "train", "Train the dense base model");
  stage_command(app, g, "relufy", "relufy", "Swap activations to relu (moefication, or relufy: true)");
  stage_command(app, g, "replace-mha", "replace-mha", "Distill attention projections into relu MLPs");
  stage_command(app, g, "sparsify", "sparsify", "Fine-tune with the activation sparsity penalty");
  stage_command(app, g, "cluster", "cluster", "Split FFN neurons into balanced experts");
  stage_command(app, g, "train-routers", "routers", "Train per-site routers");
  stage_command(app, g, "convert", "convert", "Build the MoE model");

  auto* sweep = app.add_subcommand("sweep", "Run the method through conversion and sweep the policy grid");
  sweep->callback([&] {
    const ExperimentSpec s = load_spec(g);
    const Dataset d = load_data(g, s);
    const MethodSpec& m = pick_method(g, s);
    for (std::uint64_t seed : s.seeds) {
      const MethodRun run = run_method(s, d, m, seed);
      std::printf("seed %llu method %s -> %s\n", static_cast<unsigned long long>(seed), m.name.c_str(),
                  method_dir(s, m, seed).string().c_str());
      print_sweep(run);
    }
  });

  auto* compare = app.add_subcommand("compare", "Run every method and seed, then match losses at the budgets");
  compare->callback([&] {
    const ExperimentSpec s = load_spec(g);
    const Dataset d = load_data(g, s);
    const Comparison c = compare_methods(s, d, [](const std::string& msg) { std::printf("%s\n", msg.c_str()); });
    std::printf("%-6s %-14s %-10s %-18s %8s %10s\n", "seed", "method", "policy", "axis", "target", "loss");
    for (const auto& r : c.matched) {
      std::printf("%-6llu %-14s %-10s %-18s %8.3f %10s\n", static_cast<unsigned long long>(r.seed), r.method.c_str(),
                  r.policy.c_str(), to_string(r.axis).c_str(), r.target,
                  r.loss ? std::to_string(*r.loss).c_str() : "-");
    }
    std::printf("wrote %s and %s\n", (fs::path(s.output_dir) / "compare.csv").string().c_str(),
                (fs::path(s.output_dir) / "matched.csv").string().c_str());
  });

  std::string ckpt;
  auto* stats = app.add_subcommand("stats", "Activation and expert-count statistics of a checkpoint");
  stats->add_option("checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  stats->callback([&] {
    const ExperimentSpec s = load_spec(g);
    const Dataset d = load_data(g, s);
    const DenseModel m = load_checkpoint(ckpt);
    const fs::path dir(s.output_dir);
    fs::create_directories(dir);
    if (m.moe_sites().empty()) {
      const ActivationStats st =
          activation_stats(m, d, Split::val, s.sparsify.nonzero_threshold, 32, s.eval_max_sequences);
      write_text_atomic(dir / "activation-histogram.csv", histogram_csv(st));
      write_text_atomic(dir / "activation-summary.csv", summary_csv(st));
      std::cout << summary_csv(st);
    } else {
      std::vector<GatePolicy> grid;
      for (double t : s.grid.tau) grid.push_back(GatePolicy::dynamic(t));
      const auto traces = per_token_expert_counts(m, d, grid, Split::val, s.eval_max_sequences);
      write_text_atomic(dir / "expert-counts.csv", expert_histogram_csv(traces));
      for (const auto& t : traces) {
        std::printf("tau %-6g", t.policy.tau);
        for (const auto& [site, st] : t.trace.sites) std::printf("  %s %.3f", site.str().c_str(), st.mean_selected());
        std::printf("\n");
      }
    }
    std::printf("wrote statistics to %s\n", dir.string().c_str());
  });

  MassiveActivationConfig mcfg;
  bool mrouters = false;
  auto* massive = app.add_subcommand("massive", "Inject an outlier hidden channel and compare routing labels");
  massive->add_option("--layer", mcfg.layer, "FFN layer");
  massive->add_option("--channel", mcfg.channel, "Hidden channel");
  massive->add_option("--factor", mcfg.factor, "Outlier size relative to the typical activation");
  massive->add_option("--experts", mcfg.n_experts, "Experts in the study partition");
  massive->add_flag("--routers", mrouters, "Also train regression and baseline routers on both label sets");
  massive->callback([&] {
    const ExperimentSpec s = load_spec(g);
    const Dataset d = load_data(g, s);
    if (mrouters) mcfg.routers = s.routers.train;
    for (std::uint64_t seed : s.seeds) {
      const PipelineResult base = run_base(s, d, seed);
      const Json j = to_json(massive_activation_study(base.model, d, mcfg, seed));
      write_text_atomic(seed_dir(s, seed) / "massive-activation.json", j.dump(2) + "\n");
      std::cout << j.dump(2) << "\n";
    }
  });

  std::string csv_path, svg_path, x_col = "moe_ratio", y_col = "loss", title;
  std::vector<std::string> group{"method", "policy"};
  auto* plot = app.add_subcommand("plot", "Draw an SVG line chart from a CSV");
  plot->add_option("csv", csv_path, "Input CSV")->required()->check(CLI::ExistingFile);
  plot->add_option("-o,--output", svg_path, "Output SVG (default: input with .svg)");
  plot->add_option("-x", x_col, "X column");
  plot->add_option("-y", y_col, "Y column");
  plot->add_option("--group", group, "Columns that split the series");
  plot->add_option("--title", title, "Chart title");
  plot->callback([&] {
    const CsvTable t = parse_csv(read_text(csv_path));
    std::vector<std::string> present;
    for (const auto& c : group) {
      if (std::find(t.header.begin(), t.header.end(), c) != t.header.end()) present.push_back(c);
    }
    const fs::path out = svg_path.empty() ? fs::path(csv_path).replace_extension(".svg") : fs::path(svg_path);
    write_text_atomic(out, line_chart_svg(series_from_csv(t, x_col, y_col, present),
                                          {title.empty() ? fs::path(csv_path).filename().string() : title, x_col,
                                           y_col}));
    std::printf("wrote %s\n", out.string().c_str());
  });

  auto* run = app.add_subcommand("run", "Everything: compare when the experiment lists several methods, else sweep");
  run->callback([&] {
    const ExperimentSpec s = load_spec(g);
    const Dataset d = load_data(g, s);
    if (s.methods.size() >= 2) {
      compare_methods(s, d, [](const std::string& msg) { std::printf("%s\n", msg.c_str()); });
      const fs::path csv = fs::path(s.output_dir) / "compare.csv";
      write_text_atomic(fs::path(s.output_dir) / "compare.svg",
                        line_chart_svg(series_from_csv(parse_csv(read_text(csv)), "moe_ratio", "loss",
                                                       {"seed", "method", "policy"}),
                                       {s.name, "MoE FLOPs / dense FLOPs", "validation loss"}));
      std::printf("wrote %s\n", csv.string().c_str());
      return;
    }
    for (std::uint64_t seed : s.seeds) {
      const MethodRun r = run_method(s, d, s.methods.front(), seed);
      print_sweep(r);
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e);
  }
  return 0;
}
