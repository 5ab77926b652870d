#include <gtest/gtest.h>

#include <cmath>

#include "d2dmoe/checkpoint.hpp"
#include "d2dmoe/conversion.hpp"
#include "d2dmoe/train.hpp"
#include "../support/fixtures.hpp"

using namespace d2dmoe;

namespace {

Dataset small_data(std::uint64_t seed) {
  DatasetSpec s;
  s.seq_len = 16;
  s.train_size = 48;
  s.val_size = 16;
  s.seed = seed;
  return generate_dataset(s);
}

TransformerConfig config_for(const Dataset& d, FfnKind kind = FfnKind::standard) {
  TransformerConfig c;
  c.vocab_size = d.vocab_size;
  c.context_length = d.seq_len;
  c.num_layers = 2;
  c.model_dim = 16;
  c.num_heads = 2;
  c.expansion = 4;
  c.ffn_kind = kind;
  return c;
}

RouterTrainConfig quick_router() {
  RouterTrainConfig rc;
  rc.steps = 40;
  rc.batch_size = 64;
  return rc;
}

void cluster_and_route(DenseModel& m, const std::vector<SiteId>& sites, int n, const Dataset& d, std::uint64_t seed) {
  for (SiteId s : sites) {
    cluster_site(m, s, n, seed);
    m.routers[s] = train_router(quick_router(), collect_router_dataset(m, s, d, 16), seed + 1).router;
  }
}

ReplacementMlp random_replacement(const DenseModel& m, SiteId site, std::size_t h, std::uint64_t seed) {
  const FfnWeights f = testkit::random_ffn(static_cast<std::size_t>(m.config.model_dim), h, false, seed);
  return ReplacementMlp{f.W1, f.b1, f.W2, f.b2, site};
}

Tensor val_logits(const DenseModel& m, const Dataset& d) {
  std::vector<std::size_t> idx(d.val.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  ad::NoGradGuard g;
  return forward(m, make_batch(d, Split::val, idx)).logits.value();
}

}  // namespace

TEST(Conversion, NoSitesLeavesModelBitwise) {
  const Dataset d = small_data(1);
  auto m = build_model(config_for(d), 2);
  const auto before = serialize_model(m);
  convert_model(m, {}, GatePolicy::dynamic(0.5));
  EXPECT_EQ(serialize_model(m), before);
}

TEST(Conversion, TauZeroReproducesDenseLogits) {
  const Dataset d = small_data(2);
  for (FfnKind kind : {FfnKind::standard, FfnKind::gated}) {
    auto m = build_model(config_for(d, kind), 3);
    const Tensor dense = val_logits(m, d);
    const auto sites = convertible_sites(m, false);
    ASSERT_EQ(sites.size(), 2u);
    cluster_and_route(m, sites, 4, d, 5);
    convert_model(m, sites, GatePolicy::dynamic(0.0));
    EXPECT_TRUE(m.partitions.empty());
    EXPECT_TRUE(m.routers.empty());
    EXPECT_LT(ad::max_abs_diff(dense, val_logits(m, d)), 1e-4);
  }
}

TEST(Conversion, ReplacedProjectionConvertsExactlyAtTauZero) {
  const Dataset d = small_data(3);
  auto m = build_model(config_for(d), 4);
  m.projection(0, SiteKind::v) = random_replacement(m, {0, SiteKind::v}, 16, 9);
  m.projection(1, SiteKind::o) = random_replacement(m, {1, SiteKind::o}, 16, 10);
  const Tensor replaced = val_logits(m, d);
  const auto sites = convertible_sites(m, true);
  ASSERT_EQ(sites.size(), 4u);
  cluster_and_route(m, sites, 4, d, 6);
  convert_model(m, sites, GatePolicy::dynamic(0.0));
  EXPECT_EQ(m.form({0, SiteKind::v}), "moe");
  EXPECT_EQ(m.form({0, SiteKind::q}), "dense");
  EXPECT_LT(ad::max_abs_diff(replaced, val_logits(m, d)), 1e-4);
}

TEST(Conversion, RawProjectionIsAContractError) {
  const Dataset d = small_data(4);
  auto m = build_model(config_for(d), 5);
  EXPECT_THROW(cluster_site(m, {0, SiteKind::k}, 2, 1), ContractError);
  cluster_and_route(m, {{0, SiteKind::ffn}}, 4, d, 2);
  const auto before = serialize_model(m);
  EXPECT_THROW(convert_model(m, {{0, SiteKind::ffn}, {0, SiteKind::q}}, GatePolicy::dynamic(0.0)), ContractError);
  EXPECT_EQ(serialize_model(m), before);
}

TEST(Conversion, MissingPartitionOrRouterIsAContractError) {
  const Dataset d = small_data(5);
  auto m = build_model(config_for(d), 6);
  EXPECT_THROW(collect_router_dataset(m, {0, SiteKind::ffn}, d), ContractError);
  EXPECT_THROW(convert_model(m, {{0, SiteKind::ffn}}, GatePolicy::dynamic(0.0)), ContractError);
  cluster_site(m, {0, SiteKind::ffn}, 4, 1);
  EXPECT_THROW(convert_model(m, {{0, SiteKind::ffn}}, GatePolicy::dynamic(0.0)), ContractError);
  cluster_and_route(m, {{1, SiteKind::ffn}}, 4, d, 2);
  EXPECT_THROW(convert_model(m, {{1, SiteKind::ffn}}, GatePolicy::top(5)), ValidationError);
}

TEST(Conversion, SingleExpertTargetIsOutputNormWithoutBias) {
  const Dataset d = small_data(6);
  auto m = build_model(config_for(d), 7);
  const SiteId s{1, SiteKind::ffn};
  cluster_site(m, s, 1, 3);
  const RouterDataset rd = collect_router_dataset(m, s, d, 4);
  const Tensor z = capture_site_inputs(m, s, d, Split::train, 4);
  ASSERT_EQ(rd.size(), 4u * 16u);
  EXPECT_EQ(ad::max_abs_diff(rd.inputs, z), 0.0);
  const FfnWeights f = m.site_ffn(s);
  const Tensor core = ffn_core(core_view(f), z, Activation::relu);
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < core.dim(1); ++j) n2 += static_cast<double>(core(i, j)) * core(i, j);
    EXPECT_NEAR(rd.targets(i, 0), std::sqrt(n2), 1e-5);
  }
}

TEST(Conversion, ExpertCountsFollowTheGate) {
  const Dataset d = small_data(7);
  auto m = build_model(config_for(d), 8);
  const auto sites = convertible_sites(m, false);
  cluster_and_route(m, sites, 8, d, 4);
  convert_model(m, sites, GatePolicy::dynamic(0.0));
  std::vector<GatePolicy> grid;
  for (double tau : {0.0, 0.25, 0.5, 0.75, 1.0}) grid.push_back(GatePolicy::dynamic(tau));
  const auto traces = per_token_expert_counts(m, d, grid);
  ASSERT_EQ(traces.size(), grid.size());
  const std::size_t tokens = d.val.size() * 16;
  for (const auto& [site, st] : traces[0].trace.sites) {
    ASSERT_EQ(st.counts.size(), tokens);
    for (int c : st.counts) EXPECT_EQ(c, 8);
  }
  for (const auto& [site, st] : traces.back().trace.sites) {
    for (int c : st.counts) EXPECT_GE(c, 1);
  }
  for (std::size_t i = 1; i < traces.size(); ++i) {
    for (SiteId s : sites) {
      EXPECT_LE(traces[i].trace.sites.at(s).mean_selected(), traces[i - 1].trace.sites.at(s).mean_selected());
    }
  }
  EXPECT_DOUBLE_EQ(traces[0].loss, evaluate(m, d, Split::val).loss);

  const std::string csv = expert_histogram_csv(traces);
  EXPECT_EQ(csv.rfind("site,policy_param,bucket,count\n", 0), 0u);
  std::size_t lines = 0;
  for (char c : csv) lines += c == '\n';
  EXPECT_EQ(lines, 1 + grid.size() * sites.size() * 9);
  EXPECT_NE(csv.find("0.ffn,0,8," + std::to_string(tokens) + "\n"), std::string::npos);
}

TEST(Conversion, SetPolicyReachesEverySite) {
  const Dataset d = small_data(8);
  auto m = build_model(config_for(d), 9);
  const auto sites = convertible_sites(m, false);
  cluster_and_route(m, sites, 4, d, 1);
  convert_model(m, sites, GatePolicy::dynamic(0.0));
  set_policy(m, GatePolicy::top(2));
  std::vector<std::size_t> idx{0, 1};
  const auto out = forward(m, make_batch(d, Split::val, idx));
  for (const auto& [s, st] : out.exec.sites) EXPECT_DOUBLE_EQ(st.mean_selected(), 2.0);
  EXPECT_THROW(set_policy(m, GatePolicy::top(9)), ValidationError);
}

TEST(Conversion, BaselineLabelsPeakAtOnePerBatch) {
  const Dataset d = small_data(9);
  auto m = build_model(config_for(d), 10);
  const SiteId s{0, SiteKind::ffn};
  cluster_site(m, s, 4, 2);
  const auto col = collect_baseline_dataset(m, s, d, 8, 4);
  ASSERT_EQ(col.data.size(), 8u * 16u);
  const std::size_t rows_per_batch = 4 * 16;
  for (std::size_t b = 0; b < 2; ++b) {
    float mx = 0.0f;
    for (std::size_t i = b * rows_per_batch; i < (b + 1) * rows_per_batch; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        const float y = col.data.targets(i, j);
        EXPECT_GE(y, 0.0f);
        EXPECT_LE(y, 1.0f);
        mx = std::max(mx, y);
      }
    }
    EXPECT_FLOAT_EQ(mx, 1.0f);
  }
  EXPECT_EQ(col.all_zero_batches, 0u);
}
