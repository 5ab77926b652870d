#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "../support/gradcheck.hpp"
#include "d2dmoe/sparsity.hpp"

using namespace d2dmoe;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double hoyer_of(const std::vector<float>& row) {
  Tensor t({1, row.size()}, row);
  return hoyer_term(ad::constant(t)).loss.value().item();
}

TransformerConfig tiny_config(Activation act = Activation::relu, FfnKind kind = FfnKind::standard) {
  TransformerConfig c;
  c.vocab_size = 64;
  c.context_length = 16;
  c.num_layers = 2;
  c.model_dim = 16;
  c.num_heads = 2;
  c.expansion = 4;
  c.activation = act;
  c.ffn_kind = kind;
  return c;
}

Dataset tiny_lm(std::uint64_t seed) {
  DatasetSpec s;
  s.seq_len = 16;
  s.train_size = 128;
  s.val_size = 32;
  s.seed = seed;
  return generate_dataset(s);
}

bool same_weights(const DenseModel& a, const DenseModel& b) {
  const auto ta = model_tensors(a), tb = model_tensors(b);
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].first != tb[i].first || ta[i].second->shape() != tb[i].second->shape()) return false;
    if (std::memcmp(ta[i].second->ptr(), tb[i].second->ptr(), ta[i].second->numel() * sizeof(float)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST(Hoyer, OneHotIsOne) {
  EXPECT_DOUBLE_EQ(hoyer_of({0, 0, 7.5f, 0}), 1.0);
  EXPECT_DOUBLE_EQ(hoyer_of({-1e-3f, 0, 0}), 1.0);
}

TEST(Hoyer, UniformIsLength) {
  EXPECT_NEAR(hoyer_of(std::vector<float>(10, 0.3f)), 10.0, 1e-5);
  EXPECT_NEAR(hoyer_of(std::vector<float>(64, -2.0f)), 64.0, 1e-4);
}

TEST(Hoyer, HandExample) { EXPECT_NEAR(hoyer_of({3, 4}), 49.0 / 25.0, 1e-6); }

TEST(Hoyer, AveragesTokensThenLayers) {
  // layer 1: rows [1,0] (1) and [1,1] (2) -> 1.5; layer 2: [2,2,2] -> 3.
  const ad::Var<float> l1 = ad::constant(Tensor({2, 2}, {1, 0, 1, 1}));
  const ad::Var<float> l2 = ad::constant(Tensor({1, 3}, {2, 2, 2}));
  const std::vector<ad::Var<float>> layers{l1, l2};
  EXPECT_NEAR(hoyer_loss<float>(layers).loss.value().item(), (1.5 + 3.0) / 2.0, 1e-6);
}

TEST(Hoyer, DegenerateRowContributesZeroAndIsCounted) {
  ad::Tape<double> tape;
  const auto a = tape.leaf(ad::Tensor<double>({3, 2}, {0, 0, 3, 4, 1e-13, 0}));
  const HoyerValue<double> h = hoyer_term(a);
  EXPECT_EQ(h.degenerate, 2u);
  EXPECT_EQ(h.rows, 3u);
  EXPECT_NEAR(h.loss.value().item(), 1.96 / 3.0, 1e-12);
  const auto g = ad::backward(tape, h.loss);
  for (double x : g[a].data()) EXPECT_TRUE(std::isfinite(x));
  EXPECT_EQ(g[a](0, 0), 0.0);
  EXPECT_EQ(g[a](0, 1), 0.0);
  const std::vector<ad::Var<float>> zero{ad::constant(Tensor({4, 5}))};
  EXPECT_EQ(hoyer_loss<float>(zero).loss.value().item(), 0.0f);
}

TEST(Hoyer, BoundsAndScaleInvariance) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> scale(-50.0, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + static_cast<std::size_t>(trial % 40);
    ad::Tensor<double> t({1, m});
    for (double& x : t.data()) x = nd(rng);
    const double h = hoyer_term(ad::constant(t)).loss.value().item();
    EXPECT_GE(h, 1.0 - 1e-12);
    EXPECT_LE(h, static_cast<double>(m) + 1e-9);
    double c = scale(rng);
    if (std::abs(c) < 1e-3) c = 2.0;
    ad::Tensor<double> s = t;
    for (double& x : s.data()) x *= c;
    EXPECT_NEAR(hoyer_term(ad::constant(s)).loss.value().item() / h, 1.0, 1e-6);
  }
}

TEST(Hoyer, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    testkit::TensorD a({4, 6}), b({3, 5});
    // |a| has a kink at 0; central differences need the inputs clear of it.
    auto draw = [&](testkit::TensorD& t) {
      for (double& x : t.data()) {
        x = nd(rng);
        if (std::abs(x) < 1e-2) x = x < 0 ? x - 0.1 : x + 0.1;
      }
    };
    draw(a);
    draw(b);
    const auto r = testkit::check_gradients(
        [](const std::vector<testkit::VarD>& in) {
          return hoyer_loss<double>(std::vector<testkit::VarD>{in[0], in[1]}).loss;
        },
        {a, b}, seed);
    EXPECT_LT(r.max_rel_error, 1e-5) << "seed " << seed;
  }
}

TEST(Hoyer, DisplacedGeluPathGradient) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed + 100);
    std::normal_distribution<double> nd(0.0, 3.0);
    testkit::TensorD z({5, 8});
    for (double& x : z.data()) {
      x = nd(rng);
      if (std::abs(x - 0.5) < 1e-2) x += 0.1;  // keep clear of the relu kink
    }
    const auto r = testkit::check_gradients(
        [](const std::vector<testkit::VarD>& in) {
          return hoyer_loss<double>(std::vector<testkit::VarD>{displaced_preactivation(in[0], 0.5)}).loss;
        },
        {z}, seed);
    EXPECT_LT(r.max_rel_error, 1e-5) << "seed " << seed;
  }
}

TEST(Displacement, Examples) {
  const auto zero_d = displaced_preactivation(ad::constant(Tensor({1, 3}, {0, 1.5f, 4})), 0.0).value();
  EXPECT_EQ(values(zero_d), (std::vector<float>{0, 1.5f, 4}));
  const auto shifted = displaced_preactivation(ad::constant(Tensor({1, 3}, {-12, -5, 1})), -10.0).value();
  EXPECT_EQ(values(shifted), (std::vector<float>{0, 5, 11}));
  const auto below = displaced_preactivation(ad::constant(Tensor({2, 2}, {-20, -11, -10.5f, -30})), -10.0);
  for (float x : below.value().data()) EXPECT_EQ(x, 0.0f);
  const std::vector<ad::Var<float>> layers{below};
  EXPECT_EQ(hoyer_loss<float>(layers).loss.value().item(), 0.0f);
}

TEST(Displacement, MonotoneInZAndD) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(-20.0f, 20.0f);
  for (int i = 0; i < 1000; ++i) {
    const float z1 = u(rng), z2 = z1 + std::abs(u(rng));
    const double d1 = u(rng), d2 = d1 + std::abs(u(rng));
    auto f = [](float z, double d) { return displaced_preactivation(ad::constant(Tensor({1, 1}, {z})), d).value()[0]; };
    EXPECT_LE(f(z1, d1), f(z2, d1));
    EXPECT_GE(f(z1, d1), f(z1, d2));
  }
}

TEST(SparsityConfig, RampReachesAlphaAtFinalStep) {
  SparsityConfig c;
  c.alpha = 0.3;
  c.train.steps = 7;
  EXPECT_EQ(c.alpha_at(0), 0.0);
  EXPECT_DOUBLE_EQ(c.alpha_at(3), 0.15);
  EXPECT_EQ(c.alpha_at(6), 0.3);
  c.ramp = false;
  EXPECT_EQ(c.alpha_at(0), 0.3);
}

TEST(SparsityConfig, RejectsNegativeAlpha) {
  SparsityConfig c;
  c.alpha = -1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_THROW(sparsity_config_from_json(Json{{"alpha", -0.5}}), ValidationError);
  EXPECT_EQ(sparsity_config_from_json(Json{{"alpha", 0.5}, {"train", {{"steps", 3}}}}).train.steps, 3);
}

TEST(SparsityTargets, PathDependsOnActivationAndFfnKind) {
  SparsityConfig cfg;
  cfg.displacement = -10.0;
  const Dataset data = tiny_lm(1);
  const auto idx = std::vector<std::size_t>{0, 1};
  const TokenBatch b = make_batch(data, Split::train, idx);
  ForwardOptions fo;
  fo.trace = sparsity_trace_flags();

  const auto relu = build_model(tiny_config(Activation::relu), 1);
  auto out = forward(relu, b, fo);
  auto t = sparsity_targets(relu, out.trace, cfg);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(values(t[0].value()), values(out.trace.layers[0].ffn_hidden.value()));

  const auto gelu = build_model(tiny_config(Activation::gelu), 1);
  out = forward(gelu, b, fo);
  t = sparsity_targets(gelu, out.trace, cfg);
  const Tensor& pre = out.trace.layers[1].ffn_pre.value();
  for (std::size_t i = 0; i < pre.numel(); ++i) EXPECT_EQ(t[1].value()[i], std::max(0.0f, pre[i] + 10.0f));

  const auto gated = build_model(tiny_config(Activation::relu, FfnKind::gated), 1);
  out = forward(gated, b, fo);
  t = sparsity_targets(gated, out.trace, cfg);
  const Tensor& g = t[0].value();
  const Tensor& gpre = out.trace.layers[0].ffn_pre.value();
  for (std::size_t i = 0; i < g.numel(); ++i) EXPECT_EQ(g[i], std::max(0.0f, gpre[i]));
}

TEST(SparsifyFinetune, ZeroAlphaIsPlainFinetuning) {
  const Dataset data = tiny_lm(2);
  auto a = build_model(tiny_config(), 3);
  auto b = a;
  SparsityConfig cfg;
  cfg.alpha = 0.0;
  cfg.train.steps = 12;
  cfg.train.batch_size = 4;
  sparsify_finetune(a, data, cfg, 5);
  train_model(b, data, cfg.train, 5);
  EXPECT_TRUE(same_weights(a, b));
}

TEST(SparsifyFinetune, PositiveAlphaLowersNonzeroCounts) {
  const Dataset data = tiny_lm(3);
  auto base = build_model(tiny_config(), 4);
  TrainConfig pre;
  pre.steps = 80;
  pre.batch_size = 8;
  train_model(base, data, pre, 1);
  auto plain = base, sparse = base;
  SparsityConfig cfg;
  cfg.train.steps = 80;
  cfg.train.batch_size = 8;
  cfg.train.adam.lr = 1e-3;
  sparsify_finetune(plain, data, cfg, 6);
  cfg.alpha = 0.05;
  const auto log = sparsify_finetune(sparse, data, cfg, 6);
  EXPECT_EQ(log.log.back().aux_weight, 0.05);
  const auto s0 = activation_stats(plain, data, Split::val, 0.0);
  const auto s1 = activation_stats(sparse, data, Split::val, 0.0);
  for (std::size_t l = 0; l < 2; ++l) EXPECT_LT(s1.layers[l].mean, s0.layers[l].mean) << "layer " << l;
}

TEST(SparsifyFinetune, GeluModelTrainsOnDisplacedPath) {
  const Dataset data = tiny_lm(4);
  auto m = build_model(tiny_config(Activation::gelu), 2);
  SparsityConfig cfg;
  cfg.alpha = 0.01;
  cfg.train.steps = 5;
  cfg.train.batch_size = 4;
  const auto r = sparsify_finetune(m, data, cfg, 1);
  EXPECT_EQ(r.steps, 5);
  EXPECT_GT(r.log.back().aux, 0.0);
}

TEST(SparsifyFinetune, DivergenceKeepsLastGoodWeights) {
  const Dataset data = tiny_lm(5);
  auto m = build_model(tiny_config(), 2);
  auto ref = m;
  TrainConfig tc;
  tc.steps = 6;
  tc.batch_size = 4;
  TrainOptions opts;
  opts.aux = [](const DenseModel&, const ForwardResult&, std::int64_t step) {
    AuxTerm t;
    if (step == 3) t.weighted = ad::constant(Tensor::scalar(std::nanf("")));
    return t;
  };
  try {
    train_model(m, data, tc, 8, opts);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.step(), 3);
  }
  tc.steps = 6;
  // Same sampler and schedule, stopped after three updates.
  TrainOptions stop;
  stop.aux = [](const DenseModel&, const ForwardResult&, std::int64_t step) {
    AuxTerm t;
    if (step == 3) throw InputError("stop");
    return t;
  };
  EXPECT_THROW(train_model(ref, data, tc, 8, stop), InputError);
  EXPECT_TRUE(same_weights(m, ref));
}

TEST(ActivationStats, ExactZerosNeverCount) {
  LayerActivationStats s;
  accumulate_counts(Tensor({2, 4}, {0, 0, 1e-30f, -0.0f, 1, 2, 0, 3}), 0.0, s);
  finalize_stats(s);
  EXPECT_EQ(s.tokens, 2);
  EXPECT_EQ(s.histogram[1], 1);
  EXPECT_EQ(s.histogram[3], 1);
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.variance, 1.0);
}

TEST(ActivationStats, HandBuiltModel) {
  // d_m = 2 with zero attention: the FFN input is layernorm(embedding) =
  // +-[1, -1]; the hand-chosen neurons give counts 2, 3, 2.
  TransformerConfig c;
  c.vocab_size = 3;
  c.context_length = 3;
  c.num_layers = 1;
  c.model_dim = 2;
  c.num_heads = 1;
  c.expansion = 2;
  DenseModel m = build_model(c, 1);
  m.token_embedding = Tensor({3, 2}, {1, 0, 0, 1, 2, 0});
  m.position_embedding = Tensor({3, 2});
  for (auto& p : m.layers[0].proj) {
    auto& lin = std::get<LinearWeights>(p);
    lin.W.fill(0.0f);
    lin.b.fill(0.0f);
  }
  auto& f = std::get<FfnWeights>(m.layers[0].ffn);
  f.W1 = Tensor({2, 4}, {1, -1, 1, 0, 0, 0, 1, 1});
  f.b1 = Tensor({4}, {0, 0, 0.5f, 0});
  Dataset d;
  d.task = Task::byte_lm;
  d.vocab_size = 3;
  d.seq_len = 3;
  d.train = d.val = {{0, 1, 2, 0}};
  const auto s = activation_stats(m, d, Split::val, 0.0);
  ASSERT_EQ(s.layers.size(), 1u);
  EXPECT_EQ(s.layers[0].tokens, 3);
  EXPECT_EQ(s.layers[0].histogram[2], 2);
  EXPECT_EQ(s.layers[0].histogram[3], 1);
  EXPECT_NEAR(s.layers[0].mean, 7.0 / 3.0, 1e-12);
  EXPECT_NEAR(s.layers[0].variance, 2.0 / 9.0, 1e-12);
  const std::string csv = summary_csv(s);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,mean,variance,tokens");
  const std::string hist = histogram_csv(s, 2);
  EXPECT_NE(hist.find("0,2,4,3\n"), std::string::npos) << hist;
}

TEST(ActivationStats, EmptyDatasetIsInputError) {
  const auto m = build_model(tiny_config(), 1);
  Dataset d;
  d.vocab_size = 64;
  d.seq_len = 4;
  EXPECT_THROW(activation_stats(m, d, Split::val, 0.0), InputError);
}
