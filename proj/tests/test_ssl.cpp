#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "duett/pipeline.hpp"
#include "duett/ssl.hpp"
#include "testutil.hpp"

using namespace duett;

namespace {

PreparedStay fixed_stay(int n_e, int n_t, int n_static,
                        const std::vector<double>& x,
                        const std::vector<std::int64_t>& m) {
  PreparedStay p;
  p.stay_id = "f";
  p.binned.n_e = n_e;
  p.binned.n_t = n_t;
  p.binned.window_days = 1.0;
  p.binned.bin_end_days = bin_times(n_t, 1.0);
  p.binned.x = x;
  p.binned.m = m;
  for (int s = 0; s < n_static; ++s) p.statics.push_back(0.5 * (s + 1));
  p.labels = {1.0};
  return p;
}

PreparedStay random_stay(Rng& rng, int n_e, int n_t, int n_static) {
  std::vector<double> x(static_cast<std::size_t>(n_e * n_t));
  std::vector<std::int64_t> m(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool obs = rng.uniform() < 0.6;
    m[i] = obs ? 1 + static_cast<std::int64_t>(rng.uniform_int(3)) : 0;
    x[i] = obs ? rng.normal() : 0.0;
  }
  PreparedStay p = fixed_stay(n_e, n_t, n_static, x, m);
  for (auto& s : p.statics) s = rng.normal();
  return p;
}

ModelConfig small_config(int n_e, int n_t, int d = 4, int layers = 1) {
  ModelConfig mc;
  mc.n_e = n_e;
  mc.n_t = n_t;
  mc.d = d;
  mc.layers = layers;
  mc.n_heads = 1;
  mc.ffn_hidden = 8;
  mc.static_hidden = 4;
  mc.n_static = 2;
  mc.validate();
  return mc;
}

// Heads configured to emit constant predictions: zero weights, fixed bias.
template <typename S>
void set_constant_head(const Linear<S>& head, S bias) {
  for (auto& v : head.w->value.data()) v = S(0);
  for (auto& v : head.b->value.data()) v = bias;
}

}  // namespace

TEST(SampleMask, DefaultsAndExhaustive) {
  Rng rng(1);
  MaskSpec spec = sample_mask(12, 16, 1, 1, rng);
  EXPECT_EQ(spec.events.size(), 1u);
  EXPECT_EQ(spec.bins.size(), 1u);

  MaskSpec all = sample_mask(5, 4, 5, 0, rng);
  std::set<int> uniq(all.events.begin(), all.events.end());
  EXPECT_EQ(uniq.size(), 5u);

  EXPECT_THROW(sample_mask(5, 4, 0, 0, rng), ConfigError);
  EXPECT_THROW(sample_mask(5, 4, 6, 0, rng), ConfigError);
}

TEST(SampleMask, UniformFrequencies) {
  Rng rng(2);
  std::vector<int> counts(10, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    MaskSpec spec = sample_mask(10, 4, 1, 1, rng);
    ++counts[static_cast<std::size_t>(spec.events[0])];
  }
  const double expected = draws / 10.0;
  const double sigma = std::sqrt(draws * 0.1 * 0.9);
  for (int c : counts) EXPECT_LT(std::abs(c - expected), 3 * sigma);
}

TEST(ApplyMask, StructureAndUntouchedRows) {
  Rng rng(3);
  ModelConfig mc = small_config(3, 4);
  DuettModel<float> model(mc, 7);
  std::vector<PreparedStay> stays{random_stay(rng, 3, 4, 2)};
  Batch b = make_batch(stays, {0});
  MaskSpec spec;
  spec.events = {1};
  spec.bins = {2};
  Graph<float> g;
  ForwardOut<float> fwd = model.assemble(g, b, false);
  Var<float> masked = apply_mask(g, fwd.phi, g.param(model.mask_token()), spec, 3, 4);
  const auto& mask_tok = model.mask_token().value;
  const std::int64_t E = mc.event_rows(), T1 = mc.time_cols(), d = mc.d;
  auto cell = [&](const Var<float>& v, std::int64_t i, std::int64_t j, std::int64_t c) {
    return v.val().at((i * T1 + j) * d + c);
  };
  for (std::int64_t i = 0; i < E; ++i)
    for (std::int64_t j = 0; j < T1; ++j) {
      const bool is_masked = (i == 1 && j < 4) || (j == 2 && i < 3);
      for (std::int64_t c = 0; c < d; ++c) {
        if (is_masked)
          EXPECT_FLOAT_EQ(cell(masked, i, j, c), mask_tok.at(c));
        else
          EXPECT_FLOAT_EQ(cell(masked, i, j, c), cell(fwd.phi, i, j, c));
      }
    }

  // empty spec returns the input unchanged
  MaskSpec empty;
  Var<float> same = apply_mask(g, fwd.phi, g.param(model.mask_token()), empty, 3, 4);
  EXPECT_EQ(same.idx, fwd.phi.idx);

  MaskSpec bad;
  bad.events = {7};
  EXPECT_THROW(apply_mask(g, fwd.phi, g.param(model.mask_token()), bad, 3, 4),
               ShapeError);
}

TEST(ApplyMask, AntiLeakageOutputsBitIdentical) {
  // model outputs are identical when values at masked coordinates change
  Rng rng(4);
  ModelConfig mc = small_config(4, 5, 4, 2);
  DuettModel<float> model(mc, 11);
  PreparedStay s = random_stay(rng, 4, 5, 2);
  MaskSpec spec;
  spec.events = {2};
  spec.bins = {1};

  PreparedStay corrupted = s;
  for (int j = 0; j < 5; ++j) {
    corrupted.binned.xv(2, j) = 1e6 + j;
    corrupted.binned.mv(2, j) = 7;
  }
  for (int i = 0; i < 4; ++i) {
    corrupted.binned.xv(i, 1) = -500.0 - i;
    corrupted.binned.mv(i, 1) = 3;
  }

  auto run = [&](const PreparedStay& stay) {
    Batch b = make_batch({stay}, {0});
    Graph<float> g;
    ForwardOut<float> fwd = model.assemble(g, b, false);
    Var<float> masked = apply_mask(g, fwd.phi, g.param(model.mask_token()), spec, 4, 5);
    return model.encode(g, masked, b, false, nullptr).val().clone();
  };
  const Tensor<float> a = run(s);
  const Tensor<float> c = run(corrupted);
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.at(i), c.at(i));
}

TEST(ApplyMask, MaskedCoordinatesGetZeroGradient) {
  Rng rng(5);
  ModelConfig mc = small_config(3, 3);
  DuettModel<float> model(mc, 13);
  Batch b = make_batch({random_stay(rng, 3, 3, 2)}, {0});
  MaskSpec spec;
  spec.events = {0};
  spec.bins = {2};
  Graph<float> g;
  ForwardOut<float> fwd = model.assemble(g, b, false);
  Var<float> masked = apply_mask(g, fwd.phi, g.param(model.mask_token()), spec, 3, 3);
  Var<float> z = model.encode(g, masked, b, false, nullptr);
  g.backward(sum_all(z));
  const Tensor<float>& phi_grad = g.node(fwd.phi.idx).grad;
  ASSERT_TRUE(g.node(fwd.phi.idx).has_grad);
  const std::int64_t E = mc.event_rows(), T1 = mc.time_cols(), d = mc.d;
  double off_mask_grad = 0.0;
  for (std::int64_t i = 0; i < E; ++i)
    for (std::int64_t j = 0; j < T1; ++j) {
      const bool is_masked = (i == 0 && j < 3) || (j == 2 && i < 3);
      for (std::int64_t c = 0; c < d; ++c) {
        const float v = phi_grad.at((i * T1 + j) * d + c);
        if (is_masked)
          EXPECT_EQ(v, 0.0f);
        else
          off_mask_grad += std::abs(v);
      }
    }
  EXPECT_GT(off_mask_grad, 0.0);
}

// ---------------------------------------------------------------------------
// Loss hand cases
// ---------------------------------------------------------------------------

TEST(SslLoss, SingleUnobservedCellGivesLogTwo) {
  // one masked cell, m=0, presence prob 0.5, alpha=1: total = ln 2
  ModelConfig mc = small_config(1, 1);
  DuettModel<float> model(mc, 17);
  set_constant_head(model.ssl_heads().event_value, 0.7f);
  set_constant_head(model.ssl_heads().event_presence, 0.0f);
  Batch b = make_batch({fixed_stay(1, 1, 2, {0.0}, {0})}, {0});
  MaskSpec spec;
  spec.events = {0};
  Graph<float> g;
  ForwardOut<float> fwd = model.forward(g, b, false, nullptr);
  SslLossOut<float> out = ssl_loss(g, model, fwd.z, b, spec, 1.0);
  EXPECT_NEAR(out.report.value, 0.0, 1e-6);
  EXPECT_NEAR(out.report.presence, std::log(2.0), 1e-6);
  EXPECT_NEAR(out.report.total, 0.6931, 1e-4);
}

TEST(SslLoss, ObservedCellSquaredError) {
  // m=2, x=1.5, value prediction 1.0, presence prob ~= 1: total = 0.25
  ModelConfig mc = small_config(1, 1);
  DuettModel<float> model(mc, 19);
  set_constant_head(model.ssl_heads().event_value, 1.0f);
  set_constant_head(model.ssl_heads().event_presence, 40.0f);
  Batch b = make_batch({fixed_stay(1, 1, 2, {1.5}, {2})}, {0});
  MaskSpec spec;
  spec.events = {0};
  Graph<float> g;
  ForwardOut<float> fwd = model.forward(g, b, false, nullptr);
  SslLossOut<float> out = ssl_loss(g, model, fwd.z, b, spec, 1.0);
  EXPECT_NEAR(out.report.value, 0.25, 1e-6);
  EXPECT_NEAR(out.report.presence, 0.0, 1e-6);
  EXPECT_NEAR(out.report.total, 0.25, 1e-6);
}

TEST(SslLoss, PerfectPredictionsGiveZero) {
  ModelConfig mc = small_config(2, 2);
  DuettModel<float> model(mc, 23);
  set_constant_head(model.ssl_heads().event_value, 0.7f);
  set_constant_head(model.ssl_heads().event_presence, 40.0f);
  Batch b = make_batch({fixed_stay(2, 2, 2, {0.7, 0.7, 0.7, 0.7}, {1, 1, 1, 1})}, {0});
  MaskSpec spec;
  spec.events = {0};
  Graph<float> g;
  ForwardOut<float> fwd = model.forward(g, b, false, nullptr);
  SslLossOut<float> out = ssl_loss(g, model, fwd.z, b, spec, 1.0);
  EXPECT_NEAR(out.report.total, 0.0, 1e-6);
}

TEST(SslLoss, DecompositionHoldsOnRandomInstances) {
  Rng rng(29);
  for (int trial = 0; trial < 100; ++trial) {
    Rng inst = rng.fork(static_cast<std::uint64_t>(trial));
    const int n_e = 2 + static_cast<int>(inst.uniform_int(3));
    const int n_t = 2 + static_cast<int>(inst.uniform_int(3));
    ModelConfig mc = small_config(n_e, n_t);
    DuettModel<float> model(mc, 100 + static_cast<std::uint64_t>(trial));
    std::vector<PreparedStay> stays{random_stay(inst, n_e, n_t, 2),
                                    random_stay(inst, n_e, n_t, 2)};
    Batch b = make_batch(stays, {0, 1});
    Rng mask_rng = inst.fork("m");
    MaskSpec spec = sample_mask(n_e, n_t, 1, 1, mask_rng);
    const double alpha = inst.uniform(0.0, 2.0);
    Graph<float> g;
    ForwardOut<float> fwd = model.forward(g, b, false, nullptr);
    SslLossOut<float> out = ssl_loss(g, model, fwd.z, b, spec, alpha);
    EXPECT_GE(out.report.value, 0.0);
    EXPECT_GE(out.report.presence, 0.0);
    EXPECT_NEAR(out.report.total, out.report.value + alpha * out.report.presence,
                1e-6);
    EXPECT_NEAR(out.report.total, out.total.val().at(0), 1e-6);
  }
}

TEST(SslLoss, AblationsZeroOutHeadGradients) {
  Rng rng(31);
  ModelConfig mc = small_config(3, 3);
  DuettModel<float> model(mc, 37);
  Batch b = make_batch({random_stay(rng, 3, 3, 2)}, {0});
  MaskSpec spec;
  spec.events = {1};
  spec.bins = {0};

  auto head_grad_sum = [&](double alpha, double value_weight) {
    model.params().zero_grad();
    Graph<float> g;
    ForwardOut<float> fwd = model.forward(g, b, false, nullptr);
    SslLossOut<float> out = ssl_loss(g, model, fwd.z, b, spec, alpha, value_weight);
    g.backward(out.total);
    g.export_param_grads();
    double pres = 0, val = 0;
    const SslHeads<float>& h = model.ssl_heads();
    for (auto* p : {h.event_presence.w, h.time_presence.w})
      for (float v : p->grad.data()) pres += std::abs(v);
    for (auto* p : {h.event_value.w, h.time_value.w})
      for (float v : p->grad.data()) val += std::abs(v);
    return std::pair<double, double>{val, pres};
  };

  auto [v1, p1] = head_grad_sum(0.0, 1.0);  // alpha = 0: no presence gradient
  EXPECT_EQ(p1, 0.0);
  EXPECT_GT(v1, 0.0);
  auto [v2, p2] = head_grad_sum(1.0, 0.0);  // value term removed
  EXPECT_EQ(v2, 0.0);
  EXPECT_GT(p2, 0.0);
  auto [v3, p3] = head_grad_sum(1.0, 1.0);  // both axes' heads train
  EXPECT_GT(v3, 0.0);
  EXPECT_GT(p3, 0.0);
}

TEST(SslLoss, EmptySpecRejected) {
  Rng rng(41);
  ModelConfig mc = small_config(2, 2);
  DuettModel<float> model(mc, 43);
  Batch b = make_batch({random_stay(rng, 2, 2, 2)}, {0});
  Graph<float> g;
  ForwardOut<float> fwd = model.forward(g, b, false, nullptr);
  MaskSpec empty;
  EXPECT_THROW(ssl_loss(g, model, fwd.z, b, empty, 1.0), ConfigError);
}

// ---------------------------------------------------------------------------
// Pre-training loop
// ---------------------------------------------------------------------------

namespace {

std::vector<PreparedStay> tiny_dataset(Rng& rng, int n, int n_e, int n_t) {
  std::vector<PreparedStay> out;
  for (int i = 0; i < n; ++i) out.push_back(random_stay(rng, n_e, n_t, 2));
  return out;
}

}  // namespace

TEST(Pretrain, BestEpochIsArgminOfValidationLoss) {
  Rng rng(47);
  ModelConfig mc = small_config(3, 4, 4, 1);
  DuettModel<float> model(mc, 53);
  auto train = tiny_dataset(rng, 24, 3, 4);
  auto val = tiny_dataset(rng, 8, 3, 4);
  PretrainConfig pc;
  pc.epochs = 4;
  pc.batch_size = 8;
  pc.peak_lr = 1e-3;
  pc.warmup_steps = 5;
  pc.seed = 2020;
  PretrainResult r = pretrain(model, train, val, pc);
  double best = 1e18;
  int best_ep = 0;
  for (std::size_t i = 0; i < r.epoch_log.size(); ++i)
    if (r.epoch_log[i][1] < best) {
      best = r.epoch_log[i][1];
      best_ep = static_cast<int>(i) + 1;
    }
  EXPECT_EQ(r.best_epoch, best_ep);
  EXPECT_DOUBLE_EQ(r.best_val_loss, best);
}

TEST(Pretrain, FixedSeedGivesBitIdenticalCheckpoints) {
  Rng rng(59);
  ModelConfig mc = small_config(3, 4, 4, 1);
  auto train = tiny_dataset(rng, 20, 3, 4);
  auto val = tiny_dataset(rng, 8, 3, 4);
  PretrainConfig pc;
  pc.epochs = 2;
  pc.batch_size = 8;
  pc.warmup_steps = 5;
  pc.seed = 2021;

  DuettModel<float> m1(mc, 61);
  PretrainResult r1 = pretrain(m1, train, val, pc);
  DuettModel<float> m2(mc, 61);
  PretrainResult r2 = pretrain(m2, train, val, pc);
  ASSERT_EQ(r1.best_params.size(), r2.best_params.size());
  for (std::size_t i = 0; i < r1.best_params.size(); ++i) {
    const auto a = r1.best_params[i].data();
    const auto b = r2.best_params[i].data();
    for (std::size_t k = 0; k < a.size(); ++k) ASSERT_EQ(a[k], b[k]);
  }
}

TEST(Pretrain, RepTokenStaysFrozen) {
  Rng rng(67);
  ModelConfig mc = small_config(3, 4, 4, 1);
  DuettModel<float> model(mc, 71);
  const Tensor<float> rep_before = model.params().at("embed.rep").value.clone();
  auto train = tiny_dataset(rng, 16, 3, 4);
  auto val = tiny_dataset(rng, 8, 3, 4);
  PretrainConfig pc;
  pc.epochs = 2;
  pc.batch_size = 8;
  pc.warmup_steps = 5;
  pretrain(model, train, val, pc);
  const Tensor<float>& rep_after = model.params().at("embed.rep").value;
  for (std::int64_t i = 0; i < rep_before.numel(); ++i)
    EXPECT_EQ(rep_before.at(i), rep_after.at(i));
  // mask token does train
  const Param<float>& mask = model.params().at("embed.mask");
  double moved = 0;
  DuettModel<float> fresh(mc, 71);
  for (std::int64_t i = 0; i < mask.value.numel(); ++i)
    moved += std::abs(mask.value.at(i) - fresh.params().at("embed.mask").value.at(i));
  EXPECT_GT(moved, 0.0);
}

TEST(Pretrain, DivergenceAborts) {
  Rng rng(73);
  ModelConfig mc = small_config(3, 4, 4, 1);
  DuettModel<float> model(mc, 79);
  auto train = tiny_dataset(rng, 16, 3, 4);
  auto val = tiny_dataset(rng, 8, 3, 4);
  PretrainConfig pc;
  pc.epochs = 3;
  pc.batch_size = 8;
  pc.peak_lr = 1e14;  // guaranteed blow-up
  pc.warmup_steps = 1;
  EXPECT_THROW(pretrain(model, train, val, pc), NumericError);
}

TEST(Pretrain, LearnsPlantedStructure) {
  // final validation loss beats the first epoch's by a clear margin
  SynthConfig sc;
  sc.n_e = 6;
  sc.n_stays = 150;
  sc.grid_bins = 8;
  sc.sparsity = {0.7};
  sc.noise_sigma = 0.1;
  sc.links.push_back({0, 2, 0, 1.0});
  auto stays = generate_synthetic(sc, 2020);
  Vocabulary vocab;
  for (int i = 0; i < sc.n_e; ++i) vocab.add_or_get("e" + std::to_string(i));
  Split sp = split(stays, 0.7, 0.15, 0.15, 2020);
  NormStats ns = fit_norm(sp.train);
  for (auto& s : sp.train) s = apply_norm(s, ns);
  for (auto& s : sp.val) s = apply_norm(s, ns);
  auto train = prepare_stays(sp.train, vocab, 8, sc.window_days, Agg::Last, {"y"});
  auto val = prepare_stays(sp.val, vocab, 8, sc.window_days, Agg::Last, {"y"});
  ModelConfig mc;
  mc.n_e = 6;
  mc.n_t = 8;
  mc.d = 8;
  mc.layers = 1;
  mc.n_heads = 2;
  mc.ffn_hidden = 32;
  mc.n_static = 4;
  mc.validate();
  DuettModel<float> model(mc, 2020);
  PretrainConfig pc;
  pc.epochs = 10;
  pc.batch_size = 16;
  pc.peak_lr = 1e-3;
  pc.warmup_steps = 20;
  pc.seed = 2020;
  PretrainResult r = pretrain(model, train, val, pc);
  EXPECT_LT(r.best_val_loss, 0.8 * r.first_val_loss);
}
