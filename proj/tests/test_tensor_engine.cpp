#include <gtest/gtest.h>

#include <cmath>

#include "duett/optim.hpp"
#include "testutil.hpp"

using namespace duett;
using testutil::finite_diff_grads;
using testutil::random_tensor;
using testutil::rel_error;

namespace {

Param<double> make_param(const std::string& name, Tensor<double> v) {
  Param<double> p;
  p.name = name;
  p.value = std::move(v);
  p.grad = Tensor<double>(p.value.shape());
  return p;
}

// Analytic gradients vs the finite-difference oracle for a scalar-valued
// builder over a set of parameters.
void check_grads(const std::function<Var<double>(Graph<double>&)>& build,
                 std::vector<Param<double>*> params, double tol = 1e-7) {
  Graph<double> g;
  Var<double> loss = build(g);
  const auto analytic = g.grad(loss, params);
  const auto numeric = finite_diff_grads(
      [&] {
        Graph<double> g2;
        return build(g2).val().at(0);
      },
      params);
  EXPECT_LT(rel_error(analytic, numeric), tol);
}

// Random upstream weighting so non-uniform gradients are exercised.
Var<double> weighted_sum(Graph<double>& g, Var<double> x, Rng& rng) {
  Tensor<double> w(x.val().shape());
  Rng local = rng.fork("w");
  for (auto& v : w.data()) v = local.normal();
  return sum_all(mul_const(x, std::move(w)));
}

}  // namespace

TEST(Tensor, ShapeInvariants) {
  Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.rows(), 2);
  EXPECT_EQ(t.cols(), 3);
  EXPECT_THROW(Tensor<float>({2, 2}, {1.f, 2.f}), ShapeError);
  EXPECT_THROW(t.reshape({5}), ShapeError);
  Tensor<float> r = t.reshape({3, 2});
  EXPECT_TRUE(r.shares_buffer(t));
  Tensor<float> c = t.clone();
  EXPECT_FALSE(c.shares_buffer(t));
}

TEST(Tensor, ScalarShape) {
  Tensor<double> s = Tensor<double>::scalar(3.5);
  EXPECT_EQ(s.rank(), 0);
  EXPECT_EQ(s.numel(), 1);
}

TEST(Graph, SquareGradient) {
  // f(x) = x^2 at x = 3 -> gradient 6
  Param<double> x = make_param("x", Tensor<double>::scalar(3.0));
  Graph<double> g;
  Var<double> vx = g.param(x);
  Var<double> loss = sum_all(mul(vx, vx));
  const auto grads = g.grad(loss, {&x});
  EXPECT_DOUBLE_EQ(grads[0].at(0), 6.0);
}

TEST(Graph, SoftmaxSumHasZeroGradient) {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    Param<double> x = make_param("x", random_tensor(rng, {3, 5}, 2.0));
    Graph<double> g;
    Var<double> loss = sum_all(softmax_rows(g.param(x)));
    const auto grads = g.grad(loss, {&x});
    for (double v : grads[0].data()) EXPECT_LT(std::abs(v), 1e-12);
  }
}

TEST(Graph, MatmulGradMatchesFiniteDifferences) {
  // sum(A*B) for random 3x4, 4x2: relative error < 1e-6 in 64-bit mode
  Rng rng(11);
  Param<double> a = make_param("a", random_tensor(rng, {3, 4}));
  Param<double> b = make_param("b", random_tensor(rng, {4, 2}));
  Graph<double> g;
  Var<double> loss = sum_all(matmul(g.param(a), g.param(b)));
  const auto analytic = g.grad(loss, {&a, &b});
  const auto numeric = finite_diff_grads(
      [&] {
        Graph<double> g2;
        return sum_all(matmul(g2.param(a), g2.param(b))).val().at(0);
      },
      {&a, &b});
  EXPECT_LT(rel_error(analytic, numeric), 1e-6);
}

TEST(Graph, UnusedParamGetsZeroGradient) {
  Param<double> used = make_param("u", Tensor<double>::scalar(2.0));
  Param<double> unused = make_param("n", Tensor<double>({3}, 1.0));
  Graph<double> g;
  Var<double> loss = sum_all(g.param(used));
  const auto grads = g.grad(loss, {&used, &unused});
  EXPECT_DOUBLE_EQ(grads[0].at(0), 1.0);
  for (double v : grads[1].data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Graph, NonScalarLossRejected) {
  Graph<double> g;
  Var<double> x = g.input(Tensor<double>({2, 2}, 1.0));
  EXPECT_THROW(g.backward(x), ShapeError);
}

TEST(Graph, NonDifferentiableOpOnPathRaises) {
  Param<double> x = make_param("x", Tensor<double>::scalar(1.0));
  Graph<double> g;
  Var<double> vx = g.param(x);
  Var<double> stop = g.push(vx.val().clone(), {vx.idx}, nullptr, "floorish",
                            /*differentiable=*/false);
  Var<double> loss = sum_all(stop);
  EXPECT_THROW(g.backward(loss), Error);
}

TEST(Graph, NonFiniteValuesSurfaceAsErrors) {
  Graph<double> g;
  Var<double> x = g.input(Tensor<double>({2}, {1e308, 1e308}));
  EXPECT_THROW(add(x, x), NumericError);
}

// ---------------------------------------------------------------------------
// Finite-difference battery: >= 20 random small instances per primitive.
// ---------------------------------------------------------------------------

TEST(GradCheck, ElementwiseAndReductions) {
  Rng rng(101);
  for (int t = 0; t < 20; ++t) {
    Rng inst = rng.fork(static_cast<std::uint64_t>(t));
    const std::int64_t n = 2 + static_cast<std::int64_t>(inst.uniform_int(3));
    const std::int64_t m = 1 + static_cast<std::int64_t>(inst.uniform_int(4));
    Param<double> a = make_param("a", random_tensor(inst, {n, m}));
    Param<double> b = make_param("b", random_tensor(inst, {n, m}));
    check_grads([&](Graph<double>& g) {
      Var<double> s = add(g.param(a), g.param(b));
      s = sub(s, mul(g.param(a), g.param(b)));
      s = scalar_mul(s, 1.7);
      return mean_all(s);
    }, {&a, &b}, 1e-4);
  }
}

TEST(GradCheck, ActivationsAndBce) {
  Rng rng(102);
  for (int t = 0; t < 20; ++t) {
    Rng inst = rng.fork(static_cast<std::uint64_t>(t));
    Param<double> a = make_param("a", random_tensor(inst, {3, 4}));
    // keep relu inputs away from the kink
    for (auto& v : a.value.data())
      if (std::abs(v) < 0.1) v += v >= 0 ? 0.2 : -0.2;
    Tensor<double> targets({3, 4});
    for (auto& v : targets.data()) v = inst.uniform() < 0.5 ? 0.0 : 1.0;
    check_grads([&](Graph<double>& g) {
      Var<double> x = g.param(a);
      Var<double> s = add(add(relu(x), tanh_op(x)), sigmoid(x));
      s = add(s, bce_with_logits(x, targets.clone()));
      s = add(s, softmax_rows(x));
      Rng wr = inst.fork("w");
      return weighted_sum(g, s, wr);
    }, {&a}, 1e-4);
  }
}

TEST(GradCheck, MatmulLinearShapes) {
  Rng rng(103);
  for (int t = 0; t < 20; ++t) {
    Rng inst = rng.fork(static_cast<std::uint64_t>(t));
    const std::int64_t m = 1 + static_cast<std::int64_t>(inst.uniform_int(4));
    const std::int64_t k = 1 + static_cast<std::int64_t>(inst.uniform_int(4));
    const std::int64_t n = 1 + static_cast<std::int64_t>(inst.uniform_int(4));
    Param<double> a = make_param("a", random_tensor(inst, {m, k}));
    Param<double> b = make_param("b", random_tensor(inst, {k, n}));
    Param<double> bias = make_param("bias", random_tensor(inst, {n}));
    check_grads([&](Graph<double>& g) {
      Var<double> y = add_rowvec(matmul(g.param(a), g.param(b)), g.param(bias));
      Rng wr = inst.fork("w");
      return weighted_sum(g, y, wr);
    }, {&a, &b, &bias}, 1e-4);
  }
}

TEST(GradCheck, ScaleNorm) {
  Rng rng(104);
  for (int t = 0; t < 20; ++t) {
    Rng inst = rng.fork(static_cast<std::uint64_t>(t));
    Param<double> x = make_param("x", random_tensor(inst, {4, 6}));
    Param<double> gain = make_param("g", Tensor<double>::scalar(inst.normal(1.0, 0.3)));
    check_grads([&](Graph<double>& g) {
      Rng wr = inst.fork("w");
      return weighted_sum(g, scale_norm(g.param(x), g.param(gain)), wr);
    }, {&x, &gain}, 1e-4);
  }
}

TEST(GradCheck, GatherConcatReshapeTranspose) {
  Rng rng(105);
  for (int t = 0; t < 20; ++t) {
    Rng inst = rng.fork(static_cast<std::uint64_t>(t));
    Param<double> table = make_param("t", random_tensor(inst, {5, 3}));
    Param<double> other = make_param("o", random_tensor(inst, {4, 2}));
    Param<double> four = make_param("f", random_tensor(inst, {2, 3, 2, 2}));
    std::vector<std::int64_t> idx{0, 2, 2, 4};  // repeated index accumulates
    check_grads([&](Graph<double>& g) {
      Var<double> gathered = gather_rows(g.param(table), idx);
      Var<double> cc = concat_cols(gathered, g.param(other));
      Var<double> tp = reshape(transpose_12(g.param(four)), {6, 4});
      Rng wr = inst.fork("w");
      return add(weighted_sum(g, cc, wr), mean_all(tp));
    }, {&table, &other, &four}, 1e-4);
  }
}

TEST(GradCheck, BatchNormTrainAndEval) {
  Rng rng(106);
  for (int t = 0; t < 20; ++t) {
    Rng inst = rng.fork(static_cast<std::uint64_t>(t));
    ParamStore<double> store;
    BatchNorm<double> bn = make_batch_norm(store, "bn", 3, ParamGroup::Encoder);
    // non-trivial running stats for the eval branch
    bn.run_mean->value.data()[1] = 0.4;
    bn.run_var->value.data()[2] = 2.0;
    Param<double> x = make_param("x", random_tensor(inst, {4, 3}));
    for (bool training : {true, false}) {
      check_grads([&](Graph<double>& g) {
        Rng wr = inst.fork("w");
        return weighted_sum(g, batch_norm(g, g.param(x), bn, training), wr);
      }, {&x, bn.gamma, bn.beta}, 1e-4);
    }
  }
}

TEST(GradCheck, MhaBlock) {
  Rng rng(107);
  for (int t = 0; t < 20; ++t) {
    Rng inst = rng.fork(static_cast<std::uint64_t>(t));
    const std::int64_t block = 2 + static_cast<std::int64_t>(inst.uniform_int(3));
    const std::int64_t nblocks = 1 + static_cast<std::int64_t>(inst.uniform_int(2));
    const int heads = 2;
    const std::int64_t dim = 8;
    Param<double> q = make_param("q", random_tensor(inst, {nblocks * block, dim}));
    Param<double> k = make_param("k", random_tensor(inst, {nblocks * block, dim}));
    Param<double> v = make_param("v", random_tensor(inst, {nblocks * block, dim}));
    check_grads([&](Graph<double>& g) {
      Rng wr = inst.fork("w");
      return weighted_sum(
          g, mha_block(g.param(q), g.param(k), g.param(v), heads, block), wr);
    }, {&q, &k, &v}, 1e-4);
  }
}

// ---------------------------------------------------------------------------
// ScaleNorm hand cases and properties
// ---------------------------------------------------------------------------

TEST(ScaleNorm, HandCases) {
  Param<double> g1 = make_param("g", Tensor<double>::scalar(1.0));
  Graph<double> g;
  Var<double> x = g.input(Tensor<double>({1, 2}, {3.0, 4.0}));
  Var<double> y = scale_norm(x, g.param(g1));
  EXPECT_NEAR(y.val().at(0), 0.6, 1e-12);
  EXPECT_NEAR(y.val().at(1), 0.8, 1e-12);

  Param<double> g5 = make_param("g5", Tensor<double>::scalar(5.0));
  Var<double> y5 = scale_norm(x, g.param(g5));
  EXPECT_NEAR(y5.val().at(0), 3.0, 1e-12);
  EXPECT_NEAR(y5.val().at(1), 4.0, 1e-12);

  // zero vector maps to zero under the epsilon guard
  Param<double> g2 = make_param("g2", Tensor<double>::scalar(2.0));
  Var<double> z = g.input(Tensor<double>({1, 2}, {0.0, 0.0}));
  Var<double> yz = scale_norm(z, g.param(g2));
  EXPECT_DOUBLE_EQ(yz.val().at(0), 0.0);
  EXPECT_DOUBLE_EQ(yz.val().at(1), 0.0);
}

TEST(ScaleNorm, OutputNormEqualsGain) {
  Rng rng(42);
  Param<double> gain = make_param("g", Tensor<double>::scalar(-2.5));
  for (int t = 0; t < 50; ++t) {
    Graph<double> g;
    Var<double> x = g.input(random_tensor(rng, {3, 7}, 4.0));
    Var<double> y = scale_norm(x, g.param(gain));
    for (int r = 0; r < 3; ++r) {
      double sq = 0;
      for (int c = 0; c < 7; ++c) sq += y.val().at2(r, c) * y.val().at2(r, c);
      EXPECT_NEAR(std::sqrt(sq), 2.5, 1e-6);
    }
  }
}

// ---------------------------------------------------------------------------
// Multi-head attention spec examples
// ---------------------------------------------------------------------------

TEST(Attention, SingleTokenEqualsProjectedValue) {
  Rng rng(5);
  ParamStore<double> store;
  Attention<double> at = make_attention(store, "a", 8, rng, ParamGroup::Encoder);
  Graph<double> g;
  Tensor<double> tok = random_tensor(rng, {1, 8});
  Var<double> x = g.input(tok.clone());
  Var<double> out = multi_head_attention(g, x, at, 4, 1);
  // softmax over one element is 1: out = Wo(Wv x + bv) + bo
  Var<double> v = linear(g, g.input(tok.clone()), at.v);
  Var<double> expect = linear(g, v, at.o);
  for (std::int64_t i = 0; i < 8; ++i)
    EXPECT_NEAR(out.val().at(i), expect.val().at(i), 1e-12);
}

TEST(Attention, IdenticalTokensGetIdenticalOutputs) {
  Rng rng(6);
  ParamStore<double> store;
  Attention<double> at = make_attention(store, "a", 8, rng, ParamGroup::Encoder);
  Graph<double> g;
  Tensor<double> two({2, 8});
  for (std::int64_t j = 0; j < 8; ++j) {
    const double v = rng.normal();
    two.at2(0, j) = v;
    two.at2(1, j) = v;
  }
  Var<double> out = multi_head_attention(g, g.input(two), at, 2, 2);
  for (std::int64_t j = 0; j < 8; ++j)
    EXPECT_NEAR(out.val().at2(0, j), out.val().at2(1, j), 1e-12);
}

TEST(Attention, PermutationEquivariant) {
  Rng rng(77);
  ParamStore<double> store;
  Attention<double> at = make_attention(store, "a", 12, rng, ParamGroup::Encoder);
  Tensor<double> tokens = random_tensor(rng, {5, 12});
  std::vector<std::int64_t> perm{3, 0, 4, 1, 2};
  Tensor<double> permuted({5, 12});
  for (std::int64_t i = 0; i < 5; ++i)
    for (std::int64_t j = 0; j < 12; ++j)
      permuted.at2(i, j) = tokens.at2(perm[static_cast<std::size_t>(i)], j);

  Graph<double> g;
  Var<double> a = multi_head_attention(g, g.input(tokens), at, 3, 5);
  Var<double> b = multi_head_attention(g, g.input(permuted), at, 3, 5);
  for (std::int64_t i = 0; i < 5; ++i)
    for (std::int64_t j = 0; j < 12; ++j)
      EXPECT_NEAR(b.val().at2(i, j), a.val().at2(perm[static_cast<std::size_t>(i)], j),
                  1e-9);
}

TEST(Attention, IndivisibleHeadsRejected) {
  Graph<double> g;
  Var<double> x = g.input(Tensor<double>({2, 6}, 0.5));
  EXPECT_THROW(mha_block(x, x, x, 4, 2), ShapeError);
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

TEST(Dropout, IdentityCases) {
  Rng rng(9);
  Graph<float> g;
  Var<float> x = g.input(Tensor<float>({4, 4}, 2.0f));
  Var<float> same_p0 = dropout(x, 0.0, true, &rng);
  Var<float> same_eval = dropout(x, 0.7, false, nullptr);
  EXPECT_EQ(same_p0.idx, x.idx);
  EXPECT_EQ(same_eval.idx, x.idx);
  EXPECT_THROW(dropout(x, 1.0, true, &rng), ConfigError);
}

TEST(Dropout, MeanPreservedAtHalf) {
  Rng rng(10);
  Graph<float> g;
  Var<float> x = g.input(Tensor<float>({100000}, 1.0f));
  Var<float> y = dropout(x, 0.5, true, &rng);
  double sum = 0;
  for (float v : y.val().data()) sum += v;
  EXPECT_NEAR(sum / 1e5, 1.0, 0.01);
}

// ---------------------------------------------------------------------------
// AdamW and the learning-rate schedule
// ---------------------------------------------------------------------------

TEST(AdamW, FirstStepMagnitude) {
  ParamStore<double> store;
  Param<double>& p = store.add("p", Tensor<double>::scalar(1.0), ParamGroup::Encoder);
  p.grad.data()[0] = 1.0;
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.0});
  opt.step(store, 0.1);
  EXPECT_NEAR(p.value.at(0), 1.0 - 0.1, 1e-6);
}

TEST(AdamW, ZeroGradZeroDecayIsIdentity) {
  ParamStore<double> store;
  Param<double>& p = store.add("p", Tensor<double>::scalar(0.7), ParamGroup::Encoder);
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.0});
  opt.step(store, 0.1);
  EXPECT_DOUBLE_EQ(p.value.at(0), 0.7);
}

TEST(AdamW, DecayOnlyUpdate) {
  ParamStore<double> store;
  Param<double>& p = store.add("p", Tensor<double>::scalar(2.0), ParamGroup::Encoder);
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.1});
  opt.step(store, 0.1);  // p scaled by (1 - lr*wd) = 0.99
  EXPECT_NEAR(p.value.at(0), 2.0 * 0.99, 1e-12);
}

TEST(AdamW, ZeroLrIsIdentity) {
  Rng rng(3);
  ParamStore<double> store;
  Param<double>& p = store.add("p", random_tensor(rng, {4}), ParamGroup::Encoder);
  const Tensor<double> before = p.value.clone();
  for (auto& v : p.grad.data()) v = rng.normal();
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.3});
  opt.step(store, 0.0);
  for (std::int64_t i = 0; i < 4; ++i)
    EXPECT_DOUBLE_EQ(p.value.at(i), before.at(i));
}

TEST(LrSchedule, WarmupAndDecay) {
  const LrSchedule s{0.02, 100};
  EXPECT_DOUBLE_EQ(lr_at(0, s), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(100, s), 0.02);
  EXPECT_NEAR(lr_at(400, s), 0.01, 1e-12);  // sqrt(W / 4W) = 1/2
  // continuity at the boundary
  EXPECT_NEAR(lr_at(101, s), 0.02, 2e-4);
  for (std::int64_t step = 101; step < 1000; step += 97)
    EXPECT_GT(lr_at(step, s), lr_at(step + 1, s));
}

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

TEST(Rng, DeterministicAndForkIndependent) {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng parent(5);
  Rng f1 = parent.fork("mask");
  Rng f2 = parent.fork("dropout");
  EXPECT_NE(f1.next_u64(), f2.next_u64());
  // forking does not advance the parent
  Rng p2(5);
  (void)p2.fork("mask");
  Rng p3(5);
  EXPECT_EQ(p2.next_u64(), p3.next_u64());
}

TEST(Rng, UniformIntBoundsAndShuffle) {
  Rng rng(99);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(rng.uniform_int(7), 7u);
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  rng.shuffle(v);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}));
}

TEST(Rng, SampleWithoutReplacementIsUniform) {
  Rng rng(2024);
  std::vector<int> counts(10, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i)
    for (int idx : rng.sample_without_replacement(10, 1)) ++counts[static_cast<std::size_t>(idx)];
  const double expected = draws / 10.0;
  const double sigma = std::sqrt(draws * 0.1 * 0.9);
  for (int c : counts) EXPECT_LT(std::abs(c - expected), 3.0 * sigma + 1);
}

