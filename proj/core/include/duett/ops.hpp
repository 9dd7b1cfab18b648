// Primitive op library for the autodiff graph. Every op records a closure
// that adds into its parents' gradient buffers; all of them are covered by
// the finite-difference test battery.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "duett/graph.hpp"
#include "duett/kernels.hpp"
#include "duett/rng.hpp"
#include "duett/tensor.hpp"

namespace duett {

namespace detail {

template <typename S>
void check_same_graph(Var<S> a, Var<S> b) {
  if (a.g != b.g) throw Error("vars belong to different graphs");
}

template <typename S>
void check_same_shape(Var<S> a, Var<S> b, const char* op) {
  if (!a.val().same_shape(b.val()))
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::check_same_graph(a, b);
  detail::check_same_shape(a, b, "add");
  Tensor<S> out(a.shape());
  auto o = out.data();
  auto x = a.val().data();
  auto y = b.val().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  const int ai = a.idx, bi = b.idx;
  return a.g->push(std::move(out), {ai, bi},
                   [ai, bi](Graph<S>& g, int self) {
                     g.add_grad(ai, g.node(self).grad);
                     g.add_grad(bi, g.node(self).grad);
                   },
                   "add");
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::check_same_graph(a, b);
  detail::check_same_shape(a, b, "sub");
  Tensor<S> out(a.shape());
  auto o = out.data();
  auto x = a.val().data();
  auto y = b.val().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  const int ai = a.idx, bi = b.idx;
  return a.g->push(std::move(out), {ai, bi},
                   [ai, bi](Graph<S>& g, int self) {
                     const auto up = g.node(self).grad.data();
                     g.add_grad(ai, g.node(self).grad);
                     auto db = g.grad_buf(bi).data();
                     for (std::size_t i = 0; i < db.size(); ++i) db[i] -= up[i];
                   },
                   "sub");
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::check_same_graph(a, b);
  detail::check_same_shape(a, b, "mul");
  Tensor<S> out(a.shape());
  auto o = out.data();
  auto x = a.val().data();
  auto y = b.val().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  const int ai = a.idx, bi = b.idx;
  return a.g->push(std::move(out), {ai, bi},
                   [ai, bi](Graph<S>& g, int self) {
                     const auto up = g.node(self).grad.data();
                     const auto xa = g.node(ai).value.data();
                     const auto xb = g.node(bi).value.data();
                     auto da = g.grad_buf(ai).data();
                     auto db = g.grad_buf(bi).data();
                     for (std::size_t i = 0; i < up.size(); ++i) {
                       da[i] += up[i] * xb[i];
                       db[i] += up[i] * xa[i];
                     }
                   },
                   "mul");
}

// x * k, k a runtime constant (not learned).
template <typename S>
Var<S> scalar_mul(Var<S> x, S k) {
  Tensor<S> out(x.shape());
  auto o = out.data();
  auto v = x.val().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] * k;
  const int xi = x.idx;
  return x.g->push(std::move(out), {xi},
                   [xi, k](Graph<S>& g, int self) {
                     const auto up = g.node(self).grad.data();
                     auto dx = g.grad_buf(xi).data();
                     for (std::size_t i = 0; i < up.size(); ++i)
                       dx[i] += up[i] * k;
                   },
                   "scalar_mul");
}

// Elementwise product with a constant tensor (dropout masks, loss masks).
template <typename S>
Var<S> mul_const(Var<S> x, Tensor<S> k, const char* op = "mul_const") {
  if (!x.val().same_shape(k))
    throw ShapeError(std::string(op) + ": mask shape mismatch");
  Tensor<S> out(x.shape());
  auto o = out.data();
  auto v = x.val().data();
  auto m = k.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] * m[i];
  const int xi = x.idx;
  return x.g->push(std::move(out), {xi},
                   [xi, k = std::move(k)](Graph<S>& g, int self) {
                     const auto up = g.node(self).grad.data();
                     const auto m = k.data();
                     auto dx = g.grad_buf(xi).data();
                     for (std::size_t i = 0; i < up.size(); ++i)
                       dx[i] += up[i] * m[i];
                   },
                   op);
}

// X (n x D) + row vector b (D), broadcast over rows.
template <typename S>
Var<S> add_rowvec(Var<S> x, Var<S> b) {
  detail::check_same_graph(x, b);
  const std::int64_t n = x.val().rows(), d = x.val().cols();
  if (b.val().numel() != d)
    throw ShapeError("add_rowvec: bias length " +
                     std::to_string(b.val().numel()) + " vs row width " +
                     std::to_string(d));
  Tensor<S> out(x.shape());
  auto o = out.data();
  auto v = x.val().data();
  auto bv = b.val().data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) o[i * d + j] = v[i * d + j] + bv[j];
  const int xi = x.idx, bi = b.idx;
  return x.g->push(std::move(out), {xi, bi},
                   [xi, bi, n, d](Graph<S>& g, int self) {
                     const auto up = g.node(self).grad.data();
                     g.add_grad(xi, g.node(self).grad);
                     auto db = g.grad_buf(bi).data();
                     for (std::int64_t i = 0; i < n; ++i)
                       for (std::int64_t j = 0; j < d; ++j)
                         db[j] += up[i * d + j];
                   },
                   "add_rowvec");
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::check_same_graph(a, b);
  if (a.val().rank() != 2 || b.val().rank() != 2)
    throw ShapeError("matmul expects rank-2 tensors");
  const std::int64_t m = a.val().dim(0), k = a.val().dim(1);
  const std::int64_t k2 = b.val().dim(0), n = b.val().dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner dims " + std::to_string(k) + " vs " +
                     std::to_string(k2));
  Tensor<S> out(Shape{m, n});
  kernels::gemm_accum(a.val().ptr(), b.val().ptr(), out.ptr(), m, n, k, false,
                      false);
  if (a.g->stats) a.g->stats->matmul_flops += 2ULL * static_cast<std::uint64_t>(m * n * k);
  const int ai = a.idx, bi = b.idx;
  return a.g->push(std::move(out), {ai, bi},
                   [ai, bi, m, n, k](Graph<S>& g, int self) {
                     const Tensor<S>& up = g.node(self).grad;
                     // dA += dC * B^T ; dB += A^T * dC
                     kernels::gemm_accum(up.ptr(), g.node(bi).value.ptr(),
                                         g.grad_buf(ai).ptr(), m, k, n, false,
                                         true);
                     kernels::gemm_accum(g.node(ai).value.ptr(), up.ptr(),
                                         g.grad_buf(bi).ptr(), k, n, m, true,
                                         false);
                     if (g.stats)
                       g.stats->matmul_flops +=
                           4ULL * static_cast<std::uint64_t>(m * n * k);
                   },
                   "matmul");
}

template <typename S>
Var<S> relu(Var<S> x) {
  Tensor<S> out(x.shape());
  auto o = out.data();
  auto v = x.val().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] > S(0) ? v[i] : S(0);
  const int xi = x.idx;
  return x.g->push(std::move(out), {xi},
                   [xi](Graph<S>& g, int self) {
                     const auto up = g.node(self).grad.data();
                     const auto v = g.node(xi).value.data();
                     auto dx = g.grad_buf(xi).data();
                     for (std::size_t i = 0; i < up.size(); ++i)
                       if (v[i] > S(0)) dx[i] += up[i];
                   },
                   "relu");
}

template <typename S>
Var<S> tanh_op(Var<S> x) {
  Tensor<S> out(x.shape());
  auto o = out.data();
  auto v = x.val().data();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] = std::tanh(v[i]);
  const int xi = x.idx;
  return x.g->push(std::move(out), {xi},
                   [xi](Graph<S>& g, int self) {
                     const auto up = g.node(self).grad.data();
                     const auto y = g.node(self).value.data();
                     auto dx = g.grad_buf(xi).data();
                     for (std::size_t i = 0; i < up.size(); ++i)
                       dx[i] += up[i] * (S(1) - y[i] * y[i]);
                   },
                   "tanh");
}

template <typename S>
Var<S> sigmoid(Var<S> x) {
  Tensor<S> out(x.shape());
  auto o = out.data();
  auto v = x.val().data();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] = S(1) / (S(1) + std::exp(-v[i]));
  const int xi = x.idx;
  return x.g->push(std::move(out), {xi},
                   [xi](Graph<S>& g, int self) {
                     const auto up = g.node(self).grad.data();
                     const auto y = g.node(self).value.data();
                     auto dx = g.grad_buf(xi).data();
                     for (std::size_t i = 0; i < up.size(); ++i)
                       dx[i] += up[i] * y[i] * (S(1) - y[i]);
                   },
                   "sigmoid");
}

template <typename S>
Var<S> sum_all(Var<S> x) {
  S acc = 0;
  for (S v : x.val().data()) acc += v;
  const int xi = x.idx;
  return x.g->push(Tensor<S>::scalar(acc), {xi},
                   [xi](Graph<S>& g, int self) {
                     const S up = g.node(self).grad.data()[0];
                     auto dx = g.grad_buf(xi).data();
                     for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += up;
                   },
                   "sum");
}

template <typename S>
Var<S> mean_all(Var<S> x) {
  const std::int64_t n = x.val().numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  S acc = 0;
  for (S v : x.val().data()) acc += v;
  const int xi = x.idx;
  const S inv = S(1) / static_cast<S>(n);
  return x.g->push(Tensor<S>::scalar(acc * inv), {xi},
                   [xi, inv](Graph<S>& g, int self) {
                     const S up = g.node(self).grad.data()[0] * inv;
                     auto dx = g.grad_buf(xi).data();
                     for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += up;
                   },
                   "mean");
}

// Per-element binary cross entropy computed from logits with the stable
// log-sum form: bce(z, y) = max(z,0) - z*y + log(1 + exp(-|z|)).
template <typename S>
Var<S> bce_with_logits(Var<S> logits, Tensor<S> targets) {
  if (!logits.val().same_shape(targets))
    throw ShapeError("bce_with_logits: target shape mismatch");
  Tensor<S> out(logits.shape());
  auto o = out.data();
  auto z = logits.val().data();
  auto y = targets.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const S zi = z[i];
    o[i] = std::max(zi, S(0)) - zi * y[i] +
           std::log1p(std::exp(-std::abs(zi)));
  }
  const int zi_idx = logits.idx;
  return logits.g->push(std::move(out), {zi_idx},
                        [zi_idx, targets = std::move(targets)](Graph<S>& g,
                                                               int self) {
                          const auto up = g.node(self).grad.data();
                          const auto z = g.node(zi_idx).value.data();
                          const auto y = targets.data();
                          auto dz = g.grad_buf(zi_idx).data();
                          for (std::size_t i = 0; i < up.size(); ++i) {
                            const S s = S(1) / (S(1) + std::exp(-z[i]));
                            dz[i] += up[i] * (s - y[i]);
                          }
                        },
                        "bce_with_logits");
}

// ScaleNorm: per row, y = g * x / max(||x||_2, eps). Rank-1 input is
// treated as a single row.
template <typename S>
Var<S> scale_norm(Var<S> x, Var<S> gain, S eps = S(1e-5)) {
  detail::check_same_graph(x, gain);
  if (gain.val().numel() != 1) throw ShapeError("scale_norm gain must be scalar");
  const std::int64_t n = x.val().rank() <= 1 ? 1 : x.val().dim(0);
  const std::int64_t d = x.val().numel() / n;
  Tensor<S> out(x.shape());
  Tensor<S> denoms(Shape{n});
  const S gv = gain.val().data()[0];
  auto o = out.data();
  auto v = x.val().data();
  for (std::int64_t i = 0; i < n; ++i) {
    S sq = 0;
    for (std::int64_t j = 0; j < d; ++j) sq += v[i * d + j] * v[i * d + j];
    const S norm = std::sqrt(sq);
    const S denom = std::max(norm, eps);
    denoms.at(i) = denom;
    for (std::int64_t j = 0; j < d; ++j) o[i * d + j] = gv * v[i * d + j] / denom;
  }
  const int xi = x.idx, gi = gain.idx;
  return x.g->push(
      std::move(out), {xi, gi},
      [xi, gi, n, d, eps, denoms = std::move(denoms)](Graph<S>& g, int self) {
        const auto up = g.node(self).grad.data();
        const auto v = g.node(xi).value.data();
        const S gv = g.node(gi).value.data()[0];
        auto dx = g.grad_buf(xi).data();
        auto dg = g.grad_buf(gi).data();
        for (std::int64_t i = 0; i < n; ++i) {
          const S denom = denoms.at(i);
          S dot_ux = 0;
          for (std::int64_t j = 0; j < d; ++j)
            dot_ux += up[i * d + j] * v[i * d + j];
          dg[0] += dot_ux / denom;
          const bool clipped = denom <= eps;  // denom == eps when ||x|| <= eps
          for (std::int64_t j = 0; j < d; ++j) {
            S t = gv * up[i * d + j] / denom;
            if (!clipped)
              t -= gv * dot_ux * v[i * d + j] / (denom * denom * denom);
            dx[i * d + j] += t;
          }
        }
      },
      "scale_norm");
}

// Row gather: out[j] = x[indices[j]]. Repeated indices accumulate in the
// backward scatter-add.
template <typename S>
Var<S> gather_rows(Var<S> x, std::vector<std::int64_t> indices) {
  const std::int64_t n = x.val().rows(), d = x.val().cols();
  for (auto i : indices)
    if (i < 0 || i >= n)
      throw ShapeError("gather_rows: index " + std::to_string(i) +
                       " out of range [0," + std::to_string(n) + ")");
  const std::int64_t m = static_cast<std::int64_t>(indices.size());
  Tensor<S> out(Shape{m, d});
  auto o = out.data();
  auto v = x.val().data();
  for (std::int64_t j = 0; j < m; ++j)
    std::copy_n(v.data() + indices[static_cast<std::size_t>(j)] * d, d,
                o.data() + j * d);
  const int xi = x.idx;
  return x.g->push(std::move(out), {xi},
                   [xi, d, indices = std::move(indices)](Graph<S>& g, int self) {
                     const auto up = g.node(self).grad.data();
                     auto dx = g.grad_buf(xi).data();
                     for (std::size_t j = 0; j < indices.size(); ++j) {
                       const std::int64_t r = indices[j];
                       for (std::int64_t c = 0; c < d; ++c)
                         dx[r * d + c] += up[static_cast<std::int64_t>(j) * d + c];
                     }
                   },
                   "gather_rows");
}

template <typename S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
  detail::check_same_graph(a, b);
  const std::int64_t n = a.val().rows();
  if (b.val().rows() != n) throw ShapeError("concat_cols: row mismatch");
  const std::int64_t da = a.val().cols(), db = b.val().cols();
  Tensor<S> out(Shape{n, da + db});
  auto o = out.data();
  auto x = a.val().data();
  auto y = b.val().data();
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(x.data() + i * da, da, o.data() + i * (da + db));
    std::copy_n(y.data() + i * db, db, o.data() + i * (da + db) + da);
  }
  const int ai = a.idx, bi = b.idx;
  return a.g->push(std::move(out), {ai, bi},
                   [ai, bi, n, da, db](Graph<S>& g, int self) {
                     const auto up = g.node(self).grad.data();
                     auto dx = g.grad_buf(ai).data();
                     auto dy = g.grad_buf(bi).data();
                     for (std::int64_t i = 0; i < n; ++i) {
                       for (std::int64_t j = 0; j < da; ++j)
                         dx[i * da + j] += up[i * (da + db) + j];
                       for (std::int64_t j = 0; j < db; ++j)
                         dy[i * db + j] += up[i * (da + db) + da + j];
                     }
                   },
                   "concat_cols");
}

template <typename S>
Var<S> reshape(Var<S> x, Shape s) {
  Tensor<S> out = x.val().reshape(s);
  const int xi = x.idx;
  return x.g->push(std::move(out), {xi},
                   [xi](Graph<S>& g, int self) {
                     const Tensor<S>& up = g.node(self).grad;
                     auto dx = g.grad_buf(xi).data();
                     auto u = up.data();
                     for (std::size_t i = 0; i < u.size(); ++i) dx[i] += u[i];
                   },
                   "reshape");
}

// Swap axes 1 and 2 of a rank-4 tensor: (a,b,c,d) -> (a,c,b,d).
template <typename S>
Var<S> transpose_12(Var<S> x) {
  if (x.val().rank() != 4) throw ShapeError("transpose_12 expects rank-4");
  const std::int64_t A = x.val().dim(0), B = x.val().dim(1), C = x.val().dim(2),
                     D = x.val().dim(3);
  Tensor<S> out(Shape{A, C, B, D});
  auto o = out.data();
  auto v = x.val().data();
  for (std::int64_t a = 0; a < A; ++a)
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        std::copy_n(v.data() + ((a * B + b) * C + c) * D, D,
                    o.data() + ((a * C + c) * B + b) * D);
  const int xi = x.idx;
  return x.g->push(std::move(out), {xi},
                   [xi, A, B, C, D](Graph<S>& g, int self) {
                     const auto up = g.node(self).grad.data();
                     auto dx = g.grad_buf(xi).data();
                     for (std::int64_t a = 0; a < A; ++a)
                       for (std::int64_t c = 0; c < C; ++c)
                         for (std::int64_t b = 0; b < B; ++b)
                           for (std::int64_t d0 = 0; d0 < D; ++d0)
                             dx[((a * B + b) * C + c) * D + d0] +=
                                 up[((a * C + c) * B + b) * D + d0];
                   },
                   "transpose_12");
}

// Row-wise softmax with max-subtraction for stability.
template <typename S>
Var<S> softmax_rows(Var<S> x) {
  const std::int64_t n = x.val().rank() <= 1 ? 1 : x.val().dim(0);
  const std::int64_t d = x.val().numel() / n;
  Tensor<S> out(x.shape());
  auto o = out.data();
  auto v = x.val().data();
  for (std::int64_t i = 0; i < n; ++i) {
    S mx = v[i * d];
    for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, v[i * d + j]);
    S denom = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      o[i * d + j] = std::exp(v[i * d + j] - mx);
      denom += o[i * d + j];
    }
    for (std::int64_t j = 0; j < d; ++j) o[i * d + j] /= denom;
  }
  const int xi = x.idx;
  return x.g->push(std::move(out), {xi},
                   [xi, n, d](Graph<S>& g, int self) {
                     const auto up = g.node(self).grad.data();
                     const auto p = g.node(self).value.data();
                     auto dx = g.grad_buf(xi).data();
                     for (std::int64_t i = 0; i < n; ++i) {
                       S dot = 0;
                       for (std::int64_t j = 0; j < d; ++j)
                         dot += up[i * d + j] * p[i * d + j];
                       for (std::int64_t j = 0; j < d; ++j)
                         dx[i * d + j] += p[i * d + j] * (up[i * d + j] - dot);
                     }
                   },
                   "softmax_rows");
}

// Inverted dropout. Training: zero with prob p, survivors scaled by
// 1/(1-p); eval: identity. The mask is drawn at record time so replays of
// the same graph are consistent.
template <typename S>
Var<S> dropout(Var<S> x, double p, bool training, Rng* rng) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout probability must be in [0,1), got " +
                      std::to_string(p));
  if (!training || p == 0.0) return x;
  if (rng == nullptr) throw ConfigError("dropout in training mode needs an rng");
  Tensor<S> mask(x.shape());
  auto m = mask.data();
  const S scale = S(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < m.size(); ++i)
    m[i] = rng->bernoulli(p) ? S(0) : scale;
  return mul_const(x, std::move(mask), "dropout");
}

}  // namespace duett
