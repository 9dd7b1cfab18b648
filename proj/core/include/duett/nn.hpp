// Neural-net building blocks on top of the graph: parameter store, weight
// init, linear layers, batch-statistics normalization, multi-head attention
// and the pre-norm Transformer sublayer.
//
// Init conventions (documented so runs are reproducible): linear weights
// and biases uniform in +/- sqrt(1/fan_in); embedding-like tables normal
// with sigma 0.02; ScaleNorm gains sqrt(dim).

#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "duett/ops.hpp"

namespace duett {

template <typename S>
class ParamStore {
 public:
  Param<S>& add(std::string name, Tensor<S> init, ParamGroup group,
                bool trainable = true) {
    if (index_.count(name)) throw Error("duplicate parameter name: " + name);
    auto p = std::make_unique<Param<S>>();
    p->name = name;
    p->value = std::move(init);
    p->grad = Tensor<S>(p->value.shape());
    p->group = group;
    p->trainable = trainable;
    index_.emplace(std::move(name), items_.size());
    items_.push_back(std::move(p));
    return *items_.back();
  }

  Param<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
  }

  Param<S>& at(const std::string& name) {
    Param<S>* p = find(name);
    if (!p) throw Error("unknown parameter: " + name);
    return *p;
  }

  const std::vector<std::unique_ptr<Param<S>>>& items() const { return items_; }

  void zero_grad() {
    for (auto& p : items_) p->zero_grad();
  }

  std::int64_t count_values(bool trainable_only = false) const {
    std::int64_t n = 0;
    for (const auto& p : items_)
      if (!trainable_only || p->trainable) n += p->value.numel();
    return n;
  }

  // Deep copy of all values, in registration order.
  std::vector<Tensor<S>> snapshot() const {
    std::vector<Tensor<S>> out;
    out.reserve(items_.size());
    for (const auto& p : items_) out.push_back(p->value.clone());
    return out;
  }

  void restore(const std::vector<Tensor<S>>& snap) {
    if (snap.size() != items_.size())
      throw Error("snapshot size mismatch in restore");
    for (std::size_t i = 0; i < snap.size(); ++i) {
      auto dst = items_[i]->value.data();
      auto src = snap[i].data();
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }

 private:
  std::vector<std::unique_ptr<Param<S>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename S>
Tensor<S> uniform_init(Rng& rng, Shape shape, std::int64_t fan_in) {
  Tensor<S> t(std::move(shape));
  const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
  for (auto& v : t.data()) v = static_cast<S>(rng.uniform(-bound, bound));
  return t;
}

template <typename S>
Tensor<S> normal_init(Rng& rng, Shape shape, double sigma = 0.02) {
  Tensor<S> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<S>(rng.normal(0.0, sigma));
  return t;
}

template <typename S>
struct Linear {
  Param<S>* w = nullptr;
  Param<S>* b = nullptr;
};

template <typename S>
Linear<S> make_linear(ParamStore<S>& store, const std::string& name,
                      std::int64_t in, std::int64_t out, Rng& rng,
                      ParamGroup group) {
  Linear<S> l;
  l.w = &store.add(name + ".w", uniform_init<S>(rng, {in, out}, in), group);
  l.b = &store.add(name + ".b", uniform_init<S>(rng, {out}, in), group);
  return l;
}

template <typename S>
Var<S> linear(Graph<S>& g, Var<S> x, const Linear<S>& l) {
  return add_rowvec(matmul(x, g.param(*l.w)), g.param(*l.b));
}

// ---------------------------------------------------------------------------
// Batch-statistics normalization over rows of (B, D).
//
// Training with B >= 2 uses batch mean / biased variance and updates the
// running buffers with momentum 0.1; training with B == 1 falls back to the
// running statistics (no update), and eval always uses them.
// ---------------------------------------------------------------------------

template <typename S>
struct BatchNorm {
  Param<S>* gamma = nullptr;
  Param<S>* beta = nullptr;
  Param<S>* run_mean = nullptr;
  Param<S>* run_var = nullptr;
  S eps = S(1e-5);
  S momentum = S(0.1);
};

template <typename S>
BatchNorm<S> make_batch_norm(ParamStore<S>& store, const std::string& name,
                             std::int64_t dim, ParamGroup group) {
  BatchNorm<S> bn;
  bn.gamma = &store.add(name + ".gamma", Tensor<S>(Shape{dim}, S(1)), group);
  bn.beta = &store.add(name + ".beta", Tensor<S>(Shape{dim}, S(0)), group);
  bn.run_mean = &store.add(name + ".run_mean", Tensor<S>(Shape{dim}, S(0)),
                           ParamGroup::Buffer, false);
  bn.run_var = &store.add(name + ".run_var", Tensor<S>(Shape{dim}, S(1)),
                          ParamGroup::Buffer, false);
  return bn;
}

template <typename S>
Var<S> batch_norm(Graph<S>& g, Var<S> x, const BatchNorm<S>& bn, bool training) {
  if (x.val().rank() != 2) throw ShapeError("batch_norm expects (B, D)");
  const std::int64_t B = x.val().dim(0), D = x.val().dim(1);
  Var<S> gamma = g.param(*bn.gamma);
  Var<S> beta = g.param(*bn.beta);
  const bool use_batch_stats = training && B >= 2;

  Tensor<S> mean(Shape{D}), invstd(Shape{D});
  if (use_batch_stats) {
    auto v = x.val().data();
    for (std::int64_t j = 0; j < D; ++j) {
      S mu = 0;
      for (std::int64_t i = 0; i < B; ++i) mu += v[i * D + j];
      mu /= static_cast<S>(B);
      S var = 0;
      for (std::int64_t i = 0; i < B; ++i) {
        const S c = v[i * D + j] - mu;
        var += c * c;
      }
      var /= static_cast<S>(B);
      mean.at(j) = mu;
      invstd.at(j) = S(1) / std::sqrt(var + bn.eps);
      // running-buffer update happens at record time, once per forward
      auto rm = bn.run_mean->value.data();
      auto rv = bn.run_var->value.data();
      rm[static_cast<std::size_t>(j)] =
          (S(1) - bn.momentum) * rm[static_cast<std::size_t>(j)] + bn.momentum * mu;
      rv[static_cast<std::size_t>(j)] =
          (S(1) - bn.momentum) * rv[static_cast<std::size_t>(j)] + bn.momentum * var;
    }
  } else {
    auto rm = bn.run_mean->value.data();
    auto rv = bn.run_var->value.data();
    for (std::int64_t j = 0; j < D; ++j) {
      mean.at(j) = rm[static_cast<std::size_t>(j)];
      invstd.at(j) = S(1) / std::sqrt(rv[static_cast<std::size_t>(j)] + bn.eps);
    }
  }

  Tensor<S> xhat(Shape{B, D});
  {
    auto v = x.val().data();
    auto h = xhat.data();
    for (std::int64_t i = 0; i < B; ++i)
      for (std::int64_t j = 0; j < D; ++j)
        h[i * D + j] = (v[i * D + j] - mean.at(j)) * invstd.at(j);
  }
  Tensor<S> out(Shape{B, D});
  {
    auto gv = gamma.val().data();
    auto bv = beta.val().data();
    auto h = xhat.data();
    auto o = out.data();
    for (std::int64_t i = 0; i < B; ++i)
      for (std::int64_t j = 0; j < D; ++j)
        o[i * D + j] = gv[j] * h[i * D + j] + bv[j];
  }

  const int xi = x.idx, gi = gamma.idx, bi = beta.idx;
  return g.push(
      std::move(out), {xi, gi, bi},
      [xi, gi, bi, B, D, use_batch_stats, xhat = std::move(xhat),
       invstd = std::move(invstd)](Graph<S>& gr, int self) {
        const auto up = gr.node(self).grad.data();
        const auto h = xhat.data();
        const auto gv = gr.node(gi).value.data();
        auto dx = gr.grad_buf(xi).data();
        auto dgamma = gr.grad_buf(gi).data();
        auto dbeta = gr.grad_buf(bi).data();
        for (std::int64_t j = 0; j < D; ++j) {
          S sum_up = 0, sum_uph = 0;
          for (std::int64_t i = 0; i < B; ++i) {
            sum_up += up[i * D + j];
            sum_uph += up[i * D + j] * h[i * D + j];
          }
          dbeta[j] += sum_up;
          dgamma[j] += sum_uph;
          const S k = gv[j] * invstd.at(j);
          if (use_batch_stats) {
            const S mu_up = sum_up / static_cast<S>(B);
            const S mu_uph = sum_uph / static_cast<S>(B);
            for (std::int64_t i = 0; i < B; ++i)
              dx[i * D + j] +=
                  k * (up[i * D + j] - mu_up - h[i * D + j] * mu_uph);
          } else {
            for (std::int64_t i = 0; i < B; ++i) dx[i * D + j] += k * up[i * D + j];
          }
        }
      },
      "batch_norm");
}

// ---------------------------------------------------------------------------
// Multi-head attention core. Q, K, V are (N, D) with N = blocks * block;
// attention is full (no causal mask) within each consecutive block of
// `block` rows, independently per block and per head.
// ---------------------------------------------------------------------------

template <typename S>
Var<S> mha_block(Var<S> q, Var<S> k, Var<S> v, int heads, std::int64_t block,
                 const char* axis = "") {
  detail::check_same_graph(q, k);
  detail::check_same_graph(q, v);
  detail::check_same_shape(q, k, "mha_block");
  detail::check_same_shape(q, v, "mha_block");
  const std::int64_t N = q.val().rows(), D = q.val().cols();
  if (heads < 1 || D % heads != 0)
    throw ShapeError("token dim " + std::to_string(D) +
                     " not divisible by heads " + std::to_string(heads));
  if (block < 1 || N % block != 0)
    throw ShapeError("sequence length not a multiple of block size");
  const std::int64_t nblocks = N / block;
  const std::int64_t dh = D / heads;
  const S scale = S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh)));

  Tensor<S> probs(Shape{nblocks * heads, block, block});
  Tensor<S> out(Shape{N, D});
  const S* qs = q.val().ptr();
  const S* ks = k.val().ptr();
  const S* vs = v.val().ptr();
  S* os = out.ptr();
  S* ps = probs.ptr();
  for (std::int64_t b = 0; b < nblocks; ++b) {
    for (int h = 0; h < heads; ++h) {
      S* P = ps + (b * heads + h) * block * block;
      for (std::int64_t i = 0; i < block; ++i) {
        const S* qi = qs + (b * block + i) * D + h * dh;
        S* prow = P + i * block;
        S mx = -std::numeric_limits<S>::infinity();
        for (std::int64_t j = 0; j < block; ++j) {
          const S* kj = ks + (b * block + j) * D + h * dh;
          S dot = 0;
          for (std::int64_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          prow[j] = dot * scale;
          mx = std::max(mx, prow[j]);
        }
        S denom = 0;
        for (std::int64_t j = 0; j < block; ++j) {
          prow[j] = std::exp(prow[j] - mx);
          denom += prow[j];
        }
        for (std::int64_t j = 0; j < block; ++j) prow[j] /= denom;
        S* oi = os + (b * block + i) * D + h * dh;
        for (std::int64_t j = 0; j < block; ++j) {
          const S* vj = vs + (b * block + j) * D + h * dh;
          const S p = prow[j];
          for (std::int64_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }

  if (q.g->stats)
    q.g->stats->attention.push_back(
        {axis, block, static_cast<std::int64_t>(heads), nblocks});

  const int qi_idx = q.idx, ki_idx = k.idx, vi_idx = v.idx;
  return q.g->push(
      std::move(out), {qi_idx, ki_idx, vi_idx},
      [qi_idx, ki_idx, vi_idx, heads, block, nblocks, dh, D, scale,
       probs = std::move(probs)](Graph<S>& g, int self) {
        const S* up = g.node(self).grad.ptr();
        const S* qs = g.node(qi_idx).value.ptr();
        const S* ks = g.node(ki_idx).value.ptr();
        const S* vs = g.node(vi_idx).value.ptr();
        S* dq = g.grad_buf(qi_idx).ptr();
        S* dk = g.grad_buf(ki_idx).ptr();
        S* dv = g.grad_buf(vi_idx).ptr();
        const S* ps = probs.ptr();
        std::vector<S> dS(static_cast<std::size_t>(block * block));
        for (std::int64_t b = 0; b < nblocks; ++b) {
          for (int h = 0; h < heads; ++h) {
            const S* P = ps + (b * heads + h) * block * block;
            // dV += P^T dO ; dP = dO V^T
            for (std::int64_t i = 0; i < block; ++i) {
              const S* uo = up + (b * block + i) * D + h * dh;
              const S* prow = P + i * block;
              S rowdot = 0;
              for (std::int64_t j = 0; j < block; ++j) {
                const S* vj = vs + (b * block + j) * D + h * dh;
                S* dvj = dv + (b * block + j) * D + h * dh;
                S dp = 0;
                for (std::int64_t c = 0; c < dh; ++c) {
                  dp += uo[c] * vj[c];
                  dvj[c] += prow[j] * uo[c];
                }
                dS[static_cast<std::size_t>(i * block + j)] = dp;
                rowdot += dp * prow[j];
              }
              // softmax backward: dS = P (dP - rowdot), then attention scale
              for (std::int64_t j = 0; j < block; ++j) {
                auto& s = dS[static_cast<std::size_t>(i * block + j)];
                s = prow[j] * (s - rowdot) * scale;
              }
            }
            for (std::int64_t i = 0; i < block; ++i) {
              const S* qrow = qs + (b * block + i) * D + h * dh;
              S* dqi = dq + (b * block + i) * D + h * dh;
              for (std::int64_t j = 0; j < block; ++j) {
                const S s = dS[static_cast<std::size_t>(i * block + j)];
                const S* kj = ks + (b * block + j) * D + h * dh;
                S* dkj = dk + (b * block + j) * D + h * dh;
                for (std::int64_t c = 0; c < dh; ++c) {
                  dqi[c] += s * kj[c];
                  dkj[c] += s * qrow[c];
                }
              }
            }
          }
        }
      },
      "mha_block");
}

template <typename S>
struct Attention {
  Linear<S> q, k, v, o;
};

template <typename S>
Attention<S> make_attention(ParamStore<S>& store, const std::string& name,
                            std::int64_t dim, Rng& rng, ParamGroup group) {
  Attention<S> a;
  a.q = make_linear(store, name + ".q", dim, dim, rng, group);
  a.k = make_linear(store, name + ".k", dim, dim, rng, group);
  a.v = make_linear(store, name + ".v", dim, dim, rng, group);
  a.o = make_linear(store, name + ".o", dim, dim, rng, group);
  return a;
}

// Standard multi-head attention over one or more blocks of tokens
// (block = sequence length per independent batch item).
template <typename S>
Var<S> multi_head_attention(Graph<S>& g, Var<S> tokens, const Attention<S>& at,
                            int heads, std::int64_t block, const char* axis = "") {
  Var<S> q = linear(g, tokens, at.q);
  Var<S> k = linear(g, tokens, at.k);
  Var<S> v = linear(g, tokens, at.v);
  Var<S> core = mha_block(q, k, v, heads, block, axis);
  return linear(g, core, at.o);
}

// ---------------------------------------------------------------------------
// Pre-norm Transformer sublayer with ScaleNorm:
//   h = x + Dropout(Attn(SN(x)));  y = h + Dropout(FFN(SN(h)))
// Dropout sits on the attention and feed-forward connections only.
// ---------------------------------------------------------------------------

template <typename S>
struct TransformerSublayer {
  Attention<S> attn;
  Linear<S> ffn1, ffn2;
  Param<S>* norm1_gain = nullptr;
  Param<S>* norm2_gain = nullptr;
  int heads = 4;
};

template <typename S>
TransformerSublayer<S> make_sublayer(ParamStore<S>& store,
                                     const std::string& name, std::int64_t dim,
                                     std::int64_t ffn_hidden, int heads,
                                     Rng& rng, ParamGroup group) {
  TransformerSublayer<S> s;
  s.attn = make_attention(store, name + ".attn", dim, rng, group);
  s.ffn1 = make_linear(store, name + ".ffn1", dim, ffn_hidden, rng, group);
  s.ffn2 = make_linear(store, name + ".ffn2", ffn_hidden, dim, rng, group);
  const S gain0 = static_cast<S>(std::sqrt(static_cast<double>(dim)));
  s.norm1_gain = &store.add(name + ".norm1.g", Tensor<S>::scalar(gain0), group);
  s.norm2_gain = &store.add(name + ".norm2.g", Tensor<S>::scalar(gain0), group);
  s.heads = heads;
  return s;
}

template <typename S>
Var<S> sublayer_forward(Graph<S>& g, Var<S> x, const TransformerSublayer<S>& s,
                        std::int64_t block, double drop_p, bool training,
                        Rng* rng, const char* axis = "") {
  Var<S> a = multi_head_attention(g, scale_norm(x, g.param(*s.norm1_gain)),
                                  s.attn, s.heads, block, axis);
  Var<S> h = add(x, dropout(a, drop_p, training, rng));
  Var<S> f = linear(g, relu(linear(g, scale_norm(h, g.param(*s.norm2_gain)), s.ffn1)),
                    s.ffn2);
  return add(h, dropout(f, drop_p, training, rng));
}

}  // namespace duett
