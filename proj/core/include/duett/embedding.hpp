// Input embedding: per-cell value+count embeddings, the learned count-bin
// table, the static-variable encoder, [REP]/[MASK] tokens, and the
// continuous value embedding (CVE) for time values.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "duett/binning.hpp"
#include "duett/nn.hpp"

namespace duett {

// Observation counts map to 16 bins: identity for 0..14, 15 for >= 15.
inline int count_bin(std::int64_t count) {
  if (count < 0) throw DataError("count_bin: negative count");
  return count >= 15 ? 15 : static_cast<int>(count);
}

inline constexpr int kCountBins = 16;

template <typename S>
struct EmbedParams {
  Linear<S> cell;          // [value, p^m scalar] -> d
  Param<S>* pm = nullptr;  // (16, 1) learned count scalars
  Linear<S> static1;       // n_static -> 128
  BatchNorm<S> static_bn;  // over the hidden layer
  Linear<S> static2;       // 128 -> d
  Param<S>* rep = nullptr;   // (1, d)
  Param<S>* mask = nullptr;  // (1, d)
};

template <typename S>
EmbedParams<S> make_embed_params(ParamStore<S>& store, int n_static, int d,
                                 int static_hidden, Rng& rng) {
  EmbedParams<S> e;
  e.cell = make_linear(store, "embed.cell", 2, d, rng, ParamGroup::Encoder);
  e.pm = &store.add("embed.pm", normal_init<S>(rng, {kCountBins, 1}),
                    ParamGroup::Encoder);
  e.static1 = make_linear(store, "embed.static1", n_static, static_hidden, rng,
                          ParamGroup::Encoder);
  e.static_bn = make_batch_norm(store, "embed.static_bn",
                                static_hidden, ParamGroup::Encoder);
  e.static2 = make_linear(store, "embed.static2", static_hidden, d, rng,
                          ParamGroup::Encoder);
  e.rep = &store.add("embed.rep", normal_init<S>(rng, {1, d}), ParamGroup::RepToken);
  e.mask = &store.add("embed.mask", normal_init<S>(rng, {1, d}), ParamGroup::MaskToken);
  return e;
}

// Cell embedding for a flat list of (value, count) pairs:
// linear([x, p^m(count_bin(m))]) -> d. Values and counts enter as
// constants; gradients flow to the linear layer and the count table.
template <typename S>
Var<S> embed_cells(Graph<S>& g, const EmbedParams<S>& e,
                   const std::vector<S>& values,
                   const std::vector<std::int64_t>& counts) {
  if (values.size() != counts.size())
    throw ShapeError("embed_cells: values/counts length mismatch");
  const std::int64_t n = static_cast<std::int64_t>(values.size());
  Var<S> vcol = g.input(Tensor<S>(Shape{n, 1}, std::vector<S>(values)), "cell_values");
  std::vector<std::int64_t> bins(values.size());
  for (std::size_t i = 0; i < counts.size(); ++i) bins[i] = count_bin(counts[i]);
  Var<S> pmcol = gather_rows(g.param(*e.pm), std::move(bins));
  return linear(g, concat_cols(vcol, pmcol), e.cell);
}

// Static encoder: linear -> batch norm -> relu -> linear.
template <typename S>
Var<S> embed_static(Graph<S>& g, const EmbedParams<S>& e, Var<S> statics,
                    bool training) {
  Var<S> h = batch_norm(g, linear(g, statics, e.static1), e.static_bn, training);
  return linear(g, relu(h), e.static2);
}

// Continuous value embedding for time values: scalar -> hidden
// (round(sqrt(out_dim)), tanh) -> out_dim.
template <typename S>
struct CveParams {
  Linear<S> in;   // 1 -> hidden
  Linear<S> out;  // hidden -> out_dim
};

inline int cve_hidden_size(std::int64_t out_dim) {
  const int h = static_cast<int>(std::llround(std::sqrt(static_cast<double>(out_dim))));
  return h < 1 ? 1 : h;
}

template <typename S>
CveParams<S> make_cve(ParamStore<S>& store, const std::string& name,
                      std::int64_t out_dim, Rng& rng) {
  CveParams<S> c;
  const int hidden = cve_hidden_size(out_dim);
  c.in = make_linear(store, name + ".in", 1, hidden, rng, ParamGroup::Encoder);
  c.out = make_linear(store, name + ".out", hidden, out_dim, rng, ParamGroup::Encoder);
  return c;
}

template <typename S>
Var<S> time_cve(Graph<S>& g, const CveParams<S>& cve, Var<S> t_col) {
  return linear(g, tanh_op(linear(g, t_col, cve.in)), cve.out);
}

// ---------------------------------------------------------------------------
// Input-tensor assembly. Output Phi has shape (B, E, n_t+1, d) where E is
// n_e plus one static row when present. Per item b:
//   Phi[b, i, j]   = cell embedding of (x[b,i,j], m[b,i,j])   i < n_e, j < n_t
//   Phi[b, n_e, j] = static embedding of item b               j < n_t
//   Phi[b, i, n_t] = [REP]                                    all i
// ---------------------------------------------------------------------------

template <typename S>
Var<S> assemble_input(Graph<S>& g, Var<S> cells, Var<S> statics_emb, Var<S> rep,
                      std::int64_t B, std::int64_t n_e, std::int64_t n_t,
                      std::int64_t d, bool include_static_row) {
  const std::int64_t E = n_e + (include_static_row ? 1 : 0);
  const std::int64_t T1 = n_t + 1;
  if (cells.val().numel() != B * n_e * n_t * d)
    throw ShapeError("assemble_input: cell block size mismatch");
  if (include_static_row && statics_emb.val().numel() != B * d)
    throw ShapeError("assemble_input: static embedding size mismatch");
  if (rep.val().numel() != d)
    throw ShapeError("assemble_input: rep token size mismatch");

  Tensor<S> out(Shape{B, E, T1, d});
  auto o = out.data();
  const auto cv = cells.val().data();
  const auto rv = rep.val().data();
  auto cell_off = [=](std::int64_t b, std::int64_t i, std::int64_t j) {
    return ((b * n_e + i) * n_t + j) * d;
  };
  auto phi_off = [=](std::int64_t b, std::int64_t i, std::int64_t j) {
    return ((b * E + i) * T1 + j) * d;
  };
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t i = 0; i < n_e; ++i)
      for (std::int64_t j = 0; j < n_t; ++j)
        std::copy_n(cv.data() + cell_off(b, i, j), d, o.data() + phi_off(b, i, j));
    if (include_static_row) {
      const auto sv = statics_emb.val().data();
      for (std::int64_t j = 0; j < n_t; ++j)
        std::copy_n(sv.data() + b * d, d, o.data() + phi_off(b, n_e, j));
    }
    for (std::int64_t i = 0; i < E; ++i)
      std::copy_n(rv.data(), d, o.data() + phi_off(b, i, n_t));
  }

  std::vector<int> parents{cells.idx, rep.idx};
  if (include_static_row) parents.push_back(statics_emb.idx);
  const int ci = cells.idx, si = statics_emb.idx, ri = rep.idx;
  return g.push(
      std::move(out), std::move(parents),
      [=](Graph<S>& gr, int self) {
        const auto up = gr.node(self).grad.data();
        auto dc = gr.grad_buf(ci).data();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t i = 0; i < n_e; ++i)
            for (std::int64_t j = 0; j < n_t; ++j)
              for (std::int64_t c = 0; c < d; ++c)
                dc[cell_off(b, i, j) + c] += up[phi_off(b, i, j) + c];
        if (include_static_row) {
          auto ds = gr.grad_buf(si).data();
          for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t j = 0; j < n_t; ++j)
              for (std::int64_t c = 0; c < d; ++c)
                ds[b * d + c] += up[phi_off(b, n_e, j) + c];
        }
        auto dr = gr.grad_buf(ri).data();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t i = 0; i < E; ++i)
            for (std::int64_t c = 0; c < d; ++c)
              dr[c] += up[phi_off(b, i, n_t) + c];
      },
      "assemble_input");
}

}  // namespace duett
