// Self-supervised pre-training: dual-axis masking, presence/value heads,
// the masked reconstruction loss, and the pre-training loop.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "duett/model.hpp"
#include "duett/optim.hpp"

namespace duett {

// Masked whole event rows and whole time-bin columns (0-based). The static
// row and the [REP] column are never maskable.
struct MaskSpec {
  std::vector<int> events;  // subset of {0..n_e-1}
  std::vector<int> bins;    // subset of {0..n_t-1}

  bool empty() const { return events.empty() && bins.empty(); }
};

// Uniform without-replacement draws of k_e event rows and k_t bin columns.
inline MaskSpec sample_mask(int n_e, int n_t, int k_e, int k_t, Rng& rng) {
  if (k_e < 0 || k_e > n_e || k_t < 0 || k_t > n_t)
    throw ConfigError("sample_mask: k out of range");
  if (k_e + k_t < 1) throw ConfigError("sample_mask: k_e + k_t must be >= 1");
  MaskSpec spec;
  spec.events = rng.sample_without_replacement(n_e, k_e);
  spec.bins = rng.sample_without_replacement(n_t, k_t);
  return spec;
}

// Replace masked coordinates of Phi with the [MASK] token. Gradients at
// masked coordinates flow to the mask token only; the original embeddings
// there receive exactly zero gradient.
template <typename S>
Var<S> apply_mask(Graph<S>& g, Var<S> phi, Var<S> mask_token, const MaskSpec& spec,
                  int n_e, int n_t) {
  if (phi.val().rank() != 4) throw ShapeError("apply_mask expects (B,E,T1,d)");
  const std::int64_t B = phi.val().dim(0), E = phi.val().dim(1),
                     T1 = phi.val().dim(2), d = phi.val().dim(3);
  if (mask_token.val().numel() != d)
    throw ShapeError("apply_mask: mask token size mismatch");
  for (int i : spec.events)
    if (i < 0 || i >= n_e) throw ShapeError("apply_mask: event index out of range");
  for (int j : spec.bins)
    if (j < 0 || j >= n_t) throw ShapeError("apply_mask: bin index out of range");
  if (spec.empty()) return phi;

  // Cell-level mask: masked event rows across bins 1..n_t, masked bin
  // columns across event rows 1..n_e. Static row and [REP] column excluded.
  std::vector<char> cell(static_cast<std::size_t>(E * T1), 0);
  for (int i : spec.events)
    for (int j = 0; j < n_t; ++j) cell[static_cast<std::size_t>(i * T1 + j)] = 1;
  for (int j : spec.bins)
    for (int i = 0; i < n_e; ++i) cell[static_cast<std::size_t>(i * T1 + j)] = 1;

  Tensor<S> out = phi.val().clone();
  auto o = out.data();
  const auto mt = mask_token.val().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < E; ++i)
      for (std::int64_t j = 0; j < T1; ++j)
        if (cell[static_cast<std::size_t>(i * T1 + j)])
          std::copy_n(mt.data(), d, o.data() + ((b * E + i) * T1 + j) * d);

  const int pi = phi.idx, mi = mask_token.idx;
  return g.push(
      std::move(out), {pi, mi},
      [pi, mi, B, E, T1, d, cell = std::move(cell)](Graph<S>& gr, int self) {
        const auto up = gr.node(self).grad.data();
        auto dp = gr.grad_buf(pi).data();
        auto dm = gr.grad_buf(mi).data();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t i = 0; i < E; ++i)
            for (std::int64_t j = 0; j < T1; ++j) {
              const auto off = ((b * E + i) * T1 + j) * d;
              if (cell[static_cast<std::size_t>(i * T1 + j)]) {
                for (std::int64_t c = 0; c < d; ++c) dm[c] += up[off + c];
              } else {
                for (std::int64_t c = 0; c < d; ++c) dp[off + c] += up[off + c];
              }
            }
      },
      "apply_mask");
}

struct SslLossReport {
  double total = 0.0;
  double value = 0.0;
  double presence = 0.0;
  double event_axis = 0.0;  // per-axis totals (value + alpha * presence)
  double time_axis = 0.0;
};

template <typename S>
struct SslLossOut {
  Var<S> total;
  SslLossReport report;
};

// Masked reconstruction loss. For each masked event row the event-axis
// heads predict all n_t (value, presence) targets from the flattened row of
// Z; for each masked bin column the time-axis heads predict all n_e targets
// from the flattened column. Per cell:
//   L = 1[m>0] (y_val - x)^2 + alpha * BCE(y_pres, 1[m>0])
// averaged over the cells of each masked slice, then over masked slices.
// A cell masked by both axes contributes once per axis. Targets are the
// pre-mask (x, m). `value_weight` is 0 in the presence-loss-only ablation.
template <typename S>
SslLossOut<S> ssl_loss(Graph<S>& g, DuettModel<S>& model, Var<S> z,
                       const Batch& batch, const MaskSpec& spec, double alpha,
                       double value_weight = 1.0) {
  if (spec.empty()) throw ConfigError("ssl_loss: empty mask spec");
  const ModelConfig& cfg = model.config();
  const std::int64_t B = batch.B;
  const std::int64_t E = cfg.event_rows(), T1 = cfg.time_cols(), d = cfg.d;
  const int n_e = cfg.n_e, n_t = cfg.n_t;
  const SslHeads<S>& heads = model.ssl_heads();

  Var<S> z_event = reshape(z, {B * E, T1 * d});
  Var<S> z_time;
  if (!spec.bins.empty()) z_time = reshape(transpose_12(z), {B * T1, E * d});

  const S inv_slices = S(1) / static_cast<S>(spec.events.size() + spec.bins.size());
  Var<S> value_sum, pres_sum;
  double event_axis = 0.0, time_axis = 0.0;

  auto accumulate = [&](Var<S> val_term, Var<S> pres_term, double& axis_total) {
    axis_total += static_cast<double>(val_term.val().at(0)) * value_weight +
                  alpha * static_cast<double>(pres_term.val().at(0));
    value_sum = value_sum.valid() ? add(value_sum, val_term) : val_term;
    pres_sum = pres_sum.valid() ? add(pres_sum, pres_term) : pres_term;
  };

  for (int i : spec.events) {
    std::vector<std::int64_t> rows(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) rows[static_cast<std::size_t>(b)] = b * E + i;
    Var<S> tok = gather_rows(z_event, std::move(rows));
    Var<S> val_pred = linear(g, tok, heads.event_value);      // (B, n_t)
    Var<S> pres_logit = linear(g, tok, heads.event_presence);  // (B, n_t)

    Tensor<S> target(Shape{B, n_t}), observed(Shape{B, n_t});
    for (std::int64_t b = 0; b < B; ++b)
      for (int j = 0; j < n_t; ++j) {
        target.at2(b, j) = static_cast<S>(batch.xv(b, i, j));
        observed.at2(b, j) = batch.mv(b, i, j) > 0 ? S(1) : S(0);
      }
    Var<S> diff = sub(val_pred, g.input(target, "ssl_target"));
    Var<S> val_term = mean_all(mul_const(mul(diff, diff), observed.clone(), "observed"));
    Var<S> pres_term = mean_all(bce_with_logits(pres_logit, std::move(observed)));
    accumulate(val_term, pres_term, event_axis);
  }

  for (int j : spec.bins) {
    std::vector<std::int64_t> rows(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) rows[static_cast<std::size_t>(b)] = b * T1 + j;
    Var<S> tok = gather_rows(z_time, std::move(rows));
    Var<S> val_pred = linear(g, tok, heads.time_value);      // (B, n_e)
    Var<S> pres_logit = linear(g, tok, heads.time_presence);  // (B, n_e)

    Tensor<S> target(Shape{B, n_e}), observed(Shape{B, n_e});
    for (std::int64_t b = 0; b < B; ++b)
      for (int i = 0; i < n_e; ++i) {
        target.at2(b, i) = static_cast<S>(batch.xv(b, i, j));
        observed.at2(b, i) = batch.mv(b, i, j) > 0 ? S(1) : S(0);
      }
    Var<S> diff = sub(val_pred, g.input(target, "ssl_target"));
    Var<S> val_term = mean_all(mul_const(mul(diff, diff), observed.clone(), "observed"));
    Var<S> pres_term = mean_all(bce_with_logits(pres_logit, std::move(observed)));
    accumulate(val_term, pres_term, time_axis);
  }

  Var<S> value_avg = scalar_mul(value_sum, inv_slices * static_cast<S>(value_weight));
  Var<S> pres_avg = scalar_mul(pres_sum, inv_slices);
  SslLossOut<S> out;
  out.total = add(value_avg, scalar_mul(pres_avg, static_cast<S>(alpha)));
  out.report.value = static_cast<double>(value_avg.val().at(0));
  out.report.presence = static_cast<double>(pres_avg.val().at(0));
  out.report.total = static_cast<double>(out.total.val().at(0));
  out.report.event_axis = event_axis * static_cast<double>(inv_slices);
  out.report.time_axis = time_axis * static_cast<double>(inv_slices);
  return out;
}

// ---------------------------------------------------------------------------
// Pre-training loop (float path). Per batch: sample one mask, apply it,
// forward, loss, AdamW with the warmup/inverse-sqrt schedule. Validation
// masks come from a fixed seed so per-epoch losses are comparable; the
// returned parameters are the snapshot of the epoch with the lowest
// validation loss.
// ---------------------------------------------------------------------------

struct TrainHooks {
  // epoch (1-based), train loss, val loss, value/presence components, lr
  std::function<void(int, double, double, double, double, double)> on_epoch;
};

struct PretrainConfig {
  int epochs = 40;
  std::int64_t batch_size = 32;
  double peak_lr = 1e-3;
  std::int64_t warmup_steps = 100;
  double weight_decay = 1e-4;
  double alpha = 1.0;
  int k_e = 1;
  int k_t = 1;
  double value_weight = 1.0;  // 0 in the presence-loss-only ablation
  std::uint64_t seed = 2020;
};

struct PretrainResult {
  std::vector<Tensor<float>> best_params;  // snapshot, store order
  int best_epoch = 0;
  double best_val_loss = 0.0;
  double first_val_loss = 0.0;
  std::vector<std::array<double, 5>> epoch_log;  // train, val, value, pres, lr
  GraphStats stats;                               // from the first step
};

PretrainResult pretrain(DuettModel<float>& model,
                        const std::vector<PreparedStay>& train,
                        const std::vector<PreparedStay>& val,
                        const PretrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace duett
