// Supervised fine-tuning from the [REP] representation, frozen-encoder
// linear probing, class-weighted BCE, and masked-event reconstruction.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "duett/metrics.hpp"
#include "duett/optim.hpp"
#include "duett/ssl.hpp"

namespace duett {

// Class-balanced BCE from logits: w_pos = 0.5/rho, w_neg = 0.5/(1-rho) per
// label, mean over samples, summed over labels. rho is the positive
// fraction of each label on the training split.
template <typename S>
Var<S> weighted_bce(Graph<S>& g, Var<S> logits, const Tensor<S>& targets,
                    const std::vector<double>& rho) {
  const std::int64_t B = logits.val().rows(), L = logits.val().cols();
  if (!logits.val().same_shape(targets))
    throw ShapeError("weighted_bce: target shape mismatch");
  if (static_cast<std::int64_t>(rho.size()) != L)
    throw ShapeError("weighted_bce: rho length mismatch");
  Tensor<S> weights(Shape{B, L});
  for (std::int64_t l = 0; l < L; ++l) {
    if (!(rho[static_cast<std::size_t>(l)] > 0.0 && rho[static_cast<std::size_t>(l)] < 1.0))
      throw DataError("weighted_bce: positive fraction must be in (0,1), label " +
                      std::to_string(l));
    const S w_pos = static_cast<S>(0.5 / rho[static_cast<std::size_t>(l)]);
    const S w_neg = static_cast<S>(0.5 / (1.0 - rho[static_cast<std::size_t>(l)]));
    for (std::int64_t b = 0; b < B; ++b)
      weights.at2(b, l) = targets.at2(b, l) > S(0.5) ? w_pos : w_neg;
  }
  Var<S> bce = bce_with_logits(logits, targets.clone());
  return scalar_mul(sum_all(mul_const(bce, std::move(weights), "bce_weights")),
                    S(1) / static_cast<S>(B));
}

// Positive fraction per label over a prepared split.
std::vector<double> label_positive_fractions(const std::vector<PreparedStay>& stays,
                                             int n_labels);

struct FinetuneConfig {
  int epochs = 30;
  std::int64_t batch_size = 32;
  double peak_lr = 3e-4;
  std::int64_t warmup_steps = 50;
  double weight_decay = 1e-4;
  bool freeze_encoder = false;  // linear-probe mode
  int top_k_average = 5;
  std::uint64_t seed = 2020;
};

struct FinetuneResult {
  std::vector<Tensor<float>> final_params;       // top-k averaged snapshot
  std::vector<std::array<double, 4>> epoch_log;  // train loss, val roc, val pr, lr
  std::vector<int> averaged_epochs;              // 1-based
  EvalReport val_report;                         // metrics of the final model
};

struct FinetuneHooks {
  std::function<void(int, double, double, double, double)> on_epoch;
};

// Trains the classification head (plus encoder and [REP] unless frozen);
// the final weights are the arithmetic mean of the full parameter sets of
// the top-k epochs by validation PR-AUC (macro over labels). The model is
// left holding the averaged weights.
FinetuneResult finetune(DuettModel<float>& model,
                        const std::vector<PreparedStay>& train,
                        const std::vector<PreparedStay>& val,
                        const FinetuneConfig& cfg, const FinetuneHooks& hooks = {});

// Label probabilities for a split, eval mode: (stays x labels).
std::vector<std::vector<double>> predict_probs(DuettModel<float>& model,
                                               const std::vector<PreparedStay>& stays,
                                               std::int64_t batch_size = 64);

EvalReport evaluate_model(DuettModel<float>& model,
                          const std::vector<PreparedStay>& stays,
                          const std::vector<std::string>& label_names,
                          std::int64_t batch_size = 64);

// Masked-event reconstruction: masks the target event row, runs the
// encoder, applies the event-axis value head, and reports per-bin
// predictions plus the MSE over bins that were actually observed (absent
// when the target was never observed in the stay).
struct ReconstructResult {
  std::vector<double> predictions;  // n_t values
  std::vector<char> observed;       // m > 0 per bin
  std::optional<double> mse;
};

ReconstructResult reconstruct_masked(DuettModel<float>& model,
                                     const PreparedStay& stay, int target_event);

}  // namespace duett
