// Fixed, seeded benchmark suites over the synthetic generator: masked
// reconstruction across attention variants, the pretraining-vs-scratch
// gain, and the label-fraction sweep. Results are a pure function of
// (options, seed).

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "duett/data.hpp"

namespace duett {

inline const std::vector<std::uint64_t>& bench_seeds() {
  static const std::vector<std::uint64_t> seeds{2020, 2021, 2022};
  return seeds;
}

struct BenchOptions {
  int n_stays = 900;  // split 600/150/150 with fractions 2/3, 1/6, 1/6
  int n_e = 12;
  int n_t = 16;
  int d = 16;
  int layers = 2;
  std::int64_t ffn_hidden = 256;  // slimmer than the model default for CPU budgets
  int pretrain_epochs = 20;
  int finetune_epochs = 15;
  std::int64_t batch_size = 32;
  double peak_lr = 1e-3;
  double finetune_peak_lr = 4e-4;
  double noise_sigma = 0.05;
  int target_event = 3;  // reconstruction target; fed by planted links
};

// Synthetic universe with one lag-0 cross-event link and one lagged link
// into the reconstruction target.
SynthConfig reconstruction_synth_config(const BenchOptions& opt);
// Classification universe: label from the late-window latent and statics.
SynthConfig classification_synth_config(const BenchOptions& opt);

struct ReconstructionBenchResult {
  double duett_mse = 0.0;
  double event_only_mse = 0.0;
  double time_only_mse = 0.0;
  double mean_baseline_mse = 0.0;  // predict train-mean anchor
  double target_variance = 0.0;    // over observed target cells, val split
};

// Pre-trains the dual, event-only and time-only variants identically and
// evaluates masked reconstruction of the target event over the validation
// split (pooled squared error over observed cells).
ReconstructionBenchResult bench_reconstruction(std::uint64_t seed,
                                               const BenchOptions& opt = {});

struct SslGainResult {
  double pretrained_pr_auc = 0.0;
  double scratch_pr_auc = 0.0;
  double positive_rate = 0.0;  // test-split baseline for PR-AUC
};

// Fine-tunes with and without pre-training at a 10% labelled fraction,
// identical budgets; PR-AUC on the held-out test split.
SslGainResult bench_ssl_gain(std::uint64_t seed, const BenchOptions& opt = {});

struct SweepRow {
  double fraction = 0.0;
  double pr_auc = 0.0;  // averaged over finetune seeds
  std::vector<double> per_seed;
};

// Shared pretraining (first seed), then per finetune seed a stay-level
// subsample at each fraction.
std::vector<SweepRow> bench_label_sweep(const std::vector<double>& fractions,
                                        const std::vector<std::uint64_t>& seeds,
                                        const BenchOptions& opt = {});

std::string sweep_to_csv(const std::vector<SweepRow>& rows);

}  // namespace duett
