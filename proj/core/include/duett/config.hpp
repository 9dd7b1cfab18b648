// Flat key=value run configuration. Unknown keys are rejected; every run
// writes its resolved configuration (canonical serialization) next to its
// outputs, and the FNV-1a hash of that text ties checkpoints to configs.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "duett/data.hpp"
#include "duett/model.hpp"

namespace duett {

struct RunConfig {
  // architecture
  int d = 16;
  int layers = 2;  // key "layers" (alias "L")
  int n_t = 32;
  int n_heads = 4;
  std::int64_t ffn_hidden = 512;
  double dropout = 0.1;
  std::string aggregation = "last";
  std::string window_days = "auto";  // positive number or "auto"
  bool final_norm = true;
  bool shared_axis_embeddings = true;

  // ssl + optimization
  double alpha = 1.0;
  int k_e = 1;
  int k_t = 1;
  int epochs = 300;           // pre-training
  int finetune_epochs = 30;   // fine-tuning / probing
  double peak_lr = 1e-3;
  double finetune_peak_lr = 3e-4;
  std::int64_t warmup_steps = 100;
  double weight_decay = 1e-4;
  std::int64_t batch_size = 32;
  std::uint64_t seed = 2020;
  std::string task;  // comma list of label names; empty = all labels
  bool normalize_static = true;

  // ablation flags (Table-2-style variants)
  bool event_only = false;
  bool time_only = false;
  bool value_loss_only = false;
  bool presence_loss_only = false;
  bool mask_bins_only = false;
  bool mask_events_only = false;
  bool no_ssl = false;
  bool first_layer_embed_only = false;
  bool late_static_fusion = false;

  // synthetic generator (generate subcommand)
  int synth_n_e = 12;
  int synth_n_static = 4;
  int synth_n_stays = 1000;
  int synth_grid_bins = 16;
  double synth_window_days = 2.0;
  std::string synth_sparsity = "0.6";  // single value or comma list
  std::string synth_links;             // "src>tgt@lag*weight;..."
  double synth_noise_sigma = 0.1;
  double synth_label_scale = 3.0;
  double synth_label_bias = 0.0;

  void validate() const;
  std::string serialize() const;       // canonical key order
  std::string config_hash() const;     // FNV-1a64 of serialize(), hex

  std::optional<double> window() const;  // nullopt = auto
  SynthConfig synth_config() const;
  // Effective mask sizes after the masking-dimension ablations.
  int effective_k_e() const { return mask_bins_only ? 0 : k_e; }
  int effective_k_t() const { return mask_events_only ? 0 : k_t; }
  double ssl_alpha() const { return value_loss_only ? 0.0 : alpha; }
  double ssl_value_weight() const { return presence_loss_only ? 0.0 : 1.0; }
};

RunConfig parse_config(std::istream& in);
RunConfig load_config(const std::string& path);
void apply_key(RunConfig& cfg, const std::string& key, const std::string& value);

// ModelConfig for data with the given dimensions, ablation flags applied.
ModelConfig make_model_config(const RunConfig& cfg, int n_e, int n_static,
                              int n_labels, bool probe_head = false);

}  // namespace duett
