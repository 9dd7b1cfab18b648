#include "duett/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "duett/error.hpp"

namespace duett {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
  }
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
  }
}

}  // namespace

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "d") cfg.d = static_cast<int>(parse_int(key, value));
  else if (key == "layers" || key == "L") cfg.layers = static_cast<int>(parse_int(key, value));
  else if (key == "n_t") cfg.n_t = static_cast<int>(parse_int(key, value));
  else if (key == "n_heads") cfg.n_heads = static_cast<int>(parse_int(key, value));
  else if (key == "ffn_hidden") cfg.ffn_hidden = parse_int(key, value);
  else if (key == "dropout") cfg.dropout = parse_double(key, value);
  else if (key == "aggregation") cfg.aggregation = value;
  else if (key == "window_days") cfg.window_days = value;
  else if (key == "final_norm") cfg.final_norm = parse_bool(key, value);
  else if (key == "shared_axis_embeddings") cfg.shared_axis_embeddings = parse_bool(key, value);
  else if (key == "alpha") cfg.alpha = parse_double(key, value);
  else if (key == "k_e") cfg.k_e = static_cast<int>(parse_int(key, value));
  else if (key == "k_t") cfg.k_t = static_cast<int>(parse_int(key, value));
  else if (key == "epochs") cfg.epochs = static_cast<int>(parse_int(key, value));
  else if (key == "finetune_epochs") cfg.finetune_epochs = static_cast<int>(parse_int(key, value));
  else if (key == "peak_lr") cfg.peak_lr = parse_double(key, value);
  else if (key == "finetune_peak_lr") cfg.finetune_peak_lr = parse_double(key, value);
  else if (key == "warmup_steps") cfg.warmup_steps = parse_int(key, value);
  else if (key == "weight_decay") cfg.weight_decay = parse_double(key, value);
  else if (key == "batch_size") cfg.batch_size = parse_int(key, value);
  else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
  else if (key == "task") cfg.task = value;
  else if (key == "normalize_static") cfg.normalize_static = parse_bool(key, value);
  else if (key == "event_only") cfg.event_only = parse_bool(key, value);
  else if (key == "time_only") cfg.time_only = parse_bool(key, value);
  else if (key == "value_loss_only") cfg.value_loss_only = parse_bool(key, value);
  else if (key == "presence_loss_only") cfg.presence_loss_only = parse_bool(key, value);
  else if (key == "mask_bins_only") cfg.mask_bins_only = parse_bool(key, value);
  else if (key == "mask_events_only") cfg.mask_events_only = parse_bool(key, value);
  else if (key == "no_ssl") cfg.no_ssl = parse_bool(key, value);
  else if (key == "first_layer_embed_only") cfg.first_layer_embed_only = parse_bool(key, value);
  else if (key == "late_static_fusion") cfg.late_static_fusion = parse_bool(key, value);
  else if (key == "synth_n_e") cfg.synth_n_e = static_cast<int>(parse_int(key, value));
  else if (key == "synth_n_static") cfg.synth_n_static = static_cast<int>(parse_int(key, value));
  else if (key == "synth_n_stays") cfg.synth_n_stays = static_cast<int>(parse_int(key, value));
  else if (key == "synth_grid_bins") cfg.synth_grid_bins = static_cast<int>(parse_int(key, value));
  else if (key == "synth_window_days") cfg.synth_window_days = parse_double(key, value);
  else if (key == "synth_sparsity") cfg.synth_sparsity = value;
  else if (key == "synth_links") cfg.synth_links = value;
  else if (key == "synth_noise_sigma") cfg.synth_noise_sigma = parse_double(key, value);
  else if (key == "synth_label_scale") cfg.synth_label_scale = parse_double(key, value);
  else if (key == "synth_label_bias") cfg.synth_label_bias = parse_double(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line.substr(0, line.find('#')));
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected key=value, got '" + stripped + "'");
    apply_key(cfg, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse_config(in);
}

std::optional<double> RunConfig::window() const {
  if (window_days == "auto") return std::nullopt;
  const double w = parse_double("window_days", window_days);
  if (w <= 0) throw ConfigError("window_days must be positive or 'auto'");
  return w;
}

void RunConfig::validate() const {
  if (d < 1 || layers < 0 || n_t < 1 || n_heads < 1 || ffn_hidden < 1)
    throw ConfigError("architecture dims must be positive");
  if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must be in [0,1)");
  agg_from_string(aggregation);
  (void)window();
  if (alpha < 0) throw ConfigError("alpha must be >= 0");
  if (k_e < 0 || k_t < 0) throw ConfigError("k_e and k_t must be >= 0");
  if (effective_k_e() + effective_k_t() < 1 && !no_ssl)
    throw ConfigError("masking ablation leaves no masked slices (k_e + k_t == 0)");
  if (epochs < 1 || finetune_epochs < 1) throw ConfigError("epochs must be >= 1");
  if (peak_lr <= 0 || finetune_peak_lr <= 0) throw ConfigError("peak_lr must be > 0");
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (event_only && time_only)
    throw ConfigError("event_only and time_only are mutually exclusive");
  if (value_loss_only && presence_loss_only)
    throw ConfigError("value_loss_only and presence_loss_only are mutually exclusive");
  if (mask_bins_only && mask_events_only)
    throw ConfigError("mask_bins_only and mask_events_only are mutually exclusive");
  synth_config().validate();
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os.precision(17);
  os << "d=" << d << "\n"
     << "layers=" << layers << "\n"
     << "n_t=" << n_t << "\n"
     << "n_heads=" << n_heads << "\n"
     << "ffn_hidden=" << ffn_hidden << "\n"
     << "dropout=" << dropout << "\n"
     << "aggregation=" << aggregation << "\n"
     << "window_days=" << window_days << "\n"
     << "final_norm=" << (final_norm ? "true" : "false") << "\n"
     << "shared_axis_embeddings=" << (shared_axis_embeddings ? "true" : "false") << "\n"
     << "alpha=" << alpha << "\n"
     << "k_e=" << k_e << "\n"
     << "k_t=" << k_t << "\n"
     << "epochs=" << epochs << "\n"
     << "finetune_epochs=" << finetune_epochs << "\n"
     << "peak_lr=" << peak_lr << "\n"
     << "finetune_peak_lr=" << finetune_peak_lr << "\n"
     << "warmup_steps=" << warmup_steps << "\n"
     << "weight_decay=" << weight_decay << "\n"
     << "batch_size=" << batch_size << "\n"
     << "seed=" << seed << "\n"
     << "task=" << task << "\n"
     << "normalize_static=" << (normalize_static ? "true" : "false") << "\n"
     << "event_only=" << (event_only ? "true" : "false") << "\n"
     << "time_only=" << (time_only ? "true" : "false") << "\n"
     << "value_loss_only=" << (value_loss_only ? "true" : "false") << "\n"
     << "presence_loss_only=" << (presence_loss_only ? "true" : "false") << "\n"
     << "mask_bins_only=" << (mask_bins_only ? "true" : "false") << "\n"
     << "mask_events_only=" << (mask_events_only ? "true" : "false") << "\n"
     << "no_ssl=" << (no_ssl ? "true" : "false") << "\n"
     << "first_layer_embed_only=" << (first_layer_embed_only ? "true" : "false") << "\n"
     << "late_static_fusion=" << (late_static_fusion ? "true" : "false") << "\n"
     << "synth_n_e=" << synth_n_e << "\n"
     << "synth_n_static=" << synth_n_static << "\n"
     << "synth_n_stays=" << synth_n_stays << "\n"
     << "synth_grid_bins=" << synth_grid_bins << "\n"
     << "synth_window_days=" << synth_window_days << "\n"
     << "synth_sparsity=" << synth_sparsity << "\n"
     << "synth_links=" << synth_links << "\n"
     << "synth_noise_sigma=" << synth_noise_sigma << "\n"
     << "synth_label_scale=" << synth_label_scale << "\n"
     << "synth_label_bias=" << synth_label_bias << "\n";
  return os.str();
}

std::string RunConfig::config_hash() const {
  const std::string s = serialize();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

SynthConfig RunConfig::synth_config() const {
  SynthConfig sc;
  sc.n_e = synth_n_e;
  sc.n_static = synth_n_static;
  sc.n_stays = synth_n_stays;
  sc.grid_bins = synth_grid_bins;
  sc.window_days = synth_window_days;
  {
    std::stringstream ss(synth_sparsity);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) sc.sparsity.push_back(parse_double("synth_sparsity", item));
  }
  if (!synth_links.empty()) {
    std::stringstream ss(synth_links);
    std::string item;
    while (std::getline(ss, item, ';')) {
      if (item.empty()) continue;
      // "src>tgt@lag*weight"
      const auto gt = item.find('>');
      const auto at = item.find('@');
      const auto star = item.find('*');
      if (gt == std::string::npos || at == std::string::npos ||
          star == std::string::npos || !(gt < at && at < star))
        throw ConfigError("synth_links entry '" + item +
                          "' (expected src>tgt@lag*weight)");
      PlantedLink link;
      link.source = static_cast<int>(parse_int("synth_links", item.substr(0, gt)));
      link.target = static_cast<int>(parse_int("synth_links", item.substr(gt + 1, at - gt - 1)));
      link.lag_bins = static_cast<int>(parse_int("synth_links", item.substr(at + 1, star - at - 1)));
      link.weight = parse_double("synth_links", item.substr(star + 1));
      sc.links.push_back(link);
    }
  }
  sc.noise_sigma = synth_noise_sigma;
  sc.label_scale = synth_label_scale;
  sc.label_bias = synth_label_bias;
  return sc;
}

ModelConfig make_model_config(const RunConfig& cfg, int n_e, int n_static,
                              int n_labels, bool probe_head) {
  ModelConfig mc;
  mc.n_e = n_e;
  mc.n_t = cfg.n_t;
  mc.d = cfg.d;
  mc.layers = cfg.layers;
  mc.n_heads = cfg.n_heads;
  mc.ffn_hidden = cfg.ffn_hidden;
  mc.n_static = n_static;
  mc.n_labels = n_labels;
  mc.dropout = cfg.dropout;
  mc.include_static_row = !cfg.late_static_fusion;
  mc.final_norm = cfg.final_norm;
  mc.first_layer_embed_only = cfg.first_layer_embed_only;
  mc.shared_axis_embeddings = cfg.shared_axis_embeddings;
  mc.probe_head = probe_head;
  mc.plan = cfg.event_only ? AttentionPlan::EventOnly
            : cfg.time_only ? AttentionPlan::TimeOnly
                            : AttentionPlan::Dual;
  mc.validate();
  return mc;
}

}  // namespace duett
