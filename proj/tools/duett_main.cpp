// Command-line entry point: data generation, preprocessing, pre-training,
// fine-tuning, probing, evaluation, masked reconstruction, label-fraction
// sweeps and the ablation matrix.
//
// Exit codes: 0 success, 2 usage, 3 invalid config, 4 data error,
// 5 numeric divergence.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "duett/bench.hpp"
#include "duett/checkpoint.hpp"
#include "duett/config.hpp"
#include "duett/finetune.hpp"
#include "duett/pipeline.hpp"

namespace fs = std::filesystem;
using namespace duett;

namespace {

struct LoadedSplit {
  std::vector<PreparedStay> stays;
  Vocabulary vocab;
  NormStats stats;
  std::vector<std::string> label_names;
  int n_static = 0;
};

LoadedSplit load_split(const RunConfig& cfg, const std::string& stats_path,
                       const std::string& data_path) {
  LoadedSplit out;
  std::tie(out.stats, out.vocab) = load_norm_stats(stats_path);
  Dataset ds = load_stays(data_path);
  out.label_names = resolve_label_names(ds.stays, cfg.task);
  out.n_static = ds.stays.empty() ? 0 : static_cast<int>(ds.stays.front().statics.size());
  out.stays = prepare_stays(ds.stays, out.vocab, cfg.n_t, cfg.window(),
                            agg_from_string(cfg.aggregation), out.label_names);
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << text;
}

void write_resolved_config(const RunConfig& cfg, const std::string& beside) {
  write_text(beside + ".config.txt", cfg.serialize());
}

std::string run_report_json(DuettModel<float>& model, const GraphStats& stats,
                            const RunConfig& cfg) {
  std::ostringstream os;
  os << "{\n  \"config_hash\": \"" << cfg.config_hash() << "\",\n";
  os << "  \"param_counts\": {\n";
  os << "    \"encoder\": " << model.param_count(ParamGroup::Encoder) << ",\n";
  os << "    \"ssl_heads\": " << model.param_count(ParamGroup::SslHead) << ",\n";
  os << "    \"cls_head\": " << model.param_count(ParamGroup::ClsHead) << ",\n";
  os << "    \"rep_token\": " << model.param_count(ParamGroup::RepToken) << ",\n";
  os << "    \"mask_token\": " << model.param_count(ParamGroup::MaskToken) << "\n  },\n";
  os << "  \"first_step_matmul_flops\": " << stats.matmul_flops << ",\n";
  os << "  \"attention_calls\": [\n";
  for (std::size_t i = 0; i < stats.attention.size(); ++i) {
    const auto& a = stats.attention[i];
    os << "    {\"axis\": \"" << a.axis << "\", \"tokens\": " << a.tokens
       << ", \"heads\": " << a.heads << ", \"blocks\": " << a.blocks << "}"
       << (i + 1 < stats.attention.size() ? "," : "") << "\n";
  }
  os << "  ]\n}\n";
  return os.str();
}

std::string epochs_csv_pretrain(const PretrainResult& r) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,val_value,val_presence,lr\n";
  for (std::size_t i = 0; i < r.epoch_log.size(); ++i) {
    const auto& e = r.epoch_log[i];
    os << (i + 1) << "," << e[0] << "," << e[1] << "," << e[2] << "," << e[3]
       << "," << e[4] << "\n";
  }
  return os.str();
}

std::string epochs_csv_finetune(const FinetuneResult& r) {
  std::ostringstream os;
  os << "epoch,train_loss,val_roc_auc,val_pr_auc,lr\n";
  for (std::size_t i = 0; i < r.epoch_log.size(); ++i) {
    const auto& e = r.epoch_log[i];
    os << (i + 1) << "," << e[0] << "," << e[1] << "," << e[2] << "," << e[3] << "\n";
  }
  return os.str();
}

PretrainConfig pretrain_config_of(const RunConfig& cfg) {
  PretrainConfig pc;
  pc.epochs = cfg.epochs;
  pc.batch_size = cfg.batch_size;
  pc.peak_lr = cfg.peak_lr;
  pc.warmup_steps = cfg.warmup_steps;
  pc.weight_decay = cfg.weight_decay;
  pc.alpha = cfg.ssl_alpha();
  pc.k_e = cfg.effective_k_e();
  pc.k_t = cfg.effective_k_t();
  pc.value_weight = cfg.ssl_value_weight();
  pc.seed = cfg.seed;
  return pc;
}

FinetuneConfig finetune_config_of(const RunConfig& cfg, bool freeze) {
  FinetuneConfig fc;
  fc.epochs = cfg.finetune_epochs;
  fc.batch_size = cfg.batch_size;
  fc.peak_lr = cfg.finetune_peak_lr;
  fc.warmup_steps = cfg.warmup_steps;
  fc.weight_decay = cfg.weight_decay;
  fc.freeze_encoder = freeze;
  fc.seed = cfg.seed;
  return fc;
}

int cmd_generate(const RunConfig& cfg, const std::string& out_path) {
  const auto stays = generate_synthetic(cfg.synth_config(), cfg.seed);
  save_stays(out_path, stays);
  write_resolved_config(cfg, out_path);
  std::cerr << "generated " << stays.size() << " stays -> " << out_path << "\n";
  return 0;
}

int cmd_preprocess(const RunConfig& cfg, const std::string& input,
                   const std::string& outdir) {
  Dataset ds = load_stays(input);
  fs::create_directories(outdir);
  Split sp = split(ds.stays, 0.70, 0.15, 0.15, cfg.seed);
  NormStats stats = fit_norm(sp.train, cfg.normalize_static);
  auto norm_all = [&](std::vector<PatientStay>& v) {
    for (auto& s : v) s = apply_norm(s, stats);
  };
  norm_all(sp.train);
  norm_all(sp.val);
  norm_all(sp.test);
  save_stays(outdir + "/train.jsonl", sp.train);
  save_stays(outdir + "/val.jsonl", sp.val);
  save_stays(outdir + "/test.jsonl", sp.test);
  save_norm_stats(outdir + "/norm_stats.json", stats, ds.vocab);
  write_text(outdir + "/resolved_config.txt", cfg.serialize());
  std::cerr << "split " << ds.stays.size() << " stays into " << sp.train.size()
            << "/" << sp.val.size() << "/" << sp.test.size() << " -> " << outdir << "\n";
  return 0;
}

int cmd_pretrain(const RunConfig& cfg, const std::string& stats_path,
                 const std::string& train_path, const std::string& val_path,
                 const std::string& out_path) {
  LoadedSplit train = load_split(cfg, stats_path, train_path);
  LoadedSplit val = load_split(cfg, stats_path, val_path);
  DuettModel<float> model(
      make_model_config(cfg, train.vocab.size(), train.n_static,
                        static_cast<int>(train.label_names.size())),
      cfg.seed);
  PretrainResult result = pretrain(model, train.stays, val.stays,
                                   pretrain_config_of(cfg));
  save_checkpoint(out_path, make_checkpoint(model.params(), cfg.config_hash()));
  write_resolved_config(cfg, out_path);
  write_text(out_path + ".epochs.csv", epochs_csv_pretrain(result));
  write_text(out_path + ".report.json", run_report_json(model, result.stats, cfg));
  std::cerr << "pre-trained " << cfg.epochs << " epochs; best epoch "
            << result.best_epoch << " (val loss " << result.best_val_loss
            << ") -> " << out_path << "\n";
  return 0;
}

int cmd_finetune(const RunConfig& cfg, const std::string& stats_path,
                 const std::string& train_path, const std::string& val_path,
                 const std::string& init_path, const std::string& out_path,
                 bool probe) {
  LoadedSplit train = load_split(cfg, stats_path, train_path);
  LoadedSplit val = load_split(cfg, stats_path, val_path);
  DuettModel<float> model(
      make_model_config(cfg, train.vocab.size(), train.n_static,
                        static_cast<int>(train.label_names.size()), probe),
      cfg.seed);
  if (!init_path.empty()) {
    const Checkpoint ckpt = load_checkpoint(init_path);
    if (ckpt.config_hash != cfg.config_hash())
      std::cerr << "warning: checkpoint config hash " << ckpt.config_hash
                << " differs from current config\n";
    apply_checkpoint(model.params(), ckpt);
  } else if (!cfg.no_ssl && !probe) {
    std::cerr << "note: no --init checkpoint given, training from random init\n";
  }
  FinetuneResult result =
      finetune(model, train.stays, val.stays, finetune_config_of(cfg, probe));
  save_checkpoint(out_path, make_checkpoint(model.params(), cfg.config_hash()));
  write_resolved_config(cfg, out_path);
  write_text(out_path + ".epochs.csv", epochs_csv_finetune(result));
  EvalReport rep = evaluate_model(model, val.stays, train.label_names);
  write_text(out_path + ".val_report.csv", rep.to_csv());
  std::cerr << rep.to_text();
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& stats_path,
             const std::string& model_path, const std::string& data_path,
             const std::string& outdir, bool probe) {
  LoadedSplit data = load_split(cfg, stats_path, data_path);
  DuettModel<float> model(
      make_model_config(cfg, data.vocab.size(), data.n_static,
                        static_cast<int>(data.label_names.size()), probe),
      cfg.seed);
  apply_checkpoint(model.params(), load_checkpoint(model_path));
  fs::create_directories(outdir);
  EvalReport rep = evaluate_model(model, data.stays, data.label_names);
  write_text(outdir + "/eval_report.csv", rep.to_csv());
  write_text(outdir + "/eval_report.txt", rep.to_text());
  // curve exports per label
  const auto probs = predict_probs(model, data.stays);
  for (std::size_t l = 0; l < data.label_names.size(); ++l) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t k = 0; k < data.stays.size(); ++k) {
      scores.push_back(probs[k][l]);
      labels.push_back(data.stays[k].labels[l] > 0.5 ? 1 : 0);
    }
    std::ostringstream roc_csv, pr_csv;
    roc_csv << "fpr,tpr\n";
    for (auto [x, y] : roc_curve(scores, labels)) roc_csv << x << "," << y << "\n";
    pr_csv << "recall,precision\n";
    for (auto [x, y] : pr_curve(scores, labels)) pr_csv << x << "," << y << "\n";
    write_text(outdir + "/roc_" + data.label_names[l] + ".csv", roc_csv.str());
    write_text(outdir + "/pr_" + data.label_names[l] + ".csv", pr_csv.str());
  }
  write_text(outdir + "/resolved_config.txt", cfg.serialize());
  std::cout << rep.to_text();
  return 0;
}

int cmd_reconstruct(const RunConfig& cfg, const std::string& stats_path,
                    const std::string& model_path, const std::string& data_path,
                    const std::string& event_type, const std::string& out_path) {
  LoadedSplit data = load_split(cfg, stats_path, data_path);
  const auto target = data.vocab.find(event_type);
  if (!target) throw DataError("event type '" + event_type + "' not in vocabulary");
  DuettModel<float> model(
      make_model_config(cfg, data.vocab.size(), data.n_static,
                        static_cast<int>(data.label_names.size())),
      cfg.seed);
  apply_checkpoint(model.params(), load_checkpoint(model_path));

  std::ostringstream csv;
  csv << "stay_id,bin,observed,target,prediction\n";
  double se = 0.0;
  std::int64_t n = 0;
  for (const auto& s : data.stays) {
    ReconstructResult r = reconstruct_masked(model, s, *target);
    for (int j = 0; j < s.binned.n_t; ++j) {
      csv << s.stay_id << "," << j << ","
          << static_cast<int>(r.observed[static_cast<std::size_t>(j)]) << ","
          << s.binned.xv(*target, j) << ","
          << r.predictions[static_cast<std::size_t>(j)] << "\n";
      if (r.observed[static_cast<std::size_t>(j)]) {
        const double d = r.predictions[static_cast<std::size_t>(j)] - s.binned.xv(*target, j);
        se += d * d;
        ++n;
      }
    }
  }
  write_text(out_path, csv.str());
  write_resolved_config(cfg, out_path);
  if (n > 0)
    std::cout << "masked reconstruction MSE over " << n << " observed cells: "
              << se / static_cast<double>(n) << "\n";
  else
    std::cout << "target never observed; MSE undefined\n";
  return 0;
}

int cmd_sweep(const RunConfig& cfg, const std::string& stats_path,
              const std::string& train_path, const std::string& val_path,
              const std::string& test_path, const std::string& init_path,
              const std::vector<double>& fractions, const std::string& seeds_arg,
              const std::string& out_path) {
  for (double f : fractions)
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("fractions must be in (0,1]");
  std::vector<std::uint64_t> seeds;
  if (seeds_arg.empty()) {
    seeds.push_back(cfg.seed);
  } else {
    std::stringstream ss(seeds_arg);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) seeds.push_back(std::stoull(item));
  }
  LoadedSplit train = load_split(cfg, stats_path, train_path);
  LoadedSplit val = load_split(cfg, stats_path, val_path);
  LoadedSplit test = load_split(cfg, stats_path, test_path);
  const int n_labels = static_cast<int>(train.label_names.size());

  DuettModel<float> base(
      make_model_config(cfg, train.vocab.size(), train.n_static, n_labels), cfg.seed);
  apply_checkpoint(base.params(), load_checkpoint(init_path));
  const auto base_params = base.params().snapshot();

  std::ostringstream csv;
  csv << "fraction,pr_auc_mean";
  for (std::size_t s = 0; s < seeds.size(); ++s) csv << ",seed" << seeds[s];
  csv << "\n";
  for (double f : fractions) {
    double mean = 0.0;
    std::vector<double> per_seed;
    for (std::uint64_t seed : seeds) {
      std::vector<std::size_t> idx(train.stays.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      Rng rng = Rng(seed).fork("label_subsample");
      rng.shuffle(idx);
      idx.resize(std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(f * static_cast<double>(idx.size())))));
      std::sort(idx.begin(), idx.end());
      std::vector<PreparedStay> subset;
      for (auto i : idx) subset.push_back(train.stays[i]);

      DuettModel<float> model(
          make_model_config(cfg, train.vocab.size(), train.n_static, n_labels), cfg.seed);
      model.params().restore(base_params);
      FinetuneConfig fc = finetune_config_of(cfg, false);
      fc.seed = seed;
      finetune(model, subset, val.stays, fc);
      EvalReport rep = evaluate_model(model, test.stays, train.label_names);
      per_seed.push_back(rep.macro_pr);
      mean += rep.macro_pr;
    }
    mean /= static_cast<double>(seeds.size());
    csv << f << "," << mean;
    for (double v : per_seed) csv << "," << v;
    csv << "\n";
    std::cerr << "fraction " << f << ": PR-AUC " << mean << "\n";
  }
  write_text(out_path, csv.str());
  write_resolved_config(cfg, out_path);
  return 0;
}

RunConfig apply_variant(RunConfig cfg, const std::string& variant) {
  if (variant == "duett") return cfg;
  if (variant == "event_only") cfg.event_only = true;
  else if (variant == "time_only") cfg.time_only = true;
  else if (variant == "value_loss_only") cfg.value_loss_only = true;
  else if (variant == "presence_loss_only") cfg.presence_loss_only = true;
  else if (variant == "mask_bins_only") cfg.mask_bins_only = true;
  else if (variant == "mask_events_only") cfg.mask_events_only = true;
  else if (variant == "no_ssl") cfg.no_ssl = true;
  else if (variant == "first_layer_embed_only") cfg.first_layer_embed_only = true;
  else if (variant == "late_static_fusion") cfg.late_static_fusion = true;
  else if (variant == "mean_agg") cfg.aggregation = "mean";
  else if (variant == "max_agg") cfg.aggregation = "max";
  else throw ConfigError("unknown ablation variant '" + variant + "'");
  cfg.validate();
  return cfg;
}

int cmd_ablate(const RunConfig& base_cfg, const std::string& variant,
               const std::string& stats_path, const std::string& train_path,
               const std::string& val_path, const std::string& outdir) {
  const RunConfig cfg = apply_variant(base_cfg, variant);
  fs::create_directories(outdir);
  const std::string ckpt_path = outdir + "/ckpt.bin";
  if (!cfg.no_ssl) {
    const int rc = cmd_pretrain(cfg, stats_path, train_path, val_path, ckpt_path);
    if (rc != 0) return rc;
  }
  return cmd_finetune(cfg, stats_path, train_path, val_path,
                      cfg.no_ssl ? "" : ckpt_path, outdir + "/model.bin", false);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DuETT: dual event/time transformer for sparse irregular time series"};
  app.require_subcommand(1);

  std::string config_path, input, outdir, out_path, data_path, val_path,
      test_path, stats_path, init_path, model_path, event_type, variant,
      seeds_arg;
  std::vector<double> fractions;
  std::vector<std::string> overrides;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key=value config file")->required();
    sub->add_option("--set", overrides,
                    "config override key=value (repeatable)");
  };

  CLI::App* generate = app.add_subcommand("generate", "generate synthetic data");
  add_common(generate);
  generate->add_option("--out", out_path, "output JSONL path")->required();

  CLI::App* preprocess =
      app.add_subcommand("preprocess", "split, fit and apply normalization");
  add_common(preprocess);
  preprocess->add_option("--input", input, "raw JSONL")->required();
  preprocess->add_option("--outdir", outdir, "output directory")->required();

  CLI::App* pretrain_cmd = app.add_subcommand("pretrain", "self-supervised pre-training");
  add_common(pretrain_cmd);
  pretrain_cmd->add_option("--stats", stats_path, "norm_stats.json from preprocess")->required();
  pretrain_cmd->add_option("--data", data_path, "training JSONL")->required();
  pretrain_cmd->add_option("--val", val_path, "validation JSONL")->required();
  pretrain_cmd->add_option("--out", out_path, "checkpoint path")->required();

  CLI::App* finetune_cmd = app.add_subcommand("finetune", "supervised fine-tuning");
  add_common(finetune_cmd);
  finetune_cmd->add_option("--stats", stats_path)->required();
  finetune_cmd->add_option("--data", data_path)->required();
  finetune_cmd->add_option("--val", val_path)->required();
  finetune_cmd->add_option("--init", init_path, "pre-trained checkpoint");
  finetune_cmd->add_option("--out", out_path, "model output path")->required();

  CLI::App* probe_cmd =
      app.add_subcommand("probe", "linear probe on a frozen encoder");
  add_common(probe_cmd);
  probe_cmd->add_option("--stats", stats_path)->required();
  probe_cmd->add_option("--data", data_path)->required();
  probe_cmd->add_option("--val", val_path)->required();
  probe_cmd->add_option("--init", init_path, "pre-trained checkpoint")->required();
  probe_cmd->add_option("--out", out_path)->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a trained model");
  add_common(eval_cmd);
  eval_cmd->add_option("--stats", stats_path)->required();
  eval_cmd->add_option("--model", model_path)->required();
  eval_cmd->add_option("--data", data_path)->required();
  eval_cmd->add_option("--outdir", outdir)->required();
  bool eval_probe = false;
  eval_cmd->add_flag("--probe-head", eval_probe, "model was trained in probe mode");

  CLI::App* recon_cmd =
      app.add_subcommand("reconstruct", "masked-event reconstruction demo");
  add_common(recon_cmd);
  recon_cmd->add_option("--stats", stats_path)->required();
  recon_cmd->add_option("--model", model_path, "pre-trained checkpoint")->required();
  recon_cmd->add_option("--data", data_path)->required();
  recon_cmd->add_option("--event", event_type, "event type to mask")->required();
  recon_cmd->add_option("--out", out_path, "CSV output")->required();

  CLI::App* sweep_cmd =
      app.add_subcommand("sweep-labels", "PR-AUC across labelled fractions");
  add_common(sweep_cmd);
  sweep_cmd->add_option("--stats", stats_path)->required();
  sweep_cmd->add_option("--data", data_path)->required();
  sweep_cmd->add_option("--val", val_path)->required();
  sweep_cmd->add_option("--test", test_path)->required();
  sweep_cmd->add_option("--init", init_path, "pre-trained checkpoint")->required();
  sweep_cmd->add_option("--fractions", fractions, "labelled fractions in (0,1]")
      ->required();
  sweep_cmd->add_option("--seeds", seeds_arg, "comma list of finetune seeds");
  sweep_cmd->add_option("--out", out_path, "CSV output")->required();

  CLI::App* ablate_cmd =
      app.add_subcommand("ablate", "run one ablation variant end to end");
  add_common(ablate_cmd);
  ablate_cmd->add_option("--variant", variant, "ablation name")->required();
  ablate_cmd->add_option("--stats", stats_path)->required();
  ablate_cmd->add_option("--data", data_path)->required();
  ablate_cmd->add_option("--val", val_path)->required();
  ablate_cmd->add_option("--outdir", outdir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    RunConfig cfg = load_config(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw ConfigError("--set expects key=value, got '" + kv + "'");
      apply_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();

    if (*generate) return cmd_generate(cfg, out_path);
    if (*preprocess) return cmd_preprocess(cfg, input, outdir);
    if (*pretrain_cmd)
      return cmd_pretrain(cfg, stats_path, data_path, val_path, out_path);
    if (*finetune_cmd)
      return cmd_finetune(cfg, stats_path, data_path, val_path, init_path,
                          out_path, false);
    if (*probe_cmd)
      return cmd_finetune(cfg, stats_path, data_path, val_path, init_path,
                          out_path, true);
    if (*eval_cmd)
      return cmd_eval(cfg, stats_path, model_path, data_path, outdir, eval_probe);
    if (*recon_cmd)
      return cmd_reconstruct(cfg, stats_path, model_path, data_path, event_type,
                             out_path);
    if (*sweep_cmd)
      return cmd_sweep(cfg, stats_path, data_path, val_path, test_path,
                       init_path, fractions, seeds_arg, out_path);
    if (*ablate_cmd)
      return cmd_ablate(cfg, variant, stats_path, data_path, val_path, outdir);
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 4;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 5;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
