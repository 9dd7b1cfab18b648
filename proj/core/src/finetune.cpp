#include "duett/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace duett {

namespace {

std::vector<std::vector<std::size_t>> make_batches(std::size_t n,
                                                   std::int64_t batch_size,
                                                   Rng* shuffle_rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle_rng) shuffle_rng->shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, i + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

Tensor<float> label_tensor(const Batch& b) {
  Tensor<float> t(Shape{b.B, b.n_labels});
  for (std::size_t i = 0; i < b.labels.size(); ++i)
    t.at(static_cast<std::int64_t>(i)) = static_cast<float>(b.labels[i]);
  return t;
}

}  // namespace

std::vector<double> label_positive_fractions(const std::vector<PreparedStay>& stays,
                                             int n_labels) {
  std::vector<double> rho(static_cast<std::size_t>(n_labels), 0.0);
  for (const auto& s : stays)
    for (int l = 0; l < n_labels; ++l)
      rho[static_cast<std::size_t>(l)] += s.labels[static_cast<std::size_t>(l)] > 0.5;
  for (auto& r : rho) r /= static_cast<double>(stays.size());
  return rho;
}

std::vector<std::vector<double>> predict_probs(DuettModel<float>& model,
                                               const std::vector<PreparedStay>& stays,
                                               std::int64_t batch_size) {
  std::vector<std::vector<double>> probs;
  probs.reserve(stays.size());
  for (const auto& idxs : make_batches(stays.size(), batch_size, nullptr)) {
    Batch b = make_batch(stays, idxs);
    Graph<float> g;
    ForwardOut<float> fwd = model.forward(g, b, /*training=*/false, nullptr);
    Var<float> logits = model.cls_logits(g, model.rep_representation(g, fwd, b), false);
    Var<float> p = sigmoid(logits);
    for (std::int64_t i = 0; i < b.B; ++i) {
      std::vector<double> row(static_cast<std::size_t>(b.n_labels));
      for (int l = 0; l < b.n_labels; ++l)
        row[static_cast<std::size_t>(l)] = static_cast<double>(p.val().at2(i, l));
      probs.push_back(std::move(row));
    }
  }
  return probs;
}

EvalReport evaluate_model(DuettModel<float>& model,
                          const std::vector<PreparedStay>& stays,
                          const std::vector<std::string>& label_names,
                          std::int64_t batch_size) {
  const auto probs = predict_probs(model, stays, batch_size);
  const int n_labels = static_cast<int>(label_names.size());
  std::vector<std::vector<double>> scores(static_cast<std::size_t>(n_labels));
  std::vector<std::vector<int>> labels(static_cast<std::size_t>(n_labels));
  for (std::size_t k = 0; k < stays.size(); ++k)
    for (int l = 0; l < n_labels; ++l) {
      scores[static_cast<std::size_t>(l)].push_back(probs[k][static_cast<std::size_t>(l)]);
      labels[static_cast<std::size_t>(l)].push_back(
          stays[k].labels[static_cast<std::size_t>(l)] > 0.5 ? 1 : 0);
    }
  return evaluate_scores(label_names, scores, labels);
}

FinetuneResult finetune(DuettModel<float>& model,
                        const std::vector<PreparedStay>& train,
                        const std::vector<PreparedStay>& val,
                        const FinetuneConfig& cfg, const FinetuneHooks& hooks) {
  if (train.empty() || val.empty())
    throw DataError("finetune: empty train or validation split");
  const int n_labels = model.config().n_labels;
  const std::vector<double> rho = label_positive_fractions(train, n_labels);

  const bool frozen = cfg.freeze_encoder;
  auto active = [frozen](const Param<float>& p) {
    if (p.group == ParamGroup::ClsHead) return true;
    if (frozen) return false;
    // [REP] is learned at this stage; SSL heads and [MASK] stay untouched.
    return p.group == ParamGroup::Encoder || p.group == ParamGroup::RepToken;
  };

  AdamW<float> opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  const LrSchedule sched{cfg.peak_lr, cfg.warmup_steps};
  const Rng root(cfg.seed);
  Rng shuffle_rng = root.fork("ft_shuffle");
  const Rng drop_root = root.fork("ft_dropout");

  // Top-k epochs by validation PR-AUC (earlier epoch wins ties).
  struct Ranked {
    double pr;
    int epoch;
    std::vector<Tensor<float>> snap;
  };
  std::vector<Ranked> top;

  FinetuneResult result;
  std::int64_t gstep = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double train_loss = 0.0;
    std::size_t n_seen = 0;
    double lr = 0.0;
    for (const auto& idxs : make_batches(train.size(), cfg.batch_size, &shuffle_rng)) {
      Batch b = make_batch(train, idxs);
      model.params().zero_grad();
      Graph<float> g;
      Rng drop_rng = drop_root.fork(static_cast<std::uint64_t>(gstep));
      Var<float> loss;
      try {
        ForwardOut<float> fwd = model.forward(g, b, /*training=*/true, &drop_rng);
        Var<float> logits =
            model.cls_logits(g, model.rep_representation(g, fwd, b), true);
        loss = weighted_bce(g, logits, label_tensor(b), rho);
        g.backward(loss);
      } catch (const NumericError& e) {
        throw NumericError("fine-tuning diverged at epoch " + std::to_string(epoch) +
                           ": " + e.what());
      }
      g.export_param_grads();
      ++gstep;
      lr = lr_at(gstep, sched);
      opt.step(model.params(), lr, active);
      train_loss += static_cast<double>(loss.val().at(0)) * static_cast<double>(b.B);
      n_seen += idxs.size();
    }
    train_loss /= static_cast<double>(n_seen);

    const EvalReport ev = evaluate_model(model, val, std::vector<std::string>(
        model.config().n_labels, std::string()), cfg.batch_size);
    const double val_pr = ev.macro_pr;
    const double val_roc = ev.macro_roc;
    result.epoch_log.push_back({train_loss, val_roc, val_pr, lr});
    if (hooks.on_epoch) hooks.on_epoch(epoch, train_loss, val_roc, val_pr, lr);

    if (static_cast<int>(top.size()) < cfg.top_k_average) {
      top.push_back({val_pr, epoch, model.params().snapshot()});
    } else {
      auto worst = std::min_element(top.begin(), top.end(),
                                    [](const Ranked& a, const Ranked& b) {
                                      if (a.pr != b.pr) return a.pr < b.pr;
                                      return a.epoch > b.epoch;  // later epoch loses ties
                                    });
      if (val_pr > worst->pr) *worst = {val_pr, epoch, model.params().snapshot()};
    }
  }

  // Arithmetic mean of the selected epochs' full parameter sets.
  std::sort(top.begin(), top.end(),
            [](const Ranked& a, const Ranked& b) { return a.epoch < b.epoch; });
  std::vector<Tensor<float>> avg = top.front().snap;
  for (auto& t : avg) t = t.clone();
  for (std::size_t s = 1; s < top.size(); ++s)
    for (std::size_t i = 0; i < avg.size(); ++i) {
      auto dst = avg[i].data();
      auto src = top[s].snap[i].data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  const float inv = 1.0f / static_cast<float>(top.size());
  for (auto& t : avg)
    for (auto& v : t.data()) v *= inv;

  model.params().restore(avg);
  result.final_params = std::move(avg);
  for (const auto& r : top) result.averaged_epochs.push_back(r.epoch);

  std::vector<std::string> generic_names;
  for (int l = 0; l < n_labels; ++l) generic_names.push_back("label" + std::to_string(l));
  result.val_report = evaluate_model(model, val, generic_names, cfg.batch_size);
  return result;
}

ReconstructResult reconstruct_masked(DuettModel<float>& model,
                                     const PreparedStay& stay, int target_event) {
  const ModelConfig& mc = model.config();
  if (target_event < 0 || target_event >= mc.n_e)
    throw DataError("reconstruct_masked: target event out of vocabulary range");
  Batch b = make_batch({stay}, {0});
  MaskSpec spec;
  spec.events = {target_event};
  Graph<float> g;
  ForwardOut<float> fwd = model.assemble(g, b, /*training=*/false);
  Var<float> phi =
      apply_mask(g, fwd.phi, g.param(model.mask_token()), spec, mc.n_e, mc.n_t);
  Var<float> z = model.encode(g, phi, b, false, nullptr);
  Var<float> z_event = reshape(z, {b.B * mc.event_rows(),
                                   static_cast<std::int64_t>(mc.time_cols()) * mc.d});
  Var<float> tok = gather_rows(z_event, {static_cast<std::int64_t>(target_event)});
  Var<float> pred = linear(g, tok, model.ssl_heads().event_value);

  ReconstructResult out;
  out.predictions.resize(static_cast<std::size_t>(mc.n_t));
  out.observed.resize(static_cast<std::size_t>(mc.n_t));
  double se = 0.0;
  std::int64_t n_obs = 0;
  for (int j = 0; j < mc.n_t; ++j) {
    out.predictions[static_cast<std::size_t>(j)] =
        static_cast<double>(pred.val().at2(0, j));
    const bool obs = b.mv(0, target_event, j) > 0;
    out.observed[static_cast<std::size_t>(j)] = obs ? 1 : 0;
    if (obs) {
      const double d = out.predictions[static_cast<std::size_t>(j)] -
                       b.xv(0, target_event, j);
      se += d * d;
      ++n_obs;
    }
  }
  if (n_obs > 0) out.mse = se / static_cast<double>(n_obs);
  return out;
}

}  // namespace duett
