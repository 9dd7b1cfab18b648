#include <cmath>

#include "duett/ssl.hpp"

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

bool pretrain_active(const Param<float>& p) {
  // [REP] stays frozen during pre-training: its output is unused here and
  // it is learned during fine-tuning instead.
  return p.group == ParamGroup::Encoder || p.group == ParamGroup::SslHead ||
         p.group == ParamGroup::MaskToken;
}

}  // namespace

PretrainResult pretrain(DuettModel<float>& model,
                        const std::vector<PreparedStay>& train,
                        const std::vector<PreparedStay>& val,
                        const PretrainConfig& cfg, const TrainHooks& hooks) {
  if (train.empty() || val.empty())
    throw DataError("pretrain: empty train or validation split");
  const ModelConfig& mc = model.config();
  if (cfg.k_e + cfg.k_t < 1)
    throw ConfigError("pretrain: k_e + k_t must be >= 1");

  AdamW<float> opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  const LrSchedule sched{cfg.peak_lr, cfg.warmup_steps};
  const Rng root(cfg.seed);
  Rng shuffle_rng = root.fork("batch_shuffle");
  Rng mask_rng = root.fork("mask");
  const Rng drop_root = root.fork("dropout");

  PretrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::int64_t gstep = 0;

  auto validate = [&]() {
    // Fixed mask seed: the same validation masks every epoch.
    Rng val_mask = root.fork("val_mask");
    double total = 0.0, value = 0.0, pres = 0.0;
    std::size_t n = 0;
    for (const auto& idxs : make_batches(val.size(), cfg.batch_size, nullptr)) {
      Batch b = make_batch(val, idxs);
      MaskSpec spec = sample_mask(mc.n_e, mc.n_t, cfg.k_e, cfg.k_t, val_mask);
      Graph<float> g;
      ForwardOut<float> fwd = model.assemble(g, b, /*training=*/false);
      Var<float> phi = apply_mask(g, fwd.phi, g.param(model.mask_token()), spec,
                                  mc.n_e, mc.n_t);
      Var<float> z = model.encode(g, phi, b, false, nullptr);
      SslLossOut<float> loss =
          ssl_loss(g, model, z, b, spec, cfg.alpha, cfg.value_weight);
      const double w = static_cast<double>(b.B);
      total += loss.report.total * w;
      value += loss.report.value * w;
      pres += loss.report.presence * w;
      n += idxs.size();
    }
    const double dn = static_cast<double>(n);
    return std::array<double, 3>{total / dn, value / dn, pres / dn};
  };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double train_loss = 0.0;
    std::size_t n_seen = 0;
    double lr = 0.0;
    for (const auto& idxs : make_batches(train.size(), cfg.batch_size, &shuffle_rng)) {
      Batch b = make_batch(train, idxs);
      MaskSpec spec = sample_mask(mc.n_e, mc.n_t, cfg.k_e, cfg.k_t, mask_rng);
      model.params().zero_grad();
      Graph<float> g;
      if (gstep == 0) g.stats = &result.stats;
      Rng drop_rng = drop_root.fork(static_cast<std::uint64_t>(gstep));
      SslLossOut<float> loss;
      try {
        ForwardOut<float> fwd = model.assemble(g, b, /*training=*/true);
        Var<float> phi = apply_mask(g, fwd.phi, g.param(model.mask_token()), spec,
                                    mc.n_e, mc.n_t);
        Var<float> z = model.encode(g, phi, b, true, &drop_rng);
        loss = ssl_loss(g, model, z, b, spec, cfg.alpha, cfg.value_weight);
        g.backward(loss.total);
      } catch (const NumericError& e) {
        throw NumericError("pre-training diverged at epoch " +
                           std::to_string(epoch) + ", step " +
                           std::to_string(gstep) + ": " + e.what());
      }
      g.export_param_grads();
      ++gstep;
      lr = lr_at(gstep, sched);
      opt.step(model.params(), lr, pretrain_active);
      train_loss += loss.report.total * static_cast<double>(b.B);
      n_seen += idxs.size();
    }
    train_loss /= static_cast<double>(n_seen);

    const auto [val_loss, val_value, val_pres] = validate();
    result.epoch_log.push_back({train_loss, val_loss, val_value, val_pres, lr});
    if (epoch == 1) result.first_val_loss = val_loss;
    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
      result.best_params = model.params().snapshot();
    }
    if (hooks.on_epoch)
      hooks.on_epoch(epoch, train_loss, val_loss, val_value, val_pres, lr);
  }

  // Leave the model at the lowest-validation-loss epoch.
  model.params().restore(result.best_params);
  return result;
}

}  // namespace duett
