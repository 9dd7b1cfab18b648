// AdamW with decoupled weight decay, and the warmup / inverse-sqrt decay
// learning-rate schedule.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <unordered_map>

#include "duett/nn.hpp"

namespace duett {

struct LrSchedule {
  double peak_rate = 1e-3;
  std::int64_t warmup_steps = 100;
};

// Linear warmup to peak at step == warmup_steps, then peak * sqrt(W/step).
inline double lr_at(std::int64_t step, const LrSchedule& sched) {
  if (step < 0) throw ConfigError("lr_at: negative step");
  if (sched.warmup_steps <= 0) throw ConfigError("lr_at: warmup_steps must be > 0");
  const double w = static_cast<double>(sched.warmup_steps);
  if (step <= sched.warmup_steps)
    return sched.peak_rate * static_cast<double>(step) / w;
  return sched.peak_rate * std::sqrt(w / static_cast<double>(step));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Update rule per parameter p with gradient g at step t:
//   p -= lr * wd * p                      (decoupled decay, applied first)
//   m = b1*m + (1-b1)*g ;  v = b2*v + (1-b2)*g^2
//   p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
template <typename S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  std::int64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

  // Updates every trainable parameter accepted by `active` (all when empty).
  void step(ParamStore<S>& store, double lr,
            const std::function<bool(const Param<S>&)>& active = {}) {
    if (lr < 0) throw ConfigError("adamw: negative learning rate");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& p : store.items()) {
      if (!p->trainable) continue;
      if (active && !active(*p)) continue;
      Moments& mo = moments(*p);
      auto pv = p->value.data();
      auto gv = p->grad.data();
      auto m = mo.m.data();
      auto v = mo.v.data();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double g = static_cast<double>(gv[i]);
        double x = static_cast<double>(pv[i]);
        x -= lr * cfg_.weight_decay * x;
        const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * g * g;
        m[i] = static_cast<S>(mi);
        v[i] = static_cast<S>(vi);
        x -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
        pv[i] = static_cast<S>(x);
      }
    }
  }

 private:
  struct Moments {
    Tensor<S> m, v;
  };

  Moments& moments(const Param<S>& p) {
    auto it = state_.find(&p);
    if (it == state_.end()) {
      Moments mo{Tensor<S>(p.value.shape()), Tensor<S>(p.value.shape())};
      it = state_.emplace(&p, std::move(mo)).first;
    }
    if (!it->second.m.same_shape(p.value))
      throw ShapeError("adamw: moment shape does not match parameter " + p.name);
    return it->second;
  }

  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::unordered_map<const Param<S>*, Moments> state_;
};

}  // namespace duett
