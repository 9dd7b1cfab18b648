// The dual event/time Transformer stack: per layer, a sublayer attending
// over event rows then a sublayer attending over time columns, with the
// shared event/time embeddings injected before their respective sublayers
// throughout the stack. Event-only / time-only variants keep the depth and
// replace both sublayers of a layer with a single axis.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "duett/embedding.hpp"

namespace duett {

enum class AttentionPlan { Dual, EventOnly, TimeOnly };

inline AttentionPlan plan_from_string(const std::string& s) {
  if (s == "dual") return AttentionPlan::Dual;
  if (s == "event_only") return AttentionPlan::EventOnly;
  if (s == "time_only") return AttentionPlan::TimeOnly;
  throw ConfigError("unknown attention plan '" + s + "'");
}

struct ModelConfig {
  int n_e = 12;
  int n_t = 16;
  int d = 16;
  int layers = 2;
  int n_heads = 4;
  std::int64_t ffn_hidden = 512;
  int static_hidden = 128;
  int cls_hidden = 64;
  int n_static = 0;
  int n_labels = 1;
  double dropout = 0.1;
  bool include_static_row = true;  // false = late static fusion
  bool final_norm = true;
  bool first_layer_embed_only = false;
  bool shared_axis_embeddings = true;  // false = one p^e/p^t table per layer
  bool probe_head = false;  // single linear classification head
  AttentionPlan plan = AttentionPlan::Dual;

  int event_rows() const { return n_e + (include_static_row ? 1 : 0); }
  int time_cols() const { return n_t + 1; }
  std::int64_t event_token_dim() const {
    return static_cast<std::int64_t>(time_cols()) * d;
  }
  std::int64_t time_token_dim() const {
    return static_cast<std::int64_t>(event_rows()) * d;
  }
  // Head input: [REP] column flattened, plus the static embedding when it
  // is fused late.
  std::int64_t rep_dim() const {
    return time_token_dim() + (include_static_row ? 0 : d);
  }

  void validate() const {
    if (n_e < 1 || n_t < 1 || d < 1 || layers < 0 || n_heads < 1)
      throw ConfigError("model dims must be positive (layers may be 0)");
    if (event_token_dim() % n_heads != 0)
      throw ConfigError("event token dim " + std::to_string(event_token_dim()) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    if (time_token_dim() % n_heads != 0)
      throw ConfigError("time token dim " + std::to_string(time_token_dim()) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    if (n_labels < 1) throw ConfigError("n_labels must be >= 1");
  }
};

// A numeric batch ready for the graph. All payloads are double and cast to
// the model scalar at graph-build time.
struct Batch {
  std::int64_t B = 0;
  int n_e = 0, n_t = 0, n_static = 0, n_labels = 0;
  std::vector<double> x;        // (B, n_e, n_t)
  std::vector<double> m;        // (B, n_e, n_t) observation counts
  std::vector<double> statics;  // (B, n_static)
  std::vector<double> times;    // (B, n_t+1): bin ends, then the window end
  std::vector<double> labels;   // (B, n_labels)

  double xv(std::int64_t b, int i, int j) const {
    return x[static_cast<std::size_t>((b * n_e + i) * n_t + j)];
  }
  double mv(std::int64_t b, int i, int j) const {
    return m[static_cast<std::size_t>((b * n_e + i) * n_t + j)];
  }
};

struct PreparedStay {
  BinnedStay binned;
  std::vector<double> statics;
  std::vector<double> labels;
  std::string stay_id;
};

inline Batch make_batch(const std::vector<PreparedStay>& stays,
                        const std::vector<std::size_t>& idxs) {
  if (idxs.empty()) throw DataError("make_batch: empty batch");
  const BinnedStay& first = stays[idxs[0]].binned;
  Batch b;
  b.B = static_cast<std::int64_t>(idxs.size());
  b.n_e = first.n_e;
  b.n_t = first.n_t;
  b.n_static = static_cast<int>(stays[idxs[0]].statics.size());
  b.n_labels = static_cast<int>(stays[idxs[0]].labels.size());
  b.x.reserve(static_cast<std::size_t>(b.B * b.n_e * b.n_t));
  b.m.reserve(b.x.capacity());
  for (std::size_t k : idxs) {
    const PreparedStay& s = stays[k];
    if (s.binned.n_e != b.n_e || s.binned.n_t != b.n_t)
      throw ShapeError("make_batch: inconsistent binned dims");
    b.x.insert(b.x.end(), s.binned.x.begin(), s.binned.x.end());
    for (auto c : s.binned.m) b.m.push_back(static_cast<double>(c));
    b.statics.insert(b.statics.end(), s.statics.begin(), s.statics.end());
    b.times.insert(b.times.end(), s.binned.bin_end_days.begin(),
                   s.binned.bin_end_days.end());
    b.times.push_back(s.binned.window_days);  // [REP] column time value
    b.labels.insert(b.labels.end(), s.labels.begin(), s.labels.end());
  }
  return b;
}

template <typename S>
struct DuettLayer {
  TransformerSublayer<S> first, second;
  bool first_is_event = true, second_is_event = true;
};

template <typename S>
struct SslHeads {
  Linear<S> event_value, event_presence;  // (n_t+1)d -> n_t
  Linear<S> time_value, time_presence;    // E*d -> n_e
};

template <typename S>
struct ClsHead {
  Linear<S> h1;      // rep_dim -> cls_hidden
  BatchNorm<S> bn;   // over the hidden layer
  Linear<S> out;     // cls_hidden -> n_labels
  Linear<S> probe;   // rep_dim -> n_labels (linear-probe mode)
  bool is_probe = false;
};

template <typename S>
struct ForwardOut {
  Var<S> phi;         // post-mask input tensor (B, E, T1, d)
  Var<S> z;           // output tensor, same shape
  Var<S> static_emb;  // (B, d); always computed
};

template <typename S>
class DuettModel {
 public:
  DuettModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng(seed).fork("init");
    embed_ = make_embed_params(store_, cfg_.n_static, cfg_.d, cfg_.static_hidden, rng);
    const int n_tables = cfg_.shared_axis_embeddings ? 1 : std::max(cfg_.layers, 1);
    const bool has_event_sub = cfg_.plan != AttentionPlan::TimeOnly;
    const bool has_time_sub = cfg_.plan != AttentionPlan::EventOnly;
    for (int t = 0; t < n_tables; ++t) {
      const std::string tag = cfg_.shared_axis_embeddings ? "" : std::to_string(t);
      if (has_event_sub)
        pe_.push_back(&store_.add(
            "axis.pe" + tag,
            normal_init<S>(rng, {cfg_.event_rows(), cfg_.event_token_dim()}),
            ParamGroup::Encoder));
      if (has_time_sub)
        cve_.push_back(make_cve(store_, "axis.cve" + tag, cfg_.time_token_dim(), rng));
    }
    for (int l = 0; l < cfg_.layers; ++l) {
      DuettLayer<S> layer;
      std::string first_name, second_name;
      switch (cfg_.plan) {
        case AttentionPlan::Dual:
          layer.first_is_event = true;
          layer.second_is_event = false;
          first_name = "event";
          second_name = "time";
          break;
        case AttentionPlan::EventOnly:
          layer.first_is_event = layer.second_is_event = true;
          first_name = "event0";
          second_name = "event1";
          break;
        case AttentionPlan::TimeOnly:
          layer.first_is_event = layer.second_is_event = false;
          first_name = "time0";
          second_name = "time1";
          break;
      }
      const std::string base = "layer" + std::to_string(l) + ".";
      layer.first = make_axis_sublayer(base + first_name, layer.first_is_event, rng);
      layer.second = make_axis_sublayer(base + second_name, layer.second_is_event, rng);
      layers_.push_back(std::move(layer));
    }
    if (cfg_.final_norm)
      final_gain_ = &store_.add(
          "final_norm.g",
          Tensor<S>::scalar(static_cast<S>(std::sqrt(static_cast<double>(cfg_.d)))),
          ParamGroup::Encoder);
    heads_.event_value = make_linear(store_, "ssl.event_val", cfg_.event_token_dim(),
                                     cfg_.n_t, rng, ParamGroup::SslHead);
    heads_.event_presence = make_linear(store_, "ssl.event_pres", cfg_.event_token_dim(),
                                        cfg_.n_t, rng, ParamGroup::SslHead);
    heads_.time_value = make_linear(store_, "ssl.time_val", cfg_.time_token_dim(),
                                    cfg_.n_e, rng, ParamGroup::SslHead);
    heads_.time_presence = make_linear(store_, "ssl.time_pres", cfg_.time_token_dim(),
                                       cfg_.n_e, rng, ParamGroup::SslHead);
    cls_.h1 = make_linear(store_, "cls.h1", cfg_.rep_dim(), cfg_.cls_hidden, rng,
                          ParamGroup::ClsHead);
    cls_.bn = make_batch_norm(store_, "cls.bn", cfg_.cls_hidden, ParamGroup::ClsHead);
    cls_.out = make_linear(store_, "cls.out", cfg_.cls_hidden, cfg_.n_labels, rng,
                           ParamGroup::ClsHead);
    cls_.probe = make_linear(store_, "cls.probe", cfg_.rep_dim(), cfg_.n_labels, rng,
                             ParamGroup::ClsHead);
    cls_.is_probe = cfg_.probe_head;
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return store_; }
  const EmbedParams<S>& embed_params() const { return embed_; }
  const SslHeads<S>& ssl_heads() const { return heads_; }
  Param<S>& mask_token() { return *embed_.mask; }

  // Input tensor Phi from a batch; no masking happens here.
  ForwardOut<S> assemble(Graph<S>& g, const Batch& batch, bool training) {
    check_batch(batch);
    const std::int64_t B = batch.B;
    std::vector<S> values(batch.x.size());
    for (std::size_t i = 0; i < values.size(); ++i)
      values[i] = static_cast<S>(batch.x[i]);
    std::vector<std::int64_t> counts(batch.m.size());
    for (std::size_t i = 0; i < counts.size(); ++i)
      counts[i] = static_cast<std::int64_t>(batch.m[i]);
    Var<S> cells = embed_cells(g, embed_, values, counts);

    std::vector<S> st(batch.statics.size());
    for (std::size_t i = 0; i < st.size(); ++i) st[i] = static_cast<S>(batch.statics[i]);
    Var<S> st_in = g.input(Tensor<S>(Shape{B, cfg_.n_static}, std::move(st)), "statics");
    Var<S> st_emb = embed_static(g, embed_, st_in, training);

    ForwardOut<S> out;
    out.static_emb = st_emb;
    out.phi = assemble_input(g, cells, st_emb, g.param(*embed_.rep), B, cfg_.n_e,
                             cfg_.n_t, cfg_.d, cfg_.include_static_row);
    return out;
  }

  // DuETT stack over an input tensor (B, E, T1, d).
  Var<S> encode(Graph<S>& g, Var<S> phi, const Batch& batch, bool training,
                Rng* drop_rng) {
    const std::int64_t B = batch.B;
    const std::int64_t E = cfg_.event_rows(), T1 = cfg_.time_cols(), d = cfg_.d;
    if (phi.val().shape() != Shape{B, E, T1, d})
      throw ShapeError("encode: input tensor shape mismatch");

    // Time embeddings p^t = CVE(bin end time), one row per (item, bin);
    // computed lazily per table and reused across the layers sharing it.
    Var<S> t_col;
    if (!cve_.empty()) {
      std::vector<S> t(batch.times.size());
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(batch.times[i]);
      t_col = g.input(Tensor<S>(Shape{B * T1, 1}, std::move(t)), "bin_times");
    }
    std::vector<Var<S>> cve_out(cve_.size());
    auto cve_for_layer = [&](int l) -> Var<S> {
      const std::size_t t = cfg_.shared_axis_embeddings ? 0 : static_cast<std::size_t>(l);
      if (!cve_out[t].valid()) cve_out[t] = time_cve(g, cve_[t], t_col);
      return cve_out[t];
    };
    // Event embedding rows tiled across the batch.
    std::vector<std::int64_t> pe_idx(static_cast<std::size_t>(B * E));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < E; ++i)
        pe_idx[static_cast<std::size_t>(b * E + i)] = i;
    auto pe_for_layer = [&](int l) -> Param<S>& {
      return *pe_[cfg_.shared_axis_embeddings ? 0 : static_cast<std::size_t>(l)];
    };

    Var<S> x4 = phi;
    for (int l = 0; l < cfg_.layers; ++l) {
      const bool inject = !cfg_.first_layer_embed_only || l == 0;
      const std::pair<const TransformerSublayer<S>*, bool> subs[2] = {
          {&layers_[l].first, layers_[l].first_is_event},
          {&layers_[l].second, layers_[l].second_is_event}};
      for (const auto& [sub, is_event] : subs) {
        if (is_event) {
          Var<S> tokens = reshape(x4, {B * E, T1 * d});
          if (inject) tokens = add(tokens, gather_rows(g.param(pe_for_layer(l)), pe_idx));
          tokens = sublayer_forward(g, tokens, *sub, E, cfg_.dropout, training,
                                    drop_rng, "event");
          x4 = reshape(tokens, {B, E, T1, d});
        } else {
          Var<S> tokens = reshape(transpose_12(x4), {B * T1, E * d});
          if (inject) tokens = add(tokens, cve_for_layer(l));
          tokens = sublayer_forward(g, tokens, *sub, T1, cfg_.dropout, training,
                                    drop_rng, "time");
          x4 = transpose_12(reshape(tokens, {B, T1, E, d}));
        }
      }
    }
    if (cfg_.final_norm) {
      Var<S> flat = reshape(x4, {B * E * T1, d});
      x4 = reshape(scale_norm(flat, g.param(*final_gain_)), {B, E, T1, d});
    }
    return x4;
  }

  ForwardOut<S> forward(Graph<S>& g, const Batch& batch, bool training,
                        Rng* drop_rng) {
    ForwardOut<S> out = assemble(g, batch, training);
    out.z = encode(g, out.phi, batch, training, drop_rng);
    return out;
  }

  // [REP] column of Z flattened per item: (B, E*d), with the static
  // embedding appended when static input is fused late.
  Var<S> rep_representation(Graph<S>& g, const ForwardOut<S>& fwd,
                            const Batch& batch) {
    const std::int64_t B = batch.B;
    const std::int64_t E = cfg_.event_rows(), T1 = cfg_.time_cols(), d = cfg_.d;
    Var<S> zt = reshape(transpose_12(fwd.z), {B * T1, E * d});
    std::vector<std::int64_t> rows(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b)
      rows[static_cast<std::size_t>(b)] = b * T1 + cfg_.n_t;
    Var<S> rep = gather_rows(zt, std::move(rows));
    if (!cfg_.include_static_row) rep = concat_cols(rep, fwd.static_emb);
    return rep;
  }

  // Classification logits from the [REP] representation.
  Var<S> cls_logits(Graph<S>& g, Var<S> rep, bool training) {
    if (cls_.is_probe) return linear(g, rep, cls_.probe);
    Var<S> h = batch_norm(g, linear(g, rep, cls_.h1), cls_.bn, training);
    return linear(g, relu(h), cls_.out);
  }

  // Trainable parameter count, and the per-group breakdown used by run
  // reports and the ablation accounting tests.
  std::int64_t param_count(ParamGroup group) const {
    std::int64_t n = 0;
    for (const auto& p : store_.items())
      if (p->group == group && p->trainable) n += p->value.numel();
    return n;
  }

 private:
  ModelConfig cfg_;
  ParamStore<S> store_;
  EmbedParams<S> embed_;
  std::vector<Param<S>*> pe_;
  std::vector<CveParams<S>> cve_;
  std::vector<DuettLayer<S>> layers_;
  Param<S>* final_gain_ = nullptr;
  SslHeads<S> heads_;
  ClsHead<S> cls_;

  TransformerSublayer<S> make_axis_sublayer(const std::string& name,
                                            bool is_event, Rng& rng) {
    const std::int64_t dim = is_event ? cfg_.event_token_dim() : cfg_.time_token_dim();
    return make_sublayer(store_, name, dim, cfg_.ffn_hidden, cfg_.n_heads, rng,
                         ParamGroup::Encoder);
  }

  void check_batch(const Batch& batch) const {
    if (batch.n_e != cfg_.n_e || batch.n_t != cfg_.n_t)
      throw ShapeError("batch dims (n_e=" + std::to_string(batch.n_e) +
                       ", n_t=" + std::to_string(batch.n_t) +
                       ") do not match model config");
    if (batch.n_static != cfg_.n_static)
      throw ShapeError("batch static dim does not match model config");
  }
};

}  // namespace duett
