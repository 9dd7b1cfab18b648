#include "duett/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>

#include "duett/error.hpp"
#include "json.hpp"

namespace duett {

using nlohmann::json;

int Vocabulary::add_or_get(const std::string& type) {
  auto it = index_.find(type);
  if (it != index_.end()) return it->second;
  const int idx = static_cast<int>(names_.size());
  names_.push_back(type);
  index_.emplace(type, idx);
  return idx;
}

std::optional<int> Vocabulary::find(const std::string& type) const {
  auto it = index_.find(type);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Vocabulary Vocabulary::from_names(std::vector<std::string> names) {
  Vocabulary v;
  for (auto& n : names) v.add_or_get(n);
  return v;
}

namespace {

[[noreturn]] void line_error(std::size_t line_no, const std::string& what) {
  throw DataError("line " + std::to_string(line_no) + ": " + what);
}

void check_known_keys(const json& obj, std::initializer_list<const char*> known,
                      std::size_t line_no, const char* ctx) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : known)
      if (it.key() == k) ok = true;
    if (!ok) line_error(line_no, std::string("unknown field '") + it.key() +
                                     "' in " + ctx);
  }
}

PatientStay parse_record(const json& rec, std::size_t line_no, Vocabulary& vocab) {
  if (!rec.is_object()) line_error(line_no, "record is not an object");
  check_known_keys(rec, {"stay_id", "static", "events", "labels"}, line_no,
                   "record");
  PatientStay stay;
  if (!rec.contains("stay_id") || !rec["stay_id"].is_string())
    line_error(line_no, "missing or non-string stay_id");
  stay.stay_id = rec["stay_id"].get<std::string>();
  if (rec.contains("static")) {
    if (!rec["static"].is_array()) line_error(line_no, "static is not an array");
    for (const auto& v : rec["static"]) {
      if (!v.is_number()) line_error(line_no, "non-numeric static value");
      stay.statics.push_back(v.get<double>());
    }
  }
  if (rec.contains("events")) {
    if (!rec["events"].is_array()) line_error(line_no, "events is not an array");
    for (const auto& ev : rec["events"]) {
      if (!ev.is_object()) line_error(line_no, "event is not an object");
      check_known_keys(ev, {"type", "time_days", "value"}, line_no, "event");
      EventTriplet t;
      if (!ev.contains("type") || !ev["type"].is_string())
        line_error(line_no, "event missing string 'type'");
      t.type = ev["type"].get<std::string>();
      if (!ev.contains("time_days") || !ev["time_days"].is_number())
        line_error(line_no, "event missing numeric 'time_days'");
      t.time_days = ev["time_days"].get<double>();
      if (t.time_days < 0) line_error(line_no, "negative event time");
      if (!ev.contains("value") || !ev["value"].is_number())
        line_error(line_no, "event missing numeric 'value'");
      t.value = ev["value"].get<double>();
      vocab.add_or_get(t.type);
      stay.events.push_back(std::move(t));
    }
  }
  if (rec.contains("labels")) {
    if (!rec["labels"].is_object()) line_error(line_no, "labels is not an object");
    for (auto it = rec["labels"].begin(); it != rec["labels"].end(); ++it) {
      if (!it.value().is_number()) line_error(line_no, "non-numeric label");
      stay.labels[it.key()] = it.value().get<double>();
    }
  }
  // Stable sort keeps input order for equal timestamps; "last" aggregation
  // relies on this.
  std::stable_sort(stay.events.begin(), stay.events.end(),
                   [](const EventTriplet& a, const EventTriplet& b) {
                     return a.time_days < b.time_days;
                   });
  return stay;
}

}  // namespace

Dataset parse_stays(std::istream& in) {
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      line_error(line_no, std::string("malformed JSON: ") + e.what());
    }
    ds.stays.push_back(parse_record(rec, line_no, ds.vocab));
  }
  return ds;
}

Dataset load_stays(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return parse_stays(in);
}

void write_stays(std::ostream& out, const std::vector<PatientStay>& stays) {
  for (const auto& s : stays) {
    json rec;
    rec["stay_id"] = s.stay_id;
    rec["static"] = s.statics;
    json evs = json::array();
    for (const auto& e : s.events)
      evs.push_back({{"type", e.type}, {"time_days", e.time_days}, {"value", e.value}});
    rec["events"] = std::move(evs);
    rec["labels"] = s.labels;
    out << rec.dump() << "\n";
  }
}

void save_stays(const std::string& path, const std::vector<PatientStay>& stays) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path + " for writing");
  write_stays(out, stays);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace {

double median_of(std::vector<double> v) {
  // deterministic: full sort, lower-middle average for even sizes
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n == 0) return 0.0;
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

double NormStats::clip(const std::string& type, double v) const {
  auto it = per_type.find(type);
  if (it == per_type.end() || it->second.mad == 0.0) return v;
  const double lo = it->second.median - 3.0 * it->second.mad;
  const double hi = it->second.median + 3.0 * it->second.mad;
  return std::clamp(v, lo, hi);
}

double NormStats::normalize_value(const std::string& type, double v) const {
  auto it = per_type.find(type);
  if (it == per_type.end()) return v;  // unseen in train: pass through
  return (clip(type, v) - it->second.mean) / it->second.stddev;
}

NormStats fit_norm(const std::vector<PatientStay>& train, bool normalize_static) {
  if (train.empty()) throw DataError("fit_norm: empty training split");
  NormStats stats;
  stats.normalize_static = normalize_static;

  std::map<std::string, std::vector<double>> values;
  for (const auto& stay : train)
    for (const auto& e : stay.events) values[e.type].push_back(e.value);

  for (auto& [type, vals] : values) {
    TypeStats ts;
    ts.n_obs = static_cast<std::int64_t>(vals.size());
    ts.median = median_of(vals);
    std::vector<double> devs;
    devs.reserve(vals.size());
    for (double v : vals) devs.push_back(std::abs(v - ts.median));
    ts.mad = median_of(devs);
    const double lo = ts.median - 3.0 * ts.mad;
    const double hi = ts.median + 3.0 * ts.mad;
    double sum = 0.0;
    for (double v : vals) sum += ts.mad == 0.0 ? v : std::clamp(v, lo, hi);
    ts.mean = sum / static_cast<double>(vals.size());
    double sq = 0.0;
    for (double v : vals) {
      const double c = (ts.mad == 0.0 ? v : std::clamp(v, lo, hi)) - ts.mean;
      sq += c * c;
    }
    const double var = sq / static_cast<double>(vals.size());
    ts.stddev = var > 0.0 ? std::sqrt(var) : 1.0;
    stats.per_type.emplace(type, ts);
  }

  const std::size_t n_static = train.front().statics.size();
  stats.static_mean.assign(n_static, 0.0);
  stats.static_std.assign(n_static, 1.0);
  if (normalize_static && n_static > 0) {
    for (std::size_t j = 0; j < n_static; ++j) {
      double sum = 0.0;
      for (const auto& s : train) {
        if (s.statics.size() != n_static)
          throw DataError("inconsistent static vector length for stay " + s.stay_id);
        sum += s.statics[j];
      }
      const double mean = sum / static_cast<double>(train.size());
      double sq = 0.0;
      for (const auto& s : train) sq += (s.statics[j] - mean) * (s.statics[j] - mean);
      const double var = sq / static_cast<double>(train.size());
      stats.static_mean[j] = mean;
      stats.static_std[j] = var > 0.0 ? std::sqrt(var) : 1.0;
    }
  }
  return stats;
}

PatientStay apply_norm(const PatientStay& stay, const NormStats& stats) {
  PatientStay out = stay;
  for (auto& e : out.events) {
    if (!stats.per_type.count(e.type))
      std::cerr << "warning: event type '" << e.type
                << "' unseen in training split; value passed through\n";
    e.value = stats.normalize_value(e.type, e.value);
  }
  if (stats.normalize_static) {
    for (std::size_t j = 0; j < out.statics.size() && j < stats.static_mean.size(); ++j)
      out.statics[j] = (out.statics[j] - stats.static_mean[j]) / stats.static_std[j];
  }
  return out;
}

std::string norm_stats_to_json(const NormStats& stats, const Vocabulary& vocab) {
  json out;
  out["vocabulary"] = vocab.names();
  json types = json::object();
  for (const auto& [name, ts] : stats.per_type)
    types[name] = {{"median", ts.median},
                   {"mad", ts.mad},
                   {"mean", ts.mean},
                   {"std", ts.stddev},
                   {"n_obs", ts.n_obs}};
  out["per_type"] = std::move(types);
  out["static_mean"] = stats.static_mean;
  out["static_std"] = stats.static_std;
  out["normalize_static"] = stats.normalize_static;
  return out.dump();
}

std::pair<NormStats, Vocabulary> norm_stats_from_json(const std::string& text) {
  json in;
  try {
    in = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("bad norm-stats JSON: ") + e.what());
  }
  NormStats stats;
  Vocabulary vocab = Vocabulary::from_names(in.at("vocabulary").get<std::vector<std::string>>());
  for (auto it = in.at("per_type").begin(); it != in.at("per_type").end(); ++it) {
    TypeStats ts;
    ts.median = it.value().at("median").get<double>();
    ts.mad = it.value().at("mad").get<double>();
    ts.mean = it.value().at("mean").get<double>();
    ts.stddev = it.value().at("std").get<double>();
    ts.n_obs = it.value().at("n_obs").get<std::int64_t>();
    stats.per_type.emplace(it.key(), ts);
  }
  stats.static_mean = in.at("static_mean").get<std::vector<double>>();
  stats.static_std = in.at("static_std").get<std::vector<double>>();
  stats.normalize_static = in.at("normalize_static").get<bool>();
  return {std::move(stats), std::move(vocab)};
}

void save_norm_stats(const std::string& path, const NormStats& stats,
                     const Vocabulary& vocab) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << norm_stats_to_json(stats, vocab) << "\n";
}

std::pair<NormStats, Vocabulary> load_norm_stats(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return norm_stats_from_json(text);
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

Split split(const std::vector<PatientStay>& stays, double f_train, double f_val,
            double f_test, std::uint64_t seed) {
  if (std::abs(f_train + f_val + f_test - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");
  if (stays.size() < 3) throw DataError("split: need at least 3 stays");
  std::vector<std::size_t> order(stays.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = Rng(seed).fork("split");
  rng.shuffle(order);
  const std::size_t n = stays.size();
  // epsilon guards against 0.7*100 landing just below the integer
  const std::size_t n_train =
      static_cast<std::size_t>(std::floor(f_train * static_cast<double>(n) + 1e-9));
  const std::size_t n_val =
      static_cast<std::size_t>(std::floor(f_val * static_cast<double>(n) + 1e-9));
  Split out;
  for (std::size_t i = 0; i < n; ++i) {
    const PatientStay& s = stays[order[i]];
    if (i < n_train)
      out.train.push_back(s);
    else if (i < n_train + n_val)
      out.val.push_back(s);
    else
      out.test.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

void SynthConfig::validate() const {
  if (n_e < 1 || n_stays < 1 || grid_bins < 1)
    throw ConfigError("synthetic config: n_e, n_stays, grid_bins must be >= 1");
  if (window_days <= 0) throw ConfigError("synthetic config: window_days <= 0");
  if (n_static < 0) throw ConfigError("synthetic config: negative n_static");
  for (double s : sparsity)
    if (!(s > 0.0 && s <= 1.0))
      throw ConfigError("synthetic config: sparsity must be in (0,1]");
  for (const auto& l : links) {
    if (l.source < 0 || l.source >= n_e || l.target < 0 || l.target >= n_e)
      throw ConfigError("planted link: event index out of range");
    if (l.lag_bins < 0 || l.lag_bins >= grid_bins)
      throw ConfigError("planted link: lag must be in [0, grid_bins)");
    if (!std::isfinite(l.weight)) throw ConfigError("planted link: non-finite weight");
  }
  if (!std::isfinite(noise_sigma) || noise_sigma < 0)
    throw ConfigError("synthetic config: bad noise_sigma");
}

std::vector<PatientStay> generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Rng root(seed);

  auto sparsity_of = [&](int type) {
    if (cfg.sparsity.empty()) return 1.0;
    if (cfg.sparsity.size() == 1) return cfg.sparsity[0];
    return cfg.sparsity[static_cast<std::size_t>(type) % cfg.sparsity.size()];
  };

  // Latent loadings per type, shared across stays.
  Rng load_rng = root.fork("loadings");
  std::vector<double> loading(static_cast<std::size_t>(cfg.n_e));
  for (auto& c : loading) c = load_rng.uniform(0.5, 1.5);

  std::vector<char> is_target(static_cast<std::size_t>(cfg.n_e), 0);
  for (const auto& l : cfg.links) is_target[static_cast<std::size_t>(l.target)] = 1;

  std::vector<PatientStay> stays;
  stays.reserve(static_cast<std::size_t>(cfg.n_stays));
  const int T = cfg.grid_bins;
  const double bin_w = cfg.window_days / static_cast<double>(T);

  for (int p = 0; p < cfg.n_stays; ++p) {
    PatientStay stay;
    stay.stay_id = "synth-" + std::to_string(p);
    // Per-stay substream derived from (seed, stay_id): stay order in the
    // output never affects a stay's contents.
    Rng rng = root.fork(stay.stay_id);

    stay.statics.resize(static_cast<std::size_t>(cfg.n_static));
    for (auto& v : stay.statics) v = rng.normal();

    // Shared AR(1) latent.
    std::vector<double> u(static_cast<std::size_t>(T));
    double prev = rng.normal();
    for (int t = 0; t < T; ++t) {
      prev = 0.8 * prev + 0.6 * rng.normal();
      u[static_cast<std::size_t>(t)] = prev;
    }

    // Per-type value grids: base signals first, then planted links overwrite
    // their targets.
    std::vector<double> grid(static_cast<std::size_t>(cfg.n_e * T));
    for (int i = 0; i < cfg.n_e; ++i)
      for (int t = 0; t < T; ++t)
        grid[static_cast<std::size_t>(i * T + t)] =
            loading[static_cast<std::size_t>(i)] * u[static_cast<std::size_t>(t)] +
            cfg.noise_sigma * rng.normal();
    for (int i = 0; i < cfg.n_e; ++i) {
      if (!is_target[static_cast<std::size_t>(i)]) continue;
      for (int t = 0; t < T; ++t) {
        double v = 0.0;
        for (const auto& l : cfg.links) {
          if (l.target != i) continue;
          const int ts = t - l.lag_bins;
          if (ts >= 0) v += l.weight * grid[static_cast<std::size_t>(l.source * T + ts)];
        }
        grid[static_cast<std::size_t>(i * T + t)] = v + cfg.noise_sigma * rng.normal();
      }
    }

    // Thinning + event emission, jittered inside the bin.
    for (int i = 0; i < cfg.n_e; ++i) {
      const double keep = sparsity_of(i);
      for (int t = 0; t < T; ++t) {
        if (!rng.bernoulli(keep)) continue;
        EventTriplet e;
        e.type = "e" + std::to_string(i);
        e.time_days = (static_cast<double>(t) + rng.uniform(0.25, 0.75)) * bin_w;
        e.value = grid[static_cast<std::size_t>(i * T + t)];
        stay.events.push_back(std::move(e));
      }
    }
    std::stable_sort(stay.events.begin(), stay.events.end(),
                     [](const EventTriplet& a, const EventTriplet& b) {
                       return a.time_days < b.time_days;
                     });

    // Label: logistic read-out of the late-window latent plus static dim 0.
    const int late0 = (3 * T) / 4;
    double late = 0.0;
    for (int t = late0; t < T; ++t) late += u[static_cast<std::size_t>(t)];
    late /= static_cast<double>(T - late0);
    double logit = cfg.label_scale * late + cfg.label_bias;
    if (!stay.statics.empty()) logit += cfg.label_scale * 0.5 * stay.statics[0];
    const double prob = 1.0 / (1.0 + std::exp(-logit));
    stay.labels[cfg.label_name] = rng.bernoulli(prob) ? 1.0 : 0.0;

    stays.push_back(std::move(stay));
  }
  return stays;
}

}  // namespace duett
