// Sparse irregular event-stream datasets: parsing, normalization,
// splitting, and the synthetic generator used by the benchmark suites.
//
// Record schema, one JSON object per line:
//   {"stay_id": str, "static": [float...],
//    "events": [{"type": str, "time_days": float, "value": float}...],
//    "labels": {str: float...}}

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <utility>
#include <string>
#include <vector>

#include "duett/rng.hpp"

namespace duett {

struct EventTriplet {
  std::string type;
  double time_days = 0.0;
  double value = 0.0;
};

struct PatientStay {
  std::string stay_id;
  std::vector<double> statics;
  std::vector<EventTriplet> events;  // sorted by time_days, stable on ties
  std::map<std::string, double> labels;
};

// Event-type names in first-seen order; index of a type is its row in the
// binned tensors.
class Vocabulary {
 public:
  int add_or_get(const std::string& type);
  std::optional<int> find(const std::string& type) const;
  const std::string& name(int index) const { return names_.at(static_cast<std::size_t>(index)); }
  int size() const { return static_cast<int>(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }
  static Vocabulary from_names(std::vector<std::string> names);

 private:
  std::vector<std::string> names_;
  std::map<std::string, int> index_;
};

struct Dataset {
  std::vector<PatientStay> stays;
  Vocabulary vocab;
};

// Parses a line-delimited record stream. Malformed lines, negative times
// and unknown fields raise DataError with the 1-based line number.
Dataset parse_stays(std::istream& in);
Dataset load_stays(const std::string& path);
void write_stays(std::ostream& out, const std::vector<PatientStay>& stays);
void save_stays(const std::string& path, const std::vector<PatientStay>& stays);

// ---------------------------------------------------------------------------
// Normalization: per event type, outliers are clipped to median +/- 3 MAD,
// then values are z-scored with the post-clip mean/std. MAD == 0 disables
// clipping for that type; std == 0 is replaced by 1. Statistics are fitted
// on the training split only.
// ---------------------------------------------------------------------------

struct TypeStats {
  double median = 0.0;
  double mad = 0.0;
  double mean = 0.0;
  double stddev = 1.0;
  std::int64_t n_obs = 0;
};

struct NormStats {
  std::map<std::string, TypeStats> per_type;
  std::vector<double> static_mean;
  std::vector<double> static_std;
  bool normalize_static = true;

  double clip(const std::string& type, double v) const;
  // Returns v unchanged (and optionally warns) for types absent from the
  // training split.
  double normalize_value(const std::string& type, double v) const;
};

NormStats fit_norm(const std::vector<PatientStay>& train, bool normalize_static = true);
PatientStay apply_norm(const PatientStay& stay, const NormStats& stats);

// Single JSON header object carrying the fitted statistics plus the
// vocabulary (event-type names in index order).
std::string norm_stats_to_json(const NormStats& stats, const Vocabulary& vocab);
std::pair<NormStats, Vocabulary> norm_stats_from_json(const std::string& text);
void save_norm_stats(const std::string& path, const NormStats& stats,
                     const Vocabulary& vocab);
std::pair<NormStats, Vocabulary> load_norm_stats(const std::string& path);

// ---------------------------------------------------------------------------
// Stay-level split: deterministic shuffle by seed, then contiguous cut at
// floor(f_train*n) / floor(f_val*n); remainder goes to test.
// ---------------------------------------------------------------------------

struct Split {
  std::vector<PatientStay> train, val, test;
};

Split split(const std::vector<PatientStay>& stays, double f_train, double f_val,
            double f_test, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic generator. A shared AR(1) latent trajectory u_t on a grid of
// `grid_bins` bins drives per-type base signals c_i*u_t + noise; planted
// links overwrite the target type with weight * lagged source value +
// noise. Per-(type,bin) Bernoulli thinning produces sparsity; one surviving
// cell emits one event jittered inside its bin. The label is Bernoulli of a
// logistic read-out of the late-window latent plus the first static dim.
// ---------------------------------------------------------------------------

struct PlantedLink {
  int source = 0;
  int target = 0;
  int lag_bins = 0;
  double weight = 1.0;
};

struct SynthConfig {
  int n_e = 12;
  int n_static = 4;
  int n_stays = 1000;
  int grid_bins = 16;          // generation grid; planted lags are in these bins
  double window_days = 2.0;
  std::vector<double> sparsity;  // per type in (0,1]; single entry broadcasts
  std::vector<PlantedLink> links;
  double noise_sigma = 0.1;
  double label_scale = 3.0;
  double label_bias = 0.0;
  std::string label_name = "y";

  void validate() const;
};

std::vector<PatientStay> generate_synthetic(const SynthConfig& cfg, std::uint64_t seed);

}  // namespace duett
