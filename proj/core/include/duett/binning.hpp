// Conversion of a patient stay into the regular aggregated-value /
// observation-count pair over n_t equal-duration bins.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "duett/data.hpp"

namespace duett {

enum class Agg { Last, Mean, Max, Min };

Agg agg_from_string(const std::string& s);
std::string agg_to_string(Agg a);

struct BinnedStay {
  int n_e = 0;
  int n_t = 0;
  double window_days = 0.0;
  std::vector<double> x;        // n_e * n_t aggregated values, 0 where m == 0
  std::vector<std::int64_t> m;  // n_e * n_t observation counts
  std::vector<double> bin_end_days;  // strictly increasing, last == window_days

  double& xv(int i, int j) { return x[static_cast<std::size_t>(i * n_t + j)]; }
  double xv(int i, int j) const { return x[static_cast<std::size_t>(i * n_t + j)]; }
  std::int64_t& mv(int i, int j) { return m[static_cast<std::size_t>(i * n_t + j)]; }
  std::int64_t mv(int i, int j) const { return m[static_cast<std::size_t>(i * n_t + j)]; }
};

// Bin j covers [j*w/n_t, (j+1)*w/n_t); the final bin is right-closed so an
// event at exactly the window end is kept. Events beyond the window are
// dropped here, not at parse time. Aggregation "last" resolves equal
// timestamps to the later event in the (stably sorted) input order.
BinnedStay bin_stay(const PatientStay& stay, const Vocabulary& vocab, int n_t,
                    double window_days, Agg agg);

// Bin end times: entry j = (j+1) * window_days / n_t.
std::vector<double> bin_times(int n_t, double window_days);

// Debug export of x and m as CSV matrices (one row per event type).
void export_binned_csv(std::ostream& out, const BinnedStay& b, const Vocabulary& vocab);

}  // namespace duett
