#include "duett/binning.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "duett/error.hpp"

namespace duett {

Agg agg_from_string(const std::string& s) {
  if (s == "last") return Agg::Last;
  if (s == "mean") return Agg::Mean;
  if (s == "max") return Agg::Max;
  if (s == "min") return Agg::Min;
  throw ConfigError("unknown aggregation '" + s + "' (last|mean|max|min)");
}

std::string agg_to_string(Agg a) {
  switch (a) {
    case Agg::Last: return "last";
    case Agg::Mean: return "mean";
    case Agg::Max: return "max";
    case Agg::Min: return "min";
  }
  return "?";
}

std::vector<double> bin_times(int n_t, double window_days) {
  if (n_t < 1) throw ConfigError("bin_times: n_t must be >= 1");
  if (window_days <= 0) throw ConfigError("bin_times: window_days must be > 0");
  std::vector<double> t(static_cast<std::size_t>(n_t));
  for (int j = 0; j < n_t; ++j)
    t[static_cast<std::size_t>(j)] =
        static_cast<double>(j + 1) * window_days / static_cast<double>(n_t);
  t.back() = window_days;  // exact, independent of rounding
  return t;
}

BinnedStay bin_stay(const PatientStay& stay, const Vocabulary& vocab, int n_t,
                    double window_days, Agg agg) {
  if (n_t < 1) throw ConfigError("bin_stay: n_t must be >= 1");
  if (window_days <= 0) throw ConfigError("bin_stay: window_days must be > 0");
  BinnedStay out;
  out.n_e = vocab.size();
  out.n_t = n_t;
  out.window_days = window_days;
  out.x.assign(static_cast<std::size_t>(out.n_e) * static_cast<std::size_t>(n_t), 0.0);
  out.m.assign(out.x.size(), 0);
  out.bin_end_days = bin_times(n_t, window_days);

  // For mean we accumulate sums in input order and divide afterwards.
  for (const auto& e : stay.events) {
    if (e.time_days > window_days) continue;  // beyond window: dropped
    auto type = vocab.find(e.type);
    if (!type) continue;  // not in vocabulary (never happens for own vocab)
    int j = static_cast<int>(std::floor(e.time_days / window_days * n_t));
    if (j >= n_t) j = n_t - 1;  // event exactly at window end: final bin
    const int i = *type;
    const std::int64_t cnt = out.mv(i, j);
    switch (agg) {
      case Agg::Last:
        out.xv(i, j) = e.value;  // events arrive time-sorted, ties in input order
        break;
      case Agg::Mean:
        out.xv(i, j) += e.value;
        break;
      case Agg::Max:
        out.xv(i, j) = cnt == 0 ? e.value : std::max(out.xv(i, j), e.value);
        break;
      case Agg::Min:
        out.xv(i, j) = cnt == 0 ? e.value : std::min(out.xv(i, j), e.value);
        break;
    }
    out.mv(i, j) = cnt + 1;
  }
  if (agg == Agg::Mean) {
    for (int i = 0; i < out.n_e; ++i)
      for (int j = 0; j < n_t; ++j)
        if (out.mv(i, j) > 0) out.xv(i, j) /= static_cast<double>(out.mv(i, j));
  }
  return out;
}

void export_binned_csv(std::ostream& out, const BinnedStay& b, const Vocabulary& vocab) {
  out << "matrix,type";
  for (int j = 0; j < b.n_t; ++j) out << ",bin" << j;
  out << "\n";
  for (int i = 0; i < b.n_e; ++i) {
    out << "x," << vocab.name(i);
    for (int j = 0; j < b.n_t; ++j) out << "," << b.xv(i, j);
    out << "\n";
  }
  for (int i = 0; i < b.n_e; ++i) {
    out << "m," << vocab.name(i);
    for (int j = 0; j < b.n_t; ++j) out << "," << b.mv(i, j);
    out << "\n";
  }
}

}  // namespace duett
