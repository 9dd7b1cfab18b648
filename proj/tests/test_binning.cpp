#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "duett/binning.hpp"
#include "duett/error.hpp"

using namespace duett;

namespace {

PatientStay make_stay(std::vector<EventTriplet> events) {
  PatientStay s;
  s.stay_id = "s";
  std::stable_sort(events.begin(), events.end(),
                   [](const EventTriplet& a, const EventTriplet& b) {
                     return a.time_days < b.time_days;
                   });
  s.events = std::move(events);
  return s;
}

Vocabulary vocab_of(int n) {
  Vocabulary v;
  for (int i = 0; i < n; ++i) v.add_or_get("e" + std::to_string(i));
  return v;
}

// Independent per-event assignment oracle: scans bins with explicit edge
// comparisons and re-aggregates from scratch in input order.
BinnedStay naive_bin(const PatientStay& stay, const Vocabulary& vocab, int n_t,
                     double w, Agg agg) {
  BinnedStay out;
  out.n_e = vocab.size();
  out.n_t = n_t;
  out.window_days = w;
  out.x.assign(static_cast<std::size_t>(out.n_e * n_t), 0.0);
  out.m.assign(out.x.size(), 0);
  out.bin_end_days = bin_times(n_t, w);
  for (int i = 0; i < out.n_e; ++i) {
    for (int j = 0; j < n_t; ++j) {
      const double lo = static_cast<double>(j) * w / n_t;
      const double hi = static_cast<double>(j + 1) * w / n_t;
      std::vector<double> vals;
      for (const auto& e : stay.events) {
        if (!vocab.find(e.type) || *vocab.find(e.type) != i) continue;
        const bool in_bin =
            e.time_days >= lo &&
            (e.time_days < hi || (j == n_t - 1 && e.time_days <= w));
        if (in_bin) vals.push_back(e.value);
      }
      out.mv(i, j) = static_cast<std::int64_t>(vals.size());
      if (vals.empty()) continue;
      switch (agg) {
        case Agg::Last:
          out.xv(i, j) = vals.back();
          break;
        case Agg::Mean: {
          double s = 0;
          for (double v : vals) s += v;
          out.xv(i, j) = s / static_cast<double>(vals.size());
          break;
        }
        case Agg::Max:
          out.xv(i, j) = *std::max_element(vals.begin(), vals.end());
          break;
        case Agg::Min:
          out.xv(i, j) = *std::min_element(vals.begin(), vals.end());
          break;
      }
    }
  }
  return out;
}

PatientStay random_stay(Rng& rng, int n_types, double window) {
  PatientStay s;
  s.stay_id = "r";
  const int n_events = static_cast<int>(rng.uniform_int(40));
  std::vector<EventTriplet> events;
  for (int k = 0; k < n_events; ++k) {
    EventTriplet e;
    e.type = "e" + std::to_string(rng.uniform_int(static_cast<std::uint64_t>(n_types)));
    // some events beyond the window, some duplicated timestamps
    e.time_days = rng.uniform() < 0.1 ? window * 1.02 : rng.uniform(0.0, window);
    if (!events.empty() && rng.uniform() < 0.15) e.time_days = events.back().time_days;
    e.value = rng.normal();
    events.push_back(std::move(e));
  }
  return make_stay(std::move(events));
}

}  // namespace

TEST(BinStay, HandCaseLastAggregation) {
  // events [(e1, 0.1d, 5), (e1, 0.4d, 7)], n_t=2, window=1d, agg=last
  Vocabulary v = vocab_of(2);
  PatientStay s = make_stay({{"e1", 0.1, 5.0}, {"e1", 0.4, 7.0}});
  BinnedStay b = bin_stay(s, v, 2, 1.0, Agg::Last);
  EXPECT_DOUBLE_EQ(b.xv(1, 0), 7.0);
  EXPECT_DOUBLE_EQ(b.xv(1, 1), 0.0);
  EXPECT_EQ(b.mv(1, 0), 2);
  EXPECT_EQ(b.mv(1, 1), 0);
  EXPECT_DOUBLE_EQ(b.xv(0, 0), 0.0);
}

TEST(BinStay, NoEventsAllZero) {
  Vocabulary v = vocab_of(3);
  BinnedStay b = bin_stay(make_stay({}), v, 4, 1.0, Agg::Last);
  for (double x : b.x) EXPECT_DOUBLE_EQ(x, 0.0);
  for (auto m : b.m) EXPECT_EQ(m, 0);
}

TEST(BinStay, AggregationChoices) {
  // values {2, 4} in one bin: mean 3, max 4, last (later timestamp holds 4)
  Vocabulary v = vocab_of(1);
  PatientStay s = make_stay({{"e0", 0.1, 2.0}, {"e0", 0.2, 4.0}});
  EXPECT_DOUBLE_EQ(bin_stay(s, v, 1, 1.0, Agg::Mean).xv(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(bin_stay(s, v, 1, 1.0, Agg::Max).xv(0, 0), 4.0);
  EXPECT_DOUBLE_EQ(bin_stay(s, v, 1, 1.0, Agg::Min).xv(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(bin_stay(s, v, 1, 1.0, Agg::Last).xv(0, 0), 4.0);
}

TEST(BinStay, TiesResolveToLaterInputOrder) {
  Vocabulary v = vocab_of(1);
  PatientStay s = make_stay({{"e0", 0.5, 1.0}, {"e0", 0.5, 2.0}, {"e0", 0.5, 3.0}});
  EXPECT_DOUBLE_EQ(bin_stay(s, v, 2, 1.0, Agg::Last).xv(0, 1), 3.0);
}

TEST(BinStay, WindowEndKeptAndBeyondDropped) {
  Vocabulary v = vocab_of(1);
  PatientStay s = make_stay({{"e0", 1.0, 5.0}, {"e0", 1.0001, 9.0}});
  BinnedStay b = bin_stay(s, v, 4, 1.0, Agg::Last);
  EXPECT_EQ(b.mv(0, 3), 1);
  EXPECT_DOUBLE_EQ(b.xv(0, 3), 5.0);
  std::int64_t total = 0;
  for (auto m : b.m) total += m;
  EXPECT_EQ(total, 1);
}

TEST(BinStay, Errors) {
  Vocabulary v = vocab_of(1);
  EXPECT_THROW(bin_stay(make_stay({}), v, 0, 1.0, Agg::Last), ConfigError);
  EXPECT_THROW(bin_stay(make_stay({}), v, 4, 0.0, Agg::Last), ConfigError);
}

TEST(BinTimes, HandCases) {
  // n_t=32, window=2d: entry 7 (0-based) = 0.5d
  const auto t = bin_times(32, 2.0);
  EXPECT_DOUBLE_EQ(t[7], 0.5);
  EXPECT_DOUBLE_EQ(t.back(), 2.0);
  const auto single = bin_times(1, 3.5);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_DOUBLE_EQ(single[0], 3.5);
  for (std::size_t j = 1; j < t.size(); ++j) EXPECT_GT(t[j], t[j - 1]);
}

TEST(BinStay, MatchesNaiveOracleExactly) {
  Rng rng(2023);
  const Agg aggs[4] = {Agg::Last, Agg::Mean, Agg::Max, Agg::Min};
  for (int trial = 0; trial < 1000; ++trial) {
    Rng inst = rng.fork(static_cast<std::uint64_t>(trial));
    const int n_types = 1 + static_cast<int>(inst.uniform_int(5));
    const double window = 0.5 + inst.uniform(0.0, 2.0);
    const int n_t = 1 + static_cast<int>(inst.uniform_int(8));
    Vocabulary v = vocab_of(n_types);
    PatientStay s = random_stay(inst, n_types, window);
    for (Agg agg : aggs) {
      BinnedStay fast = bin_stay(s, v, n_t, window, agg);
      BinnedStay slow = naive_bin(s, v, n_t, window, agg);
      ASSERT_EQ(fast.m, slow.m) << "trial " << trial;
      for (std::size_t i = 0; i < fast.x.size(); ++i)
        ASSERT_EQ(fast.x[i], slow.x[i]) << "trial " << trial << " agg "
                                        << agg_to_string(agg);
    }
  }
}

TEST(BinStay, RefiningBinsPreservesTotalCounts) {
  Rng rng(9);
  Vocabulary v = vocab_of(4);
  for (int trial = 0; trial < 50; ++trial) {
    Rng inst = rng.fork(static_cast<std::uint64_t>(trial));
    PatientStay s = random_stay(inst, 4, 2.0);
    for (int n_t : {1, 2, 4, 8}) {
      std::int64_t coarse = 0, fine = 0;
      for (auto m : bin_stay(s, v, n_t, 2.0, Agg::Last).m) coarse += m;
      for (auto m : bin_stay(s, v, 2 * n_t, 2.0, Agg::Last).m) fine += m;
      EXPECT_EQ(coarse, fine);
    }
  }
}

TEST(BinStay, MZeroImpliesXZero) {
  Rng rng(31);
  Vocabulary v = vocab_of(3);
  for (int trial = 0; trial < 100; ++trial) {
    Rng inst = rng.fork(static_cast<std::uint64_t>(trial));
    PatientStay s = random_stay(inst, 3, 1.0);
    BinnedStay b = bin_stay(s, v, 5, 1.0, Agg::Mean);
    for (int i = 0; i < b.n_e; ++i)
      for (int j = 0; j < b.n_t; ++j)
        if (b.mv(i, j) == 0) EXPECT_DOUBLE_EQ(b.xv(i, j), 0.0);
  }
}

TEST(BinnedCsv, Export) {
  Vocabulary v = vocab_of(2);
  PatientStay s = make_stay({{"e0", 0.1, 1.5}});
  BinnedStay b = bin_stay(s, v, 2, 1.0, Agg::Last);
  std::ostringstream os;
  export_binned_csv(os, b, v);
  EXPECT_NE(os.str().find("x,e0,1.5,0"), std::string::npos);
  EXPECT_NE(os.str().find("m,e0,1,0"), std::string::npos);
}
