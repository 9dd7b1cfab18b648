#include "duett/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <thread>

#include "duett/error.hpp"

namespace duett {

int worker_threads() {
  if (const char* env = std::getenv("DUETT_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

namespace {

// Static partition over [0, n); each worker writes disjoint slots, so the
// result is independent of scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const int workers = std::min<int>(worker_threads(), static_cast<int>(n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      for (std::size_t i = static_cast<std::size_t>(w); i < n;
           i += static_cast<std::size_t>(workers))
        fn(i);
    });
  }
  for (auto& t : threads) t.join();
}

double stay_duration(const PatientStay& stay) {
  if (stay.events.empty()) return 1.0;
  return stay.events.back().time_days > 0 ? stay.events.back().time_days : 1.0;
}

}  // namespace

std::vector<std::string> resolve_label_names(const std::vector<PatientStay>& stays,
                                             const std::string& task) {
  std::vector<std::string> names;
  if (!task.empty()) {
    std::stringstream ss(task);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) names.push_back(item);
  } else if (!stays.empty()) {
    for (const auto& [k, v] : stays.front().labels) names.push_back(k);
  }
  if (names.empty()) throw DataError("no labels available for the task");
  return names;
}

std::vector<PreparedStay> prepare_stays(const std::vector<PatientStay>& stays,
                                        const Vocabulary& vocab, int n_t,
                                        std::optional<double> window_days, Agg agg,
                                        const std::vector<std::string>& label_names) {
  std::vector<PreparedStay> out(stays.size());
  parallel_for(stays.size(), [&](std::size_t k) {
    const PatientStay& s = stays[k];
    const double w = window_days ? *window_days : stay_duration(s);
    PreparedStay p;
    p.stay_id = s.stay_id;
    p.binned = bin_stay(s, vocab, n_t, w, agg);
    p.statics = s.statics;
    p.labels.reserve(label_names.size());
    for (const auto& name : label_names) {
      auto it = s.labels.find(name);
      p.labels.push_back(it == s.labels.end() ? 0.0 : it->second);
    }
    out[k] = std::move(p);
  });
  return out;
}

}  // namespace duett
