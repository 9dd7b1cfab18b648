// Dataset preparation shared by training, evaluation and the benchmark
// suites: binning, label extraction, and the worker-thread cap.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "duett/model.hpp"

namespace duett {

// Worker parallelism cap: DUETT_THREADS when set, hardware concurrency
// otherwise, never below 1.
int worker_threads();

// Stay-level preparation. window_days empty ("auto") uses each stay's
// duration (last event time; 1.0 for stays without events). Stays are
// processed in parallel workers; output order and content are independent
// of the thread count.
std::vector<PreparedStay> prepare_stays(const std::vector<PatientStay>& stays,
                                        const Vocabulary& vocab, int n_t,
                                        std::optional<double> window_days, Agg agg,
                                        const std::vector<std::string>& label_names);

// Label names for a task spec: either an explicit comma list or, when
// empty, the sorted label keys of the first stay.
std::vector<std::string> resolve_label_names(const std::vector<PatientStay>& stays,
                                             const std::string& task);

}  // namespace duett
