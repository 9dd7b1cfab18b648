#include "duett/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "duett/error.hpp"

namespace duett {

namespace {

void check_inputs(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw DataError("metrics: scores/labels length mismatch");
  if (scores.empty()) throw DataError("metrics: empty inputs");
}

std::vector<std::size_t> descending_order(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  return order;
}

}  // namespace

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_inputs(scores, labels);
  std::size_t pos = 0;
  for (int y : labels) pos += static_cast<std::size_t>(y != 0);
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw DataError("roc_auc: labels are single-class");

  // Mann-Whitney U with average ranks over tied scores.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] != 0) rank_sum_pos += avg_rank;
    i = j;
  }
  const double p = static_cast<double>(pos);
  const double u = rank_sum_pos - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(neg));
}

double pr_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_inputs(scores, labels);
  std::size_t pos = 0;
  for (int y : labels) pos += static_cast<std::size_t>(y != 0);
  if (pos == 0) throw DataError("pr_auc: no positive labels");

  const auto order = descending_order(scores);
  double ap = 0.0;
  double prev_recall = 0.0;
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] != 0)
        ++tp;
      else
        ++fp;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

std::vector<std::pair<double, double>> roc_curve(const std::vector<double>& scores,
                                                 const std::vector<int>& labels) {
  check_inputs(scores, labels);
  std::size_t pos = 0;
  for (int y : labels) pos += static_cast<std::size_t>(y != 0);
  const std::size_t neg = labels.size() - pos;
  const auto order = descending_order(scores);
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] != 0)
        ++tp;
      else
        ++fp;
    }
    pts.emplace_back(neg ? static_cast<double>(fp) / static_cast<double>(neg) : 0.0,
                     pos ? static_cast<double>(tp) / static_cast<double>(pos) : 0.0);
    i = j;
  }
  return pts;
}

std::vector<std::pair<double, double>> pr_curve(const std::vector<double>& scores,
                                                const std::vector<int>& labels) {
  check_inputs(scores, labels);
  std::size_t pos = 0;
  for (int y : labels) pos += static_cast<std::size_t>(y != 0);
  const auto order = descending_order(scores);
  std::vector<std::pair<double, double>> pts;
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] != 0)
        ++tp;
      else
        ++fp;
    }
    pts.emplace_back(pos ? static_cast<double>(tp) / static_cast<double>(pos) : 0.0,
                     static_cast<double>(tp) / static_cast<double>(tp + fp));
    i = j;
  }
  return pts;
}

EvalReport evaluate_scores(const std::vector<std::string>& label_names,
                           const std::vector<std::vector<double>>& scores,
                           const std::vector<std::vector<int>>& labels) {
  EvalReport rep;
  rep.label_names = label_names;
  double roc_sum = 0.0, pr_sum = 0.0;
  for (std::size_t l = 0; l < label_names.size(); ++l) {
    rep.roc.push_back(roc_auc(scores[l], labels[l]));
    rep.pr.push_back(pr_auc(scores[l], labels[l]));
    roc_sum += rep.roc.back();
    pr_sum += rep.pr.back();
  }
  const double n = static_cast<double>(label_names.size());
  rep.macro_roc = roc_sum / n;
  rep.macro_pr = pr_sum / n;
  return rep;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "label,roc_auc,pr_auc\n";
  for (std::size_t l = 0; l < label_names.size(); ++l)
    os << label_names[l] << "," << roc[l] << "," << pr[l] << "\n";
  os << "macro," << macro_roc << "," << macro_pr << "\n";
  if (recon_mse) os << "recon_mse," << *recon_mse << ",\n";
  return os.str();
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "evaluation report\n";
  for (std::size_t l = 0; l < label_names.size(); ++l)
    os << "  " << label_names[l] << ": ROC-AUC " << roc[l] << ", PR-AUC " << pr[l]
       << "\n";
  os << "  macro: ROC-AUC " << macro_roc << ", PR-AUC " << macro_pr << "\n";
  if (recon_mse) os << "  reconstruction MSE: " << *recon_mse << "\n";
  return os.str();
}

}  // namespace duett
