// Ranking metrics for binary scores, plus curve exports for plotting.

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace duett {

// Probability that a random positive outscores a random negative; ties
// count one half. Errors when labels are single-class.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Average precision: sum of precision * delta-recall over the descending
// sweep of distinct score thresholds. Errors when there is no positive.
double pr_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Curve points for CSV export: (fpr, tpr) and (recall, precision).
std::vector<std::pair<double, double>> roc_curve(const std::vector<double>& scores,
                                                 const std::vector<int>& labels);
std::vector<std::pair<double, double>> pr_curve(const std::vector<double>& scores,
                                                const std::vector<int>& labels);

struct EvalReport {
  std::vector<std::string> label_names;
  std::vector<double> roc;  // per label
  std::vector<double> pr;
  double macro_roc = 0.0;
  double macro_pr = 0.0;
  std::optional<double> recon_mse;

  std::string to_csv() const;
  std::string to_text() const;
};

EvalReport evaluate_scores(const std::vector<std::string>& label_names,
                           const std::vector<std::vector<double>>& scores,
                           const std::vector<std::vector<int>>& labels);

}  // namespace duett
