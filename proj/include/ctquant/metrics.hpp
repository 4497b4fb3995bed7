// SPDX-License-Identifier: Apache-2.0
//
// Binary-classification metrics: ROC AUC, thresholded confusion metrics,
// percentile bootstrap intervals, McNemar's test and Youden thresholds.
// Labels are 0/1; a score counts as positive when score >= threshold.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace ctquant {

/// Probability that a random positive outscores a random negative, ties
/// counted 1/2 (rank formulation). Errors: NoPositives if either class is
/// missing, InvalidArgument on length mismatch or labels outside {0,1}.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct RocPoint {
  double fpr, tpr, threshold;
};
/// One point per distinct score, descending threshold, starting at (0,0)
/// with threshold +inf.
std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels);
std::string roc_to_csv(const std::vector<RocPoint>& points);

struct Confusion {
  long tp = 0, fp = 0, tn = 0, fn = 0;
};

struct ConfusionMetrics {
  Confusion counts;
  double threshold = 0.5;
  double accuracy = 0, sensitivity = 0, specificity = 0, f1 = 0;
};

/// Derived rates of a confusion matrix. Errors: NoPositives when a class is empty.
ConfusionMetrics metrics_from_counts(const Confusion& counts, double threshold);
ConfusionMetrics confusion_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                                   double threshold);

using MetricFn = std::function<double(const std::vector<double>&, const std::vector<int>&)>;

struct BootstrapInterval {
  double lo = 0, hi = 0;
  int replicates = 0;  // requested
  int skipped = 0;     // resamples that lacked a class
  bool warning = false;  // more than 5% skipped
};

/// Percentile 2.5/97.5 interval (type-7 quantiles) of `metric` over
/// resamples with replacement. Replicate r draws from mix_seed(seed, r), so
/// the result does not depend on `jobs`.
BootstrapInterval bootstrap_ci(const MetricFn& metric, const std::vector<double>& scores,
                               const std::vector<int>& labels, int replicates, std::uint64_t seed, int jobs = 1);

struct McNemarResult {
  long b = 0;  // A correct, B wrong
  long c = 0;  // A wrong, B correct
  bool exact = true;
  double p_value = 1.0;
};

/// Exact two-sided binomial on the discordant pairs when b + c < 25, else
/// the continuity-corrected chi-square with one degree of freedom.
McNemarResult mcnemar_test(const std::vector<int>& pred_a, const std::vector<int>& pred_b,
                           const std::vector<int>& labels);

struct ThresholdChoice {
  double threshold = 0.5;
  double youden = 0.0;
  bool degenerate = false;  // all scores equal
};

/// Maximizes sensitivity + specificity - 1 over midpoints between distinct
/// scores (plus one cut below and one above the range); ties go to higher
/// specificity.
ThresholdChoice select_threshold(const std::vector<double>& scores, const std::vector<int>& labels);

struct MetricWithCi {
  double value = 0, lo = 0, hi = 0;
};

struct MetricsReport {
  MetricWithCi accuracy, sensitivity, specificity, f1, auc;
  double threshold = 0.5;
  bool threshold_degenerate = false;
  Confusion counts;
  long n_positive = 0, n_negative = 0;
  int replicates = 0;
  int skipped_replicates = 0;
  std::uint64_t seed = 0;
};

/// Point metrics at `threshold` plus bootstrap intervals, each widened to
/// contain its point value.
MetricsReport evaluate(const std::vector<double>& scores, const std::vector<int>& labels, double threshold,
                       int replicates, std::uint64_t seed, int jobs = 1);
std::string metrics_to_json(const MetricsReport& report);

}  // namespace ctquant
