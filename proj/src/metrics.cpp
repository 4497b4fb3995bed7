// SPDX-License-Identifier: Apache-2.0
#include "ctquant/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <thread>
#include <nlohmann/json.hpp>

#include "ctquant/digest.hpp"
#include "ctquant/error.hpp"
#include "ctquant/log.hpp"
#include "ctquant/rng.hpp"

namespace ctquant {
namespace {

struct ClassCounts {
  long pos = 0, neg = 0;
};

ClassCounts check_inputs(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw Error(ErrorCode::InvalidArgument, "scores and labels differ in length");
  ClassCounts n;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw Error(ErrorCode::InvalidArgument, "labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw Error(ErrorCode::NonFiniteValue, "score is not finite");
    (labels[i] ? n.pos : n.neg) += 1;
  }
  return n;
}

void require_both(const ClassCounts& n) {
  if (n.pos == 0 || n.neg == 0) throw Error(ErrorCode::NoPositives, "both classes are required");
}

std::vector<std::size_t> order_by_score(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return idx;
}

double quantile7(const std::vector<double>& sorted, double p) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double ratio(long num, long den) { return static_cast<double>(num) / static_cast<double>(den); }

}  // namespace

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  const ClassCounts n = check_inputs(scores, labels);
  require_both(n);
  const auto idx = order_by_score(scores);
  // Sum of positive ranks with ties sharing their mean rank, kept doubled
  // so every partial sum is an integer.
  long long rank2_sum = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    long pos_in_group = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) pos_in_group += labels[idx[j++]];
    const long long first = static_cast<long long>(i) + 1, last = static_cast<long long>(j);
    rank2_sum += pos_in_group * (first + last);
    i = j;
  }
  const double u2 = static_cast<double>(rank2_sum - static_cast<long long>(n.pos) * (n.pos + 1));
  return u2 / (2.0 * static_cast<double>(n.pos) * static_cast<double>(n.neg));
}

std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
  const ClassCounts n = check_inputs(scores, labels);
  require_both(n);
  auto idx = order_by_score(scores);
  std::reverse(idx.begin(), idx.end());
  std::vector<RocPoint> out = {{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  long tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const double t = scores[idx[i]];
    while (i < idx.size() && scores[idx[i]] == t) (labels[idx[i++]] ? tp : fp) += 1;
    out.push_back({ratio(fp, n.neg), ratio(tp, n.pos), t});
  }
  return out;
}

std::string roc_to_csv(const std::vector<RocPoint>& points) {
  std::string out = "fpr,tpr,threshold\n";
  for (const auto& p : points) {
    out += format_double(p.fpr) + "," + format_double(p.tpr) + "," +
           (std::isinf(p.threshold) ? std::string("inf") : format_double(p.threshold)) + "\n";
  }
  return out;
}

ConfusionMetrics metrics_from_counts(const Confusion& k, double threshold) {
  const long pos = k.tp + k.fn, neg = k.tn + k.fp;
  if (pos == 0 || neg == 0) throw Error(ErrorCode::NoPositives, "both classes are required");
  ConfusionMetrics m;
  m.counts = k;
  m.threshold = threshold;
  m.accuracy = ratio(k.tp + k.tn, pos + neg);
  m.sensitivity = ratio(k.tp, pos);
  m.specificity = ratio(k.tn, neg);
  m.f1 = ratio(2 * k.tp, 2 * k.tp + k.fp + k.fn);
  return m;
}

ConfusionMetrics confusion_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                                   double threshold) {
  check_inputs(scores, labels);
  Confusion k;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (labels[i]) {
      (predicted ? k.tp : k.fn) += 1;
    } else {
      (predicted ? k.fp : k.tn) += 1;
    }
  }
  return metrics_from_counts(k, threshold);
}

BootstrapInterval bootstrap_ci(const MetricFn& metric, const std::vector<double>& scores,
                               const std::vector<int>& labels, int replicates, std::uint64_t seed, int jobs) {
  check_inputs(scores, labels);
  if (replicates < 1) throw Error(ErrorCode::InvalidArgument, "replicates must be positive");
  if (scores.empty()) throw Error(ErrorCode::NoPositives, "no records to resample");
  std::vector<std::optional<double>> values(static_cast<std::size_t>(replicates));
  auto run = [&](int begin, int end) {
    std::vector<double> s(scores.size());
    std::vector<int> l(labels.size());
    for (int r = begin; r < end; ++r) {
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(r)));
      for (std::size_t i = 0; i < s.size(); ++i) {
        const auto k = static_cast<std::size_t>(rng.below(scores.size()));
        s[i] = scores[k];
        l[i] = labels[k];
      }
      try {
        values[static_cast<std::size_t>(r)] = metric(s, l);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NoPositives) throw;
      }
    }
  };
  jobs = std::clamp(jobs, 1, replicates);
  if (jobs == 1) {
    run(0, replicates);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(jobs));
    for (int j = 0; j < jobs; ++j) {
      pool.emplace_back([&, j] {
        try {
          run(replicates * j / jobs, replicates * (j + 1) / jobs);
        } catch (...) {
          errors[static_cast<std::size_t>(j)] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  std::vector<double> kept;
  for (const auto& v : values)
    if (v) kept.push_back(*v);
  BootstrapInterval out;
  out.replicates = replicates;
  out.skipped = replicates - static_cast<int>(kept.size());
  if (kept.empty()) throw Error(ErrorCode::NoPositives, "every bootstrap resample lacked a class");
  out.warning = out.skipped * 20 > replicates;
  if (out.warning) {
    logger().warn("bootstrap: {} of {} resamples lacked a class; interval may be too wide", out.skipped, replicates);
  }
  std::sort(kept.begin(), kept.end());
  out.lo = quantile7(kept, 0.025);
  out.hi = quantile7(kept, 0.975);
  return out;
}

McNemarResult mcnemar_test(const std::vector<int>& pred_a, const std::vector<int>& pred_b,
                           const std::vector<int>& labels) {
  if (pred_a.size() != labels.size() || pred_b.size() != labels.size()) {
    throw Error(ErrorCode::InvalidArgument, "prediction and label vectors differ in length");
  }
  McNemarResult r;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool a = pred_a[i] == labels[i], b = pred_b[i] == labels[i];
    if (a && !b) ++r.b;
    if (!a && b) ++r.c;
  }
  const long n = r.b + r.c;
  if (n == 0) return r;
  if (n < 25) {
    r.exact = true;
    const long k = std::min(r.b, r.c);
    double tail = 0.0, coeff = 1.0;  // C(n, i)
    for (long i = 0; i <= k; ++i) {
      tail += coeff;
      coeff = coeff * static_cast<double>(n - i) / static_cast<double>(i + 1);
    }
    r.p_value = std::min(1.0, 2.0 * tail / std::ldexp(1.0, static_cast<int>(n)));
  } else {
    r.exact = false;
    const double d = std::max(0.0, std::abs(static_cast<double>(r.b - r.c)) - 1.0);
    const double stat = d * d / static_cast<double>(n);
    r.p_value = std::erfc(std::sqrt(stat / 2.0));
  }
  return r;
}

ThresholdChoice select_threshold(const std::vector<double>& scores, const std::vector<int>& labels) {
  const ClassCounts n = check_inputs(scores, labels);
  require_both(n);
  const auto idx = order_by_score(scores);
  ThresholdChoice best;
  if (scores[idx.front()] == scores[idx.back()]) {
    best.threshold = scores[idx.front()];
    best.degenerate = true;
    return best;
  }
  // Sweep cuts upward; below the cut everything is negative. J is compared
  // as J * pos * neg = tp * neg + tn * pos - pos * neg, which is exact.
  long tp = n.pos, tn = 0;
  long long best_j = -1, best_tn = -1;
  auto consider = [&](double t) {
    const long long j = static_cast<long long>(tp) * n.neg + static_cast<long long>(tn) * n.pos -
                        static_cast<long long>(n.pos) * n.neg;
    if (j > best_j || (j == best_j && tn > best_tn)) {
      best_j = j;
      best_tn = tn;
      best.threshold = t;
    }
  };
  consider(scores[idx.front()]);
  for (std::size_t i = 0; i < idx.size();) {
    const double s = scores[idx[i]];
    for (; i < idx.size() && scores[idx[i]] == s; ++i) {
      if (labels[idx[i]]) {
        --tp;
      } else {
        ++tn;
      }
    }
    consider(i < idx.size() ? s + (scores[idx[i]] - s) / 2.0
                            : std::nextafter(s, std::numeric_limits<double>::infinity()));
  }
  best.youden = static_cast<double>(best_j) / (static_cast<double>(n.pos) * static_cast<double>(n.neg));
  return best;
}

MetricsReport evaluate(const std::vector<double>& scores, const std::vector<int>& labels, double threshold,
                       int replicates, std::uint64_t seed, int jobs) {
  const ClassCounts n = check_inputs(scores, labels);
  require_both(n);
  MetricsReport r;
  const ConfusionMetrics cm = confusion_metrics(scores, labels, threshold);
  r.threshold = threshold;
  r.counts = cm.counts;
  r.n_positive = n.pos;
  r.n_negative = n.neg;
  r.replicates = replicates;
  r.seed = seed;

  auto with_ci = [&](double value, const MetricFn& fn) {
    const BootstrapInterval ci = bootstrap_ci(fn, scores, labels, replicates, seed, jobs);
    r.skipped_replicates = std::max(r.skipped_replicates, ci.skipped);
    return MetricWithCi{value, std::min(ci.lo, value), std::max(ci.hi, value)};
  };
  auto at_threshold = [threshold](auto field) {
    return [threshold, field](const std::vector<double>& s, const std::vector<int>& l) {
      return confusion_metrics(s, l, threshold).*field;
    };
  };
  r.accuracy = with_ci(cm.accuracy, at_threshold(&ConfusionMetrics::accuracy));
  r.sensitivity = with_ci(cm.sensitivity, at_threshold(&ConfusionMetrics::sensitivity));
  r.specificity = with_ci(cm.specificity, at_threshold(&ConfusionMetrics::specificity));
  r.f1 = with_ci(cm.f1, at_threshold(&ConfusionMetrics::f1));
  r.auc = with_ci(roc_auc(scores, labels), roc_auc);
  return r;
}

std::string metrics_to_json(const MetricsReport& r) {
  nlohmann::ordered_json doc;
  auto put = [&](const char* name, const MetricWithCi& m) { doc[name] = {{"value", m.value}, {"ci95", {m.lo, m.hi}}}; };
  put("accuracy", r.accuracy);
  put("sensitivity", r.sensitivity);
  put("specificity", r.specificity);
  put("f1", r.f1);
  put("auc", r.auc);
  doc["threshold"] = r.threshold;
  doc["threshold_degenerate"] = r.threshold_degenerate;
  doc["confusion"] = {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"tn", r.counts.tn}, {"fn", r.counts.fn}};
  doc["n_positive"] = r.n_positive;
  doc["n_negative"] = r.n_negative;
  doc["bootstrap_replicates"] = r.replicates;
  doc["bootstrap_skipped"] = r.skipped_replicates;
  doc["seed"] = r.seed;
  return doc.dump(2) + "\n";
}

}  // namespace ctquant
