#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mdt/tensor.h"

namespace mdt {

/// Mann–Whitney AUROC: P(score⁺ > score⁻) + ½·P(tie), via midranks.
/// Throws UndefinedMetricError unless both classes are present.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Average precision Σ (R_k − R_{k−1})·P_k over descending score thresholds,
/// equal scores forming one threshold. Throws UndefinedMetricError without
/// positives.
double auprc(std::span<const double> scores, std::span<const int> labels);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Interval&) const = default;
};

/// Percentile bootstrap over cases.
///
/// Resample r draws case indices with replacement from the stream
/// Rng(Rng::mix(seed, r)); a resample on which `metric` throws
/// UndefinedMetricError is redrawn from the same stream. More undefined draws
/// than half of n_boot aborts with UndefinedMetricError. The sorted values
/// give lo at index ⌈0.025·n⌉ − 1 and hi at ⌈0.975·n⌉ − 1.
Interval bootstrap_ci(std::size_t cases, const std::function<double(std::span<const std::size_t>)>& metric,
                      std::size_t n_boot, std::uint64_t seed);

using BinaryMetric = double (*)(std::span<const double>, std::span<const int>);

Interval bootstrap_ci(BinaryMetric metric, std::span<const double> scores, std::span<const int> labels,
                      std::size_t n_boot, std::uint64_t seed);

struct TTestResult {
  double t = 0.0;
  double dof = 0.0;
  double p = 1.0;
};

/// Two-sided, equal-variance pooled two-sample t-test. With zero pooled
/// variance: equal means give p = 1, different means p = 0.
TTestResult two_sample_ttest(std::span<const double> a, std::span<const double> b);

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
double incomplete_beta(double a, double b, double x);

enum class MetricKind { auroc, auprc };

struct EvalReport {
  MetricKind metric = MetricKind::auroc;
  std::vector<std::string> class_names;
  std::vector<double> values;
  std::vector<Interval> intervals;
  double mean = 0.0;
  Interval mean_interval;
  std::size_t n_bootstrap = 0;
  std::uint64_t seed = 0;

  /// Header class,value,ci_lo,ci_hi; one row per class then a "mean" row.
  std::string to_csv() const;
  std::string to_json() const;
};

/// Per-class and class-mean metric with bootstrap intervals. The mean
/// interval bootstraps the class-mean metric over cases.
EvalReport evaluate_predictions(const Tensor& probabilities, const Tensor& labels, MetricKind metric,
                                std::size_t n_boot, std::uint64_t seed,
                                const std::vector<std::string>& class_names = {});

std::string_view metric_name(MetricKind kind);

}  // namespace mdt
