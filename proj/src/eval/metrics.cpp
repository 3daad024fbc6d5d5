#include "mdt/metrics.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "mdt/random.h"

namespace mdt {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels, const char* name) {
  if (scores.size() != labels.size()) {
    throw ShapeError(std::string(name) + ": " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw ContractError(std::string(name) + ": labels must be 0 or 1");
  }
}

std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, "auroc");
  const std::size_t n = scores.size();
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) throw UndefinedMetricError("auroc needs both classes");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of positive midranks; ranks are 1-based and doubled to stay integral.
  std::uint64_t rank_sum2 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t midrank2 = static_cast<std::uint64_t>(i + 1 + j);  // 2 × mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] == 1) rank_sum2 += midrank2;
    }
    i = j;
  }
  // U = R⁺ − n⁺(n⁺+1)/2, all doubled.
  const std::uint64_t u2 = rank_sum2 - static_cast<std::uint64_t>(positives) * (positives + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

double auprc(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, "auprc");
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (positives == 0) throw UndefinedMetricError("auprc needs at least one positive");
  const auto order = descending_order(scores);
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += static_cast<std::size_t>(labels[order[j]]);
      ++j;
    }
    seen = j;
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

Interval bootstrap_ci(std::size_t cases, const std::function<double(std::span<const std::size_t>)>& metric,
                      std::size_t n_boot, std::uint64_t seed) {
  if (cases == 0 || n_boot == 0) throw ContractError("bootstrap needs cases and resamples");
  std::vector<double> values;
  values.reserve(n_boot);
  std::vector<std::size_t> idx(cases);
  std::size_t undefined = 0;
  for (std::size_t r = 0; r < n_boot; ++r) {
    Rng rng(Rng::mix(seed, r));
    for (;;) {
      for (auto& i : idx) i = static_cast<std::size_t>(rng.below(cases));
      try {
        values.push_back(metric(idx));
        break;
      } catch (const UndefinedMetricError&) {
        if (++undefined > n_boot / 2) {
          throw UndefinedMetricError("metric undefined on " + std::to_string(undefined) + " bootstrap draws after " +
                                     std::to_string(r) + " of " + std::to_string(n_boot) +
                                     " resamples; too few cases of one class");
        }
      }
    }
  }
  std::sort(values.begin(), values.end());
  const std::size_t lo = (25 * n_boot + 999) / 1000;
  const std::size_t hi = (975 * n_boot + 999) / 1000;
  return {values[std::max<std::size_t>(lo, 1) - 1], values[std::max<std::size_t>(hi, 1) - 1]};
}

Interval bootstrap_ci(BinaryMetric metric, std::span<const double> scores, std::span<const int> labels,
                      std::size_t n_boot, std::uint64_t seed) {
  metric(scores, labels);  // must be defined on the full sample
  std::vector<double> s(scores.size());
  std::vector<int> y(scores.size());
  return bootstrap_ci(
      scores.size(),
      [&](std::span<const std::size_t> idx) {
        for (std::size_t i = 0; i < idx.size(); ++i) {
          s[i] = scores[idx[i]];
          y[i] = labels[idx[i]];
        }
        return metric(s, y);
      },
      n_boot, seed);
}

double incomplete_beta(double a, double b, double x) {
  if (!(x >= 0.0 && x <= 1.0)) throw ContractError("incomplete_beta: x outside [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  // The continued fraction converges fast for x < (a+1)/(a+b+2); use the
  // symmetry I_x(a,b) = 1 − I_{1−x}(b,a) otherwise.
  if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - incomplete_beta(b, a, 1.0 - x);
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-15;
  double c = 1.0, d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double f = d;
  for (int m = 1; m <= 500; ++m) {
    const double m2 = 2.0 * m;
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    f *= d * c;
    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    f *= delta;
    if (std::abs(delta - 1.0) < eps) break;
  }
  return std::exp(log_front) * f / a;
}

TTestResult two_sample_ttest(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ContractError("t-test needs at least two values per sample");
  const auto mean = [](std::span<const double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  const auto ss = [](std::span<const double> v, double m) {
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s;
  };
  const double ma = mean(a), mb = mean(b);
  TTestResult r;
  r.dof = static_cast<double>(a.size() + b.size() - 2);
  const double pooled = (ss(a, ma) + ss(b, mb)) / r.dof;
  if (pooled == 0.0) {
    if (ma == mb) return {0.0, r.dof, 1.0};
    return {ma < mb ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity(), r.dof, 0.0};
  }
  const double se = std::sqrt(pooled * (1.0 / static_cast<double>(a.size()) + 1.0 / static_cast<double>(b.size())));
  r.t = (ma - mb) / se;
  r.p = incomplete_beta(r.dof / 2.0, 0.5, r.dof / (r.dof + r.t * r.t));
  return r;
}

std::string_view metric_name(MetricKind kind) { return kind == MetricKind::auroc ? "auroc" : "auprc"; }

EvalReport evaluate_predictions(const Tensor& probabilities, const Tensor& labels, MetricKind metric,
                                std::size_t n_boot, std::uint64_t seed, const std::vector<std::string>& class_names) {
  if (probabilities.rank() != 2 || probabilities.shape() != labels.shape()) {
    throw ShapeError("evaluate_predictions: probabilities " + shape_to_string(probabilities.shape()) +
                     " vs labels " + shape_to_string(labels.shape()));
  }
  const std::size_t n = probabilities.dim(0), k = probabilities.dim(1);
  const BinaryMetric fn = metric == MetricKind::auroc ? &auroc : &auprc;
  std::vector<std::vector<double>> scores(k, std::vector<double>(n));
  std::vector<std::vector<int>> truth(k, std::vector<int>(n));
  auto pd = probabilities.data();
  auto ld = labels.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      scores[c][i] = pd[i * k + c];
      truth[c][i] = static_cast<int>(ld[i * k + c]);
    }
  }
  EvalReport report;
  report.metric = metric;
  report.n_bootstrap = n_boot;
  report.seed = seed;
  report.class_names = class_names;
  if (report.class_names.empty()) {
    for (std::size_t c = 0; c < k; ++c) report.class_names.push_back("class_" + std::to_string(c));
  }
  if (report.class_names.size() != k) throw ShapeError("class name count does not match the class count");
  for (std::size_t c = 0; c < k; ++c) {
    report.values.push_back(fn(scores[c], truth[c]));
    report.intervals.push_back(bootstrap_ci(fn, scores[c], truth[c], n_boot, Rng::mix(seed, c + 1)));
  }
  report.mean = std::accumulate(report.values.begin(), report.values.end(), 0.0) / static_cast<double>(k);
  std::vector<double> s(n);
  std::vector<int> y(n);
  report.mean_interval = bootstrap_ci(
      n,
      [&](std::span<const std::size_t> idx) {
        double total = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
          for (std::size_t i = 0; i < idx.size(); ++i) {
            s[i] = scores[c][idx[i]];
            y[i] = truth[c][idx[i]];
          }
          total += fn(s, y);
        }
        return total / static_cast<double>(k);
      },
      n_boot, seed);
  return report;
}

std::string EvalReport::to_csv() const {
  std::string out = "class,value,ci_lo,ci_hi\n";
  for (std::size_t c = 0; c < values.size(); ++c) {
    out += class_names[c] + "," + format_number(values[c]) + "," + format_number(intervals[c].lo) + "," +
           format_number(intervals[c].hi) + "\n";
  }
  out += "mean," + format_number(mean) + "," + format_number(mean_interval.lo) + "," + format_number(mean_interval.hi) +
         "\n";
  return out;
}

std::string EvalReport::to_json() const {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < values.size(); ++c) {
    classes.push_back({{"class", class_names[c]}, {"value", values[c]}, {"ci", {intervals[c].lo, intervals[c].hi}}});
  }
  nlohmann::json j{{"metric", metric_name(metric)},
                   {"classes", classes},
                   {"mean", {{"value", mean}, {"ci", {mean_interval.lo, mean_interval.hi}}}},
                   {"n_bootstrap", n_bootstrap},
                   {"seed", seed}};
  return j.dump(2) + "\n";
}

}  // namespace mdt
