#pragma once

#include <algorithm>
#include <set>
#include <span>
#include <vector>

// Brute-force references shared by unit and acceptance tests.
namespace mdt::testing {

/// P(s+ > s-) + ½·P(s+ = s-) by counting every positive/negative pair.
inline double pair_count_auroc(std::span<const double> s, std::span<const int> y) {
  long long wins2 = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      ++pairs;
      wins2 += s[i] > s[j] ? 2 : (s[i] == s[j] ? 1 : 0);
    }
  }
  return static_cast<double>(wins2) / (2.0 * static_cast<double>(pairs));
}

/// Σ (R_k − R_{k−1})·P_k with one threshold per distinct score, each
/// precision/recall pair recounted from scratch.
inline double threshold_auprc(std::span<const double> s, std::span<const int> y) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  double positives = 0.0;
  for (int v : y) positives += v;
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0.0, flagged = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) {
        flagged += 1.0;
        tp += y[i];
      }
    }
    const double recall = tp / positives;
    ap += (recall - prev_recall) * (tp / flagged);
    prev_recall = recall;
  }
  return ap;
}

/// Product of row-normalised (A + I) over layers, first layer applied first.
inline std::vector<std::vector<double>> brute_rollout(const std::vector<std::vector<std::vector<double>>>& layers) {
  const std::size_t n = layers.front().size();
  std::vector<std::vector<double>> r(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) r[i][i] = 1.0;
  for (const auto& a : layers) {
    std::vector<std::vector<double>> norm(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += a[i][j] + (i == j ? 1.0 : 0.0);
      for (std::size_t j = 0; j < n; ++j) norm[i][j] = (a[i][j] + (i == j ? 1.0 : 0.0)) / z;
    }
    std::vector<std::vector<double>> next(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t j = 0; j < n; ++j) next[i][j] += norm[i][k] * r[k][j];
      }
    }
    r = std::move(next);
  }
  return r;
}

}  // namespace mdt::testing
