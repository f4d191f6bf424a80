#pragma once

#include <span>
#include <utility>
#include <vector>

namespace mtrl::metrics {

// Trailing moving average; the first window-1 points average the available prefix.
std::vector<double> smooth(std::span<const double> curve, std::size_t window = 100);

// Linear-interpolated order statistic, position (n - 1) * q.
double percentile(std::vector<double> values, double q);

struct Band {
  std::vector<double> lower;
  std::vector<double> upper;
};

// Pointwise empirical band covering the central `level` mass of the runs.
Band confidence_band(std::span<const std::vector<double>> runs, double level = 0.90);

double mean(std::span<const double> values);
double stddev(std::span<const double> values);

struct RankTestResult {
  double u = 0.0;        // U statistic of the first sample
  double z = 0.0;
  double p_value = 1.0;  // two-sided, normal approximation with tie correction
};

// Mann-Whitney U (Wilcoxon rank-sum) test.
RankTestResult mann_whitney_u(std::span<const double> a, std::span<const double> b);

}  // namespace mtrl::metrics
