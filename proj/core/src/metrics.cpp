#include "mtrl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mtrl::metrics {

std::vector<double> smooth(std::span<const double> curve, std::size_t window) {
  if (window == 0) throw std::invalid_argument("smooth: window must be >= 1");
  std::vector<double> out(curve.size());
  // Direct window sums: no drift from a running total.
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const std::size_t n = std::min(i + 1, window);
    double acc = 0.0;
    for (std::size_t j = i + 1 - n; j <= i; ++j) acc += curve[j];
    out[i] = acc / static_cast<double>(n);
  }
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("percentile: q must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return values[lo];
  return values[lo] + frac * (values[hi] - values[lo]);
}

Band confidence_band(std::span<const std::vector<double>> runs, double level) {
  if (runs.size() < 2) throw std::invalid_argument("confidence_band: need at least two runs");
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("confidence_band: level must lie in (0, 1)");
  const std::size_t len = runs[0].size();
  for (const auto& r : runs) {
    if (r.size() != len) throw std::invalid_argument("confidence_band: runs differ in length");
  }
  const double tail = (1.0 - level) / 2.0;
  Band band;
  band.lower.resize(len);
  band.upper.resize(len);
  std::vector<double> column(runs.size());
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t k = 0; k < runs.size(); ++k) column[k] = runs[k][t];
    band.lower[t] = percentile(column, tail);
    band.upper[t] = percentile(column, 1.0 - tail);
  }
  return band;
}

double mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double stddev(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double mu = mean(values);
  double acc = 0.0;
  for (double v : values) acc += (v - mu) * (v - mu);
  return std::sqrt(acc / static_cast<double>(values.size() - 1));
}

RankTestResult mann_whitney_u(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("mann_whitney_u: empty sample");
  struct Item {
    double value;
    bool first;
  };
  std::vector<Item> all;
  all.reserve(a.size() + b.size());
  for (double v : a) all.push_back({v, true});
  for (double v : b) all.push_back({v, false});
  std::sort(all.begin(), all.end(), [](const Item& x, const Item& y) { return x.value < y.value; });

  const double n1 = static_cast<double>(a.size());
  const double n2 = static_cast<double>(b.size());
  const double n = n1 + n2;
  double rank_sum_a = 0.0;
  double tie_term = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].value == all[i].value) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].first) rank_sum_a += avg_rank;
    }
    i = j;
  }
  RankTestResult r;
  r.u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
  const double mu = n1 * n2 / 2.0;
  const double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (var <= 0.0) return r;
  // Continuity correction.
  const double diff = std::abs(r.u - mu) - 0.5;
  r.z = std::max(diff, 0.0) / std::sqrt(var);
  r.p_value = std::erfc(r.z / std::sqrt(2.0));
  return r;
}

}  // namespace mtrl::metrics
