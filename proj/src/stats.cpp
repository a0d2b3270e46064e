#include "spruft/stats.hpp"

#include <algorithm>
#include <cmath>

#include "spruft/errors.hpp"

namespace spruft {

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ContractError("quantile of empty data");
  if (q < 0.0 || q > 1.0) throw ContractError("quantile level outside [0, 1]");
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double quantile(std::span<const double> values, double q) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return quantile_sorted(sorted, q);
}

FiveNumberSummary summarize(std::span<const double> values) {
  if (values.empty()) throw ContractError("summary of empty data");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  CompensatedSum total;
  for (double v : sorted) total.add(v);
  FiveNumberSummary s;
  s.mean = total.value() / static_cast<double>(sorted.size());
  s.min = sorted.front();
  s.q1 = quantile_sorted(sorted, 0.25);
  s.median = quantile_sorted(sorted, 0.5);
  s.q3 = quantile_sorted(sorted, 0.75);
  s.max = sorted.back();
  return s;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double normal_upper_tail(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

void CompensatedSum::add(double v) {
  const double t = sum_ + v;
  if (std::abs(sum_) >= std::abs(v)) {
    carry_ += (sum_ - t) + v;
  } else {
    carry_ += (v - t) + sum_;
  }
  sum_ = t;
}

void RunningMoments::add(double v) {
  ++n_;
  const double delta = v - mean_;
  mean_ += delta / static_cast<double>(n_);
  m2_ += delta * (v - mean_);
}

}  // namespace spruft
