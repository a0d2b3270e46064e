#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace spruft {

/// Quantile of already-sorted data with linear interpolation between order
/// statistics: position h = q·(n−1).
double quantile_sorted(std::span<const double> sorted, double q);
/// Sorts a copy, then quantile_sorted.
double quantile(std::span<const double> values, double q);

struct FiveNumberSummary {
  double mean = 0.0;
  double min = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double max = 0.0;
};

FiveNumberSummary summarize(std::span<const double> values);

double normal_cdf(double x);
/// Pr[Z > x] for standard normal Z.
double normal_upper_tail(double x);

/// Neumaier compensated summation.
class CompensatedSum {
 public:
  void add(double v);
  double value() const { return sum_ + carry_; }

 private:
  double sum_ = 0.0;
  double carry_ = 0.0;
};

/// Streaming mean / variance (Welford).
class RunningMoments {
 public:
  void add(double v);
  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  /// Unbiased sample variance.
  double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

}  // namespace spruft
