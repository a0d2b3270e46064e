#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace spruft {

/// Per-coordinate moments of the averaged SPSA estimate against the (g_i² + Σg²)/(n·k) law.
struct MomentRow {
  std::size_t coordinate = 0;
  double g = 0.0;
  double mean = 0.0;
  double std_error = 0.0;
  double variance = 0.0;
  double law_variance = 0.0;

  double z_score() const { return std_error > 0.0 ? (mean - g) / std_error : 0.0; }
  double ratio() const { return variance / law_variance; }
};

struct MomentStudy {
  std::size_t n = 0, k = 0, samples = 0;
  std::vector<MomentRow> rows;
};

/// `samples` independent n·k estimates of a quadratic whose gradient is g.
MomentStudy spsa_moment_study(std::span<const double> g, std::size_t n, std::size_t k, std::size_t samples,
                              double epsilon, std::uint64_t seed);

/// Frequency of ĝ_i > ĝ_j against the normal-tail prediction.
struct RankRow {
  double gap = 0.0;  // normalized: (g_i − g_j)/√((σ_i² + σ_j²)/2)
  double g_i = 0.0, g_j = 0.0;
  std::size_t replications = 0;
  double empirical = 0.0;
  double predicted = 0.0;
  /// Φ((g_i − g_j)/sd) with sd² = ((g_i − g_j)² + 2Σg²)/(n·k), the exact
  /// variance of ĝ_i − ĝ_j on a quadratic.
  double predicted_exact = 0.0;
};

/// Places g_i above g_j at the requested normalized gap (σ² from the variance
/// law, which itself depends on g_i), then counts wins over `replications`.
/// Coordinates are [g_i, g_j, others...].
RankRow spsa_rank_point(double gap, double g_j, std::span<const double> others, std::size_t n, std::size_t k,
                        std::size_t replications, double epsilon, std::uint64_t seed);

}  // namespace spruft
