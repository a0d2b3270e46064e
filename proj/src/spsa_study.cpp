#include "spruft/spsa_study.hpp"

#include <cmath>

#include "spruft/errors.hpp"
#include "spruft/importance.hpp"
#include "spruft/rng.hpp"
#include "spruft/spsa.hpp"
#include "spruft/stats.hpp"

namespace spruft {

MomentStudy spsa_moment_study(std::span<const double> g, std::size_t n, std::size_t k, std::size_t samples,
                              double epsilon, std::uint64_t seed) {
  if (g.empty()) throw ConfigError("spsa study: empty gradient");
  if (samples < 2) throw ConfigError("spsa study: at least two samples are needed");
  const Tensor grad({1, g.size()}, std::vector<double>(g.begin(), g.end()));
  auto objective = QuadraticObjective::with_gradient(Tensor({1, g.size()}), grad, k);
  SpsaConfig cfg;
  cfg.n = n;
  cfg.k = k;
  cfg.epsilon = epsilon;
  cfg.validate();
  std::vector<RunningMoments> moments(g.size());
  for (std::size_t s = 0; s < samples; ++s) {
    cfg.base_seed = combine_keys(seed, s);
    const auto est = spsa_estimate(objective, cfg);
    for (std::size_t i = 0; i < g.size(); ++i) moments[i].add(est.estimate[i]);
  }
  double s2 = 0.0;
  for (double v : g) s2 += v * v;
  MomentStudy out{n, k, samples, {}};
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double var = moments[i].variance();
    out.rows.push_back({i, g[i], moments[i].mean(), std::sqrt(var / static_cast<double>(samples)), var,
                        (g[i] * g[i] + s2) / static_cast<double>(n * k)});
  }
  return out;
}

namespace {

double normalized_gap(double g_i, double g_j, double others_sq, double nk) {
  const double s2 = g_i * g_i + g_j * g_j + others_sq;
  const double vi = (g_i * g_i + s2) / nk, vj = (g_j * g_j + s2) / nk;
  return (g_i - g_j) / std::sqrt((vi + vj) / 2.0);
}

}  // namespace

RankRow spsa_rank_point(double gap, double g_j, std::span<const double> others, std::size_t n, std::size_t k,
                        std::size_t replications, double epsilon, std::uint64_t seed) {
  if (gap < 0.0) throw ConfigError("spsa study: gaps must be nonnegative");
  if (replications == 0) throw ConfigError("spsa study: replications must be positive");
  const double nk = static_cast<double>(n * k);
  double others_sq = 0.0;
  for (double v : others) others_sq += v * v;

  double lo = g_j, hi = g_j + 1.0;
  for (int i = 0; normalized_gap(hi, g_j, others_sq, nk) < gap; ++i) {
    if (i > 60) throw ConfigError("spsa study: gap " + std::to_string(gap) + " is unreachable at this n·k");
    hi = g_j + 2.0 * (hi - g_j);
  }
  for (int i = 0; i < 200 && hi - lo > 1e-15 * std::max(1.0, std::abs(hi)); ++i) {
    const double mid = 0.5 * (lo + hi);
    (normalized_gap(mid, g_j, others_sq, nk) < gap ? lo : hi) = mid;
  }
  const double g_i = gap == 0.0 ? g_j : 0.5 * (lo + hi);

  std::vector<double> g{g_i, g_j};
  g.insert(g.end(), others.begin(), others.end());
  const Tensor grad({1, g.size()}, g);
  auto objective = QuadraticObjective::with_gradient(Tensor({1, g.size()}), grad, k);
  SpsaConfig cfg;
  cfg.n = n;
  cfg.k = k;
  cfg.epsilon = epsilon;
  cfg.validate();
  std::size_t wins = 0;
  for (std::size_t r = 0; r < replications; ++r) {
    cfg.base_seed = combine_keys(seed, r);
    const auto est = spsa_estimate(objective, cfg).estimate;
    wins += est[0] > est[1];
  }
  double s2 = 0.0;
  for (double v : g) s2 += v * v;
  RankRow row;
  row.gap = gap;
  row.g_i = g_i;
  row.g_j = g_j;
  row.replications = replications;
  row.empirical = static_cast<double>(wins) / static_cast<double>(replications);
  row.predicted = pair_rank_probability(g_i, g_j, (g_i * g_i + s2) / nk, (g_j * g_j + s2) / nk);
  const double diff = g_i - g_j;
  row.predicted_exact = normal_cdf(diff / std::sqrt((diff * diff + 2.0 * s2) / nk));
  return row;
}

}  // namespace spruft
