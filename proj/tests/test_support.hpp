#pragma once

#include <algorithm>
#include <cmath>

#include "spruft/rng.hpp"
#include "spruft/tensor.hpp"

namespace testing_support {

inline spruft::Tensor random_tensor(spruft::Shape shape, spruft::RngStream& rng, double scale = 1.0) {
  spruft::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

// Entrywise |a−b| / max(|a|, |b|, floor), maximized.
inline double max_rel_error(const spruft::Tensor& a, const spruft::Tensor& b, double floor = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double den = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / den);
  }
  return worst;
}

}  // namespace testing_support
