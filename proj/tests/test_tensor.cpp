#include <gtest/gtest.h>

#include <cmath>

#include "spruft/errors.hpp"
#include "spruft/rng.hpp"
#include "spruft/stats.hpp"
#include "spruft/tensor.hpp"
#include "test_support.hpp"

using namespace spruft;

TEST(Tensor, ShapeAndCount) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 12u);
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Tensor, MatmulIdentity) {
  const Tensor b = Tensor::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(Tensor::identity(2), b), b);
}

TEST(Tensor, MatmulHand) {
  const Tensor r = matmul(Tensor::from_rows({{1, 2}}), Tensor::from_rows({{3}, {4}}));
  ASSERT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r[0], 11.0);
}

TEST(Tensor, MatmulMatchesTripleLoop) {
  RngStream rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = testing_support::random_tensor({5, 4}, rng);
    const Tensor b = testing_support::random_tensor({4, 3}, rng);
    const Tensor got = matmul(a, b);
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        double ref = 0.0;
        for (std::size_t p = 0; p < 4; ++p) ref += a[i * 4 + p] * b[p * 3 + j];
        EXPECT_NEAR(got(i, j), ref, 1e-12);
      }
    }
    EXPECT_LT(max_abs_diff(matmul_nt(a, transpose(b)), got), 1e-12);
    EXPECT_LT(max_abs_diff(matmul_tn(transpose(a), b), got), 1e-12);
  }
}

TEST(Tensor, MatmulErrorNamesBothShapes) {
  try {
    (void)matmul(Tensor({2, 3}), Tensor({4, 5}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("[2x3]"), std::string::npos);
    EXPECT_NE(what.find("[4x5]"), std::string::npos);
  }
}

TEST(Stats, QuantileLinearInterpolation) {
  const std::vector<double> v{0.5, 1.0};
  EXPECT_DOUBLE_EQ(quantile(v, 0.5), 0.75);
  std::vector<double> ramp;
  for (int i = 0; i <= 10; ++i) ramp.push_back(10 - i);
  for (int l = 0; l <= 10; ++l) EXPECT_NEAR(quantile(ramp, l / 10.0), l, 1e-12);
}

TEST(Stats, SummaryOrdered) {
  const std::vector<double> v{0.3, 0.9, 0.1, 0.5, 0.7};
  const auto s = summarize(v);
  EXPECT_LE(s.min, s.q1);
  EXPECT_LE(s.q1, s.median);
  EXPECT_LE(s.median, s.q3);
  EXPECT_LE(s.q3, s.max);
  EXPECT_NEAR(s.mean, 0.5, 1e-15);
}

TEST(Stats, NormalTail) {
  EXPECT_NEAR(normal_cdf(1.0), 0.8413447460685429, 1e-15);
  EXPECT_NEAR(normal_upper_tail(-3.0), 0.9986501019683699, 1e-15);
}

TEST(Rng, CounterRegeneration) {
  CounterRng a(42), b(42);
  for (std::uint64_t c = 0; c < 100; ++c) EXPECT_EQ(a.normal(c), b.normal(c));
  EXPECT_NE(substream(1, "data"), substream(1, "init"));
}

TEST(Rng, NormalFourthMoment) {
  CounterRng rng(substream(3, "spsa"));
  RunningMoments m2;
  CompensatedSum m4;
  const std::size_t n = 1'000'000;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = rng.normal(i);
    m2.add(z);
    m4.add(z * z * z * z);
  }
  EXPECT_NEAR(m2.mean(), 0.0, 0.005);
  EXPECT_NEAR(m2.variance(), 1.0, 0.01);
  EXPECT_NEAR(m4.value() / n, 3.0, 0.15);
}
