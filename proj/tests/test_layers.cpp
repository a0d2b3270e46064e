#include <gtest/gtest.h>

#include <cmath>

#include "spruft/errors.hpp"
#include "spruft/layers.hpp"
#include "test_support.hpp"

using namespace spruft;
using testing_support::max_rel_error;
using testing_support::random_tensor;

namespace {

LabeledBatch random_batch(std::size_t b, std::size_t d, std::size_t p, RngStream& rng) {
  LabeledBatch batch{random_tensor({b, d}, rng), {}};
  for (std::size_t i = 0; i < b; ++i) batch.labels.push_back(static_cast<int>(i % p));
  return batch;
}

// Straight-line recomputation of an MLP's mean cross-entropy.
double reference_mlp_loss(const Model& m, const LabeledBatch& batch) {
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::vector<double> h(batch.inputs.data().begin() + i * m.input_dim,
                          batch.inputs.data().begin() + (i + 1) * m.input_dim);
    for (const auto& layer : m.layers) {
      if (const auto* l = std::get_if<LinearLayer>(&layer)) {
        std::vector<double> out(l->d_out());
        for (std::size_t r = 0; r < l->d_out(); ++r) {
          double acc = l->bias ? (*l->bias)[r] : 0.0;
          for (std::size_t c = 0; c < l->d_in(); ++c) acc += l->weight(r, c) * h[c];
          out[r] = acc;
        }
        h = out;
      } else {
        for (auto& v : h) v = std::max(v, 0.0);
      }
    }
    double mx = h[0];
    for (double v : h) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : h) z += std::exp(v - mx);
    total += std::log(z) + mx - h[static_cast<std::size_t>(batch.labels[i])];
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace

TEST(Layers, ForwardLinearIdentityAndHand) {
  RngStream rng(1);
  LinearLayer id{"id", Tensor::identity(3), Tensor({3})};
  const Tensor x = random_tensor({4, 3}, rng);
  EXPECT_EQ(forward_linear(id, x), x);
  LinearLayer hand{"hand", Tensor::from_rows({{1, 1}}), Tensor::vector({1})};
  EXPECT_EQ(forward_linear(hand, Tensor::from_rows({{2, 3}}))[0], 6.0);
}

TEST(Layers, ForwardLinearMatchesLoopAndIsAdditive) {
  RngStream rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    LinearLayer l{"l", random_tensor({4, 6}, rng), random_tensor({4}, rng)};
    const Tensor x = random_tensor({3, 6}, rng);
    const Tensor y = forward_linear(l, x);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t r = 0; r < 4; ++r) {
        double acc = (*l.bias)[r];
        for (std::size_t c = 0; c < 6; ++c) acc += l.weight(r, c) * x(i, c);
        EXPECT_NEAR(y(i, r), acc, 1e-12);
      }
    const Tensor ws = random_tensor({4, 6}, rng);
    LinearLayer merged{"m", l.weight + ws, l.bias};
    LinearLayer delta{"d", ws, std::nullopt};
    EXPECT_LT(max_abs_diff(forward_linear(merged, x), forward_linear(l, x) + forward_linear(delta, x)), 1e-12);
  }
}

TEST(Layers, UniformLogitsGiveLogP) {
  Model m = make_mlp({4, {}, 5}, 3);
  m.linear("head").weight.fill(0.0);
  RngStream rng(3);
  const auto batch = random_batch(10, 4, 5, rng);
  EXPECT_NEAR(model_loss(m, batch).loss, std::log(5.0), 1e-14);
}

TEST(Layers, SaturatedLogitsGiveSmallLoss) {
  Model m = make_mlp({2, {}, 2}, 3);
  m.linear("head").weight = Tensor::from_rows({{50, 0}, {0, 50}});
  const LabeledBatch batch{Tensor::from_rows({{1, 0}, {0, 1}}), {0, 1}};
  const double loss = model_loss(m, batch).loss;
  EXPECT_LT(loss, 0.01);
  EXPECT_GE(loss, 0.0);
}

TEST(Layers, LabelOutOfRange) {
  Model m = make_mlp({2, {3}, 2}, 3);
  const LabeledBatch batch{Tensor({1, 2}, 1.0), {2}};
  EXPECT_THROW((void)model_loss(m, batch), ContractError);
}

TEST(Layers, MlpLossMatchesReference) {
  RngStream rng(4);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Model m = make_mlp({5, {7, 6}, 3}, seed);
    for (auto& l : m.layers)
      if (auto* lin = std::get_if<LinearLayer>(&l)) *lin->bias = random_tensor({lin->d_out()}, rng, 0.1);
    const auto batch = random_batch(8, 5, 3, rng);
    EXPECT_NEAR(model_loss(m, batch).loss, reference_mlp_loss(m, batch), 1e-12);
  }
}

TEST(Layers, FiniteDifferenceExactOnQuadratic) {
  Tensor theta = Tensor::vector({0.3, -1.2, 2.5});
  const Tensor fd = finite_diff_gradient(
      [&] {
        double s = 0.0;
        for (double v : theta.data()) s += 0.5 * v * v;
        return s;
      },
      theta, 1e-3);
  EXPECT_LT(max_abs_diff(fd, theta), 1e-10);
}

TEST(Layers, FiniteDifferenceSymmetricZeroWeights) {
  // Zero head weights with a label-symmetric batch: every input column's gradient vanishes.
  Model m = make_mlp({2, {}, 2}, 0);
  m.linear("head").weight.fill(0.0);
  const LabeledBatch batch{Tensor::from_rows({{1, 2}, {1, 2}}), {0, 1}};
  const Tensor g = finite_diff_gradient(m, batch, "head.weight", 1e-5);
  for (double v : g.data()) EXPECT_NEAR(v, 0.0, 1e-10);
}

TEST(Layers, MlpBackwardMatchesFiniteDifferences) {
  RngStream rng(5);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Model m = make_mlp({4, {6, 5}, 3}, seed);
    // Nonzero biases keep pre-activations off the ReLU kink.
    for (auto& l : m.layers)
      if (auto* lin = std::get_if<LinearLayer>(&l)) *lin->bias = random_tensor({lin->d_out()}, rng, 0.5);
    const auto batch = random_batch(6, 4, 3, rng);
    const auto names = m.parameter_names();
    BaseParameters policy({names.begin(), names.end()});
    auto result = model_loss(m, batch, policy);
    const auto grads = result.tape.backward(result.loss_node);
    for (const auto& name : names) {
      const Tensor fd = finite_diff_gradient(m, batch, name, 1e-5);
      EXPECT_LT(max_rel_error(grads.at(policy.bindings().at(name)), fd), 1e-6) << name;
    }
  }
}

TEST(Layers, TransformerBackwardMatchesFiniteDifferences) {
  RngStream rng(6);
  Model m = make_transformer({3, 2, 4, 6, 3}, 9);
  const auto batch = random_batch(4, 6, 3, rng);
  const auto names = m.parameter_names();
  BaseParameters policy({names.begin(), names.end()});
  auto result = model_loss(m, batch, policy);
  const auto grads = result.tape.backward(result.loss_node);
  for (const auto& name : names) {
    const Tensor fd = finite_diff_gradient(m, batch, name, 1e-5);
    EXPECT_LT(max_rel_error(grads.at(policy.bindings().at(name)), fd), 1e-6) << name;
  }
}

TEST(Layers, ValidateRejectsBadComposition) {
  Model m = make_mlp({4, {6}, 3}, 0);
  m.linear("head").weight = Tensor({3, 5});
  EXPECT_THROW(m.validate(), ConfigError);
}

TEST(Layers, PerClassSummary) {
  const std::vector<int> y{0, 0, 1, 1};
  const auto perfect = per_class_accuracy_summary(y, y, 2);
  for (double v : {perfect.mean, perfect.min, perfect.q1, perfect.median, perfect.q3, perfect.max}) EXPECT_EQ(v, 1.0);
  const std::vector<int> pred{0, 1, 1, 1};
  const auto s = per_class_accuracy_summary(pred, y, 2);
  EXPECT_EQ(s.min, 0.5);
  EXPECT_EQ(s.max, 1.0);
  EXPECT_EQ(s.median, 0.75);
  const std::vector<int> y4{0, 1, 2, 3, 0, 1, 2, 3};
  const std::vector<int> constant(8, 2);
  EXPECT_DOUBLE_EQ(per_class_accuracy_summary(constant, y4, 4).mean, 0.25);
  EXPECT_THROW((void)per_class_accuracy_summary(y, y, 3), ContractError);
}
