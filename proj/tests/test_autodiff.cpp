#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "vqr/autodiff.hpp"
#include "vqr/grad_check.hpp"
#include "vqr/grad_suite.hpp"
#include "vqr/rng.hpp"

using namespace vqr;
using namespace vqr::ad;

namespace {

Tensor random_tensor(Shape s, Rng& rng) {
  std::vector<float> v(numel(s));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor(std::move(s), std::move(v));
}

}  // namespace

TEST(Autodiff, MatmulMatchesTripleLoop) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 1 + rng.index(6), k = 1 + rng.index(7), n = 1 + rng.index(5);
    const auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    Graph g;
    const auto c = g.matmul(g.leaf(a), g.leaf(b));
    ASSERT_EQ(g.shape(c), (Shape{m, n}));
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += double(a.values[i * k + p]) * b.values[p * n + j];
        EXPECT_NEAR(g.value(c)[i * n + j], acc, 1e-5);
      }
    }
  }
}

TEST(Autodiff, TransposedAndBatchedMatmulAgree) {
  Rng rng(2);
  const auto a = random_tensor({3, 4, 5}, rng), bt = random_tensor({3, 2, 5}, rng);
  Graph g;
  const auto viaT = g.matmul(g.leaf(a), g.leaf(bt), true);
  const auto b = g.permute(g.leaf(bt), {0, 2, 1});
  const auto direct = g.matmul(g.leaf(a), b);
  ASSERT_EQ(g.shape(viaT), (Shape{3, 4, 2}));
  for (std::size_t i = 0; i < g.value(viaT).size(); ++i) EXPECT_NEAR(g.value(viaT)[i], g.value(direct)[i], 1e-5);
}

TEST(Autodiff, ShapeErrorReportsBothShapes) {
  Graph g;
  const auto a = g.leaf(Tensor::zeros({2, 3}));
  const auto b = g.leaf(Tensor::zeros({4, 5}));
  try {
    g.matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
  }
  EXPECT_THROW(g.add(a, b), ShapeError);
}

TEST(Autodiff, SoftmaxIsStableAndNormalized) {
  Graph g;
  const auto x = g.leaf(Tensor({2, 3}, {1000.0f, 1001.0f, 1002.0f, -5.0f, 0.0f, 5.0f}));
  const auto y = g.softmax(x);
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) s += g.value(y)[r * 3 + c];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  const double e0 = 1.0, e1 = std::exp(1.0), e2 = std::exp(2.0);
  EXPECT_NEAR(g.value(y)[0], e0 / (e0 + e1 + e2), 1e-6);
  EXPECT_NEAR(g.value(y)[2], e2 / (e0 + e1 + e2), 1e-6);
}

TEST(Autodiff, MaskedSoftmaxZeroesDisallowedAndRejectsEmptyRows) {
  Graph g;
  auto mask = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1});
  const auto y = g.masked_softmax(g.leaf(Tensor({2, 3}, {0.f, 9.f, 0.f, 1.f, 1.f, 1.f})), mask);
  EXPECT_EQ(g.value(y)[1], 0.0f);
  EXPECT_NEAR(g.value(y)[0], 0.5, 1e-6);
  EXPECT_NEAR(g.value(y)[5], 0.5, 1e-6);
  auto none = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{0, 0, 0});
  EXPECT_ANY_THROW(g.masked_softmax(g.leaf(Tensor::zeros({1, 3})), none));
}

TEST(Autodiff, NormalizeUsesStdPlusEpsilon) {
  Graph g;
  const std::vector<float> x{1.0f, 2.0f, 4.0f, 7.0f};
  const auto y = g.normalize(g.leaf(Tensor({1, 4}, x)), 0.5f);
  const double mu = 3.5;
  double var = 0.0;
  for (float v : x) var += (v - mu) * (v - mu);
  const double sd = std::sqrt(var / 4.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g.value(y)[i], (x[i] - mu) / (sd + 0.5), 1e-6);
}

TEST(Autodiff, MeanVarianceKeepDims) {
  Graph g;
  const auto x = g.leaf(Tensor({2, 3}, {1, 2, 3, 4, 6, 8}));
  const auto m = g.mean(x, 1);
  const auto v = g.variance(x, 0);
  EXPECT_EQ(g.shape(m), (Shape{2, 1}));
  EXPECT_EQ(g.shape(v), (Shape{1, 3}));
  EXPECT_FLOAT_EQ(g.value(m)[0], 2.0f);
  EXPECT_FLOAT_EQ(g.value(m)[1], 6.0f);
  EXPECT_FLOAT_EQ(g.value(v)[0], 2.25f);
  EXPECT_FLOAT_EQ(g.value(v)[2], 6.25f);
}

TEST(Autodiff, GatherAccumulatesRepeatedRows) {
  Graph g;
  const auto table = g.leaf(Tensor({3, 2}, {1, 2, 3, 4, 5, 6}), true);
  const auto rows = g.gather(table, {2, 0, 2});
  EXPECT_EQ(g.value(rows), (std::vector<float>{5, 6, 1, 2, 5, 6}));
  const auto grads = g.backward(g.sum(rows));
  EXPECT_EQ(grads.at(table), (std::vector<float>{1, 1, 0, 0, 2, 2}));
}

TEST(Autodiff, NonFiniteOutputNamesOperation) {
  Graph g;
  const auto x = g.leaf(Tensor({1}, {3e38f}));
  try {
    g.mul_scalar(x, 10.0f);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("mul_scalar"), std::string::npos) << e.what();
  }
}

TEST(Autodiff, BackwardKeepsIntermediateGradientsAndRepeats) {
  Graph g;
  const auto a = g.leaf(Tensor({2}, {1.0f, -2.0f}), true);
  const auto b = g.leaf(Tensor({2}, {3.0f, 0.5f}), true);
  const auto c = g.mul(a, b);
  const auto loss = g.sum(g.tanh(c));
  const auto g1 = g.backward(loss);
  const auto g2 = g.backward(loss);
  EXPECT_TRUE(g1.has(c));
  EXPECT_EQ(g1.at(a), g2.at(a));
  EXPECT_EQ(g1.at(b), g2.at(b));
  for (std::size_t i = 0; i < 2; ++i) {
    const double dc = 1.0 - std::pow(std::tanh(double(g.value(c)[i])), 2);
    EXPECT_NEAR(g1.at(c)[i], dc, 1e-6);
    EXPECT_NEAR(g1.at(a)[i], dc * g.value(b)[i], 1e-6);
  }
}

TEST(Autodiff, TruncateDropsLaterNodes) {
  Graph g;
  const auto a = g.leaf(Tensor::full({2}, 1.0f));
  const auto mark = g.size();
  g.tanh(a);
  g.sigmoid(a);
  g.truncate(mark);
  EXPECT_EQ(g.size(), mark);
  const auto again = g.tanh(a);
  EXPECT_EQ(again, mark);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A loss whose graph omits a dependence: the analytic gradient of x in
  // x * stop(x) misses half the true derivative.
  const LossBuilder f = [](Graph& g, std::span<const NodeId> in) {
    const auto frozen = g.leaf(g.tensor(in[0]));
    return g.sum(g.mul(in[0], frozen));
  };
  EXPECT_GT(grad_check(f, {Tensor({3}, {1.0f, 2.0f, -1.5f})}, 1e-3f), 0.3);
}

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, CentralDifferencesAgree) {
  const auto cases = grad_suite::op_cases();
  const auto& c = cases[GetParam()];
  const auto results = grad_suite::run({c}, 20, 17);
  EXPECT_LT(results[0].max_rel_error, 1e-3) << c.name;
  EXPECT_EQ(results[0].instances, 20u);
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, grad_suite::op_cases().size()),
                         [](const auto& info) { return grad_suite::op_cases()[info.param].name; });
