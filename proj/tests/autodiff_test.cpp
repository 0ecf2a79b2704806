#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "stacklab/checkpoint.hpp"
#include "stacklab/grad_check.hpp"
#include "stacklab/graph.hpp"

using namespace stacklab;

namespace {

template <typename Scalar>
BasicTensor<Scalar> random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng,
                                  double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  BasicTensor<Scalar> t(r, c);
  for (auto& v : t.data) v = Scalar(u(rng));
  return t;
}

}  // namespace

TEST(Ops, MatmulIdentity) {
  std::mt19937_64 rng(1);
  Graph g;
  Tensor eye(3, 3);
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0f;
  const Tensor x = random_tensor<float>(3, 4, rng);
  const NodeId out = g.matmul(g.constant(eye), g.constant(x));
  EXPECT_EQ(g.value(out).data, x.data);
}

TEST(Ops, SoftmaxSymmetric) {
  Graph g;
  const NodeId s = g.softmax(g.constant(Tensor(4, 1)));
  for (float v : g.value(s).data) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Ops, SigmoidAtZero) {
  Graph g;
  EXPECT_FLOAT_EQ(g.scalar(g.sigmoid(g.constant(Tensor(1, 1)))), 0.5f);
}

TEST(Ops, ShapeMismatchNamesShapes) {
  Graph g;
  const NodeId a = g.constant(Tensor(2, 3));
  const NodeId b = g.constant(Tensor(2, 3));
  try {
    g.matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
  }
  EXPECT_THROW(g.add(a, g.constant(Tensor(3, 2))), ShapeError);
}

TEST(Ops, NonFiniteInputRejected) {
  Graph g;
  Tensor t(2, 1);
  t.data[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(g.constant(t), NonFiniteError);
  Tensor huge(1, 1, 1e30f);
  const NodeId h = g.constant(huge);
  EXPECT_THROW(g.mul(h, h), NonFiniteError);
}

TEST(CrossEntropy, UniformIsLogK) {
  Graph g;
  EXPECT_NEAR(g.scalar(g.cross_entropy(g.constant(Tensor(4, 1, 0.7f)), 2)), std::log(4.0), 1e-6);
}

TEST(CrossEntropy, SaturatedCorrect) {
  Graph g;
  const NodeId l = g.constant(Tensor::column({20.0f, 0.0f, 0.0f}));
  EXPECT_NEAR(g.scalar(g.cross_entropy(l, 0)), 0.0, 1e-6);
}

TEST(CrossEntropy, MatchesHandComputation) {
  const long double z = std::exp(0.3L) + std::exp(-1.2L) + std::exp(2.0L);
  const long double expected = -std::log(std::exp(2.0L) / z);
  Graph g;
  const NodeId l = g.constant(Tensor::column({0.3f, -1.2f, 2.0f}));
  EXPECT_NEAR(g.scalar(g.cross_entropy(l, 2)), double(expected), 1e-6);
}

TEST(CrossEntropy, TargetOutOfRange) {
  Graph g;
  const NodeId l = g.constant(Tensor(3, 1));
  EXPECT_THROW(g.cross_entropy(l, 3), std::out_of_range);
}

TEST(Backward, SumGradientIsOnes) {
  Graph g;
  Tensor x(5, 1, 0.3f);
  x.requires_grad = true;
  g.backward(g.sum(g.parameter(x)));
  ASSERT_TRUE(x.grad);
  for (float v : *x.grad) EXPECT_FLOAT_EQ(v, 1.0f);
}

TEST(Backward, SigmoidDerivativeAtZero) {
  Graph g;
  Tensor w(1, 1);
  w.requires_grad = true;
  g.backward(g.sum(g.sigmoid(g.parameter(w))));
  EXPECT_FLOAT_EQ((*w.grad)[0], 0.25f);
}

TEST(Backward, SecondCallRejected) {
  Graph g;
  Tensor x(2, 1, 1.0f);
  x.requires_grad = true;
  const NodeId loss = g.sum(g.parameter(x));
  g.backward(loss);
  EXPECT_THROW(g.backward(loss), std::logic_error);
  EXPECT_THROW(g.sum(loss), std::logic_error);
}

TEST(Backward, NonScalarLossRejected) {
  Graph g;
  Tensor x(2, 1, 1.0f);
  x.requires_grad = true;
  EXPECT_THROW(g.backward(g.parameter(x)), ShapeError);
}

TEST(Backward, FrozenTensorGetsNoGradient) {
  Graph g;
  Tensor a(2, 2, 0.5f), x(2, 1, 1.0f);
  a.requires_grad = false;
  x.requires_grad = true;
  g.backward(g.sum(g.matmul(g.parameter(a), g.parameter(x))));
  EXPECT_FALSE(a.grad);
  EXPECT_TRUE(x.grad);
}

TEST(GradCheck, TwoLayerNetMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto w1 = random_tensor<double>(3, 3, rng), w2 = random_tensor<double>(3, 3, rng);
  const auto x = random_tensor<double>(3, 1, rng);
  auto builder = [&](BasicGraph<double>& g) {
    const NodeId h = g.tanh(g.matmul(g.parameter(w1), g.constant(x)));
    return g.cross_entropy(g.matmul(g.parameter(w2), h), 1);
  };
  const auto report = grad_check<double>(builder, {{"w1", &w1}, {"w2", &w2}});
  EXPECT_TRUE(report.passed) << report.max_deviation;
  EXPECT_LT(report.max_deviation, 1e-4);
}

TEST(GradCheck, LinearModelIsExact) {
  std::mt19937_64 rng(3);
  auto w = random_tensor<double>(1, 4, rng);
  const auto x = random_tensor<double>(4, 1, rng);
  auto builder = [&](BasicGraph<double>& g) {
    return g.sum(g.matmul(g.parameter(w), g.constant(x)));
  };
  EXPECT_LT(grad_check<double>(builder, {{"w", &w}}).max_deviation, 1e-6);
}

TEST(GradCheck, CorruptedGradientFlagged) {
  std::mt19937_64 rng(5);
  auto w = random_tensor<double>(2, 3, rng);
  const auto x = random_tensor<double>(3, 1, rng);
  auto builder = [&](BasicGraph<double>& g) {
    return g.cross_entropy(g.matmul(g.parameter(w), g.constant(x)), 0);
  };
  GradCheckOptions<double> opts;
  opts.tamper = [](std::string_view, std::vector<double>& grad) {
    for (auto& v : grad) v += 0.1;
  };
  const auto report = grad_check<double>(builder, {{"w", &w}}, opts);
  EXPECT_FALSE(report.passed);
  EXPECT_GT(report.max_deviation, opts.tol);
}

TEST(GradCheck, NonFiniteReportedNotThrown) {
  BasicTensor<double> w(1, 1, 1e200);
  auto builder = [&](BasicGraph<double>& g) {
    const NodeId p = g.parameter(w);
    return g.sum(g.mul(p, p));
  };
  GradCheckReport report;
  EXPECT_NO_THROW(report = grad_check<double>(builder, {{"w", &w}}));
  EXPECT_FALSE(report.passed);
}

// Randomized composed graphs over every op, in double precision.
TEST(GradCheck, RandomComposedGraphs) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto a = random_tensor<double>(4, 3, rng);
    auto b = random_tensor<double>(3, 1, rng);
    auto c = random_tensor<double>(4, 1, rng);
    auto table = random_tensor<double>(5, 4, rng);
    auto stack = random_tensor<double>(2, 2, rng);
    auto act = random_tensor<double>(3, 1, rng);
    const std::size_t row = seed % 5, target = seed % 3;
    auto builder = [&](BasicGraph<double>& g) {
      const NodeId h = g.tanh(g.add(g.matmul(g.parameter(a), g.parameter(b)), g.parameter(c)));
      const NodeId e = g.sigmoid(g.mul(h, g.lookup(g.parameter(table), row)));
      const NodeId v = g.slice(e, 1, 3);
      const NodeId s = g.stack_update(g.parameter(stack), g.softmax(g.parameter(act)), v);
      const NodeId r = g.stack_read(s, 2);
      const NodeId logits = g.concat({g.slice(h, 0, 1), g.slice(r, 0, 2)});
      return g.add(g.cross_entropy(logits, target), g.sum(g.softmax(g.concat({e, r}))));
    };
    const auto report = grad_check<double>(
        builder,
        {{"a", &a}, {"b", &b}, {"c", &c}, {"table", &table}, {"stack", &stack}, {"act", &act}});
    EXPECT_TRUE(report.passed) << "seed " << seed << " deviation " << report.max_deviation;
  }
}

TEST(Properties, SoftmaxColumnsSumToOne) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    Graph g;
    const std::size_t rows = 2 + seed % 9, cols = 1 + seed % 4;
    const NodeId s = g.softmax(g.constant(random_tensor<float>(rows, cols, rng, 10.0)));
    const Tensor& out = g.value(s);
    for (std::size_t c = 0; c < cols; ++c) {
      double total = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        EXPECT_GE(out.at(r, c), 0.0f);
        total += out.at(r, c);
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Properties, GradientLinearityAndReproducibility) {
  std::mt19937_64 rng(11);
  Tensor w = random_tensor<float>(3, 3, rng);
  const Tensor x1 = random_tensor<float>(3, 1, rng), x2 = random_tensor<float>(3, 1, rng);
  w.requires_grad = true;
  auto loss_of = [&](Graph& g, const Tensor& x, std::size_t t) {
    return g.cross_entropy(g.tanh(g.matmul(g.parameter(w), g.constant(x))), t);
  };
  auto grad_of = [&](auto build) {
    w.grad.reset();
    Graph g;
    g.backward(build(g));
    return *w.grad;
  };
  const auto g1 = grad_of([&](Graph& g) { return loss_of(g, x1, 0); });
  const auto g2 = grad_of([&](Graph& g) { return loss_of(g, x2, 2); });
  auto both = [&](Graph& g) { return g.add(loss_of(g, x1, 0), loss_of(g, x2, 2)); };
  const auto g12 = grad_of(both);
  for (std::size_t i = 0; i < g12.size(); ++i) EXPECT_NEAR(g12[i], g1[i] + g2[i], 1e-6);
  EXPECT_EQ(grad_of(both), g12);  // bitwise reproducible
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(2);
  std::vector<NamedTensor> tensors{{"W_h", random_tensor<float>(4, 3, rng)},
                                   {"b", random_tensor<float>(4, 1, rng)},
                                   {"empty", Tensor(0, 5)}};
  tensors[1].tensor.data[0] = -0.0f;
  tensors[1].tensor.data[1] = std::numeric_limits<float>::denorm_min();
  const auto path = std::filesystem::temp_directory_path() / "stacklab_ckpt_test.tensors";
  write_tensors(path, tensors);
  const auto back = read_tensors(path);
  ASSERT_EQ(back.size(), tensors.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].name, tensors[i].name);
    EXPECT_EQ(back[i].tensor.shape, tensors[i].tensor.shape);
    ASSERT_EQ(back[i].tensor.data.size(), tensors[i].tensor.data.size());
    EXPECT_EQ(0, std::memcmp(back[i].tensor.data.data(), tensors[i].tensor.data.data(),
                             back[i].tensor.data.size() * sizeof(float)));
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, MissingFileThrows) {
  EXPECT_THROW(read_tensors("/nonexistent/x.tensors"), std::runtime_error);
}
