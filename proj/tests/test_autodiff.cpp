#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "rcsr/autodiff.hpp"
#include "rcsr/losses.hpp"
#include "test_util.hpp"

namespace rcsr::ad {
namespace {

using test::random_tensor;

TEST(Evaluate, SumOfMatrix) {
  Graph g;
  const NodeId x = g.input("x", 2, 2);
  g.set_output(g.sum(x));
  EXPECT_EQ(evaluate(g, {{"x", Tensor::from_rows({{1, 2}, {3, 4}})}}), 10.0);
}

TEST(Evaluate, EntropyOfUniformSoftmaxIsLogN) {
  Graph g;
  const NodeId x = g.input("x", 1, 30);
  g.set_output(g.entropy(g.softmax_rows(x)));
  EXPECT_NEAR(evaluate(g, {{"x", Tensor(1, 30)}}), std::log(30.0), 1e-12);
  EXPECT_NEAR(std::log(30.0), 3.401, 1e-3);
}

TEST(Evaluate, SelfCosineIsOne) {
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    Graph g;
    const NodeId v = g.input("v", 1, 7);
    g.set_output(g.sum(g.cosine_rows(v, v)));
    EXPECT_NEAR(evaluate(g, {{"v", random_tensor(1, 7, rng)}}), 1.0, 1e-12);
  }
}

TEST(Evaluate, UnboundInputRejected) {
  Graph g;
  g.set_output(g.sum(g.input("x", 1, 1)));
  EXPECT_THROW(evaluate(g, {}), BindingError);
}

TEST(Evaluate, ShapeMismatchAtConstructionNamesNode) {
  Graph g;
  const NodeId a = g.input("a", 2, 3);
  const NodeId b = g.input("b", 2, 3);
  try {
    g.matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.node(), 2u);
    EXPECT_NE(std::string(e.what()).find("node 2"), std::string::npos);
  }
}

TEST(Evaluate, ShapeMismatchAtBindingNamesNode) {
  Graph g;
  g.input("pad", 1, 1);
  const NodeId x = g.input("x", 2, 2);
  g.set_output(g.sum(x));
  try {
    evaluate(g, {{"pad", Tensor(1, 1)}, {"x", Tensor(3, 2)}});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.node(), x);
  }
}

TEST(Evaluate, NonFiniteIntermediateRejected) {
  Graph g;
  const NodeId x = g.input("x", 1, 2);
  const NodeId lg = g.log(x);
  g.set_output(g.sum(lg));
  try {
    evaluate(g, {{"x", Tensor::from_rows({{1.0, -1.0}})}});
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.node(), lg);
  }
}

TEST(Gradient, Quadratic) {
  Graph g;
  const NodeId x = g.input("x", 1, 1);
  g.set_output(g.sum(g.mul(x, x)));
  const auto grads = gradient(g, {{"x", Tensor(1, 1, 3.0)}}, {"x"});
  EXPECT_EQ(grads.at("x")[0], 6.0);
}

TEST(Gradient, StopGradientIsIdentityForwardZeroBackward) {
  Rng rng(11);
  const Tensor x = random_tensor(3, 4, rng);
  Graph g;
  const NodeId in = g.input("x", 3, 4);
  const NodeId sg = g.stop_gradient(in);
  g.set_output(g.sum(g.mul(sg, sg)));
  const Bindings b{{"x", x}};
  EXPECT_EQ(evaluate_node(g, b, sg), x);
  const auto grads = gradient(g, b, {"x"});
  for (double v : grads.at("x").values()) EXPECT_EQ(v, 0.0);
}

TEST(Gradient, MaskInputRejected) {
  Graph g;
  const NodeId x = g.input("x", 1, 3);
  const NodeId m = g.mask_input("m", 1, 3);
  g.set_output(g.sum(g.masked_softmax_rows(x, m)));
  const Bindings b{{"x", Tensor(1, 3)}, {"m", Tensor::from_rows({{1, 0, 1}})}};
  EXPECT_THROW(gradient(g, b, {"m"}), BindingError);
  EXPECT_NO_THROW(gradient(g, b, {"x"}));
}

TEST(Gradient, UnreachableInputGetsZeros) {
  Graph g;
  const NodeId x = g.input("x", 1, 2);
  g.input("unused", 2, 2);
  g.set_output(g.sum(x));
  const auto grads = gradient(g, {{"x", Tensor(1, 2)}, {"unused", Tensor(2, 2)}}, {"unused"});
  EXPECT_EQ(grads.at("unused"), Tensor(2, 2));
}

TEST(CheckGradients, LinearGraphIsExact) {
  Rng rng(5);
  Graph g;
  const NodeId x = g.input("x", 3, 4);
  g.set_output(g.sum(g.mul(x, g.constant(random_tensor(3, 4, rng)))));
  const Bindings b{{"x", random_tensor(3, 4, rng)}};
  for (double step : {1e-1, 1e-3, 1e-6}) EXPECT_LE(check_gradients(g, b, {"x"}, step), 1e-10);
}

TEST(CheckGradients, RejectsNonPositiveStep) {
  Graph g;
  g.set_output(g.sum(g.input("x", 1, 1)));
  EXPECT_THROW(check_gradients(g, {{"x", Tensor(1, 1)}}, {"x"}, 0.0), std::invalid_argument);
}

TEST(CheckGradients, InfoNceMatchesFiniteDifferences) {
  Rng rng(21);
  Graph g;
  const NodeId zi = g.input("zi", 4, 8);
  const NodeId zt = g.input("zt", 4, 8);
  g.set_output(info_nce_node(g, g.l2_normalize_rows(zi), g.l2_normalize_rows(zt), 0.07));
  const Bindings b{{"zi", random_tensor(4, 8, rng)}, {"zt", random_tensor(4, 8, rng)}};
  EXPECT_LE(check_gradients(g, b, {"zi", "zt"}, 1e-5), 1e-4);
}

// Every primitive against central differences on 100 random instances.
struct PrimitiveCase {
  std::string name;
  std::size_t rows, cols;
  // Builds a matrix-valued expression of the two inputs "a" and "b".
  std::function<NodeId(Graph&, NodeId, NodeId)> build;
  std::size_t b_rows, b_cols;
  bool positive_a = false;
};

class PrimitiveGradient : public ::testing::TestWithParam<PrimitiveCase> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  const auto& pc = GetParam();
  Rng rng(std::hash<std::string>{}(pc.name));
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Graph g;
    const NodeId a = g.input("a", pc.rows, pc.cols);
    const NodeId b = g.input("b", pc.b_rows, pc.b_cols);
    const NodeId expr = pc.build(g, a, b);
    // Random linear read-out so every output coordinate matters.
    const NodeId w = g.constant(random_tensor(g.rows(expr), g.cols(expr), rng));
    g.set_output(g.sum(g.mul(expr, w)));
    Bindings bind{{"a", pc.positive_a ? random_tensor(pc.rows, pc.cols, rng, 0.5, 1.5)
                                      : random_tensor(pc.rows, pc.cols, rng)},
                  {"b", random_tensor(pc.b_rows, pc.b_cols, rng)}};
    worst = std::max(worst, check_gradients(g, bind, {"a", "b"}, 1e-5));
  }
  EXPECT_LE(worst, 1e-4) << pc.name;
}

void PrintTo(const PrimitiveCase& c, std::ostream* os) { *os << c.name; }

INSTANTIATE_TEST_SUITE_P(
    AllPrimitives, PrimitiveGradient,
    ::testing::Values(
        PrimitiveCase{"matmul", 3, 4, [](Graph& g, NodeId a, NodeId b) { return g.matmul(a, b); }, 4, 2},
        PrimitiveCase{"add", 3, 4, [](Graph& g, NodeId a, NodeId b) { return g.add(a, b); }, 3, 4},
        PrimitiveCase{"add_row_broadcast", 3, 4, [](Graph& g, NodeId a, NodeId b) { return g.add(a, b); }, 1, 4},
        PrimitiveCase{"sub", 3, 4, [](Graph& g, NodeId a, NodeId b) { return g.sub(a, b); }, 3, 4},
        PrimitiveCase{"sub_col_broadcast", 3, 4, [](Graph& g, NodeId a, NodeId b) { return g.sub(a, b); }, 3, 1},
        PrimitiveCase{"mul", 3, 4, [](Graph& g, NodeId a, NodeId b) { return g.mul(a, b); }, 3, 4},
        PrimitiveCase{"mul_scalar_broadcast", 3, 4, [](Graph& g, NodeId a, NodeId b) { return g.mul(a, b); }, 1, 1},
        PrimitiveCase{"div", 3, 4, [](Graph& g, NodeId a, NodeId b) { return g.div(b, a); }, 3, 4, true},
        PrimitiveCase{"scale", 3, 4, [](Graph& g, NodeId a, NodeId) { return g.scale(a, -2.5); }, 1, 1},
        PrimitiveCase{"affine", 3, 4, [](Graph& g, NodeId a, NodeId) { return g.affine(a, 0.3, 1.0); }, 1, 1},
        PrimitiveCase{"relu", 3, 4, [](Graph& g, NodeId a, NodeId) { return g.relu(a); }, 1, 1},
        PrimitiveCase{"gelu", 3, 4, [](Graph& g, NodeId a, NodeId) { return g.gelu(a); }, 1, 1},
        PrimitiveCase{"exp", 3, 4, [](Graph& g, NodeId a, NodeId) { return g.exp(a); }, 1, 1},
        PrimitiveCase{"log", 3, 4, [](Graph& g, NodeId a, NodeId) { return g.log(a); }, 1, 1, true},
        PrimitiveCase{"softmax_rows", 3, 5, [](Graph& g, NodeId a, NodeId) { return g.softmax_rows(a); }, 1, 1},
        PrimitiveCase{"log_softmax_rows", 3, 5, [](Graph& g, NodeId a, NodeId) { return g.log_softmax_rows(a); }, 1, 1},
        PrimitiveCase{"masked_softmax_rows", 2, 4,
                      [](Graph& g, NodeId a, NodeId) {
                        return g.masked_softmax_rows(a, g.constant(Tensor::from_rows({{1, 0, 1, 1}, {0, 1, 1, 0}})));
                      },
                      1, 1},
        PrimitiveCase{"l2_normalize_rows", 3, 4, [](Graph& g, NodeId a, NodeId) { return g.l2_normalize_rows(a); }, 1, 1},
        PrimitiveCase{"cosine_rows", 3, 4, [](Graph& g, NodeId a, NodeId b) { return g.cosine_rows(a, b); }, 3, 4},
        PrimitiveCase{"cosine_rows_broadcast", 3, 4, [](Graph& g, NodeId a, NodeId b) { return g.cosine_rows(a, b); }, 1, 4},
        PrimitiveCase{"mean", 3, 4, [](Graph& g, NodeId a, NodeId) { return g.mean(a); }, 1, 1},
        PrimitiveCase{"sum", 3, 4, [](Graph& g, NodeId a, NodeId) { return g.sum(a); }, 1, 1},
        PrimitiveCase{"mean_rows", 3, 4, [](Graph& g, NodeId a, NodeId) { return g.mean_rows(a); }, 1, 1},
        PrimitiveCase{"squared_norm", 3, 4, [](Graph& g, NodeId a, NodeId) { return g.squared_norm(a); }, 1, 1},
        PrimitiveCase{"entropy", 1, 6, [](Graph& g, NodeId a, NodeId) { return g.entropy(g.softmax_rows(a)); }, 1, 1},
        PrimitiveCase{"transpose", 3, 4, [](Graph& g, NodeId a, NodeId) { return g.transpose(a); }, 1, 1},
        PrimitiveCase{"slice_cols", 3, 5, [](Graph& g, NodeId a, NodeId) { return g.slice_cols(a, 1, 3); }, 1, 1},
        PrimitiveCase{"concat_cols", 3, 2, [](Graph& g, NodeId a, NodeId b) { return g.concat_cols(a, b); }, 3, 3},
        PrimitiveCase{"gather_cols", 3, 4, [](Graph& g, NodeId a, NodeId) { return g.gather_cols(a, {3, 0, 3}); }, 1, 1}),
    [](const ::testing::TestParamInfo<PrimitiveCase>& info) { return info.param.name; });

TEST(MaskedSoftmax, MaskedEntriesExactlyZeroAndRowsSumToOne) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Graph g;
    const NodeId x = g.input("x", 4, 6);
    Tensor mask(4, 6);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t r = 0; r < 4; ++r) {
      mask(r, r) = 1.0;  // at least one live entry per row
      for (std::size_t c = 0; c < 6; ++c)
        if (coin(rng)) mask(r, c) = 1.0;
    }
    const NodeId m = g.mask_input("m", 4, 6);
    const NodeId y = g.masked_softmax_rows(x, m);
    const Tensor out = evaluate_node(g, {{"x", random_tensor(4, 6, rng, -5, 5)}, {"m", mask}}, y);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        if (mask(r, c) == 0.0) {
          EXPECT_EQ(out(r, c), 0.0);
        }
        s += out(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(L2Normalize, UnitRowsAndDegenerateZeroRow) {
  Rng rng(9);
  Tensor x = random_tensor(5, 3, rng);
  for (double& v : x.row(4)) v = 1e-10;
  Graph g;
  const NodeId in = g.input("x", 5, 3);
  const NodeId y = g.l2_normalize_rows(in);
  g.set_output(g.sum(g.mul(y, g.constant(random_tensor(5, 3, rng)))));
  const Tensor out = evaluate_node(g, {{"x", x}}, y);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_NEAR(l2_norm(out.row(r)), 1.0, 1e-12);
  for (double v : out.row(4)) EXPECT_EQ(v, 0.0);
  const auto grads = gradient(g, {{"x", x}}, {"x"});
  for (double v : grads.at("x").row(4)) EXPECT_EQ(v, 0.0);
}

TEST(Concurrency, ParallelEvaluationsAgree) {
  Rng rng(12);
  Graph g;
  const NodeId x = g.input("x", 8, 8);
  g.set_output(g.entropy(g.softmax_rows(g.transpose(g.mean_rows(g.gelu(g.matmul(x, x)))))));
  const Bindings b{{"x", random_tensor(8, 8, rng)}};
  const double expected = evaluate(g, b);
  std::vector<double> results(8);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < results.size(); ++i)
    threads.emplace_back([&, i] { results[i] = evaluate(g, b); });
  for (auto& t : threads) t.join();
  for (double r : results) EXPECT_EQ(r, expected);
}

}  // namespace
}  // namespace rcsr::ad
