#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "redan/autodiff.hpp"

namespace redan {
namespace {

Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c,
                     bool grad = true) {
  Tensor t({r, c}, 0.0, grad);
  t.fill_uniform(rng, -1.0, 1.0);
  return t;
}

// Test-local central difference, independent of finite_difference_check.
std::vector<double> numeric_grad(Tensor& x, const std::function<double()>& f,
                                 double h = 1e-5) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double orig = x[i];
    x[i] = orig + h;
    double up = f();
    x[i] = orig - h;
    double down = f();
    x[i] = orig;
    out[i] = (up - down) / (2 * h);
  }
  return out;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Contracts an arbitrary output with a fixed random weight so every output
// element contributes to the scalar loss.
Var contract(Graph& g, Var y, const Tensor& w) {
  return sum(mul(y, g.constant(w)));
}

void expect_grads_match(std::vector<Tensor*> inputs,
                        const std::function<Var(Graph&)>& build) {
  for (Tensor* t : inputs) t->clear_grad();
  {
    Graph g;
    Var loss = build(g);
    g.backward(loss);
  }
  auto eval = [&] {
    Graph g;
    return build(g).item();
  };
  for (Tensor* t : inputs) {
    auto num = numeric_grad(*t, eval);
    ASSERT_TRUE(t->has_grad());
    for (std::size_t i = 0; i < t->size(); ++i)
      EXPECT_LT(rel_err(t->grad()[i], num[i]), 1e-4) << "element " << i;
  }
}

TEST(Primitives, TanhOfZeroIsZero) {
  Graph g;
  Var y = tanh(g.constant(Tensor::row({0.0})));
  EXPECT_EQ(y.item(), 0.0);
}

TEST(Primitives, SoftmaxOfEqualLogitsIsUniform) {
  Graph g;
  Var y = row_softmax(g.constant(Tensor::row({0.0, 0.0})));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(Primitives, SumPoolWindowTwo) {
  Graph g;
  Var y = sum_pool(g.constant(Tensor::row({1, 2, 3, 4})), 2);
  ASSERT_EQ(y.cols(), 2u);
  EXPECT_EQ(y.value()[0], 3.0);
  EXPECT_EQ(y.value()[1], 7.0);
}

TEST(Primitives, SumPoolRejectsNonDividingWindow) {
  Graph g;
  EXPECT_THROW(sum_pool(g.constant(Tensor::row({1, 2, 3})), 2), PreconditionError);
}

TEST(Primitives, ShapeErrorNamesOpAndShapes) {
  Graph g;
  Var a = g.zeros(2, 3);
  Var b = g.zeros(2, 3);
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.op(), "matmul");
    EXPECT_EQ(e.lhs(), (Shape{2, 3}));
    EXPECT_EQ(e.rhs(), (Shape{2, 3}));
  }
}

TEST(Primitives, NonFiniteOutputIsNumericError) {
  Graph g;
  Var a = g.constant(Tensor::row({1e300}));
  EXPECT_THROW(mul(a, a), NumericError);
}

TEST(Primitives, EmbeddingPadColumnIsZero) {
  Tensor table({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Graph g;
  std::vector<std::size_t> ids{0, 2, 1};
  Var e = embedding(g.param(table), ids, 0);
  ASSERT_EQ(e.rows(), 2u);
  ASSERT_EQ(e.cols(), 3u);
  EXPECT_EQ(e.at(0, 0), 0.0);
  EXPECT_EQ(e.at(1, 0), 0.0);
  EXPECT_EQ(e.at(0, 1), 5.0);
  EXPECT_EQ(e.at(1, 2), 4.0);
  g.backward(sum(e));
  EXPECT_EQ(table.grad()[0], 0.0);
  EXPECT_EQ(table.grad()[4], 1.0);
}

TEST(Backward, SumGivesOnes) {
  Tensor x({1, 3}, {0.3, -1.0, 2.0}, true);
  Graph g;
  g.backward(sum(g.param(x)));
  for (double v : x.grad()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, TanhSlopeAtZero) {
  Tensor x({1, 1}, {0.0}, true);
  Graph g;
  g.backward(tanh(g.param(x)));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, FanOutAccumulates) {
  Tensor x({1, 1}, {3.0}, true);
  Graph g;
  Var v = g.param(x);
  g.backward(sum(mul(v, v)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor x({1, 2}, {1.0, 2.0}, true);
  Graph g;
  EXPECT_THROW(g.backward(g.param(x)), ShapeError);
}

TEST(Backward, RejectsForeignLoss) {
  Graph g1, g2;
  Var l = g1.constant(Tensor::row({1.0}));
  EXPECT_THROW(g2.backward(l), PreconditionError);
}

TEST(Backward, L2NormalizeDotMatchesFiniteDifference) {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor(rng, 1, 5);
  Tensor u = random_tensor(rng, 1, 5, false);
  expect_grads_match({&x}, [&](Graph& g) {
    return sum(mul(l2_normalize(g.param(x)), g.constant(u)));
  });
}

// Every primitive against central differences on random inputs in [-1, 1].
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesCentralDifference) {
  std::mt19937_64 rng(1000 + GetParam());
  std::uniform_int_distribution<std::size_t> dim(1, 4);
  const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
  Tensor a = random_tensor(rng, m, k);
  Tensor b = random_tensor(rng, k, n);
  Tensor c = random_tensor(rng, m, k);
  Tensor col = random_tensor(rng, m, 1);
  Tensor rowb = random_tensor(rng, 1, k);
  Tensor wmk = random_tensor(rng, m, k, false);
  Tensor wmn = random_tensor(rng, m, n, false);
  Tensor wkm = random_tensor(rng, k, m, false);

  expect_grads_match({&a, &b}, [&](Graph& g) {
    return contract(g, matmul(g.param(a), g.param(b)), wmn);
  });
  expect_grads_match({&a, &c, &col, &rowb}, [&](Graph& g) {
    Var s = add(add(add(g.param(a), g.param(c)), g.param(col)), g.param(rowb));
    return contract(g, s, wmk);
  });
  expect_grads_match({&a, &c}, [&](Graph& g) {
    return contract(g, sub(mul(g.param(a), g.param(c)), g.param(c)), wmk);
  });
  expect_grads_match({&a}, [&](Graph& g) {
    return contract(g, affine(tanh(g.param(a)), -2.0, 0.5), wmk);
  });
  expect_grads_match({&a}, [&](Graph& g) {
    return contract(g, sigmoid(g.param(a)), wmk);
  });
  expect_grads_match({&a}, [&](Graph& g) {
    return contract(g, row_softmax(g.param(a)), wmk);
  });
  expect_grads_match({&a}, [&](Graph& g) {
    return contract(g, transpose(g.param(a)), wkm);
  });
  expect_grads_match({&a, &c}, [&](Graph& g) {
    Var cat = concat({g.param(a), g.param(c)}, 0);
    Var part = slice(cat, m > 1 ? 1 : 0, 2 * m, 0, k);
    Tensor w({part.rows(), part.cols()}, 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::cos(double(i));
    return contract(g, part, w);
  });

  // Vector primitives.
  Tensor v = random_tensor(rng, 1, 2 * n);
  Tensor wv = random_tensor(rng, 1, n, false);
  expect_grads_match({&v}, [&](Graph& g) {
    return contract(g, l2_normalize(signed_sqrt(sum_pool(g.param(v), 2))), wv);
  });
  Tensor mask({1, 2 * n}, 0.0);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = i % 3 ? 1.25 : 0.0;
  Tensor wv2 = random_tensor(rng, 1, 2 * n, false);
  expect_grads_match({&v}, [&](Graph& g) {
    return contract(g, dropout(g.param(v), mask), wv2);
  });

  Tensor table = random_tensor(rng, 5, 3);
  std::vector<std::size_t> ids{1, 0, 4, 1};
  Tensor we = random_tensor(rng, 3, 4, false);
  expect_grads_match({&table}, [&](Graph& g) {
    return contract(g, embedding(g.param(table), ids, 0), we);
  });

  std::vector<std::size_t> targets(m);
  for (std::size_t i = 0; i < m; ++i) targets[i] = i % k;
  expect_grads_match({&a}, [&](Graph& g) {
    return sum(cross_entropy(g.param(a), targets));
  });
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, PrimitiveGradient, ::testing::Range(0, 8));

TEST(Properties, SoftmaxRowsAreDistributions) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor a({3, 7}, 0.0);
    a.fill_uniform(rng, -20, 20);
    Graph g;
    Var y = row_softmax(g.constant(a));
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(y.at(i, j), 0.0);
        s += y.at(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Properties, L2NormalizeUnitOrZero) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor a({1, 9}, 0.0);
    a.fill_uniform(rng, -1, 1);
    Graph g;
    Var y = l2_normalize(g.constant(a));
    double sq = 0;
    for (double x : y.value()) sq += x * x;
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-9);
  }
  Tensor tiny({1, 3}, {1e-14, 0.0, -1e-14}, true);
  Graph g;
  Var y = l2_normalize(g.param(tiny));
  for (double x : y.value()) EXPECT_EQ(x, 0.0);
  g.backward(sum(y));
  for (double x : tiny.grad()) EXPECT_EQ(x, 0.0);
}

TEST(Properties, BackwardIsLinearInTheLoss) {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor(rng, 2, 3);
  Tensor w = random_tensor(rng, 3, 2);
  auto loss1 = [&](Graph& g) { return sum(tanh(matmul(g.param(x), g.param(w)))); };
  auto loss2 = [&](Graph& g) {
    return sum(cross_entropy(matmul(g.param(x), g.param(w)), std::vector<std::size_t>{0, 1}));
  };
  auto grads = [&](const std::function<Var(Graph&)>& f) {
    x.clear_grad();
    w.clear_grad();
    Graph g;
    g.backward(f(g));
    std::vector<double> out(x.grad().begin(), x.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  const double a = 0.7, b = -1.3;
  auto g1 = grads(loss1);
  auto g2 = grads(loss2);
  auto gc = grads([&](Graph& g) { return add(affine(loss1(g), a), affine(loss2(g), b)); });
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], a * g1[i] + b * g2[i], 1e-9);
}

TEST(FiniteDifferenceCheck, LinearModelIsExact) {
  Tensor w({1, 4}, {0.5, -0.25, 1.5, 2.0}, true);
  Tensor x({4, 1}, {1.0, 2.0, -3.0, 0.5});
  std::vector<Tensor*> params{&w};
  double err = finite_difference_check(
      [&](Graph& g) { return matmul(g.param(w), g.constant(x)); }, params,
      {1e-5, true});
  EXPECT_LT(err, 1e-10);
}

TEST(FiniteDifferenceCheck, RejectsZeroStep) {
  Tensor w({1, 1}, {1.0}, true);
  std::vector<Tensor*> params{&w};
  EXPECT_THROW(finite_difference_check([&](Graph& g) { return sum(g.param(w)); },
                                       params, {0.0, true}),
               PreconditionError);
}

TEST(FiniteDifferenceCheck, RequiresFrozenMasks) {
  Tensor w({1, 1}, {1.0}, true);
  std::vector<Tensor*> params{&w};
  EXPECT_THROW(finite_difference_check([&](Graph& g) { return sum(g.param(w)); },
                                       params, {1e-5, false}),
               PreconditionError);
}

TEST(FiniteDifferenceCheck, DetectsNonDeterministicLoss) {
  Tensor w({1, 1}, {1.0}, true);
  std::vector<Tensor*> params{&w};
  int calls = 0;
  EXPECT_THROW(finite_difference_check(
                   [&](Graph& g) {
                     ++calls;
                     return affine(sum(g.param(w)), 1.0, calls);
                   },
                   params, {1e-5, true}),
               PreconditionError);
}

}  // namespace
}  // namespace redan
