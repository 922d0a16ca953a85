#include <cmath>
#include <random>

#include "m2d/autodiff.hpp"
#include "test_util.hpp"

using namespace m2d::ad;
using testutil::expect_near;

namespace {

Tensor T(std::initializer_list<std::initializer_list<double>> rows) { return Tensor(Matrix::from_rows(rows)); }

// Analytic gradient of a 1x1 function of one leaf.
Matrix grad_of(const Matrix& x, const std::function<Tensor(const Tensor&)>& f) {
  Tape tape;
  Tensor leaf = tape.leaf("x", x);
  return tape.backward(f(leaf)).at("x");
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Matrix b = Matrix::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(Tensor(Matrix::identity(2)), Tensor(b)).value(), b);
}

TEST(Matmul, HandComputedProduct) {
  EXPECT_EQ(matmul(T({{1, 2}, {3, 4}}), T({{0}, {1}})).value(), Matrix::from_rows({{2}, {4}}));
}

TEST(Matmul, ZeroRowGivesZero) {
  EXPECT_EQ(matmul(T({{0, 0}}), T({{5}, {7}})).value(), Matrix::from_rows({{0}}));
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  EXPECT_THROW(matmul(T({{1, 2}}), T({{1, 2}})), ShapeError);
}

TEST(Binary, AddSameShape) { EXPECT_EQ(add(T({{1, 2}}), T({{3, 4}})).value(), Matrix::from_rows({{4, 6}})); }

TEST(Binary, MulByZerosIsZeros) {
  std::mt19937_64 rng(3);
  Matrix x = testutil::randn(3, 4, rng);
  EXPECT_EQ(mul(Tensor(x), Tensor(Matrix(3, 4))).value(), Matrix(3, 4));
}

TEST(Binary, DivByScalar) { EXPECT_EQ(div(T({{2, 4}}), T({{2}})).value(), Matrix::from_rows({{1, 2}})); }

TEST(Binary, DivByZeroThrows) { EXPECT_THROW(div(T({{1, 2}}), T({{1, 0}})), std::domain_error); }

TEST(Binary, RowBroadcastAddsToEveryRow) {
  EXPECT_EQ(add(T({{1, 2}, {3, 4}}), T({{10, 20}})).value(), Matrix::from_rows({{11, 22}, {13, 24}}));
}

TEST(Binary, IncompatibleShapesThrow) { EXPECT_THROW(add(T({{1, 2}}), T({{1, 2, 3}})), ShapeError); }

TEST(Binary, BroadcastGradientsAccumulate) {
  // d/db sum(a + b) with b broadcast over 3 rows is 3 per entry
  Tape tape;
  Tensor a = tape.leaf("a", Matrix(3, 2, 1.0));
  Tensor b = tape.leaf("b", Matrix(1, 2, 0.5));
  auto g = tape.backward(sum(add(a, b)));
  EXPECT_EQ(g.at("b"), Matrix(1, 2, 3.0));
  EXPECT_EQ(g.at("a"), Matrix(3, 2, 1.0));
}

TEST(Unary, Relu) { EXPECT_EQ(relu(T({{-1, 2}})).value(), Matrix::from_rows({{0, 2}})); }

TEST(Unary, SigmoidOfZero) { EXPECT_EQ(sigmoid(T({{0}})).value()[0], 0.5); }

TEST(Unary, LeakyReluSlope) { EXPECT_NEAR(leaky_relu(T({{-100}}), 0.01).value()[0], -1.0, 1e-15); }

TEST(Unary, ReluSubgradientAtZeroIsZero) {
  EXPECT_EQ(grad_of(Matrix::from_rows({{0.0}}), [](const Tensor& x) { return sum(relu(x)); })[0], 0.0);
}

TEST(Unary, LogAndSqrtClampAtThreshold) {
  EXPECT_NEAR(log(T({{0}})).value()[0], std::log(1e-12), 1e-12);
  EXPECT_NEAR(sqrt(T({{0}})).value()[0], 1e-6, 1e-18);
  EXPECT_TRUE(log(T({{-5}})).value().all_finite());
}

TEST(Unary, OverflowIsANumericError) { EXPECT_THROW(exp(T({{1000}})), NumericError); }

TEST(Unary, AnalyticDerivatives) {
  Matrix x = Matrix::from_rows({{0.3, -0.7, 1.5}});
  auto check = [&](auto f, auto df) {
    Matrix g = grad_of(x, [&](const Tensor& t) { return sum(f(t)); });
    for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(g[k], df(x[k]), 1e-14);
  };
  check([](const Tensor& t) { return neg(t); }, [](double) { return -1.0; });
  check([](const Tensor& t) { return exp(t); }, [](double v) { return std::exp(v); });
  check([](const Tensor& t) { return sigmoid(t); },
        [](double v) { return std::exp(-v) / ((1 + std::exp(-v)) * (1 + std::exp(-v))); });
  check([](const Tensor& t) { return leaky_relu(t, 0.2); }, [](double v) { return v > 0 ? 1.0 : 0.2; });
  check([](const Tensor& t) { return abs(t); }, [](double v) { return v > 0 ? 1.0 : -1.0; });
}

TEST(RowSoftmax, ZerosGiveUniform) {
  EXPECT_EQ(row_softmax(T({{0, 0}})).value(), Matrix::from_rows({{0.5, 0.5}}));
}

TEST(RowSoftmax, LargeLogitsDoNotOverflow) {
  Matrix y = row_softmax(T({{1000, 0}})).value();
  EXPECT_NEAR(y[0], 1.0, 1e-15);
  EXPECT_NEAR(y[1], 0.0, 1e-15);
}

TEST(RowSoftmax, AnalyticValue) {
  Matrix y = row_softmax(T({{std::log(1.0), std::log(3.0)}})).value();
  EXPECT_NEAR(y[0], 0.25, 1e-15);
  EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(RowSoftmax, RowsAreProbabilityVectors) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix y = row_softmax(Tensor(testutil::randn(7, 5, rng, 10.0))).value();
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double s = 0.0;
      for (double v : y.row_span(i)) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Reduce, FrobeniusSquared) { EXPECT_EQ(frobenius_sq(T({{1, 2}, {2, 0}})).item(), 9.0); }
TEST(Reduce, SumOfZeros) { EXPECT_EQ(sum(Tensor(Matrix(4, 3))).item(), 0.0); }
TEST(Reduce, Mean) { EXPECT_EQ(mean(T({{2, 4}})).item(), 3.0); }

TEST(Reduce, AxisSums) {
  EXPECT_EQ(sum(T({{1, 2}, {3, 4}}), 0).value(), Matrix::from_rows({{4, 6}}));
  EXPECT_EQ(sum(T({{1, 2}, {3, 4}}), 1).value(), Matrix::from_rows({{3}, {7}}));
}

TEST(Structural, ConcatPutsOriginalColumnsFirst) {
  Matrix a = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
  Matrix b = Matrix::from_rows({{7}, {8}, {9}});
  Matrix c = concat_cols(Tensor(a), Tensor(b)).value();
  ASSERT_EQ(c.cols(), 3u);
  EXPECT_EQ(c, Matrix::from_rows({{1, 2, 7}, {3, 4, 8}, {5, 6, 9}}));
}

TEST(Structural, ColumnNormalize) {
  Matrix y = col_l2_normalize(T({{3}, {4}})).value();
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
}

TEST(Structural, RowNormalize) {
  Matrix y = row_l2_normalize(T({{3, 4}, {0, 2}})).value();
  EXPECT_NEAR(y(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(y(0, 1), 0.8, 1e-15);
  EXPECT_NEAR(y(1, 1), 1.0, 1e-15);
}

TEST(Structural, TransposeIsAnInvolution) {
  std::mt19937_64 rng(5);
  Matrix x = testutil::randn(3, 5, rng);
  EXPECT_EQ(transpose(transpose(Tensor(x))).value(), x);
}

TEST(Structural, SliceRowsKeepsMaskedRowsInOrder) {
  Matrix y = slice_rows(T({{1}, {2}, {3}, {4}}), {true, false, true, false}).value();
  EXPECT_EQ(y, Matrix::from_rows({{1}, {3}}));
}

TEST(Backward, SumGivesOnes) {
  EXPECT_EQ(grad_of(Matrix(3, 2, 0.7), [](const Tensor& x) { return sum(x); }), Matrix(3, 2, 1.0));
}

TEST(Backward, FrobeniusGivesTwiceX) {
  std::mt19937_64 rng(9);
  Matrix x = testutil::randn(4, 3, rng);
  Matrix g = grad_of(x, [](const Tensor& t) { return frobenius_sq(t); });
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_EQ(g[k], 2.0 * x[k]);
}

TEST(Backward, KlBetweenSoftmaxesMatchesAnalyticAndFiniteDifference) {
  // KL(softmax(t) || softmax(s)) summed over rows: d/ds = softmax(s) - softmax(t)
  std::mt19937_64 rng(21);
  const Matrix t = testutil::randn(3, 4, rng);
  const Matrix s = testutil::randn(3, 4, rng);
  auto kl = [&](const Tensor& sv) {
    Tensor pt = row_softmax(Tensor(t));
    Tensor logpt = row_log_softmax(Tensor(t));
    return sum(mul(pt, sub(logpt, row_log_softmax(sv))));
  };
  Matrix g = grad_of(s, kl);
  Matrix ps = row_softmax(Tensor(s)).value(), pt = row_softmax(Tensor(t)).value();
  for (std::size_t k = 0; k < s.size(); ++k) EXPECT_NEAR(g[k], ps[k] - pt[k], 1e-14);
  double err = finite_diff_check([&](const std::map<std::string, Tensor>& p) { return kl(p.at("s")); }, {{"s", s}});
  EXPECT_LT(err, 1e-5);
}

TEST(Backward, NonScalarLossThrows) {
  Tape tape;
  Tensor x = tape.leaf("x", Matrix(2, 2, 1.0));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Backward, TapeIsSingleUse) {
  Tape tape;
  Tensor x = tape.leaf("x", Matrix(2, 2, 1.0));
  Tensor l = sum(x);
  tape.backward(l);
  EXPECT_TRUE(tape.consumed());
  EXPECT_THROW(tape.backward(l), std::logic_error);
  EXPECT_THROW(sum(x), std::logic_error);
}

TEST(Backward, UnreachedLeafGetsZeroGradient) {
  Tape tape;
  auto p = tape.watch({{"a", Matrix(2, 2, 1.0)}, {"b", Matrix(1, 3, 2.0)}});
  auto g = tape.backward(sum(p.at("a")));
  EXPECT_EQ(g.at("b"), Matrix(1, 3));
}

TEST(Backward, GradientIsLinearInTheLoss) {
  std::mt19937_64 rng(4);
  const Matrix x0 = testutil::randn(4, 3, rng);
  const Matrix w = testutil::randn(3, 2, rng);
  auto l1 = [&](const Tensor& x) { return sum(sigmoid(matmul(x, Tensor(w)))); };
  auto l2 = [&](const Tensor& x) { return frobenius_sq(row_softmax(x)); };
  for (auto [a, b] : {std::pair{2.0, -0.5}, std::pair{0.3, 1.7}}) {
    Matrix g1 = grad_of(x0, l1), g2 = grad_of(x0, l2);
    Matrix g = grad_of(x0, [&](const Tensor& x) { return add(scale(l1(x), a), scale(l2(x), b)); });
    for (std::size_t k = 0; k < g.size(); ++k) EXPECT_NEAR(g[k], a * g1[k] + b * g2[k], 1e-10);
  }
}

TEST(Backward, BitDeterministic) {
  std::mt19937_64 rng(8);
  const Matrix x = testutil::randn(5, 4, rng);
  auto f = [](const Tensor& t) { return sum(row_softmax(matmul(t, transpose(col_l2_normalize(t))))); };
  Matrix g1 = grad_of(x, f), g2 = grad_of(x, f);
  EXPECT_EQ(g1, g2);
  EXPECT_EQ(f(Tensor(x)).item(), f(Tensor(x)).item());
}

TEST(FiniteDiff, QuadraticIsExact) {
  std::mt19937_64 rng(2);
  ParamSet p{{"x", testutil::randn(3, 3, rng)}};
  double err = finite_diff_check([](const std::map<std::string, Tensor>& t) { return sum(mul(t.at("x"), t.at("x"))); }, p);
  EXPECT_LT(err, 1e-7);
}

TEST(FiniteDiff, ConstantLossHasZeroError) {
  ParamSet p{{"x", Matrix(2, 2, 1.0)}};
  EXPECT_EQ(finite_diff_check([](const std::map<std::string, Tensor>&) { return Tensor(Matrix::scalar(4.0)); }, p), 0.0);
}

TEST(FiniteDiff, DetectsAWrongGradient) {
  // x^2 with a backward of 3x
  ParamSet p{{"x", Matrix::from_rows({{0.5, 1.5}})}};
  auto wrong = [](const std::map<std::string, Tensor>& t) {
    const Tensor& x = t.at("x");
    Matrix v = x.value();
    for (double& e : v.data()) e = e * e;
    return sum(make_result(std::move(v), {&x}, [xv = x.shared_value()](const Matrix& g, std::span<Matrix* const> gi) {
      if (gi[0])
        for (std::size_t k = 0; k < g.size(); ++k) (*gi[0])[k] += g[k] * 3.0 * (*xv)[k];
    }));
  };
  EXPECT_GT(finite_diff_check(wrong, p), 0.1);
}

TEST(KinkMonitor, RecordsDistanceToNearestKink) {
  KinkMonitor m;
  relu(T({{0.5, -0.02, 3}}));
  abs(T({{0.3}}));
  EXPECT_DOUBLE_EQ(m.min_distance(), 0.02);
}

TEST(KinkMonitor, InactiveOutsideScope) {
  double d;
  {
    KinkMonitor m;
    d = m.min_distance();
  }
  relu(T({{1e-9}}));
  EXPECT_TRUE(std::isinf(d));
}
