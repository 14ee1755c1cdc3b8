#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "skillprobe/numerics.hpp"
#include "skillprobe/parallel.hpp"

using namespace skillprobe;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, SeededRng& rng) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform(-1.0, 1.0);
  return m;
}

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix id{{1, 0}, {0, 1}};
  const Matrix m{{3.5, -2}, {0.25, 7}};
  EXPECT_EQ(matmul(id, m), m);
}

TEST(Matmul, HandArithmetic) {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{0}, {1}};
  EXPECT_EQ(matmul(a, b), (Matrix{{2}, {4}}));
}

TEST(Matmul, MatchesTripleLoop) {
  SeededRng rng(11);
  const Matrix a = random_matrix(5, 7, rng);
  const Matrix b = random_matrix(7, 3, rng);
  const Matrix got = matmul(a, b);
  const Matrix want = naive_matmul(a, b);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Matmul, TransposedVariantsMatchExplicitTranspose) {
  SeededRng rng(12);
  const Matrix a = random_matrix(4, 6, rng);
  const Matrix b = random_matrix(5, 6, rng);
  const Matrix c = random_matrix(4, 3, rng);
  const Matrix nt = matmul_nt(a, b);
  const Matrix nt_ref = naive_matmul(a, transpose(b));
  for (std::size_t i = 0; i < nt.size(); ++i) EXPECT_NEAR(nt[i], nt_ref[i], 1e-12);
  const Matrix tn = matmul_tn(a, c);
  const Matrix tn_ref = naive_matmul(transpose(a), c);
  for (std::size_t i = 0; i < tn.size(); ++i) EXPECT_NEAR(tn[i], tn_ref[i], 1e-12);
  Matrix acc(6, 3, 1.0);
  matmul_tn_acc(a, c, acc);
  for (std::size_t i = 0; i < acc.size(); ++i) EXPECT_NEAR(acc[i], tn_ref[i] + 1.0, 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  const Matrix a(2, 3), b(4, 2);
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos);
    EXPECT_NE(msg.find("4x2"), std::string::npos);
  }
}

TEST(Matmul, Associativity) {
  SeededRng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix a = random_matrix(6, 4, rng);
    const Matrix b = random_matrix(4, 9, rng);
    const Matrix c = random_matrix(9, 3, rng);
    const Matrix left = matmul(matmul(a, b), c);
    Matrix diff = matmul(a, matmul(b, c));
    axpy(-1.0, left, diff);
    EXPECT_LT(frobenius_norm(diff) / frobenius_norm(left), 1e-9);
  }
}

TEST(Matrix, ValueCountMustMatchShape) {
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW((Matrix{{1, 2}, {3}}), ShapeError);
}

TEST(Gelu, FixedPoints) {
  EXPECT_EQ(gelu(0.0), 0.0);
  EXPECT_NEAR(gelu(10.0), 10.0, 1e-6);
  const Matrix g = gelu(Matrix{{0.0, 10.0}});
  EXPECT_EQ(g(0, 0), 0.0);
  EXPECT_NEAR(g(0, 1), 10.0, 1e-6);
}

TEST(Gelu, GradientMatchesFiniteDifference) {
  SeededRng rng(21);
  for (int i = 0; i < 17; ++i) {
    const double x = rng.uniform(-4.0, 4.0);
    const double h = 1e-6;
    const double numeric = (gelu(x + h) - gelu(x - h)) / (2 * h);
    EXPECT_NEAR(gelu_grad(x), numeric, 1e-6) << "x=" << x;
  }
}

TEST(Gelu, MonotoneOnGrid) {
  // GELU dips slightly below zero near x = -0.75, so monotonicity holds
  // from its minimum upward; check the whole grid above the minimum and
  // that the derivative is nonnegative there.
  double prev = gelu(-0.7517915);
  for (double x = -0.75; x <= 10.0; x += 0.01) {
    const double y = gelu(x);
    EXPECT_GE(y, prev - 1e-15) << x;
    prev = y;
  }
}

TEST(Relu, GradientIsStep) {
  EXPECT_EQ(relu(-1.0), 0.0);
  EXPECT_EQ(relu(2.0), 2.0);
  EXPECT_EQ(relu_grad(-1.0), 0.0);
  EXPECT_EQ(relu_grad(2.0), 1.0);
}

TEST(SeededRng, EqualSeedsGiveEqualDraws) {
  SeededRng a(42), b(42);
  for (int i = 0; i < 10000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(SeededRng, FirstDrawsArePinned) {
  // Frozen from the splitmix64 definition: guards against accidental changes
  // to the stream layout, which would silently change every experiment.
  const std::uint64_t key = SeededRng::derive_key(0, 0);
  EXPECT_EQ(SeededRng(0).next_u64(), SeededRng::at(key, 0));
  EXPECT_EQ(SeededRng::mix(0), 0u);
  EXPECT_EQ(SeededRng::mix(SeededRng::golden), 0xE220A8397B1DCDAFULL);
}

TEST(SeededRng, DifferentStreamsAreUncorrelated) {
  SeededRng a(42, 1), b(42, 2);
  const int n = 10000;
  std::vector<double> x(n), y(n);
  double mx = 0, my = 0;
  for (int i = 0; i < n; ++i) {
    x[i] = a.uniform();
    y[i] = b.uniform();
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  EXPECT_LT(std::abs(sxy / std::sqrt(sxx * syy)), 0.05);
}

TEST(SeededRng, NormalMoments) {
  SeededRng rng(5);
  const int n = 20000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.03);
  EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(SeededRng, BelowStaysInRange) {
  SeededRng rng(6);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) ++counts[rng.below(7)];
  for (int c : counts) EXPECT_GT(c, 800);
  EXPECT_THROW(rng.below(0), ContractError);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Matrix p{{1.5, -2.0}};
  const Matrix g(1, 2);
  AdamState adam;
  Matrix* params[] = {&p};
  const Matrix* grads[] = {&g};
  for (int i = 0; i < 5; ++i) adam.step(params, grads);
  EXPECT_EQ(p, (Matrix{{1.5, -2.0}}));
  EXPECT_EQ(adam.step_count(), 5);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Matrix p{{0.0}};
  const Matrix g{{1.0}};
  AdamState adam(AdamConfig{.lr = 0.001});
  Matrix* params[] = {&p};
  const Matrix* grads[] = {&g};
  adam.step(params, grads);
  EXPECT_NEAR(p[0], -0.001, 1e-10);
}

TEST(Adam, TraceOnQuadraticMatchesRecurrence) {
  Matrix p{{1.0}};
  Matrix g(1, 1);
  AdamState adam(AdamConfig{.lr = 0.01});
  Matrix* params[] = {&p};
  const Matrix* grads[] = {&g};

  double w = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 10; ++t) {
    g[0] = 2.0 * p[0];
    adam.step(params, grads);

    const double gr = 2.0 * w;
    m = 0.9 * m + 0.1 * gr;
    v = 0.999 * v + 0.001 * gr * gr;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    w -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(p[0], w, 1e-10) << "step " << t;
  }
}

TEST(Adam, ZeroLearningRateIsIdentity) {
  SeededRng rng(3);
  Matrix p = random_matrix(3, 4, rng);
  const Matrix before = p;
  const Matrix g = random_matrix(3, 4, rng);
  AdamState adam(AdamConfig{.lr = 0.0});
  Matrix* params[] = {&p};
  const Matrix* grads[] = {&g};
  adam.step(params, grads);
  EXPECT_EQ(p, before);
}

TEST(Adam, ShapeMismatchThrows) {
  Matrix p(2, 2);
  const Matrix g(2, 3);
  AdamState adam;
  Matrix* params[] = {&p};
  const Matrix* grads[] = {&g};
  EXPECT_THROW(adam.step(params, grads), ShapeError);
}

TEST(FiniteDiff, QuadraticIsExact) {
  SeededRng rng(8);
  Matrix w = random_matrix(3, 3, rng);
  Matrix grad = w;
  for (double& v : grad.values()) v *= 2.0;
  auto f = [](const Matrix& m) {
    double s = 0;
    for (double v : m.values()) s += v * v;
    return s;
  };
  EXPECT_LT(finite_diff_check(f, w, grad, 1e-4), 1e-8);
}

TEST(FiniteDiff, GeluSum) {
  SeededRng rng(9);
  Matrix w = random_matrix(4, 4, rng);
  const Matrix grad = gelu_grad(w);
  auto f = [](const Matrix& m) {
    double s = 0;
    for (double v : m.values()) s += gelu(v);
    return s;
  };
  EXPECT_LT(finite_diff_check(f, w, grad, 1e-5), 1e-5);
}

TEST(FiniteDiff, DoubledGradientGivesHalfError) {
  SeededRng rng(10);
  Matrix w = random_matrix(2, 3, rng);
  Matrix grad = w;
  for (double& v : grad.values()) v *= 4.0;  // 2x the true 2w
  auto f = [](const Matrix& m) {
    double s = 0;
    for (double v : m.values()) s += v * v;
    return s;
  };
  EXPECT_NEAR(finite_diff_check(f, w, grad, 1e-4), 0.5, 1e-6);
}

TEST(FiniteDiff, NonFiniteObjectiveThrows) {
  Matrix w{{1.0}};
  const Matrix g{{0.0}};
  auto f = [](const Matrix&) { return std::nan(""); };
  EXPECT_THROW(finite_diff_check(f, w, g, 1e-4), NumericalError);
  EXPECT_THROW(finite_diff_check(f, w, g, 0.0), ContractError);
}

TEST(Parallel, CoversEveryIndexOnce) {
  std::vector<int> hits(100, 0);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; }, 4);
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(Parallel, RethrowsWorkerException) {
  EXPECT_THROW(parallel_for(10,
                            [](std::size_t i) {
                              if (i == 3) throw InputError("boom");
                            },
                            3),
               InputError);
}
