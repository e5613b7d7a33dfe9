#include <array>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "pcq/losses.hpp"
#include "pcq/quantizer.hpp"
#include "pcq/rng.hpp"

using namespace pcq;

namespace {

Matrix row_of(std::initializer_list<double> v) { return Matrix(1, v.size(), std::vector<double>(v)); }

std::size_t scalar_argmax(std::span<const double> r) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < r.size(); ++k)
    if (r[k] > r[best]) best = k;
  return best;
}

Matrix random_probs(Stream& rng, std::size_t n, std::size_t k) { return softmax_rows(rng.normal_matrix(n, k, 2.0)); }

}  // namespace

TEST(AssignmentProbs, Examples) {
  const Matrix u = assignment_probs(row_of({0.3, 0.3, 0.3, 0.3}));
  for (double v : u.data()) EXPECT_NEAR(v, 0.25, 1e-15);
  const Matrix p = assignment_probs(row_of({std::log(2.0), 0.0}));
  EXPECT_NEAR(p(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p(0, 1), 1.0 / 3.0, 1e-15);
}

TEST(AssignmentProbs, ArgmaxPreserved) {
  Stream rng(1);
  const Matrix s = rng.normal_matrix(1000, 6);
  const Matrix p = assignment_probs(s);
  for (std::size_t i = 0; i < s.rows(); ++i) EXPECT_EQ(argmax(p.row(i)), scalar_argmax(s.row(i)));
}

TEST(AssignmentProbs, RowShiftInvariance) {
  Stream rng(2);
  Matrix s = rng.normal_matrix(50, 5);
  const Matrix p = assignment_probs(s);
  const Matrix h = hard_assign(p);
  for (std::size_t i = 0; i < s.rows(); ++i) {
    const double c = 10.0 * rng.normal();
    for (double& v : s.row(i)) v += c;
  }
  EXPECT_LT(max_abs_diff(assignment_probs(s), p), 1e-12);
  EXPECT_EQ(hard_assign(assignment_probs(s)), h);
}

TEST(Gumbel, EqualNoiseAtUnitTemperatureIsIdentity) {
  Stream rng(3);
  const Matrix q = random_probs(rng, 20, 5);
  for (double e : {0.01, 0.37, 0.5, 0.99}) {
    const Matrix y = gumbel_softmax(q, 1.0, Matrix(20, 5, e));
    EXPECT_LT(max_abs_diff(y, q), 1e-12);
  }
}

TEST(Gumbel, EqualNoiseIsTemperedLogSoftmax) {
  Stream rng(4);
  const Matrix q = random_probs(rng, 10, 4);
  Matrix logq = q;
  for (double& v : logq.data()) v = std::log(v);
  for (double tau : {0.1, 0.5, 2.0}) {
    const Matrix y = gumbel_softmax(q, tau, Matrix(10, 4, 0.3));
    EXPECT_LT(max_abs_diff(y, softmax_rows(logq, tau)), 1e-12);
    EXPECT_LT(max_abs_diff(y, sharpen(q, tau)), 1e-12);
  }
}

TEST(Gumbel, RowsAreDistributions) {
  Stream rng(5);
  NoiseSource noise(6);
  for (double tau : {0.1, 1.0, 5.0}) {
    const Matrix q = random_probs(rng, 100, 7);
    const Matrix y = gumbel_softmax(q, tau, noise.uniform(100, 7, 0));
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double s = 0.0;
      for (double v : y.row(i)) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

// Gumbel-max: argmax(log q + g) ~ Categorical(q).
TEST(Gumbel, MonteCarloArgmaxFrequencies) {
  const Matrix q = row_of({0.2, 0.3, 0.5});
  NoiseSource noise(derive_seed(7, "test.gumbel"));
  const std::size_t draws = 100000;
  std::array<std::size_t, 3> counts{};
  const Matrix batch_q = [&] {
    Matrix m(1000, 3);
    for (std::size_t i = 0; i < 1000; ++i)
      for (std::size_t k = 0; k < 3; ++k) m(i, k) = q(0, k);
    return m;
  }();
  for (std::size_t round = 0; round < draws / 1000; ++round) {
    const Matrix y = gumbel_softmax(batch_q, 0.01, noise.uniform(1000, 3, round));
    for (std::size_t i = 0; i < y.rows(); ++i) ++counts[argmax(y.row(i))];
  }
  for (std::size_t k = 0; k < 3; ++k)
    EXPECT_NEAR(static_cast<double>(counts[k]) / static_cast<double>(draws), q(0, k), 0.01) << k;
}

TEST(Gumbel, EntropyNonIncreasingAsTemperatureDrops) {
  Stream rng(8);
  NoiseSource noise(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix q = random_probs(rng, 30, 6);
    const Matrix eps = noise.uniform(30, 6, static_cast<std::uint64_t>(trial));
    double prev = std::numeric_limits<double>::infinity();
    for (double tau : {5.0, 3.0, 1.0, 0.5, 0.3, 0.1}) {
      const double h = mean_row_entropy(gumbel_softmax(q, tau, eps));
      EXPECT_LE(h, prev + 1e-12);
      prev = h;
    }
  }
}

TEST(Gumbel, ZeroTemperatureLimitIsOneHot) {
  Stream rng(10);
  const Matrix q = random_probs(rng, 20, 5);
  const Matrix eps = NoiseSource(11).uniform(20, 5, 0);
  const Matrix y = gumbel_softmax(q, 1e-4, eps);
  const Matrix g = gumbel_offsets(eps);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    std::vector<double> perturbed(q.cols());
    for (std::size_t k = 0; k < q.cols(); ++k) perturbed[k] = std::log(q(i, k)) + g(i, k);
    const std::size_t star = scalar_argmax(perturbed);
    for (std::size_t k = 0; k < q.cols(); ++k) EXPECT_NEAR(y(i, k), k == star ? 1.0 : 0.0, 1e-6);
  }
}

TEST(Gumbel, Errors) {
  const Matrix q = row_of({0.5, 0.5});
  EXPECT_THROW(gumbel_softmax(q, 1.0, row_of({0.0, 0.5})), Error);
  EXPECT_THROW(gumbel_softmax(q, 1.0, row_of({1.0, 0.5})), Error);
  EXPECT_THROW(gumbel_softmax(q, 1.0, row_of({-0.1, 0.5})), Error);
  EXPECT_THROW(gumbel_softmax(q, 0.0, row_of({0.3, 0.5})), Error);
  EXPECT_THROW(gumbel_softmax(q, -1.0, row_of({0.3, 0.5})), Error);
  EXPECT_THROW(gumbel_softmax(q, 1.0, Matrix(1, 3, 0.5)), Error);
}

TEST(Gumbel, GradientThroughQuantizerComposition) {
  Stream rng(12);
  const Matrix s0 = rng.normal_matrix(5, 4);
  const Matrix protos = l2_normalize_rows(rng.normal_matrix(4, 3));
  const Matrix eps = NoiseSource(13).uniform(5, 4, 0);
  const Matrix w = rng.normal_matrix(5, 3);
  ScalarFn fn = [&](std::span<const double> x, std::vector<double>* g) {
    ad::Tape t;
    ad::Var s = t.variable(Matrix(5, 4, std::vector<double>(x.begin(), x.end())));
    ad::Var y = gumbel_softmax(ad::softmax_rows(s, 1.0), 0.7, eps);
    ad::Var loss = ad::sum(ad::mul_const(quantize(y, t.constant(protos)), w));
    if (g) {
      t.backward(loss);
      *g = t.grad(s)->data();
    }
    return loss.value()(0, 0);
  };
  EXPECT_LT(grad_check(fn, s0.data(), 1e-6), 1e-6);
}

TEST(NoiseSource, CounterBased) {
  NoiseSource a(42);
  const Matrix m = a.uniform(4, 3, 7);
  EXPECT_EQ(m, NoiseSource(42).uniform(4, 3, 7));
  EXPECT_NE(m, a.uniform(4, 3, 8));
  // Element (i,k) does not depend on the matrix shape.
  const Matrix big = a.uniform(10, 3, 7);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(m(i, k), big(i, k));
  for (double v : big.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Quantize, Examples) {
  const PrototypeSet h{Matrix{{1, 0}, {0, 1}}, PrototypeStrategy::codebook};
  const Matrix v = quantize(row_of({0.25, 0.75}), h);
  EXPECT_EQ(v, row_of({0.25, 0.75}));
  Stream rng(14);
  const PrototypeSet p{l2_normalize_rows(rng.normal_matrix(4, 3)), PrototypeStrategy::codebook};
  for (std::size_t k = 0; k < 4; ++k) {
    Matrix onehot(1, 4);
    onehot(0, k) = 1.0;
    const Matrix q = quantize(onehot, p);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(q(0, c), p.vectors(k, c));
  }
  const Matrix mean = quantize(Matrix(1, 4, 0.25), p);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t k = 0; k < 4; ++k) s += p.vectors(k, c);
    EXPECT_NEAR(mean(0, c), s / 4.0, 1e-15);
  }
  EXPECT_THROW(quantize(Matrix(1, 3, 0.3), p), Error);
}

TEST(HardAssign, Examples) {
  EXPECT_EQ(hard_assign(row_of({0.2, 0.5, 0.3})), row_of({0, 1, 0}));
  EXPECT_EQ(hard_assign(row_of({0.5, 0.5})), row_of({1, 0}));
}

TEST(HardAssign, MatchesScalarArgmax) {
  Stream rng(15);
  const Matrix y = random_probs(rng, 1000, 5);
  const Matrix h = hard_assign(y);
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const std::size_t star = scalar_argmax(y.row(i));
    double ones = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
      EXPECT_EQ(h(i, k), k == star ? 1.0 : 0.0);
      ones += h(i, k);
    }
    EXPECT_EQ(ones, 1.0);
  }
  EXPECT_EQ(assigned_index(h)[3], scalar_argmax(y.row(3)));
}

TEST(Entropy, UniformAndOneHot) {
  EXPECT_NEAR(mean_row_entropy(Matrix(2, 4, 0.25)), std::log(4.0), 1e-15);
  EXPECT_EQ(mean_row_entropy(row_of({0, 1, 0})), 0.0);
}
