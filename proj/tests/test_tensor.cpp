#include "igpk/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "igpk/rng.hpp"

namespace igpk {
namespace {

TEST(Tensor, MatmulIdentity) {
  Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor c = matmul(eye, a);
  EXPECT_EQ(c.values(), a.values());
}

TEST(Tensor, MatmulOuterProduct) {
  Tensor a = Tensor::matrix({{1}, {2}});
  Tensor b = Tensor::matrix({{3, 4}});
  Tensor c = matmul(a, b);
  EXPECT_EQ(c.values(), (std::vector<double>{3, 4, 6, 8}));
}

TEST(Tensor, MatmulShapeRule) {
  Tensor a({4, 2});
  Tensor b({2, 3});
  Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (std::vector<std::size_t>{4, 3}));
}

TEST(Tensor, MatmulShapeMismatchNamesBothShapes) {
  Tensor a({2, 3});
  Tensor b({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("(2x3)"), std::string::npos) << msg;
  }
}

TEST(Tensor, MatmulAssociativity) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = Tensor::random_normal({3, 4}, 1.0, rng);
    Tensor b = Tensor::random_normal({4, 5}, 1.0, rng);
    Tensor c = Tensor::random_normal({5, 2}, 1.0, rng);
    Tensor left = matmul(matmul(a, b), c);
    Tensor right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.numel(); ++i) {
      double denom = std::max({std::abs(left[i]), std::abs(right[i]), 1.0});
      EXPECT_LT(std::abs(left[i] - right[i]) / denom, 1e-9);
    }
  }
}

TEST(Tensor, MatmulDeterminism) {
  Rng rng(11);
  Tensor a = Tensor::random_normal({8, 16}, 1.0, rng);
  Tensor b = Tensor::random_normal({16, 8}, 1.0, rng);
  Tensor c1 = matmul(a, b);
  Tensor c2 = matmul(a, b);
  EXPECT_TRUE(bitwise_equal(c1, c2));
}

TEST(Tensor, TransposedVariantsMatchPlainMatmul) {
  Rng rng(13);
  Tensor a = Tensor::random_normal({4, 6}, 1.0, rng);
  Tensor b = Tensor::random_normal({6, 5}, 1.0, rng);
  Tensor nt = matmul_nt(a, transpose(b));
  Tensor tn = matmul_tn(transpose(a), b);
  Tensor ref = matmul(a, b);
  for (std::size_t i = 0; i < ref.numel(); ++i) {
    EXPECT_NEAR(nt[i], ref[i], 1e-12);
    EXPECT_NEAR(tn[i], ref[i], 1e-12);
  }
}

TEST(Tensor, HadamardSquare) {
  EXPECT_EQ(hadamard_square(Tensor::matrix({{0, 0}})).values(), (std::vector<double>{0, 0}));
  EXPECT_EQ(hadamard_square(Tensor::matrix({{-2, 3}})).values(), (std::vector<double>{4, 9}));
}

TEST(Tensor, HadamardSquareNonnegative) {
  Rng rng(3);
  Tensor a = Tensor::random_normal({7, 5}, 10.0, rng);
  Tensor sq = hadamard_square(a);
  for (double v : sq.values()) EXPECT_GE(v, 0.0);
  EXPECT_GE(total_sum(sq), 0.0);
}

TEST(Tensor, ScaledAdd) {
  Tensor a = Tensor::matrix({{1, 2}});
  Tensor z = Tensor::zeros({1, 2});
  EXPECT_EQ(scaled_add(a, z, 1.0).values(), a.values());
  Tensor b = Tensor::matrix({{10, 20}});
  EXPECT_EQ(scaled_add(a, b, 0.5).values(), (std::vector<double>{6, 12}));
  EXPECT_EQ(scaled_add(a, b, 1.0).values(), scaled_add(b, a, 1.0).values());
  EXPECT_THROW(scaled_add(a, Tensor({2, 2}), 1.0), ShapeError);
}

TEST(Tensor, TotalSum) {
  EXPECT_EQ(total_sum(Tensor::zeros({3, 3})), 0.0);
  EXPECT_EQ(total_sum(Tensor::matrix({{1, 2}, {3, 4}})), 10.0);
}

TEST(Tensor, ConstructionValidation) {
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0}), ShapeError);
  EXPECT_THROW(Tensor({0, 2}), ShapeError);
}

TEST(Tensor, NonFiniteResultsThrow) {
  Tensor big = Tensor::full({1, 1}, 1e308);
  EXPECT_THROW(scaled_add(big, big, 1e308), NumericError);
  EXPECT_THROW(hadamard_square(big), NumericError);
}

TEST(Rng, DeterministicStreams) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(42), d(43);
  EXPECT_NE(c.next_u64(), d.next_u64());
}

TEST(Rng, NormalMomentsRoughlyStandard) {
  Rng rng(123);
  double sum = 0.0, sumsq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double x = rng.next_normal();
    sum += x;
    sumsq += x * x;
  }
  double mean = sum / n;
  double var = sumsq / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.03);
  EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(Rng, NextBelowInRangeAndDeterministic) {
  Rng rng(9);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(rng.next_below(17), 17u);
  Rng r1(5), r2(5);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(r1.next_below(1000), r2.next_below(1000));
}

}  // namespace
}  // namespace igpk
