#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "linalg.hpp"

using namespace dlrt;

namespace {

Matrix from2x2(double a, double b, double c, double d) {
  Matrix m(2, 2);
  m << a, b, c, d;
  return m;
}

double ortho_defect(const Matrix& q) {
  return (q.transpose() * q - Matrix::Identity(q.cols(), q.cols())).norm();
}

}  // namespace

TEST_CASE("matmul basics") {
  Matrix a = from2x2(1, 2, 3, 4);
  CHECK((matmul(Matrix::Identity(2, 2), a) - a).norm() == doctest::Approx(0.0));

  Matrix row(1, 2);
  row << 1, 0;
  Matrix col(2, 1);
  col << 0, 5;
  CHECK(matmul(row, col)(0, 0) == 0.0);

  Matrix v(2, 1);
  v << 5, 6;
  Matrix p = matmul(a, v);
  CHECK(p(0, 0) == 17.0);  // hand arithmetic
  CHECK(p(1, 0) == 39.0);

  CHECK_THROWS_AS(matmul(a, Matrix::Zero(3, 2)), ShapeError);
}

TEST_CASE("matmul associativity on random triples") {
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix a = rng.gaussian(32, 32), b = rng.gaussian(32, 32),
           c = rng.gaussian(32, 32);
    Matrix lhs = matmul(matmul(a, b), c);
    Matrix rhs = matmul(a, matmul(b, c));
    CHECK((lhs - rhs).norm() <= 1e-12 * lhs.norm());
  }
}

TEST_CASE("orthonormalize") {
  Matrix q = orthonormalize(Matrix::Identity(2, 2));
  CHECK(ortho_defect(q) <= 1e-14);

  Matrix one(2, 1);
  one << 2, 0;
  Matrix qn = orthonormalize(one);
  CHECK(std::abs(std::abs(qn(0, 0)) - 1.0) <= 1e-14);
  CHECK(std::abs(qn(1, 0)) <= 1e-14);

  // Rank-deficient input still yields a full orthonormal basis containing the
  // column span.
  Matrix r1(3, 2);
  r1 << 1, 1, 0, 0, 0, 0;
  Matrix qr1 = orthonormalize(r1);
  CHECK(ortho_defect(qr1) <= 1e-12);
  CHECK(std::abs(std::abs(qr1(0, 0)) - 1.0) <= 1e-12);

  CHECK_THROWS_AS(orthonormalize(Matrix::Zero(1, 2)), ShapeError);
}

TEST_CASE("orthonormalize stays orthonormal on random inputs") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const int rows = 3 + trial;
    const int cols = 1 + trial % rows;
    Matrix q = orthonormalize(rng.gaussian(rows, cols));
    CHECK(ortho_defect(q) <= 1e-10 * std::sqrt(static_cast<double>(cols)));
  }
}

TEST_CASE("svd") {
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 3;
  d(1, 1) = 1;
  auto r = svd(d);
  CHECK(r.sigma[0] == doctest::Approx(3.0));
  CHECK(r.sigma[1] == doctest::Approx(1.0));

  auto z = svd(Matrix::Zero(3, 3));
  CHECK(z.sigma.maxCoeff() == 0.0);

  // Nilpotent matrix: singular values from the eigenvalues of m m^T.
  auto nil = svd(from2x2(0, 2, 0, 0));
  CHECK(nil.sigma[0] == doctest::Approx(2.0));
  CHECK(nil.sigma[1] == doctest::Approx(0.0));

  Matrix bad = from2x2(1, 2, 3, std::nan(""));
  CHECK_THROWS_AS(svd(bad), NumericError);
}

TEST_CASE("svd reconstruction and sign convention on random matrices") {
  Rng rng(3);
  for (int n : {4, 32, 256}) {
    Matrix m = rng.gaussian(n, n);
    auto r = svd(m);
    Matrix rec = r.P * r.sigma.asDiagonal() * r.Q.transpose();
    CHECK((rec - m).norm() <= 1e-10 * m.norm());
    CHECK(ortho_defect(r.P) <= 1e-10 * std::sqrt(static_cast<double>(n)));
    CHECK(ortho_defect(r.Q) <= 1e-10 * std::sqrt(static_cast<double>(n)));
    for (int j = 1; j < n; ++j) CHECK(r.sigma[j] <= r.sigma[j - 1]);
    for (int j = 0; j < r.P.cols(); ++j) {
      int imax = 0;
      for (int i = 0; i < r.P.rows(); ++i)
        if (std::abs(r.P(i, j)) > std::abs(r.P(imax, j))) imax = i;
      CHECK(r.P(imax, j) >= 0.0);
    }
  }
}

TEST_CASE("svd is deterministic") {
  Rng rng(4);
  Matrix m = rng.gaussian(16, 16);
  auto a = svd(m);
  auto b = svd(m);
  CHECK((a.P - b.P).norm() == 0.0);
  CHECK((a.sigma - b.sigma).norm() == 0.0);
  CHECK((a.Q - b.Q).norm() == 0.0);
}

TEST_CASE("frobenius_norm") {
  CHECK(frobenius_norm(Matrix::Identity(2, 2)) ==
        doctest::Approx(std::sqrt(2.0)));
  Matrix p(1, 2);
  p << 3, 4;
  CHECK(frobenius_norm(p) == doctest::Approx(5.0));
  Matrix d = Matrix::Zero(3, 3);
  d(0, 0) = 1;
  d(1, 1) = 0.1;
  d(2, 2) = 1e-8;
  CHECK(frobenius_norm(d) ==
        doctest::Approx(std::sqrt(1.0 + 0.01 + 1e-16)).epsilon(1e-12));
}
