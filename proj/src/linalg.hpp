#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

#include "errors.hpp"

namespace dlrt {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct SvdResult {
  Matrix P;      // left singular vectors, orthonormal columns
  Vector sigma;  // nonincreasing, >= 0
  Matrix Q;      // right singular vectors, orthonormal columns
};

Matrix matmul(const Matrix& a, const Matrix& b);

// Householder QR; requires rows >= cols. Rank-deficient inputs get a
// deterministic orthonormal completion.
Matrix orthonormalize(const Matrix& m);

// Thin SVD with a fixed column-sign convention: the largest-magnitude entry of
// each left singular vector is nonnegative, so decompositions are comparable.
SvdResult svd(const Matrix& m);

double frobenius_norm(const Matrix& m);

bool all_finite(const Matrix& m);
void require_finite(const Matrix& m, const char* what);

// Seeded Gaussian source; deterministic within one build.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return dist_(engine_); }

  Matrix gaussian(int rows, int cols) {
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = normal();
    return m;
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> dist_{0.0, 1.0};
};

}  // namespace dlrt
