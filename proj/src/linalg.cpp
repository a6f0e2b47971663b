#include "linalg.hpp"

#include <cmath>
#include <string>

namespace dlrt {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dims differ (" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + ")");
  return a * b;
}

Matrix orthonormalize(const Matrix& m) {
  if (m.rows() < m.cols())
    throw ShapeError("orthonormalize: need rows >= cols, got " +
                     std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  Eigen::HouseholderQR<Matrix> qr(m);
  // First cols columns of the full Q; spans col(m) even when m is
  // rank-deficient (R is upper triangular), completion is deterministic.
  return qr.householderQ() * Matrix::Identity(m.rows(), m.cols());
}

SvdResult svd(const Matrix& m) {
  require_finite(m, "svd input");
  Eigen::JacobiSVD<Matrix> dec(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdResult r{dec.matrixU(), dec.singularValues(), dec.matrixV()};
  for (int j = 0; j < r.P.cols(); ++j) {
    int imax = 0;
    double best = -1.0;
    for (int i = 0; i < r.P.rows(); ++i) {
      double a = std::abs(r.P(i, j));
      if (a > best) {
        best = a;
        imax = i;
      }
    }
    if (r.P(imax, j) < 0.0) {
      r.P.col(j) = -r.P.col(j);
      r.Q.col(j) = -r.Q.col(j);
    }
  }
  return r;
}

double frobenius_norm(const Matrix& m) { return m.norm(); }

bool all_finite(const Matrix& m) { return m.allFinite(); }

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite())
    throw NumericError(std::string(what) + ": non-finite entries");
}

}  // namespace dlrt
