#include "lowrank.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace dlrt {

namespace {

void check_factor_shapes(const LowRankFactors& f) {
  if (f.U.cols() != f.S.rows() || f.S.cols() != f.V.cols())
    throw ShapeError("low-rank factors: inconsistent dims U" +
                     std::to_string(f.U.cols()) + " S" +
                     std::to_string(f.S.rows()) + "x" +
                     std::to_string(f.S.cols()) + " V" +
                     std::to_string(f.V.cols()));
}

void check_against(const LowRankFactors& f, const Matrix& z,
                   const char* what) {
  if (z.rows() != f.U.rows() || z.cols() != f.V.rows())
    throw ShapeError(std::string(what) + ": expected " +
                     std::to_string(f.U.rows()) + "x" +
                     std::to_string(f.V.rows()) + ", got " +
                     std::to_string(z.rows()) + "x" +
                     std::to_string(z.cols()));
}

struct TruncationPlan {
  SvdResult dec;
  int r1;
};

TruncationPlan plan_truncation(const Matrix& s_hat,
                               const TruncationPolicy& policy,
                               const Matrix* sv_hat) {
  TruncationPlan plan{svd(s_hat), 1};
  const int k = static_cast<int>(plan.dec.sigma.size());
  const double theta = policy.tau * frobenius_norm(s_hat);

  std::vector<double> tail(k + 1, 0.0);  // tail[r] = sum_{i >= r} sigma_i^2
  for (int i = k - 1; i >= 0; --i)
    tail[i] = tail[i + 1] + plan.dec.sigma[i] * plan.dec.sigma[i];

  const int rmax = std::clamp(policy.r_max, 1, k);
  const int rmin = std::clamp(policy.r_min, 1, rmax);
  plan.r1 = rmax;
  for (int r = rmin; r <= rmax; ++r) {
    if (std::sqrt(tail[r]) <= theta) {
      plan.r1 = r;
      break;
    }
  }

  if (policy.momentum_guard && sv_hat) {
    while (plan.r1 < k) {
      Matrix P1 = plan.dec.P.leftCols(plan.r1);
      Matrix Q1 = plan.dec.Q.leftCols(plan.r1);
      Matrix kept = P1 * (P1.transpose() * (*sv_hat) * Q1) * Q1.transpose();
      if (frobenius_norm(*sv_hat - kept) <= theta) break;
      ++plan.r1;
    }
  }
  return plan;
}

LowRankFactors pick_factors(const TruncationPlan& plan, const Matrix& u_hat,
                            const Matrix& v_hat) {
  const int r1 = plan.r1;
  LowRankFactors f;
  f.U = u_hat * plan.dec.P.leftCols(r1);
  f.S = Matrix(plan.dec.sigma.head(r1).asDiagonal());
  f.V = v_hat * plan.dec.Q.leftCols(r1);
  f.r = r1;
  return f;
}

void check_trunc_inputs(const Matrix& s_hat, const Matrix& u_hat,
                        const Matrix& v_hat) {
  if (u_hat.cols() != s_hat.rows() || v_hat.cols() != s_hat.cols())
    throw ShapeError("truncate: frame dims " + std::to_string(u_hat.cols()) +
                     "," + std::to_string(v_hat.cols()) +
                     " do not match coefficient " +
                     std::to_string(s_hat.rows()) + "x" +
                     std::to_string(s_hat.cols()));
}

}  // namespace

Matrix reconstruct(const LowRankFactors& f) {
  check_factor_shapes(f);
  return f.U * f.S * f.V.transpose();
}

Matrix tangent_project(const LowRankFactors& f, const Matrix& z) {
  check_factor_shapes(f);
  check_against(f, z, "tangent_project");
  Matrix zV = z * f.V;                       // n_out x r
  Matrix UtZ = f.U.transpose() * z;          // r x n_in
  Matrix UtZV = f.U.transpose() * zV;        // r x r
  return f.U * UtZ - f.U * UtZV * f.V.transpose() + zV * f.V.transpose();
}

Matrix naive_project(const LowRankFactors& f, const LowRankFactors& mom,
                     const Matrix& z) {
  check_factor_shapes(f);
  check_factor_shapes(mom);
  check_against(f, z, "naive_project");
  Matrix t1 = z * f.V * f.S.transpose() * mom.S * mom.V.transpose();
  Matrix t2 = mom.U * (f.U.transpose() * z * f.V) * mom.V.transpose();
  Matrix t3 = mom.U * mom.S * f.S.transpose() * (f.U.transpose() * z);
  return t1 + t2 + t3;
}

std::tuple<Matrix, Matrix, Matrix> factor_gradients(const LowRankFactors& f,
                                                    const Matrix& grad_w) {
  check_factor_shapes(f);
  check_against(f, grad_w, "factor_gradients");
  Matrix gU = grad_w * f.V * f.S.transpose();
  Matrix gV = grad_w.transpose() * f.U * f.S;
  Matrix gS = f.U.transpose() * grad_w * f.V;
  return {gU, gV, gS};
}

Matrix basis_augmentation(const Matrix& b, const Matrix& g) {
  if (b.rows() != g.rows())
    throw ShapeError("basis_augmentation: row counts differ (" +
                     std::to_string(b.rows()) + " vs " +
                     std::to_string(g.rows()) + ")");
  const int n = static_cast<int>(b.rows());
  Matrix m(n, g.cols() + b.cols());
  m << g, b;  // gradient block first
  const int out_cols = std::min<int>(static_cast<int>(m.cols()), n);
  Eigen::HouseholderQR<Matrix> qr(m);
  return qr.householderQ() * Matrix::Identity(n, out_cols);
}

HbTruncation truncate_hb(const Matrix& s_hat, const Matrix& sv_hat,
                         const Matrix& u_hat, const Matrix& v_hat,
                         const TruncationPolicy& policy) {
  check_trunc_inputs(s_hat, u_hat, v_hat);
  if (sv_hat.rows() != s_hat.rows() || sv_hat.cols() != s_hat.cols())
    throw ShapeError("truncate_hb: momentum coefficient shape mismatch");
  auto plan = plan_truncation(s_hat, policy, &sv_hat);
  Matrix P1 = plan.dec.P.leftCols(plan.r1);
  Matrix Q1 = plan.dec.Q.leftCols(plan.r1);
  return {pick_factors(plan, u_hat, v_hat), P1.transpose() * sv_hat * Q1};
}

AdamTruncation truncate_adam(const Matrix& s_hat, const Matrix& sv_hat,
                             const Matrix& sk_hat, const Matrix& u_hat,
                             const Matrix& v_hat,
                             const TruncationPolicy& policy) {
  check_trunc_inputs(s_hat, u_hat, v_hat);
  if (sk_hat.rows() != s_hat.rows() || sk_hat.cols() != s_hat.cols() ||
      sv_hat.rows() != s_hat.rows() || sv_hat.cols() != s_hat.cols())
    throw ShapeError("truncate_adam: moment coefficient shape mismatch");
  if (sk_hat.minCoeff() < 0.0)
    throw NumericError("truncate_adam: negative second-moment entry");
  auto plan = plan_truncation(s_hat, policy, &sv_hat);
  Matrix P1 = plan.dec.P.leftCols(plan.r1);
  Matrix Q1 = plan.dec.Q.leftCols(plan.r1);
  Matrix sv = P1.transpose() * sv_hat * Q1;
  // Second moment travels as its elementwise square root.
  Matrix sk =
      (P1.transpose() * sk_hat.cwiseSqrt() * Q1).array().square().matrix();
  return {pick_factors(plan, u_hat, v_hat), sv, sk};
}

LowRankFactors truncate_naive(const Matrix& s_hat, const Matrix& u_hat,
                              const Matrix& v_hat,
                              const TruncationPolicy& policy) {
  check_trunc_inputs(s_hat, u_hat, v_hat);
  auto plan = plan_truncation(s_hat, policy, nullptr);
  return pick_factors(plan, u_hat, v_hat);
}

LowRankFactors truncated_svd(const Matrix& w, int r1) {
  auto dec = svd(w);
  int r = std::clamp(r1, 1, static_cast<int>(dec.sigma.size()));
  LowRankFactors f;
  f.U = dec.P.leftCols(r);
  f.S = Matrix(dec.sigma.head(r).asDiagonal());
  f.V = dec.Q.leftCols(r);
  f.r = r;
  return f;
}

}  // namespace dlrt
