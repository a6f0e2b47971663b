#pragma once

#include <limits>
#include <tuple>

#include "linalg.hpp"

namespace dlrt {

// W = U S V^T with orthonormal U (n_out x r) and V (n_in x r). Augmented
// coefficient frames may be rectangular when a dimension caps the basis size,
// so S is (rows of U-frame) x (rows of V-frame) in intermediate states; at
// step boundaries it is r x r.
struct LowRankFactors {
  Matrix U;
  Matrix S;
  Matrix V;
  int r = 0;
};

struct TruncationPolicy {
  double tau = 0.0;  // relative tolerance; threshold is tau * ||S_hat||_F
  int r_min = 2;
  int r_max = std::numeric_limits<int>::max();
  // Opt-in guard: raise the new rank until the discarded part of the momentum
  // coefficient is also below the threshold.
  bool momentum_guard = false;
};

Matrix reconstruct(const LowRankFactors& f);

// Orthogonal projection onto the tangent space of the rank-r manifold at W:
// P(W) z = U U^T z (I - V V^T) + z V V^T.
Matrix tangent_project(const LowRankFactors& f, const Matrix& z);

// The effective (non-orthogonal) map induced by independent factor momentum:
// z V S^T S_V V_V^T + U_V U^T z V V_V^T + U_V S_V S^T U^T z.
// Can vanish where the tangent-projected gradient does not.
Matrix naive_project(const LowRankFactors& f, const LowRankFactors& mom,
                     const Matrix& z);

// (grad_U, grad_V, grad_S) = (g V S^T, g^T U S, U^T g V).
std::tuple<Matrix, Matrix, Matrix> factor_gradients(const LowRankFactors& f,
                                                    const Matrix& grad_w);

// ortho([g | b]) with the gradient block first; capped at n columns, never
// fails on rank-deficient input.
Matrix basis_augmentation(const Matrix& b, const Matrix& g);

struct HbTruncation {
  LowRankFactors f;
  Matrix S_V;
};

struct AdamTruncation {
  LowRankFactors f;
  Matrix S_V;
  Matrix S_K;
};

HbTruncation truncate_hb(const Matrix& s_hat, const Matrix& sv_hat,
                         const Matrix& u_hat, const Matrix& v_hat,
                         const TruncationPolicy& policy);

AdamTruncation truncate_adam(const Matrix& s_hat, const Matrix& sv_hat,
                             const Matrix& sk_hat, const Matrix& u_hat,
                             const Matrix& v_hat,
                             const TruncationPolicy& policy);

// Same factor selection as truncate_hb; momentum coefficients are deliberately
// left to the caller (the defect of the naive method).
LowRankFactors truncate_naive(const Matrix& s_hat, const Matrix& u_hat,
                              const Matrix& v_hat,
                              const TruncationPolicy& policy);

// Rank-r1 truncated SVD of a dense matrix, as LowRankFactors.
LowRankFactors truncated_svd(const Matrix& w, int r1);

}  // namespace dlrt
