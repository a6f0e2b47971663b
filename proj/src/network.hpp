#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "lowrank.hpp"

namespace dlrt {

enum class Activation { Identity, Relu, Tanh };

struct Layer {
  enum class Kind { Dense, LowRank };
  Kind kind = Kind::Dense;
  Activation act = Activation::Identity;
  Matrix W;          // Dense only
  LowRankFactors f;  // LowRank only

  int n_out() const {
    return static_cast<int>(kind == Kind::Dense ? W.rows() : f.U.rows());
  }
  int n_in() const {
    return static_cast<int>(kind == Kind::Dense ? W.cols() : f.V.rows());
  }
  Matrix dense_weight() const {
    return kind == Kind::Dense ? W : reconstruct(f);
  }

  static Layer dense(Matrix w, Activation a) {
    Layer l;
    l.kind = Kind::Dense;
    l.W = std::move(w);
    l.act = a;
    return l;
  }
  static Layer low_rank(LowRankFactors f, Activation a) {
    Layer l;
    l.kind = Kind::LowRank;
    l.f = std::move(f);
    l.act = a;
    return l;
  }
};

struct Network {
  std::vector<Layer> layers;
};

// Rows are samples. For classification, labels holds the class per row and
// targets is unused.
struct Batch {
  Matrix inputs;
  Matrix targets;
  std::vector<int> labels;
};

enum class LossTag { MSE, SoftmaxCrossEntropy, QuadraticMatrixRecovery };

// QuadraticMatrixRecovery defines L(W) = 1/2 ||W - A||_F^2 directly on a
// single identity-activation layer; the batch is ignored.
struct LossKind {
  LossTag tag = LossTag::MSE;
  Matrix A;
};

Matrix forward(const Network& net, const Matrix& inputs);

// (loss, per-layer full-shape dL/dW).
std::pair<double, std::vector<Matrix>> backward(const Network& net,
                                                const Batch& batch,
                                                const LossKind& loss);

double eval_loss(const Network& net, const Batch& batch, const LossKind& loss);

// Central-difference check of every parameter (dense W entries; U, S, V
// entries of low-rank layers against their factor gradients). Returns the max
// relative discrepancy.
double finite_difference_check(const Network& net, const Batch& batch,
                               const LossKind& loss, double h);

// Target A = X diag(2^-1 .. 2^-true_rank) Y^T with orthonormal X, Y, plus
// elementwise Gaussian noise of the given scale.
LossKind gen_matrix_recovery(int n, int true_rank, double noise,
                             std::uint64_t seed);

// Two Gaussian blobs at +-mu with ||mu|| = 3 (unit noise); labels alternate
// 0, 1 so any prefix split stays balanced.
Batch gen_two_class(int n_samples, int dim, std::uint64_t seed);

}  // namespace dlrt
