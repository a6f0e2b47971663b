#include "network.hpp"

#include <cmath>
#include <string>

namespace dlrt {

namespace {

Matrix apply_weight(const Layer& l, const Matrix& z) {
  if (z.cols() != l.n_in())
    throw ShapeError("forward: layer expects " + std::to_string(l.n_in()) +
                     " inputs, got " + std::to_string(z.cols()));
  if (l.kind == Layer::Kind::Dense) return z * l.W.transpose();
  // (z V) S^T U^T keeps the cost at O(n r) per sample.
  return ((z * l.f.V) * l.f.S.transpose()) * l.f.U.transpose();
}

// d(pre) -> d(previous activation): delta * W.
Matrix apply_weight_t(const Layer& l, const Matrix& delta) {
  if (l.kind == Layer::Kind::Dense) return delta * l.W;
  return ((delta * l.f.U) * l.f.S) * l.f.V.transpose();
}

Matrix activate(Activation a, const Matrix& pre) {
  switch (a) {
    case Activation::Identity:
      return pre;
    case Activation::Relu:
      return pre.cwiseMax(0.0);
    case Activation::Tanh:
      return pre.array().tanh().matrix();
  }
  throw Error("unknown activation");
}

// Derivative expressed through the post-activation value.
Matrix activate_prime_from_post(Activation a, const Matrix& post) {
  switch (a) {
    case Activation::Identity:
      return Matrix::Ones(post.rows(), post.cols());
    case Activation::Relu:
      return (post.array() > 0.0).cast<double>().matrix();
    case Activation::Tanh:
      return (1.0 - post.array().square()).matrix();
  }
  throw Error("unknown activation");
}

bool is_recovery(const LossKind& loss) {
  return loss.tag == LossTag::QuadraticMatrixRecovery;
}

void check_recovery_net(const Network& net) {
  if (net.layers.size() != 1 ||
      net.layers[0].act != Activation::Identity)
    throw ShapeError(
        "matrix-recovery loss needs a single identity-activation layer");
}

// Loss value and gradient w.r.t. the network output.
std::pair<double, Matrix> output_loss(const Matrix& out, const Batch& batch,
                                      const LossKind& loss) {
  const double bn = static_cast<double>(out.rows());
  if (loss.tag == LossTag::MSE) {
    if (batch.targets.rows() != out.rows() ||
        batch.targets.cols() != out.cols())
      throw ShapeError("MSE: target shape mismatch");
    Matrix diff = out - batch.targets;
    return {0.5 * diff.squaredNorm() / bn, diff / bn};
  }
  if (loss.tag == LossTag::SoftmaxCrossEntropy) {
    if (static_cast<int>(batch.labels.size()) != out.rows())
      throw ShapeError("cross-entropy: label count mismatch");
    double total = 0.0;
    Matrix dout(out.rows(), out.cols());
    for (int i = 0; i < out.rows(); ++i) {
      const int y = batch.labels[static_cast<size_t>(i)];
      if (y < 0 || y >= out.cols())
        throw ShapeError("cross-entropy: label out of range");
      // Fused log-sum-exp for stability.
      const double m = out.row(i).maxCoeff();
      double z = 0.0;
      for (int c = 0; c < out.cols(); ++c)
        z += std::exp(out(i, c) - m);
      total += std::log(z) + m - out(i, y);
      for (int c = 0; c < out.cols(); ++c)
        dout(i, c) = std::exp(out(i, c) - m) / z - (c == y ? 1.0 : 0.0);
    }
    return {total / bn, dout / bn};
  }
  throw Error("unsupported loss");
}

}  // namespace

Matrix forward(const Network& net, const Matrix& inputs) {
  Matrix z = inputs;
  for (const auto& l : net.layers) z = activate(l.act, apply_weight(l, z));
  return z;
}

std::pair<double, std::vector<Matrix>> backward(const Network& net,
                                                const Batch& batch,
                                                const LossKind& loss) {
  if (is_recovery(loss)) {
    check_recovery_net(net);
    Matrix w = net.layers[0].dense_weight();
    if (w.rows() != loss.A.rows() || w.cols() != loss.A.cols())
      throw ShapeError("matrix-recovery: weight/target shape mismatch");
    Matrix g = w - loss.A;
    return {0.5 * g.squaredNorm(), {g}};
  }

  const size_t depth = net.layers.size();
  std::vector<Matrix> zs;
  zs.reserve(depth + 1);
  zs.push_back(batch.inputs);
  for (const auto& l : net.layers)
    zs.push_back(activate(l.act, apply_weight(l, zs.back())));

  auto [value, dout] = output_loss(zs.back(), batch, loss);
  if (!std::isfinite(value)) throw NumericError("backward: non-finite loss");

  std::vector<Matrix> grads(depth);
  Matrix dz = dout;
  for (size_t l = depth; l-- > 0;) {
    Matrix dpre =
        dz.cwiseProduct(activate_prime_from_post(net.layers[l].act, zs[l + 1]));
    grads[l] = dpre.transpose() * zs[l];
    require_finite(grads[l], "backward gradient");
    if (l > 0) dz = apply_weight_t(net.layers[l], dpre);
  }
  return {value, std::move(grads)};
}

double eval_loss(const Network& net, const Batch& batch,
                 const LossKind& loss) {
  if (is_recovery(loss)) {
    check_recovery_net(net);
    return 0.5 * (net.layers[0].dense_weight() - loss.A).squaredNorm();
  }
  return output_loss(forward(net, batch.inputs), batch, loss).first;
}

double finite_difference_check(const Network& net, const Batch& batch,
                               const LossKind& loss, double h) {
  if (h <= 0.0) throw ConfigError("finite_difference_check: h must be > 0");
  auto [value, grads] = backward(net, batch, loss);
  (void)value;

  double gmax = 1e-12;
  std::vector<std::vector<Matrix>> analytic(net.layers.size());
  for (size_t l = 0; l < net.layers.size(); ++l) {
    if (net.layers[l].kind == Layer::Kind::Dense) {
      analytic[l] = {grads[l]};
    } else {
      auto [gU, gV, gS] = factor_gradients(net.layers[l].f, grads[l]);
      analytic[l] = {gU, gS, gV};
    }
    for (const auto& m : analytic[l])
      gmax = std::max(gmax, m.cwiseAbs().maxCoeff());
  }

  Network work = net;
  double max_rel = 0.0;
  auto probe = [&](double* p, double an) {
    const double saved = *p;
    *p = saved + h;
    const double lp = eval_loss(work, batch, loss);
    *p = saved - h;
    const double lm = eval_loss(work, batch, loss);
    *p = saved;
    const double fd = (lp - lm) / (2.0 * h);
    const double rel =
        std::abs(fd - an) / std::max({std::abs(an), std::abs(fd), gmax});
    max_rel = std::max(max_rel, rel);
  };

  for (size_t l = 0; l < net.layers.size(); ++l) {
    Layer& layer = work.layers[l];
    if (layer.kind == Layer::Kind::Dense) {
      const Matrix& an = analytic[l][0];
      for (int i = 0; i < layer.W.rows(); ++i)
        for (int j = 0; j < layer.W.cols(); ++j)
          probe(&layer.W(i, j), an(i, j));
    } else {
      Matrix* params[3] = {&layer.f.U, &layer.f.S, &layer.f.V};
      for (int k = 0; k < 3; ++k) {
        const Matrix& an = analytic[l][static_cast<size_t>(k)];
        for (int i = 0; i < params[k]->rows(); ++i)
          for (int j = 0; j < params[k]->cols(); ++j)
            probe(&(*params[k])(i, j), an(i, j));
      }
    }
  }
  return max_rel;
}

LossKind gen_matrix_recovery(int n, int true_rank, double noise,
                             std::uint64_t seed) {
  if (true_rank < 1 || true_rank > n)
    throw ConfigError("gen_matrix_recovery: need 1 <= true_rank <= n");
  Rng rng(seed);
  Matrix x = orthonormalize(rng.gaussian(n, true_rank));
  Matrix y = orthonormalize(rng.gaussian(n, true_rank));
  Vector sig(true_rank);
  for (int i = 0; i < true_rank; ++i) sig[i] = std::pow(2.0, -(i + 1));
  Matrix a = x * sig.asDiagonal() * y.transpose();
  if (noise > 0.0) a += noise * rng.gaussian(n, n);
  LossKind loss;
  loss.tag = LossTag::QuadraticMatrixRecovery;
  loss.A = std::move(a);
  return loss;
}

Batch gen_two_class(int n_samples, int dim, std::uint64_t seed) {
  if (n_samples <= 0 || n_samples % 2 != 0)
    throw ConfigError("gen_two_class: n_samples must be positive and even");
  Rng rng(seed);
  Matrix mu = rng.gaussian(dim, 1);
  mu *= 3.0 / mu.norm();
  Batch b;
  b.inputs = Matrix(n_samples, dim);
  b.labels.resize(static_cast<size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) {
    const int label = i % 2;
    b.labels[static_cast<size_t>(i)] = label;
    const double sign = label == 0 ? 1.0 : -1.0;
    for (int j = 0; j < dim; ++j)
      b.inputs(i, j) = sign * mu(j, 0) + rng.normal();
  }
  return b;
}

}  // namespace dlrt
