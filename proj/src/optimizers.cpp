#include "optimizers.hpp"

#include <algorithm>
#include <cmath>

namespace dlrt {

namespace {

// Zero-pad or crop m into a rows x cols block anchored top-left.
Matrix pad_crop(const Matrix& m, int rows, int cols) {
  Matrix out = Matrix::Zero(rows, cols);
  const int r = std::min<int>(rows, static_cast<int>(m.rows()));
  const int c = std::min<int>(cols, static_cast<int>(m.cols()));
  out.topLeftCorner(r, c) = m.topLeftCorner(r, c);
  return out;
}

Matrix zeros_like_or(const Matrix& m, const Matrix& shape_of) {
  if (m.size() == 0) return Matrix::Zero(shape_of.rows(), shape_of.cols());
  if (m.rows() != shape_of.rows() || m.cols() != shape_of.cols())
    throw ShapeError("optimizer state shape does not match parameter");
  return m;
}

// One elementwise Adam update (eps outside the root), shared by the full-rank
// baseline and the adapter-style factor descent.
void adam_elementwise(Matrix& p, Matrix& v, Matrix& k, long n, const Matrix& g,
                      double beta1, double beta2, double eps, double lambda,
                      double weight_decay) {
  v = beta1 * v + (1.0 - beta1) * g;
  k = beta2 * k + (1.0 - beta2) * g.array().square().matrix();
  Matrix vc = v / (1.0 - std::pow(beta1, static_cast<double>(n)));
  Matrix kc = k / (1.0 - std::pow(beta2, static_cast<double>(n)));
  if (weight_decay > 0.0) p -= lambda * weight_decay * p;
  p -= lambda * (vc.array() / (kc.array().sqrt() + eps)).matrix();
}

struct AugmentedFrame {
  double loss;
  Matrix Uh, Vh;
  Matrix Pu;  // Uh^T U, m1 x r
  Matrix Pv;  // V^T Vh, r x m2
  Matrix Sb;  // coefficient in the augmented frame
  Matrix gS;  // gradient in the augmented frame
};

AugmentedFrame augment(const LowRankFactors& f, GradientOracle& oracle) {
  auto [loss, gU, gV] = oracle.grad_at_factors(f);
  require_finite(gU, "lr step gradient");
  require_finite(gV, "lr step gradient");
  AugmentedFrame a;
  a.loss = loss;
  // The two augmentations are independent; cheap enough to run in sequence
  // at desk scale.
  a.Uh = basis_augmentation(f.U, gU);
  a.Vh = basis_augmentation(f.V, gV);
  a.Pu = a.Uh.transpose() * f.U;
  a.Pv = f.V.transpose() * a.Vh;
  a.Sb = a.Pu * f.S * a.Pv;
  auto [coeff_loss, gS] = oracle.grad_at_coeff(a.Uh, a.Sb, a.Vh);
  (void)coeff_loss;
  require_finite(gS, "lr step coefficient gradient");
  a.gS = gS;
  return a;
}

}  // namespace

std::tuple<double, Matrix, Matrix> GradientOracle::grad_at_factors(
    const LowRankFactors& f) {
  auto [loss, g] = grad_w(reconstruct(f));
  auto [gU, gV, gS] = factor_gradients(f, g);
  (void)gS;
  return {loss, gU, gV};
}

std::pair<double, Matrix> GradientOracle::grad_at_coeff(const Matrix& u_hat,
                                                        const Matrix& s_bar,
                                                        const Matrix& v_hat) {
  auto [loss, g] = grad_w(u_hat * s_bar * v_hat.transpose());
  return {loss, u_hat.transpose() * g * v_hat};
}

std::pair<FullState, double> hb_full_step(const FullState& state,
                                          GradientOracle& oracle) {
  auto [loss, g] = oracle.grad_w(state.W);
  require_finite(g, "hb_full_step gradient");
  FullState next = state;
  next.V = zeros_like_or(state.V, state.W);
  next.V = (1.0 - state.gamma) * next.V - state.lambda * g;
  next.W = state.W + state.lambda * next.V;
  return {next, loss};
}

std::pair<FullState, double> adam_full_step(const FullState& state,
                                            GradientOracle& oracle) {
  auto [loss, g] = oracle.grad_w(state.W);
  require_finite(g, "adam_full_step gradient");
  FullState next = state;
  next.V = zeros_like_or(state.V, state.W);
  next.K = zeros_like_or(state.K, state.W);
  next.n = state.n + 1;
  adam_elementwise(next.W, next.V, next.K, next.n, g, state.beta1, state.beta2,
                   state.eps, state.lambda, state.weight_decay);
  return {next, loss};
}

std::tuple<LowRankFactors, HeavyBallState, double> lr_hb_step(
    const LowRankFactors& f, const HeavyBallState& state,
    GradientOracle& oracle, const TruncationPolicy& policy) {
  Matrix sv = zeros_like_or(state.S_V, f.S);
  auto a = augment(f, oracle);
  Matrix SbV = a.Pu * sv * a.Pv;
  Matrix ShV = (1.0 - state.gamma) * SbV - state.lambda * a.gS;
  Matrix Sh = a.Sb + state.lambda * ShV;
  auto t = truncate_hb(Sh, ShV, a.Uh, a.Vh, policy);
  return {t.f, HeavyBallState{t.S_V, state.gamma, state.lambda}, a.loss};
}

std::tuple<LowRankFactors, AdamState, double> lr_adam_step(
    const LowRankFactors& f, const AdamState& state, GradientOracle& oracle,
    const TruncationPolicy& policy) {
  Matrix sv = zeros_like_or(state.S_V, f.S);
  Matrix sk = zeros_like_or(state.S_K, f.S);
  if (sk.minCoeff() < 0.0)
    throw NumericError("lr_adam_step: negative second-moment entry");
  auto a = augment(f, oracle);
  Matrix SbV = a.Pu * sv * a.Pv;
  Matrix SbK = (a.Pu * sk.cwiseSqrt() * a.Pv).array().square().matrix();

  const long n = state.n + 1;
  Matrix ShV = state.beta1 * SbV + (1.0 - state.beta1) * a.gS;
  Matrix ShK = state.beta2 * SbK +
               (1.0 - state.beta2) * a.gS.array().square().matrix();
  Matrix ScV = ShV / (1.0 - std::pow(state.beta1, static_cast<double>(n)));
  Matrix ScK = ShK / (1.0 - std::pow(state.beta2, static_cast<double>(n)));
  Matrix Sh = a.Sb -
              state.lambda *
                  (ScV.array() / (ScK.array() + state.eps).sqrt()).matrix();
  if (state.weight_decay > 0.0)
    Sh -= state.lambda * state.weight_decay * a.Sb;

  auto t = truncate_adam(Sh, ShV, ShK, a.Uh, a.Vh, policy);
  AdamState next = state;
  next.S_V = t.S_V;
  next.S_K = t.S_K;
  next.n = n;
  return {t.f, next, a.loss};
}

std::tuple<LowRankFactors, AdamState, double> lr_adam_naive_step(
    const LowRankFactors& f, const AdamState& state, GradientOracle& oracle,
    const TruncationPolicy& policy) {
  Matrix sv = zeros_like_or(state.S_V, f.S);
  Matrix sk = zeros_like_or(state.S_K, f.S);
  if (sk.minCoeff() < 0.0)
    throw NumericError("lr_adam_naive_step: negative second-moment entry");
  auto a = augment(f, oracle);
  const int m1 = static_cast<int>(a.Sb.rows());
  const int m2 = static_cast<int>(a.Sb.cols());
  // Moments carried over without accounting for the basis change.
  Matrix SbV = pad_crop(sv, m1, m2);
  Matrix SbK = pad_crop(sk, m1, m2);

  const long n = state.n + 1;
  Matrix ShV = state.beta1 * SbV + (1.0 - state.beta1) * a.gS;
  Matrix ShK = state.beta2 * SbK +
               (1.0 - state.beta2) * a.gS.array().square().matrix();
  Matrix ScV = ShV / (1.0 - std::pow(state.beta1, static_cast<double>(n)));
  Matrix ScK = ShK / (1.0 - std::pow(state.beta2, static_cast<double>(n)));
  Matrix Sh = a.Sb -
              state.lambda *
                  (ScV.array() / (ScK.array() + state.eps).sqrt()).matrix();
  if (state.weight_decay > 0.0)
    Sh -= state.lambda * state.weight_decay * a.Sb;

  LowRankFactors f1 = truncate_naive(Sh, a.Uh, a.Vh, policy);
  AdamState next = state;
  next.S_V = pad_crop(ShV, f1.r, f1.r);
  next.S_K = pad_crop(ShK, f1.r, f1.r);
  next.n = n;
  return {f1, next, a.loss};
}

std::tuple<LowRankFactors, LoraStates, double> lora_adam_step(
    const LowRankFactors& f, const LoraStates& states,
    GradientOracle& oracle) {
  auto [loss, g] = oracle.grad_w(reconstruct(f));
  require_finite(g, "lora_adam_step gradient");
  auto [gU, gV, gS] = factor_gradients(f, g);

  LowRankFactors next = f;
  LoraStates ns = states;
  auto apply = [](Matrix& p, AdamState& st, const Matrix& grad) {
    st.S_V = zeros_like_or(st.S_V, p);
    st.S_K = zeros_like_or(st.S_K, p);
    st.n += 1;
    adam_elementwise(p, st.S_V, st.S_K, st.n, grad, st.beta1, st.beta2, st.eps,
                     st.lambda, st.weight_decay);
  };
  apply(next.U, ns.u, gU);
  apply(next.S, ns.s, gS);
  apply(next.V, ns.v, gV);
  return {next, ns, loss};
}

}  // namespace dlrt
