#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "optimizers.hpp"

using namespace dlrt;

namespace {

AnalyticOracle quadratic_oracle(const Matrix& a) {
  return AnalyticOracle(
      [a](const Matrix& w) { return 0.5 * (w - a).squaredNorm(); },
      [a](const Matrix& w) -> Matrix { return w - a; });
}

LowRankFactors random_factors(Rng& rng, int n, int r) {
  LowRankFactors f;
  f.U = orthonormalize(rng.gaussian(n, r));
  f.V = orthonormalize(rng.gaussian(n, r));
  f.S = rng.gaussian(r, r);
  f.r = r;
  return f;
}

TruncationPolicy fixed_rank_policy(int r) {
  TruncationPolicy p;
  p.tau = 0.0;
  p.r_min = r;
  p.r_max = r;
  return p;
}

}  // namespace

TEST_CASE("hb_full_step") {
  Matrix a = Matrix::Zero(1, 1);  // gradient at W is W - a

  // gamma = 1 resets the velocity to -lambda g.
  FullState s;
  s.W = 3.0 * Matrix::Identity(1, 1);
  s.V = 7.0 * Matrix::Identity(1, 1);
  s.gamma = 1.0;
  s.lambda = 0.5;
  auto oracle = quadratic_oracle(a);
  auto [s1, l1] = hb_full_step(s, oracle);
  CHECK(s1.V(0, 0) == doctest::Approx(-0.5 * 3.0));

  // Ballistic coast: zero gradient, zero decay.
  FullState c;
  c.W = Matrix::Zero(1, 1);
  c.V = 2.0 * Matrix::Identity(1, 1);
  c.gamma = 0.0;
  c.lambda = 0.25;
  auto zero_oracle = quadratic_oracle(Matrix::Zero(1, 1));
  auto [c1, lc] = hb_full_step(c, zero_oracle);
  CHECK(c1.V(0, 0) == 2.0);
  CHECK(c1.W(0, 0) == doctest::Approx(0.5));

  // Hand computation: W=1, V=0, g=2, gamma=0.1, lambda=0.5.
  FullState h;
  h.W = Matrix::Identity(1, 1);
  h.V = Matrix::Zero(1, 1);
  h.gamma = 0.1;
  h.lambda = 0.5;
  auto g2 = quadratic_oracle(-Matrix::Identity(1, 1));  // grad at W=1 is 2
  auto [h1, lh] = hb_full_step(h, g2);
  CHECK(h1.V(0, 0) == doctest::Approx(-1.0));
  CHECK(h1.W(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("adam_full_step") {
  Rng rng(21);
  Matrix w0 = rng.gaussian(3, 3);
  Matrix g0 = rng.gaussian(3, 3);

  // First step moves by about -lambda sign(g) elementwise when eps is tiny.
  FullState s;
  s.W = w0;
  s.V = Matrix::Zero(3, 3);
  s.K = Matrix::Zero(3, 3);
  s.eps = 1e-16;
  s.lambda = 0.01;
  auto oracle = quadratic_oracle(w0 - g0);
  auto [s1, l1] = adam_full_step(s, oracle);
  Matrix step = (s1.W - w0) / s.lambda;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(step(i, j) ==
            doctest::Approx(-(g0(i, j) > 0 ? 1.0 : -1.0)).epsilon(1e-6));
  CHECK(s1.n == 1);

  // Zero gradient keeps W fixed.
  FullState z;
  z.W = w0;
  z.V = Matrix::Zero(3, 3);
  z.K = Matrix::Zero(3, 3);
  auto zero_oracle = quadratic_oracle(w0);
  for (int i = 0; i < 5; ++i) std::tie(z, std::ignore) =
      adam_full_step(z, zero_oracle);
  CHECK((z.W - w0).norm() == 0.0);

  // beta1 = beta2 = 0: no memory, bias correction trivial.
  FullState m;
  m.W = w0;
  m.V = Matrix::Zero(3, 3);
  m.K = Matrix::Zero(3, 3);
  m.beta1 = 0.0;
  m.beta2 = 0.0;
  auto [m1, lm] = adam_full_step(m, oracle);
  CHECK((m1.V - g0).norm() <= 1e-14 * g0.norm());
  CHECK((m1.K - Matrix(g0.array().square().matrix())).norm() <=
        1e-14 * g0.norm());
}

TEST_CASE("lr_hb_step null step leaves the weight in place") {
  Rng rng(22);
  LowRankFactors f = random_factors(rng, 6, 2);
  Matrix w0 = reconstruct(f);
  auto oracle = quadratic_oracle(rng.gaussian(6, 6));
  HeavyBallState st{Matrix::Zero(2, 2), 0.9, 0.0};
  TruncationPolicy policy = fixed_rank_policy(2);
  auto [f1, st1, loss] = lr_hb_step(f, st, oracle, policy);
  CHECK((reconstruct(f1) - w0).norm() <= 1e-12 * w0.norm());
}

TEST_CASE("lr_hb_step matches the full-rank method at full rank") {
  Rng rng(23);
  const int n = 8;
  Matrix a = rng.gaussian(n, n);
  Matrix w0 = rng.gaussian(n, n);
  auto oracle = quadratic_oracle(a);

  FullState full;
  full.W = w0;
  full.V = Matrix::Zero(n, n);
  full.gamma = 0.3;
  full.lambda = 0.05;

  LowRankFactors f = truncated_svd(w0, n);
  HeavyBallState st{Matrix::Zero(n, n), 0.3, 0.05};
  TruncationPolicy policy = fixed_rank_policy(n);

  for (int step = 0; step < 50; ++step) {
    std::tie(full, std::ignore) = hb_full_step(full, oracle);
    std::tie(f, st, std::ignore) = lr_hb_step(f, st, oracle, policy);
    const double werr = (reconstruct(f) - full.W).norm() /
                        std::max(full.W.norm(), 1e-30);
    const double verr = (f.U * st.S_V * f.V.transpose() - full.V).norm() /
                        std::max(full.V.norm(), 1e-30);
    CHECK(werr <= 1e-10);
    CHECK(verr <= 1e-10);
  }
}

TEST_CASE("lr_hb_step reaches first-order stationarity on a rank-1 target") {
  Rng rng(24);
  const int n = 4;
  Matrix a = Matrix::Zero(n, n);
  a(0, 0) = 1.0;
  auto oracle = quadratic_oracle(a);
  LowRankFactors f = random_factors(rng, n, 1);
  f.S = 0.1 * Matrix::Identity(1, 1);
  HeavyBallState st{Matrix::Zero(1, 1), 0.9, 0.3};
  TruncationPolicy policy = fixed_rank_policy(1);
  double residual = 1.0;
  for (int step = 0; step < 500 && residual > 1e-6; ++step) {
    std::tie(f, st, std::ignore) = lr_hb_step(f, st, oracle, policy);
    residual = tangent_project(f, reconstruct(f) - a).norm();
  }
  CHECK(residual <= 1e-6);
}

TEST_CASE("lr_hb_step descends from the naive-flow trap") {
  // At the configuration where the naive projector vanishes, the discrete
  // momentum step still strictly decreases the loss.
  Matrix e1(2, 1);
  e1 << 1, 0;
  LowRankFactors f{e1, Matrix::Identity(1, 1), e1, 1};
  Matrix g(2, 2);
  g << 0, 0, 1, 0;
  auto oracle = quadratic_oracle(reconstruct(f) - g);
  HeavyBallState st{Matrix::Zero(1, 1), 0.9, 0.1};
  TruncationPolicy policy;
  policy.tau = 0.0;
  policy.r_min = 1;
  auto [f1, st1, before] = lr_hb_step(f, st, oracle, policy);
  const double after = 0.5 * (reconstruct(f1) - (reconstruct(f) - g)).squaredNorm();
  CHECK(after < before);
}

TEST_CASE("descent at stationarity leaves the weight unchanged") {
  Rng rng(25);
  const int n = 8;
  LowRankFactors f = random_factors(rng, n, 2);
  Matrix w0 = reconstruct(f);
  HeavyBallState st{Matrix::Zero(2, 2), 0.9, 0.1};
  TruncationPolicy policy = fixed_rank_policy(2);

  // Exactly zero gradient: bitwise-stable up to roundoff.
  auto at_opt = quadratic_oracle(w0);
  auto [f1, st1, l1] = lr_hb_step(f, st, at_opt, policy);
  CHECK((reconstruct(f1) - w0).norm() <= 1e-12);

  // Gradient normal to the tangent space: movement bounded by lambda^2 times
  // the normal component (second-order in the step size).
  Matrix uperp = orthonormalize(
      (Matrix::Identity(n, n) - f.U * f.U.transpose()) * rng.gaussian(n, 1));
  Matrix vperp = orthonormalize(
      (Matrix::Identity(n, n) - f.V * f.V.transpose()) * rng.gaussian(n, 1));
  Matrix normal = uperp * vperp.transpose();
  auto tangent_stationary = quadratic_oracle(w0 - normal);
  CHECK(tangent_project(f, normal).norm() <= 1e-12);
  auto [f2, st2, l2] = lr_hb_step(f, st, tangent_stationary, policy);
  CHECK((reconstruct(f2) - w0).norm() <=
        st.lambda * st.lambda * normal.norm() + 1e-12);
}

TEST_CASE("lr_adam_step first step and moment shapes") {
  Rng rng(26);
  const int n = 10, r = 3;
  LowRankFactors f = random_factors(rng, n, r);
  Matrix a = rng.gaussian(n, n);
  auto oracle = quadratic_oracle(a);
  AdamState st;
  st.S_V = Matrix::Zero(r, r);
  st.S_K = Matrix::Zero(r, r);
  st.lambda = 0.01;
  st.eps = 1e-8;
  TruncationPolicy policy;
  policy.tau = 0.0;
  policy.r_min = 1;

  // Recompute the augmented frame independently and compare against the
  // closed-form first step.
  auto [loss, gU, gV] = oracle.grad_at_factors(f);
  Matrix Uh = basis_augmentation(f.U, gU);
  Matrix Vh = basis_augmentation(f.V, gV);
  Matrix Sb = (Uh.transpose() * f.U) * f.S * (f.V.transpose() * Vh);
  Matrix gS = Uh.transpose() * (Uh * Sb * Vh.transpose() - a) * Vh;
  Matrix expected =
      Sb - st.lambda *
               (gS.array() / (gS.array().square() + st.eps).sqrt()).matrix();

  auto [f1, st1, l1] = lr_adam_step(f, st, oracle, policy);
  CHECK(st1.n == 1);
  CHECK((reconstruct(f1) - Uh * expected * Vh.transpose()).norm() <=
        1e-12 * expected.norm());

  // Shared-basis economy: moments live in the new r x r coefficient frame.
  CHECK(st1.S_V.rows() == f1.r);
  CHECK(st1.S_V.cols() == f1.r);
  CHECK(st1.S_K.rows() == f1.r);
  CHECK(st1.S_K.cols() == f1.r);
  CHECK(st1.S_K.minCoeff() >= 0.0);
}

TEST_CASE("lr_adam_step holds the weight when the gradient vanishes") {
  // The gradient must be exactly zero: Adam's eps-regularized ratio amplifies
  // even reconstruction roundoff near an optimum (by design, like full Adam).
  Rng rng(27);
  LowRankFactors f = random_factors(rng, 6, 2);
  Matrix w0 = reconstruct(f);
  AnalyticOracle oracle(
      [](const Matrix&) { return 0.0; },
      [](const Matrix& w) -> Matrix { return Matrix::Zero(w.rows(), w.cols()); });
  AdamState st;
  st.S_V = Matrix::Zero(2, 2);
  st.S_K = Matrix::Zero(2, 2);
  st.lambda = 0.05;
  TruncationPolicy policy = fixed_rank_policy(2);
  for (int i = 0; i < 10; ++i)
    std::tie(f, st, std::ignore) = lr_adam_step(f, st, oracle, policy);
  CHECK((reconstruct(f) - w0).norm() <= 1e-12 * w0.norm());
}

TEST_CASE("second moments stay nonnegative over random trajectories") {
  Rng rng(28);
  LowRankFactors f = random_factors(rng, 8, 3);
  auto oracle = quadratic_oracle(rng.gaussian(8, 8));
  AdamState st;
  st.S_V = Matrix::Zero(3, 3);
  st.S_K = Matrix::Zero(3, 3);
  st.lambda = 0.05;
  TruncationPolicy policy;
  policy.tau = 0.1;
  policy.r_min = 2;
  for (int i = 0; i < 100; ++i) {
    std::tie(f, st, std::ignore) = lr_adam_step(f, st, oracle, policy);
    CHECK(st.S_K.minCoeff() >= 0.0);
    CHECK(st.n == i + 1);
  }
}

TEST_CASE("naive variant matches on the first step then diverges") {
  Rng rng(29);
  const int n = 8, r = 2;
  LowRankFactors f = random_factors(rng, n, r);
  Matrix a = rng.gaussian(n, n);
  auto oracle = quadratic_oracle(a);
  AdamState st;
  st.S_V = Matrix::Zero(r, r);
  st.S_K = Matrix::Zero(r, r);
  st.lambda = 0.05;
  TruncationPolicy policy = fixed_rank_policy(r);

  auto [fp, sp, lp] = lr_adam_step(f, st, oracle, policy);
  auto [fn, sn, ln] = lr_adam_naive_step(f, st, oracle, policy);
  CHECK((reconstruct(fp) - reconstruct(fn)).norm() <=
        1e-12 * reconstruct(fp).norm());

  // With rotating bases the unprojected moments drift away.
  LowRankFactors fp2 = fp, fn2 = fn;
  AdamState sp2 = sp, sn2 = sn;
  for (int i = 0; i < 10; ++i) {
    std::tie(fp2, sp2, std::ignore) = lr_adam_step(fp2, sp2, oracle, policy);
    std::tie(fn2, sn2, std::ignore) =
        lr_adam_naive_step(fn2, sn2, oracle, policy);
  }
  CHECK((reconstruct(fp2) - reconstruct(fn2)).norm() > 0.0);
}

TEST_CASE("lora_adam_step") {
  Rng rng(30);
  LowRankFactors f = random_factors(rng, 6, 2);

  // Zero gradient: nothing moves.
  auto at_opt = quadratic_oracle(reconstruct(f));
  LoraStates st;
  auto [f0, st0, l0] = lora_adam_step(f, st, at_opt);
  CHECK((f0.U - f.U).norm() == 0.0);
  CHECK((f0.S - f.S).norm() == 0.0);
  CHECK((f0.V - f.V).norm() == 0.0);

  // One real step loses orthonormality (measured, not an error) and keeps
  // the rank fixed.
  auto oracle = quadratic_oracle(rng.gaussian(6, 6));
  LoraStates st1;
  st1.u.lambda = st1.s.lambda = st1.v.lambda = 0.05;
  auto [f1, stn, l1] = lora_adam_step(f, st1, oracle);
  const double defect =
      (f1.U.transpose() * f1.U - Matrix::Identity(2, 2)).norm();
  CHECK(defect > 0.0);
  CHECK(f1.r == 2);
  for (int i = 0; i < 5; ++i)
    std::tie(f1, stn, std::ignore) = lora_adam_step(f1, stn, oracle);
  CHECK(f1.r == 2);
}

TEST_CASE("non-finite gradients are rejected") {
  Rng rng(31);
  LowRankFactors f = random_factors(rng, 4, 2);
  AnalyticOracle bad([](const Matrix&) { return 0.0; },
                     [](const Matrix& w) -> Matrix {
                       return Matrix::Constant(w.rows(), w.cols(),
                                               std::nan(""));
                     });
  HeavyBallState st{Matrix::Zero(2, 2), 0.9, 0.1};
  TruncationPolicy policy = fixed_rank_policy(2);
  CHECK_THROWS_AS(lr_hb_step(f, st, bad, policy), NumericError);

  FullState full;
  full.W = rng.gaussian(3, 3);
  CHECK_THROWS_AS(hb_full_step(full, bad), NumericError);
  CHECK_THROWS_AS(adam_full_step(full, bad), NumericError);
}
