#include "flow.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace dlrt {

namespace {

LowRankFactors leading_factors(const Matrix& w, int rank) {
  auto dec = svd(w);
  LowRankFactors f;
  f.U = dec.P.leftCols(rank);
  f.S = Matrix(dec.sigma.head(rank).asDiagonal());
  f.V = dec.Q.leftCols(rank);
  f.r = rank;
  return f;
}

struct VanillaRhs {
  Matrix dU, dS, dV, dU_V, dS_V, dV_V;
};

VanillaRhs vanilla_rhs(const VanillaFlowState& s, const AnalyticLoss& loss) {
  Matrix g = loss.grad(reconstruct(s.f));
  auto [gU, gV, gS] = factor_gradients(s.f, g);
  VanillaRhs r;
  r.dU = s.U_V;
  r.dS = s.S_V;
  r.dV = s.V_V;
  r.dU_V = -s.gamma * s.U_V - gU;
  r.dS_V = -s.gamma * s.S_V - gS;
  r.dV_V = -s.gamma * s.V_V - gV;
  return r;
}

VanillaFlowState vanilla_shift(const VanillaFlowState& s, const VanillaRhs& k,
                               double a) {
  VanillaFlowState o = s;
  o.f.U += a * k.dU;
  o.f.S += a * k.dS;
  o.f.V += a * k.dV;
  o.U_V += a * k.dU_V;
  o.S_V += a * k.dS_V;
  o.V_V += a * k.dV_V;
  return o;
}

struct ProjectedRhs {
  Matrix dW, dV;
};

ProjectedRhs projected_rhs(const ProjectedFlowState& s,
                           const AnalyticLoss& loss) {
  Matrix g = loss.grad(s.W);
  if (s.full_rank) return {s.V, -s.gamma * s.V - g};
  LowRankFactors f = leading_factors(s.W, s.rank);
  return {tangent_project(f, s.V),
          -s.gamma * s.V - tangent_project(f, g)};
}

ProjectedFlowState projected_shift(const ProjectedFlowState& s,
                                   const ProjectedRhs& k, double a) {
  ProjectedFlowState o = s;
  o.W += a * k.dW;
  o.V += a * k.dV;
  return o;
}

struct FactoredRhs {
  Matrix dW, dU_V, dS_V, dV_V;
};

FactoredRhs factored_rhs(const FactoredFlowState& s, const AnalyticLoss& loss) {
  auto dec = svd(s.S_V);
  const int k = static_cast<int>(dec.sigma.size());
  const double smin = dec.sigma[k - 1];
  if (smin <= 0.0 || dec.sigma[0] / smin > 1e12)
    throw StiffnessError("factored momentum flow: cond(S_V) exceeds 1e12");
  // S_V^{-1} through the SVD just computed.
  Matrix sv_inv =
      dec.Q * dec.sigma.cwiseInverse().asDiagonal() * dec.P.transpose();

  Matrix g = loss.grad(s.W);
  Matrix gv = g * s.V_V;          // n_out x r
  Matrix gtu = g.transpose() * s.U_V;  // n_in x r
  FactoredRhs r;
  r.dW = s.U_V * s.S_V * s.V_V.transpose();
  r.dS_V = -s.gamma * s.S_V - s.U_V.transpose() * gv;
  r.dU_V = -(gv - s.U_V * (s.U_V.transpose() * gv)) * sv_inv;
  r.dV_V = -(gtu - s.V_V * (s.V_V.transpose() * gtu)) * sv_inv.transpose();
  return r;
}

FactoredFlowState factored_shift(const FactoredFlowState& s,
                                 const FactoredRhs& k, double a) {
  FactoredFlowState o = s;
  o.W += a * k.dW;
  o.U_V += a * k.dU_V;
  o.S_V += a * k.dS_V;
  o.V_V += a * k.dV_V;
  return o;
}

}  // namespace

AnalyticLoss AnalyticLoss::quadratic(Matrix a) {
  auto target = std::make_shared<Matrix>(std::move(a));
  AnalyticLoss l;
  l.loss = [target](const Matrix& w) {
    return 0.5 * (w - *target).squaredNorm();
  };
  l.grad = [target](const Matrix& w) -> Matrix { return w - *target; };
  return l;
}

VanillaFlowState step_vanilla_flow(const VanillaFlowState& s,
                                   const AnalyticLoss& loss, double h) {
  require_finite(s.f.S, "vanilla flow state");
  auto k1 = vanilla_rhs(s, loss);
  auto k2 = vanilla_rhs(vanilla_shift(s, k1, h / 2), loss);
  auto k3 = vanilla_rhs(vanilla_shift(s, k2, h / 2), loss);
  auto k4 = vanilla_rhs(vanilla_shift(s, k3, h), loss);
  VanillaFlowState o = s;
  auto mix = [&](const Matrix VanillaRhs::* m) -> Matrix {
    return (h / 6.0) * (k1.*m + 2.0 * (k2.*m) + 2.0 * (k3.*m) + k4.*m);
  };
  o.f.U += mix(&VanillaRhs::dU);
  o.f.S += mix(&VanillaRhs::dS);
  o.f.V += mix(&VanillaRhs::dV);
  o.U_V += mix(&VanillaRhs::dU_V);
  o.S_V += mix(&VanillaRhs::dS_V);
  o.V_V += mix(&VanillaRhs::dV_V);
  o.t += h;
  require_finite(o.f.S, "vanilla flow step");
  return o;
}

ProjectedFlowState step_projected_flow(const ProjectedFlowState& s,
                                       const AnalyticLoss& loss, double h) {
  require_finite(s.W, "projected flow state");
  auto k1 = projected_rhs(s, loss);
  auto k2 = projected_rhs(projected_shift(s, k1, h / 2), loss);
  auto k3 = projected_rhs(projected_shift(s, k2, h / 2), loss);
  auto k4 = projected_rhs(projected_shift(s, k3, h), loss);
  ProjectedFlowState o = s;
  o.W += (h / 6.0) * (k1.dW + 2.0 * k2.dW + 2.0 * k3.dW + k4.dW);
  o.V += (h / 6.0) * (k1.dV + 2.0 * k2.dV + 2.0 * k3.dV + k4.dV);
  o.t += h;
  require_finite(o.W, "projected flow step");
  return o;
}

FactoredFlowState step_factored_momentum_flow(const FactoredFlowState& s,
                                              const AnalyticLoss& loss,
                                              double h) {
  require_finite(s.W, "factored flow state");
  auto k1 = factored_rhs(s, loss);
  auto k2 = factored_rhs(factored_shift(s, k1, h / 2), loss);
  auto k3 = factored_rhs(factored_shift(s, k2, h / 2), loss);
  auto k4 = factored_rhs(factored_shift(s, k3, h), loss);
  FactoredFlowState o = s;
  o.W += (h / 6.0) * (k1.dW + 2.0 * k2.dW + 2.0 * k3.dW + k4.dW);
  o.U_V += (h / 6.0) * (k1.dU_V + 2.0 * k2.dU_V + 2.0 * k3.dU_V + k4.dU_V);
  o.S_V += (h / 6.0) * (k1.dS_V + 2.0 * k2.dS_V + 2.0 * k3.dS_V + k4.dS_V);
  o.V_V += (h / 6.0) * (k1.dV_V + 2.0 * k2.dV_V + 2.0 * k3.dV_V + k4.dV_V);
  o.t += h;
  require_finite(o.W, "factored flow step");
  return o;
}

std::pair<Matrix, Matrix> vanilla_assembled_rhs(const VanillaFlowState& s,
                                                const AnalyticLoss& loss) {
  Matrix w_dot = s.U_V * s.f.S * s.f.V.transpose() +
                 s.f.U * s.S_V * s.f.V.transpose() +
                 s.f.U * s.f.S * s.V_V.transpose();
  LowRankFactors mom{s.U_V, s.S_V, s.V_V, s.f.r};
  Matrix g = loss.grad(reconstruct(s.f));
  Matrix v_dot = -s.gamma * w_dot - naive_project(s.f, mom, g);
  return {w_dot, v_dot};
}

double factored_identity_residual(const FactoredFlowState& s,
                                  const AnalyticLoss& loss) {
  auto r = factored_rhs(s, loss);
  Matrix v_dot = r.dU_V * s.S_V * s.V_V.transpose() +
                 s.U_V * r.dS_V * s.V_V.transpose() +
                 s.U_V * s.S_V * r.dV_V.transpose();
  Matrix v = s.U_V * s.S_V * s.V_V.transpose();
  LowRankFactors fv{s.U_V, s.S_V, s.V_V, static_cast<int>(s.S_V.rows())};
  Matrix target = -s.gamma * v - tangent_project(fv, loss.grad(s.W));
  return (v_dot - target).norm() / std::max(target.norm(), 1e-300);
}

std::vector<EnergyRecord> run_projected_flow(ProjectedFlowState s,
                                             const AnalyticLoss& loss,
                                             double h, double horizon,
                                             ProjectedFlowState* final_state) {
  const long steps = std::lround(horizon / h);
  std::vector<EnergyRecord> trace;
  trace.reserve(static_cast<size_t>(steps) + 1);
  auto record = [&](const ProjectedFlowState& st) {
    Matrix g = loss.grad(st.W);
    double residual =
        st.full_rank
            ? g.norm()
            : tangent_project(leading_factors(st.W, st.rank), g).norm();
    trace.push_back({st.t, loss.loss(st.W) + 0.5 * st.V.squaredNorm(),
                     st.V.squaredNorm(), residual});
  };
  record(s);
  for (long i = 0; i < steps; ++i) {
    s = step_projected_flow(s, loss, h);
    record(s);
  }
  if (final_state) *final_state = s;
  return trace;
}

EnergyReport verify_energy_dissipation(const std::vector<EnergyRecord>& trace,
                                       double gamma) {
  EnergyReport rep;
  if (trace.size() < 2) {
    rep.ok = true;  // vacuous
    return rep;
  }
  const double slack = 1e-10 * std::max(1.0, std::abs(trace.front().E));
  double integral = 0.0;
  rep.ok = true;
  for (size_t i = 0; i + 1 < trace.size(); ++i) {
    const double de = trace[i + 1].E - trace[i].E;
    rep.max_increase = std::max(rep.max_increase, de);
    if (de > slack && rep.first_violation < 0) {
      rep.first_violation = static_cast<int>(i + 1);
      rep.ok = false;
    }
    integral += 0.5 * (trace[i].v2 + trace[i + 1].v2) *
                (trace[i + 1].t - trace[i].t);
  }
  const double de_total = trace.back().E - trace.front().E;
  const double scale = std::max(std::abs(de_total), 1e-300);
  rep.identity_rel_err = std::abs(de_total + gamma * integral) / scale;
  if (rep.identity_rel_err > 1e-4) rep.ok = false;
  return rep;
}

CounterexampleReport counterexample_check() {
  Matrix e1(2, 1);
  e1 << 1, 0;
  LowRankFactors f{e1, Matrix::Identity(1, 1), e1, 1};
  LowRankFactors mom{-e1, Matrix::Zero(1, 1), e1, 1};
  Matrix g(2, 2);
  g << 0, 0, 1, 0;

  CounterexampleReport rep;
  rep.naive_proj_max = naive_project(f, mom, g).cwiseAbs().maxCoeff();
  rep.tangent_norm = tangent_project(f, g).norm();

  // Quadratic loss whose gradient at W equals g.
  Matrix w = reconstruct(f);
  AnalyticLoss loss = AnalyticLoss::quadratic(w - g);
  AnalyticOracle oracle(loss.loss, loss.grad);
  HeavyBallState st{Matrix::Zero(1, 1), 0.9, 0.1};
  TruncationPolicy policy;
  policy.tau = 0.0;
  policy.r_min = 1;
  policy.r_max = 2;
  auto [f1, st1, l0] = lr_hb_step(f, st, oracle, policy);
  (void)st1;
  rep.loss_before = l0;
  rep.loss_after = loss.loss(reconstruct(f1));

  rep.ok = rep.naive_proj_max <= 1e-14 &&
           std::abs(rep.tangent_norm - 1.0) <= 1e-12 &&
           rep.loss_after < rep.loss_before;
  return rep;
}

double flow_vs_discrete(const AnalyticLoss& loss, const LowRankFactors& w0,
                        double gamma_flow, double lambda, double horizon) {
  ProjectedFlowState ref;
  ref.W = reconstruct(w0);
  ref.V = Matrix::Zero(ref.W.rows(), ref.W.cols());
  ref.rank = w0.r;
  ref.gamma = gamma_flow;
  const double h = lambda / 100.0;
  const long ref_steps = std::lround(horizon / h);
  for (long i = 0; i < ref_steps; ++i)
    ref = step_projected_flow(ref, loss, h);

  LowRankFactors f = w0;
  HeavyBallState st{Matrix::Zero(w0.r, w0.r), gamma_flow * lambda, lambda};
  TruncationPolicy policy;
  policy.tau = 0.0;
  policy.r_min = w0.r;
  policy.r_max = w0.r;
  AnalyticOracle oracle(loss.loss, loss.grad);
  const long steps = std::lround(horizon / lambda);
  for (long i = 0; i < steps; ++i)
    std::tie(f, st, std::ignore) = lr_hb_step(f, st, oracle, policy);

  return (ref.W - reconstruct(f)).norm();
}

ScalingSetup make_scaling_setup(int n, double s2, std::uint64_t seed) {
  Rng rng(seed);
  Matrix u0 = orthonormalize(rng.gaussian(n, 2));
  Matrix v0 = orthonormalize(rng.gaussian(n, 2));
  Matrix a_diag = Matrix::Zero(2, 2);
  a_diag(0, 0) = 1.0;
  a_diag(1, 1) = 0.6;
  ScalingSetup setup;
  setup.loss = AnalyticLoss::quadratic(u0 * a_diag * v0.transpose());
  Matrix s_init = Matrix::Zero(2, 2);
  s_init(0, 0) = 1.0;
  s_init(1, 1) = s2;
  setup.w0 = LowRankFactors{u0, s_init, v0, 2};
  setup.gamma = 0.5;
  return setup;
}

}  // namespace dlrt
