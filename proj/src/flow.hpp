#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lowrank.hpp"
#include "optimizers.hpp"

namespace dlrt {

struct AnalyticLoss {
  std::function<double(const Matrix&)> loss;
  std::function<Matrix(const Matrix&)> grad;

  static AnalyticLoss quadratic(Matrix a);
};

// Per-factor heavy-ball flow: dU = U_V, dS = S_V, dV = V_V and damped factor
// gradients on the momenta.
struct VanillaFlowState {
  LowRankFactors f;
  Matrix U_V, S_V, V_V;
  double t = 0.0;
  double gamma = 0.0;
};

// dW = P(W) V, dV = -gamma V - P(W) grad L; W carried dense as a reference
// trajectory. full_rank = true drops the projector (the full-rank flow).
struct ProjectedFlowState {
  Matrix W;
  Matrix V;
  int rank = 0;
  double t = 0.0;
  double gamma = 0.0;
  bool full_rank = false;
};

// Low-rank flow of the momentum itself; the right-hand side contains
// S_V^{-1}, which is the stiffness source this module demonstrates.
struct FactoredFlowState {
  Matrix W;  // dense weight, dW = U_V S_V V_V^T
  Matrix U_V, S_V, V_V;
  double t = 0.0;
  double gamma = 0.0;
};

VanillaFlowState step_vanilla_flow(const VanillaFlowState& s,
                                   const AnalyticLoss& loss, double h);
ProjectedFlowState step_projected_flow(const ProjectedFlowState& s,
                                       const AnalyticLoss& loss, double h);
// Throws StiffnessError when cond(S_V) > 1e12.
FactoredFlowState step_factored_momentum_flow(const FactoredFlowState& s,
                                              const AnalyticLoss& loss,
                                              double h);

// Reconstructed (dW, dV) of the vanilla flow: the product-rule weight
// velocity and the damped naive-projected momentum equation.
std::pair<Matrix, Matrix> vanilla_assembled_rhs(const VanillaFlowState& s,
                                                const AnalyticLoss& loss);

// Relative defect of the assembled dV against -gamma V - P(V) grad L.
double factored_identity_residual(const FactoredFlowState& s,
                                  const AnalyticLoss& loss);

struct EnergyRecord {
  double t;
  double E;         // L(W) + 1/2 ||V||^2
  double v2;        // ||V||^2
  double residual;  // ||P(W) grad L||_F
};

std::vector<EnergyRecord> run_projected_flow(ProjectedFlowState s,
                                             const AnalyticLoss& loss,
                                             double h, double horizon,
                                             ProjectedFlowState* final_state =
                                                 nullptr);

struct EnergyReport {
  bool ok = false;
  int first_violation = -1;   // index of the first energy increase, or -1
  double max_increase = 0.0;  // largest E(t_{i+1}) - E(t_i)
  double identity_rel_err = 0.0;  // |dE + gamma * integral(v2)| relative
};

// Monotone energy up to 1e-10 slack and the dissipation identity
// E(T) - E(0) = -gamma * integral ||V||^2 dt within 1e-4 relative
// (trapezoid quadrature).
EnergyReport verify_energy_dissipation(const std::vector<EnergyRecord>& trace,
                                       double gamma);

struct CounterexampleReport {
  double naive_proj_max = 0.0;  // max |entry| of the naive-projected gradient
  double tangent_norm = 0.0;    // ||P(W) grad L||_F
  double loss_before = 0.0;
  double loss_after = 0.0;
  bool ok = false;
};

// The 2x2 rank-1 configuration where the naive projector annihilates a
// gradient the tangent projector keeps, yet one momentum step still descends.
CounterexampleReport counterexample_check();

// Terminal distance between the projected flow integrated at step lambda/100
// and the discrete momentum iteration at learning rate lambda. The discrete
// damping is gamma_flow * lambda so every lambda discretizes the same flow.
double flow_vs_discrete(const AnalyticLoss& loss, const LowRankFactors& w0,
                        double gamma_flow, double lambda, double horizon);

// Rank-2 quadratic problem with an exactly rank-2 optimum: target singular
// values (1, 0.6), start (1, s2) in shared bases, so the tangent residual at
// the optimum is exactly zero.
struct ScalingSetup {
  AnalyticLoss loss;
  LowRankFactors w0;
  double gamma = 0.5;
};
ScalingSetup make_scaling_setup(int n, double s2, std::uint64_t seed);

}  // namespace dlrt
