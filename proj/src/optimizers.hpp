#pragma once

#include <functional>
#include <tuple>
#include <utility>

#include "lowrank.hpp"

namespace dlrt {

// Loss/gradient provider. Both evaluations inside one optimizer step must
// observe the same data batch. The factor/coefficient views default to
// evaluating the dense gradient at the reconstructed weight; implementations
// that can do better may override them.
class GradientOracle {
 public:
  virtual ~GradientOracle() = default;

  virtual std::pair<double, Matrix> grad_w(const Matrix& w) = 0;

  // (loss, grad_U, grad_V) at U S V^T.
  virtual std::tuple<double, Matrix, Matrix> grad_at_factors(
      const LowRankFactors& f);

  // (loss, grad_Sbar) at U_hat Sbar V_hat^T.
  virtual std::pair<double, Matrix> grad_at_coeff(const Matrix& u_hat,
                                                  const Matrix& s_bar,
                                                  const Matrix& v_hat);
};

// Oracle from closed-form loss and gradient functions.
class AnalyticOracle : public GradientOracle {
 public:
  AnalyticOracle(std::function<double(const Matrix&)> loss,
                 std::function<Matrix(const Matrix&)> grad)
      : loss_(std::move(loss)), grad_(std::move(grad)) {}

  std::pair<double, Matrix> grad_w(const Matrix& w) override {
    return {loss_(w), grad_(w)};
  }

 private:
  std::function<double(const Matrix&)> loss_;
  std::function<Matrix(const Matrix&)> grad_;
};

struct HeavyBallState {
  Matrix S_V;          // r x r momentum coefficient in the shared (U, V) frame
  double gamma = 0.9;  // momentum decay, in [0, 1)
  double lambda = 0.1;
};

struct AdamState {
  Matrix S_V;  // first moment, r x r
  Matrix S_K;  // second moment, r x r, elementwise >= 0
  long n = 0;  // bias-correction counter; first step uses n = 1
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lambda = 0.001;
  double weight_decay = 0.0;
};

// Full-rank baseline state; K and n are only used by Adam.
struct FullState {
  Matrix W;
  Matrix V;
  Matrix K;
  long n = 0;
  double gamma = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lambda = 0.001;
  double weight_decay = 0.0;
};

// V <- (1-gamma) V - lambda g;  W <- W + lambda V.
std::pair<FullState, double> hb_full_step(const FullState& state,
                                          GradientOracle& oracle);

// Standard Adam with eps outside the square root.
std::pair<FullState, double> adam_full_step(const FullState& state,
                                            GradientOracle& oracle);

std::tuple<LowRankFactors, HeavyBallState, double> lr_hb_step(
    const LowRankFactors& f, const HeavyBallState& state,
    GradientOracle& oracle, const TruncationPolicy& policy);

// Low-rank Adam: moments reprojected into each new coefficient frame (the
// second moment via its elementwise square root); eps inside the square root.
std::tuple<LowRankFactors, AdamState, double> lr_adam_step(
    const LowRankFactors& f, const AdamState& state, GradientOracle& oracle,
    const TruncationPolicy& policy);

// Naive variant: moment coefficients are zero-padded/cropped across basis
// changes instead of reprojected. Wrong by design; kept as a baseline.
std::tuple<LowRankFactors, AdamState, double> lr_adam_naive_step(
    const LowRankFactors& f, const AdamState& state, GradientOracle& oracle,
    const TruncationPolicy& policy);

struct LoraStates {
  AdamState u;  // moments shaped like U
  AdamState s;  // moments shaped like S
  AdamState v;  // moments shaped like V
};

// Simultaneous Adam descent on U, S, V at fixed rank; no re-orthonormalization
// (faithful to the adapter-style baseline being compared against).
std::tuple<LowRankFactors, LoraStates, double> lora_adam_step(
    const LowRankFactors& f, const LoraStates& states, GradientOracle& oracle);

}  // namespace dlrt
