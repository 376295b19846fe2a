#pragma once

// Forward shooting of the RDMM geodesic equations
//
//   d/dt phi^{-1} = -D phi^{-1} v
//   d/dt m        = -[div(v) m + Dv^T m + Dm v] + sum_i G*(m . nu_i) grad h_i
//
// with h_i(t) = h_i(0) o phi^{-1}(t), w_i = G * h_i, nu_i = K_i * (w_i m) and
// v = sum_i w_i nu_i, integrated by classical RK4 on [0,1]. The reverse
// (adjoint) pass differentiates exactly this discrete scheme.

#include <cstddef>
#include <memory>
#include <vector>

#include "rdmm/field.hpp"
#include "rdmm/kernels.hpp"

namespace rdmm {

struct GeodesicState {
  VectorField m;
  TransformMap phi_inv;
  FieldStack h0;  // initial pre-weights, time invariant
  double t = 0.0;
};

struct IntegratorConfig {
  std::size_t n_steps = 20;
};

struct CurrentWeights {
  FieldStack h;  // h0 o phi^{-1}, renormalised so that sum_i h_i^2 = 1
  FieldStack w;  // G * h
};

struct RhsResult {
  VectorField dm;
  TransformMap dphi_inv;
};

/// (m, phi^{-1}) at every step, t_k = k / n_steps, including t = 0 and t = 1.
struct Trajectory {
  FieldStack h0;
  std::vector<VectorField> m;
  std::vector<TransformMap> phi_inv;
  std::vector<double> t;

  std::size_t size() const noexcept { return t.size(); }
  GeodesicState state(std::size_t k) const { return {m[k], phi_inv[k], h0, t[k]}; }
  const TransformMap& final_map() const { return phi_inv.back(); }
};

/// Initial state: identity map at t = 0.
GeodesicState initial_state(VectorField m0, FieldStack h0);

CurrentWeights current_weights(const GeodesicState& state, const MultiGaussianKernel& kernel);

/// Throws IntegrationBlowup (step 0) when the derivatives are not finite.
RhsResult rdmm_rhs(const GeodesicState& state, const MultiGaussianKernel& kernel);

/// sum_i G*(m . nu_i) grad h_i, evaluated in full even for constant weights.
VectorField rdmm_source_term(const GeodesicState& state, const MultiGaussianKernel& kernel);

Trajectory integrate_geodesic(const GeodesicState& state0, const MultiGaussianKernel& kernel,
                              const IntegratorConfig& cfg);

/// 0.5 * ||v||_L^2 at the state's current weights.
double energy(const GeodesicState& state, const MultiGaussianKernel& kernel);

// ---------------------------------------------------------------------------
// Reverse-mode pieces used by the optimizer.

/// Adjoint of the weight pipeline h0 -> h0 o phi -> normalise -> G*.
/// Given w_bar (and optionally a direct h_bar on the normalised h), accumulates
/// into h0_bar and, when phi_bar is non-null, into phi_bar.
void current_weights_vjp(const GeodesicState& state, const MultiGaussianKernel& kernel, const FieldStack& w_bar,
                         const FieldStack* h_bar, FieldStack& h0_bar, TransformMap* phi_bar);

/// Reverse pass through the RK4 integration. Inputs are the adjoints of the
/// final momentum and map; outputs accumulate into m0_bar and (if non-null) h0_bar.
void integrate_geodesic_adjoint(const Trajectory& traj, const MultiGaussianKernel& kernel,
                                const IntegratorConfig& cfg, const VectorField& m_bar_final,
                                const TransformMap& phi_bar_final, VectorField& m0_bar, FieldStack* h0_bar);

}  // namespace rdmm
