#pragma once

// Similarity measures, weight penalties and the shooting objective
//
//   E(m0, h0) = lambda_kin * 0.5 <m0, v0> + Sim(I0 o phi^{-1}(1), I1)
//             + lambda_omt * OMT(w(0)) + lambda_range * Range(w(0))
//
// together with its gradient through the discrete forward pass.

#include <cstddef>
#include <string>
#include <vector>

#include "rdmm/dynamics.hpp"
#include "rdmm/field.hpp"
#include "rdmm/kernels.hpp"

namespace rdmm {

enum class SimilarityKind { SSD, LNCC, MK_LNCC };

std::string to_string(SimilarityKind kind);
SimilarityKind similarity_kind_from_string(const std::string& s);

struct LnccWindow {
  std::size_t size = 9;  // nodes per axis, odd
  double weight = 1.0;
};

struct SimilarityConfig {
  SimilarityKind kind = SimilarityKind::MK_LNCC;
  std::vector<LnccWindow> windows{{21, 0.5}, {41, 0.5}};  // sizes at full resolution
  double eps = 1e-5;

  /// Throws InvalidParameter on even/small windows or weights not summing to 1.
  void validate() const;
  /// Window sizes scaled to a coarser level (kept odd and >= 3).
  SimilarityConfig at_scale(double factor) const;
};

struct RegPenaltyConfig {
  double C_omt = 0.05;
  double C_range = 10.0;
  double K_decay = 10.0;
  std::vector<double> w0_sq;  // reference squared weights, sum 1

  void validate(std::size_t n_kernels) const;
};

struct DecayWeights {
  double lambda_T = 0.0;
  double lambda_omt = 0.0;
  double lambda_range = 0.0;
};

DecayWeights decay_weights(double T, const RegPenaltyConfig& cfg);

/// Sum of squared differences times cell volume.
double ssd(const ScalarField& a, const ScalarField& b);
/// Loss sum_k weight_k * (1 - mean NCC^2 over box windows of size_k).
double mk_lncc(const ScalarField& a, const ScalarField& b, const SimilarityConfig& cfg);

/// Similarity value; when grad_a is non-null it receives d Sim / d a.
double similarity(const ScalarField& a, const ScalarField& b, const SimilarityConfig& cfg,
                  ScalarField* grad_a = nullptr);

/// Mean over nodes of |log(s_max/s_0)|^{-p} sum_i w_i^2 |log(s_max/s_i)|^p. Zero for a single Gaussian.
double omt_penalty(const FieldStack& w, const MultiGaussianKernel& kernel);
/// d OMT / d w_i.
FieldStack omt_gradient(const FieldStack& w, const MultiGaussianKernel& kernel);

/// sum_i sum_x (w_i - sqrt(w0_sq_i))^2 * cell volume, with w = G * h0.
double range_penalty(const FieldStack& h0, const RegPenaltyConfig& cfg, const MultiGaussianKernel& kernel);
double range_penalty_weights(const FieldStack& w, const std::vector<double>& w0_sq);

struct ObjectiveConfig {
  SimilarityConfig similarity;
  RegPenaltyConfig penalties;
  IntegratorConfig integrator;
  double lambda_kin = 1.0;
  /// Whether the OMT and range terms enter the total (off when h0 is frozen).
  bool regularize_h0 = true;
};

struct ObjectiveBreakdown {
  double total = 0.0;
  double sim = 0.0;
  double kinetic = 0.0;  // already multiplied by lambda_kin
  double omt = 0.0;      // already multiplied by lambda_omt
  double range = 0.0;    // already multiplied by lambda_range
};

struct ObjectiveGradient {
  VectorField m0;
  FieldStack h0;  // raw gradient w.r.t. the pre-weight values (not projected)
};

/// OMT and range terms at iteration T as functions of h0; grad_h0 is accumulated into.
ObjectiveBreakdown weight_penalties(const FieldStack& h0, const MultiGaussianKernel& kernel,
                                    const RegPenaltyConfig& cfg, double T, FieldStack* grad_h0 = nullptr);

/// Similarity and kinetic terms plus everything the reverse pass needs.
struct ForwardPass {
  Trajectory traj;
  ScalarField warped;
  ScalarField sim_grad;
  CurrentWeights weights0;
  VectorField v0;
  ObjectiveBreakdown value;  // omt and range left at zero
};

ForwardPass objective_forward(const GeodesicState& state0, const ScalarField& I0, const ScalarField& I1,
                              const MultiGaussianKernel& kernel, const ObjectiveConfig& cfg);
/// Gradient of the similarity and kinetic terms.
void objective_backward(const ForwardPass& fp, const ScalarField& I0, const MultiGaussianKernel& kernel,
                        const ObjectiveConfig& cfg, ObjectiveGradient& grad, bool want_h0);

/// Evaluates the shooting objective at iteration T. When grad is non-null the
/// gradient is computed by the reverse pass (h0 gradient only if want_h0).
ObjectiveBreakdown shooting_objective(const GeodesicState& state0, const ScalarField& I0, const ScalarField& I1,
                                      const MultiGaussianKernel& kernel, const ObjectiveConfig& cfg, double T,
                                      ObjectiveGradient* grad = nullptr, bool want_h0 = true,
                                      Trajectory* traj_out = nullptr);

}  // namespace rdmm
