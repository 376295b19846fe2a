#pragma once

// Multi-scale estimation of the initial momentum (and optionally the
// initial pre-weights) by line-searched descent on the shooting objective.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "rdmm/dynamics.hpp"
#include "rdmm/field.hpp"
#include "rdmm/kernels.hpp"
#include "rdmm/objectives.hpp"

namespace rdmm {

enum class RegistrationMode { LDDMM, RDMM_FIXED_REG, RDMM_JOINT };

std::string to_string(RegistrationMode mode);
/// Accepts "lddmm", "rdmm-fixed", "rdmm-joint".
RegistrationMode registration_mode_from_string(const std::string& s);

enum class DescentMethod { GRADIENT, LBFGS };

std::string to_string(DescentMethod method);
DescentMethod descent_method_from_string(const std::string& s);

struct ScaleLevel {
  double factor = 1.0;
  std::size_t iterations = 1;
};

struct OptimizerSettings {
  DescentMethod method = DescentMethod::GRADIENT;
  /// Largest momentum change (max norm) of the first trial step at each scale.
  double step_size = 0.5;
  double grad_tol = 1e-9;
  double shrink = 0.5;
  double armijo = 1e-4;
  std::size_t max_backtracks = 12;
  std::size_t lbfgs_memory = 8;
  /// Relative scale of pre-weight updates against momentum updates.
  double preweight_step_scale = 10.0;
  /// Trial points whose map inverts more grid cells than the current point are rejected.
  bool reject_folds = true;
  /// Descend along the kernel-smoothed momentum gradient (velocity-space gradient).
  bool precondition = true;
};

struct RegistrationConfig {
  RegistrationMode mode = RegistrationMode::RDMM_JOINT;
  std::vector<ScaleLevel> scales{{0.25, 100}, {0.5, 100}, {1.0, 400}};
  MultiGaussianKernel kernel;
  RegPenaltyConfig penalties;
  SimilarityConfig similarity;
  IntegratorConfig integrator;
  OptimizerSettings optimizer;
  double lambda_kin = 1.0;
  /// On coarse levels the kernel sigmas are scaled so the smallest spans at
  /// least this many grid spacings (0 keeps the kernel unchanged).
  double min_kernel_nodes = 0.0;

  void validate() const;
};

/// Settings of the synthetic experiments for each mode (full three-scale schedule).
RegistrationConfig default_config(RegistrationMode mode);
/// default_config with the shortened single-core schedule used for the
/// synthetic corpus: fewer scales and iterations, n_steps = 5.
RegistrationConfig desk_config(RegistrationMode mode);

std::string config_to_json(const RegistrationConfig& cfg);
/// Missing keys keep the defaults of default_config(mode).
RegistrationConfig config_from_json(const std::string& text);

struct IterationRecord {
  std::size_t iteration = 0;  // global over all scales; 0 marks the start of a scale
  std::size_t scale = 0;
  ObjectiveBreakdown value;
  double step_size = 0.0;  // accepted step length (0 for the starting row)
};

struct FoldMeasure {
  std::size_t count = 0;           // nodes with det J < 0
  double mass = 0.0;               // |sum of negative det J| * cell volume
  std::size_t interior_count = 0;  // same as count, boundary nodes excluded
};

FoldMeasure fold_measure(const TransformMap& map);

/// 2|A and B| / (|A| + |B|) for one label; 1 when both are empty.
double dice(const ScalarField& labels_a, const ScalarField& labels_b, int label_id);
/// Sorted positive labels present in a label image.
std::vector<int> label_ids(const ScalarField& labels);

struct RegistrationMetrics {
  std::vector<int> labels;
  std::vector<double> dice;  // per label, warped source labels vs target labels
  FoldMeasure folds;
  double energy_drift = 0.0;  // |E(1) - E(0)| / E(0) on the final scale
};

struct RegistrationResult {
  TransformMap phi_inv_final;  // full resolution
  VectorField m0;              // on the finest optimized grid
  FieldStack h0;               // full resolution
  ScalarField warped;          // I0 o phi_inv_final
  ScalarField std_map_t0;      // sigma(x) of the initial weights
  ScalarField std_map_t1;      // sigma(x) advected to t = 1
  std::vector<IterationRecord> per_iteration;
  RegistrationMetrics metrics;
  std::string status;  // "converged" or "max_iterations"
};

struct GradientPair {
  ObjectiveBreakdown value;
  VectorField m0;
  FieldStack h0;  // tangent to sum_i h_i^2 = 1 (empty when not requested)
};

/// Objective value and gradient; the pre-weight gradient has its radial
/// component removed pointwise.
GradientPair objective_gradient(const GeodesicState& state0, const ScalarField& I0, const ScalarField& I1,
                                const MultiGaussianKernel& kernel, const ObjectiveConfig& cfg, double T,
                                bool want_h0 = true);

/// Registers I0 to I1. fixed_h0 is required in RDMM_FIXED_REG mode and
/// ignored otherwise; the label images, when given, feed the Dice metrics.
RegistrationResult optimize(const ScalarField& I0, const ScalarField& I1, const RegistrationConfig& cfg,
                            const FieldStack* fixed_h0 = nullptr, const ScalarField* labels0 = nullptr,
                            const ScalarField* labels1 = nullptr);

struct GradientCheck {
  RegistrationMode mode = RegistrationMode::LDDMM;
  std::size_t coordinates = 0;  // momentum coordinates compared
  double max_rel_error_m0 = 0.0;
  std::size_t directions = 0;  // tangent pre-weight directions compared (joint mode)
  double max_rel_error_h0 = 0.0;
};

/// Compares adjoint gradients against central differences of the full
/// objective on a seeded textured scene, for every registration mode.
std::vector<GradientCheck> gradient_check(std::size_t size, std::uint64_t seed, std::size_t n_steps = 5,
                                          std::size_t n_coordinates = 5);

/// |E(1) - E(0)| / E(0) of the geodesic shot from m0, with h0 resampled to
/// the grid of m0 and the kernel of that level.
double shooting_energy_drift(const VectorField& m0, const FieldStack& h0, const RegistrationConfig& cfg);

/// Resamples images to a coarser level after Gaussian anti-alias smoothing.
ScalarField downsample_image(const ScalarField& image, const GridSpec& target);

}  // namespace rdmm
