#pragma once

// Gaussian smoothing on the periodic grid and the spatially weighted
// multi-Gaussian kernel  v = sum_i w_i K_{sigma_i} * (w_i m).

#include <span>
#include <vector>

#include "rdmm/field.hpp"

namespace rdmm {

struct MultiGaussianKernel {
  std::vector<double> sigmas;     // strictly increasing, unit-cube lengths
  double preweight_sigma = 0.05;  // sigma of the pre-weight smoother G
  double omt_power = 2.0;

  std::size_t size() const noexcept { return sigmas.size(); }
  /// Throws InvalidParameter when the invariants do not hold.
  void validate() const;
};

/// Unit-sum samples of a Gaussian on a periodic axis of n nodes.
/// Entry j holds the weight for offset j (equivalently j - n).
std::vector<double> sampled_gaussian(std::size_t n, double spacing, double sigma);

/// Circular convolution of one scalar channel, in place. sigma must be positive.
void gauss_conv_inplace(std::span<double> data, const GridSpec& grid, double sigma);

ScalarField gauss_conv(const ScalarField& field, double sigma);
VectorField gauss_conv(const VectorField& field, double sigma);

/// Constant pre-weights sqrt(h_sq_i) on a grid.
FieldStack constant_preweights(const GridSpec& grid, const std::vector<double>& h_sq);

FieldStack preweights_to_weights(const FieldStack& h, const MultiGaussianKernel& kernel);

VectorField kernel_apply(const VectorField& m, const FieldStack& w, const MultiGaussianKernel& kernel);

/// <m, v> integrated over the domain (node sum times cell volume).
double velocity_norm_sq(const VectorField& m, const VectorField& v);

/// sigma(x) = sqrt(sum_i w_i(x)^2 sigma_i^2).
ScalarField local_std_map(const FieldStack& w, const MultiGaussianKernel& kernel);

}  // namespace rdmm
