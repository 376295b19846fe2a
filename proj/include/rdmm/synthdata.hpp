#pragma once

// Seeded synthetic scene pairs: one container object with two objects
// inside and up to five outside, perturbed independently for the target.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "rdmm/field.hpp"
#include "rdmm/kernels.hpp"

namespace rdmm {

enum class ShapeKind { RECTANGLE, TRIANGLE, ELLIPSE };

std::string to_string(ShapeKind kind);

struct ShapeSpec {
  ShapeKind kind = ShapeKind::RECTANGLE;
  double cx = 0.5, cy = 0.5;  // center, axis 0 and axis 1
  double a = 0.1, b = 0.1;    // extent along the local axes (base and height for triangles)
  double rotation = 0.0;      // radians
  double intensity = 1.0;
  int label = 1;

  /// Point test; margin > 0 inflates the shape by that distance along each local axis.
  bool contains(double x, double y, double margin = 0.0) const;
  /// Axis-aligned bounds of the (inflated) local bounding box.
  void bounds(double margin, double& x0, double& x1, double& y0, double& y1) const;
};

struct SceneParams {
  double max_shift = 0.1;
  double min_scale = 0.8;
  double max_scale = 1.25;
  double max_rotation = 0.3;
  std::size_t max_outside = 5;
  /// When false the objects outside the container keep their source pose.
  bool perturb_outside = true;
  std::size_t max_retries = 200;

  void validate() const;
};

struct ScenePair {
  ScalarField source_image, target_image;
  ScalarField source_labels, target_labels;  // 0 background, 1 container, 2-3 inside, 4+ outside
  ScalarField foreground_mask_source, foreground_mask_target;  // 1 on the container and its contents
  std::vector<ShapeSpec> source_shapes, target_shapes;
  std::uint64_t seed = 0;
};

/// Deterministic in (seed, grid, params). Throws GenerationError when no
/// valid layout is found within the retry budget.
ScenePair generate_pair(std::uint64_t seed, const GridSpec& grid, const SceneParams& params = {});

/// Antialiased image (2x2 samples per node) of shapes painted in order.
ScalarField rasterize_image(const std::vector<ShapeSpec>& shapes, const GridSpec& grid);
/// Nearest (node-centred) label image of shapes painted in order.
ScalarField rasterize_labels(const std::vector<ShapeSpec>& shapes, const GridSpec& grid);

/// h_i = sqrt(fg_h_sq_i) where mask > 0.5, sqrt(bg_h_sq_i) elsewhere.
FieldStack region_preweights(const ScalarField& foreground_mask, const std::vector<double>& fg_h_sq,
                             const std::vector<double>& bg_h_sq, const MultiGaussianKernel& kernel);
FieldStack region_preweights(const ScenePair& scene, const std::vector<double>& fg_h_sq,
                             const std::vector<double>& bg_h_sq, const MultiGaussianKernel& kernel);

}  // namespace rdmm
