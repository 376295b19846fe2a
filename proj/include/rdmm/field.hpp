#pragma once

// Regular-grid fields over the unit cube [0,1]^d (d = 2 or 3).
//
// Storage is row-major with axis 0 slowest. Multi-component fields
// (vector fields, transformation maps) store their components as
// contiguous blocks, so component k of a field with n nodes occupies
// values[k*n, (k+1)*n).

#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace rdmm {

using Point = std::array<double, 3>;

class GridSpec {
 public:
  GridSpec() = default;
  GridSpec(std::initializer_list<std::size_t> dims);
  explicit GridSpec(std::span<const std::size_t> dims);

  int dim() const noexcept { return dim_; }
  std::size_t size(int axis) const noexcept { return dims_[static_cast<std::size_t>(axis)]; }
  double spacing(int axis) const noexcept { return 1.0 / static_cast<double>(size(axis) - 1); }
  std::size_t num_nodes() const noexcept;
  std::size_t stride(int axis) const noexcept;
  double cell_volume() const noexcept;

  /// Coordinate of grid index i along an axis; exact at 0 and 1.
  double coordinate(std::size_t i, int axis) const noexcept {
    return static_cast<double>(i) / static_cast<double>(size(axis) - 1);
  }
  std::array<std::size_t, 3> unravel(std::size_t flat) const noexcept;
  Point node_point(std::size_t flat) const noexcept;

  /// Grid over the same domain with round(n*factor) nodes per axis (at least 2).
  GridSpec scaled(double factor) const;

  std::string str() const;
  friend bool operator==(const GridSpec& a, const GridSpec& b) noexcept {
    return a.dim_ == b.dim_ && a.dims_ == b.dims_;
  }

 private:
  int dim_ = 0;
  std::array<std::size_t, 3> dims_{1, 1, 1};
};

/// Shared storage for fields with one or more node-aligned components.
struct NodeData {
  GridSpec grid;
  int components = 0;
  std::vector<double> values;

  NodeData() = default;
  NodeData(const GridSpec& g, int comps, double fill = 0.0)
      : grid(g), components(comps), values(g.num_nodes() * static_cast<std::size_t>(comps), fill) {}

  std::size_t num_nodes() const noexcept { return grid.num_nodes(); }
  std::span<double> component(int k) noexcept {
    return {values.data() + static_cast<std::size_t>(k) * num_nodes(), num_nodes()};
  }
  std::span<const double> component(int k) const noexcept {
    return {values.data() + static_cast<std::size_t>(k) * num_nodes(), num_nodes()};
  }
  bool all_finite() const noexcept;
};

struct ScalarField : NodeData {
  ScalarField() = default;
  explicit ScalarField(const GridSpec& g, double fill = 0.0) : NodeData(g, 1, fill) {}
  double& operator[](std::size_t i) noexcept { return values[i]; }
  double operator[](std::size_t i) const noexcept { return values[i]; }
};

struct VectorField : NodeData {
  VectorField() = default;
  explicit VectorField(const GridSpec& g, double fill = 0.0) : NodeData(g, g.dim(), fill) {}
};

/// Inverse map phi^{-1} stored as absolute coordinates (not displacements).
struct TransformMap : NodeData {
  TransformMap() = default;
  explicit TransformMap(const GridSpec& g, double fill = 0.0) : NodeData(g, g.dim(), fill) {}
};

/// A stack of N scalar fields on a common grid (pre-weights h_i or weights w_i).
using FieldStack = std::vector<ScalarField>;

TransformMap identity_map(const GridSpec& grid);

/// Clamped multilinear interpolation. Exact at nodes; out-of-domain points clamp to the boundary.
double interpolate(const ScalarField& field, const Point& p);
std::vector<double> interpolate(const ScalarField& field, std::span<const Point> points);
std::vector<Point> interpolate(const VectorField& field, std::span<const Point> points);

/// Central differences in the interior, first-order one-sided at the boundary.
VectorField gradient(const ScalarField& field);

ScalarField jacobian_determinant(const TransformMap& map);

/// result[y] = outer(inner(y)).
ScalarField compose(const ScalarField& outer, const TransformMap& inner);
VectorField compose(const VectorField& outer, const TransformMap& inner);
TransformMap compose(const TransformMap& outer, const TransformMap& inner);
/// Nearest-node lookup, for integer label images.
ScalarField compose_nearest(const ScalarField& labels, const TransformMap& inner);

ScalarField resample(const ScalarField& field, const GridSpec& target);
VectorField resample(const VectorField& field, const GridSpec& target);
TransformMap resample(const TransformMap& map, const GridSpec& target);

void require_same_grid(const GridSpec& a, const GridSpec& b, const char* what);

}  // namespace rdmm
