#include "rdmm/field.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "rdmm/errors.hpp"
#include "rdmm/stencil.hpp"

namespace rdmm {

namespace {

void init_dims(int& dim, std::array<std::size_t, 3>& dims, std::span<const std::size_t> in) {
  if (in.size() != 2 && in.size() != 3) throw InvalidParameter("grid dimension must be 2 or 3");
  dim = static_cast<int>(in.size());
  for (std::size_t a = 0; a < in.size(); ++a) {
    if (in[a] < 2) throw InvalidParameter("every grid axis needs at least 2 samples");
    dims[a] = in[a];
  }
}

Point point_at(const NodeData& f, std::size_t node) {
  Point p{0, 0, 0};
  for (int k = 0; k < f.components; ++k) p[static_cast<std::size_t>(k)] = f.component(k)[node];
  return p;
}

void sample_all(const NodeData& src, const GridSpec& target_grid, const auto& point_of, NodeData& out) {
  const std::size_t n = target_grid.num_nodes();
  for (std::size_t y = 0; y < n; ++y) {
    const Point p = point_of(y);
    const auto cell = stencil::locate(src.grid, p.data());
    for (int k = 0; k < src.components; ++k)
      out.component(k)[y] = stencil::sample(src.component(k).data(), src.grid, cell);
  }
}

}  // namespace

GridSpec::GridSpec(std::initializer_list<std::size_t> dims) {
  init_dims(dim_, dims_, std::span<const std::size_t>(dims.begin(), dims.size()));
}

GridSpec::GridSpec(std::span<const std::size_t> dims) { init_dims(dim_, dims_, dims); }

std::size_t GridSpec::num_nodes() const noexcept {
  std::size_t n = 1;
  for (int a = 0; a < dim_; ++a) n *= size(a);
  return n;
}

std::size_t GridSpec::stride(int axis) const noexcept {
  std::size_t s = 1;
  for (int a = dim_ - 1; a > axis; --a) s *= size(a);
  return s;
}

double GridSpec::cell_volume() const noexcept {
  double v = 1.0;
  for (int a = 0; a < dim_; ++a) v *= spacing(a);
  return v;
}

std::array<std::size_t, 3> GridSpec::unravel(std::size_t flat) const noexcept {
  std::array<std::size_t, 3> idx{0, 0, 0};
  for (int a = dim_ - 1; a >= 0; --a) {
    idx[static_cast<std::size_t>(a)] = flat % size(a);
    flat /= size(a);
  }
  return idx;
}

Point GridSpec::node_point(std::size_t flat) const noexcept {
  const auto idx = unravel(flat);
  Point p{0, 0, 0};
  for (int a = 0; a < dim_; ++a) p[static_cast<std::size_t>(a)] = coordinate(idx[static_cast<std::size_t>(a)], a);
  return p;
}

GridSpec GridSpec::scaled(double factor) const {
  if (!(factor > 0.0)) throw InvalidParameter("grid scale factor must be positive");
  std::array<std::size_t, 3> d{};
  for (int a = 0; a < dim_; ++a) {
    const double nodes = std::round(static_cast<double>(size(a)) * factor);
    d[static_cast<std::size_t>(a)] = std::max<std::size_t>(2, static_cast<std::size_t>(nodes));
  }
  return GridSpec(std::span<const std::size_t>(d.data(), static_cast<std::size_t>(dim_)));
}

std::string GridSpec::str() const {
  std::ostringstream os;
  for (int a = 0; a < dim_; ++a) os << (a ? "x" : "") << size(a);
  return os.str();
}

bool NodeData::all_finite() const noexcept {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

void require_same_grid(const GridSpec& a, const GridSpec& b, const char* what) {
  if (!(a == b)) throw ShapeError(std::string(what) + ": grid mismatch " + a.str() + " vs " + b.str());
}

TransformMap identity_map(const GridSpec& grid) {
  TransformMap m(grid);
  for (std::size_t y = 0; y < grid.num_nodes(); ++y) {
    const Point p = grid.node_point(y);
    for (int k = 0; k < grid.dim(); ++k) m.component(k)[y] = p[static_cast<std::size_t>(k)];
  }
  return m;
}

double interpolate(const ScalarField& field, const Point& p) {
  return stencil::sample(field.values.data(), field.grid, stencil::locate(field.grid, p.data()));
}

std::vector<double> interpolate(const ScalarField& field, std::span<const Point> points) {
  std::vector<double> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(interpolate(field, p));
  return out;
}

std::vector<Point> interpolate(const VectorField& field, std::span<const Point> points) {
  std::vector<Point> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    const auto cell = stencil::locate(field.grid, p.data());
    Point v{0, 0, 0};
    for (int k = 0; k < field.components; ++k)
      v[static_cast<std::size_t>(k)] = stencil::sample(field.component(k).data(), field.grid, cell);
    out.push_back(v);
  }
  return out;
}

namespace stencil {

void partial(const double* f, const GridSpec& g, int axis, double* out) {
  const std::size_t n = g.size(axis), inner = g.stride(axis), outer = g.num_nodes() / (n * inner);
  const double inv_h = static_cast<double>(n - 1);
  const double inv_2h = 0.5 * inv_h;
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * n * inner;
    for (std::size_t j = 0; j < inner; ++j) {
      const double* fl = f + base + j;
      double* ol = out + base + j;
      ol[0] = (fl[inner] - fl[0]) * inv_h;
      for (std::size_t i = 1; i + 1 < n; ++i) ol[i * inner] = (fl[(i + 1) * inner] - fl[(i - 1) * inner]) * inv_2h;
      ol[(n - 1) * inner] = (fl[(n - 1) * inner] - fl[(n - 2) * inner]) * inv_h;
    }
  }
}

void partial_transpose(const double* g_in, const GridSpec& g, int axis, double* out) {
  const std::size_t n = g.size(axis), inner = g.stride(axis), outer = g.num_nodes() / (n * inner);
  const double inv_h = static_cast<double>(n - 1);
  const double inv_2h = 0.5 * inv_h;
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * n * inner;
    for (std::size_t j = 0; j < inner; ++j) {
      const double* gl = g_in + base + j;
      double* ol = out + base + j;
      ol[inner] += gl[0] * inv_h;
      ol[0] -= gl[0] * inv_h;
      for (std::size_t i = 1; i + 1 < n; ++i) {
        ol[(i + 1) * inner] += gl[i * inner] * inv_2h;
        ol[(i - 1) * inner] -= gl[i * inner] * inv_2h;
      }
      ol[(n - 1) * inner] += gl[(n - 1) * inner] * inv_h;
      ol[(n - 2) * inner] -= gl[(n - 1) * inner] * inv_h;
    }
  }
}

}  // namespace stencil

VectorField gradient(const ScalarField& field) {
  VectorField out(field.grid);
  for (int a = 0; a < field.grid.dim(); ++a)
    stencil::partial(field.values.data(), field.grid, a, out.component(a).data());
  return out;
}

ScalarField jacobian_determinant(const TransformMap& map) {
  const GridSpec& g = map.grid;
  const int d = g.dim();
  const std::size_t n = g.num_nodes();
  // jac[k*d + l] holds d phi_k / d x_l
  std::vector<std::vector<double>> jac(static_cast<std::size_t>(d * d), std::vector<double>(n));
  for (int k = 0; k < d; ++k)
    for (int l = 0; l < d; ++l)
      stencil::partial(map.component(k).data(), g, l, jac[static_cast<std::size_t>(k * d + l)].data());
  ScalarField det(g);
  for (std::size_t y = 0; y < n; ++y) {
    auto J = [&](int k, int l) { return jac[static_cast<std::size_t>(k * d + l)][y]; };
    if (d == 2) {
      det[y] = J(0, 0) * J(1, 1) - J(0, 1) * J(1, 0);
    } else {
      det[y] = J(0, 0) * (J(1, 1) * J(2, 2) - J(1, 2) * J(2, 1)) - J(0, 1) * (J(1, 0) * J(2, 2) - J(1, 2) * J(2, 0)) +
               J(0, 2) * (J(1, 0) * J(2, 1) - J(1, 1) * J(2, 0));
    }
  }
  return det;
}

ScalarField compose(const ScalarField& outer, const TransformMap& inner) {
  ScalarField out(inner.grid);
  sample_all(outer, inner.grid, [&](std::size_t y) { return point_at(inner, y); }, out);
  return out;
}

VectorField compose(const VectorField& outer, const TransformMap& inner) {
  if (outer.grid.dim() != inner.grid.dim()) throw ShapeError("compose: dimension mismatch");
  VectorField out(inner.grid);
  sample_all(outer, inner.grid, [&](std::size_t y) { return point_at(inner, y); }, out);
  return out;
}

TransformMap compose(const TransformMap& outer, const TransformMap& inner) {
  if (outer.grid.dim() != inner.grid.dim()) throw ShapeError("compose: dimension mismatch");
  TransformMap out(inner.grid);
  sample_all(outer, inner.grid, [&](std::size_t y) { return point_at(inner, y); }, out);
  return out;
}

ScalarField compose_nearest(const ScalarField& labels, const TransformMap& inner) {
  const GridSpec& g = labels.grid;
  ScalarField out(inner.grid);
  for (std::size_t y = 0; y < inner.num_nodes(); ++y) {
    std::size_t flat = 0;
    for (int a = 0; a < g.dim(); ++a) {
      const double scale = static_cast<double>(g.size(a) - 1);
      const double pos = std::clamp(inner.component(a)[y] * scale, 0.0, scale);
      flat += static_cast<std::size_t>(std::lround(pos)) * g.stride(a);
    }
    out[y] = labels[flat];
  }
  return out;
}

ScalarField resample(const ScalarField& field, const GridSpec& target) {
  ScalarField out(target);
  sample_all(field, target, [&](std::size_t y) { return target.node_point(y); }, out);
  return out;
}

VectorField resample(const VectorField& field, const GridSpec& target) {
  VectorField out(target);
  sample_all(field, target, [&](std::size_t y) { return target.node_point(y); }, out);
  return out;
}

TransformMap resample(const TransformMap& map, const GridSpec& target) {
  TransformMap out(target);
  sample_all(map, target, [&](std::size_t y) { return target.node_point(y); }, out);
  return out;
}

}  // namespace rdmm
