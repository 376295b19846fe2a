#pragma once

// Raw-array building blocks shared by the forward solver and its adjoint.
// Every linear operator here comes with its transpose.

#include <cmath>
#include <cstddef>

#include "rdmm/field.hpp"

namespace rdmm::stencil {

/// Location of a query point inside the grid for multilinear interpolation.
struct Cell {
  std::array<std::size_t, 3> base{};  // lower corner index per axis
  std::array<double, 3> frac{};       // in [0,1]
  std::array<double, 3> dfrac{};      // d frac / d coordinate; 0 where clamped
};

inline Cell locate(const GridSpec& grid, const double* p) {
  Cell c;
  for (int a = 0; a < grid.dim(); ++a) {
    const auto ua = static_cast<std::size_t>(a);
    const double scale = static_cast<double>(grid.size(a) - 1);
    double pos = p[a] * scale;
    c.dfrac[ua] = scale;
    if (!(pos > 0.0)) {  // also catches NaN
      if (pos < 0.0) c.dfrac[ua] = 0.0;
      pos = 0.0;
    } else if (pos >= scale) {
      if (pos > scale) c.dfrac[ua] = 0.0;
      pos = scale;
    } else {
      const double r = std::round(pos);
      if (std::abs(pos - r) < 1e-10) pos = r;
    }
    auto i0 = static_cast<std::size_t>(pos);
    if (i0 > grid.size(a) - 2) i0 = grid.size(a) - 2;
    c.base[ua] = i0;
    c.frac[ua] = pos - static_cast<double>(i0);
  }
  return c;
}

inline double sample(const double* f, const GridSpec& g, const Cell& c) {
  if (g.dim() == 2) {
    const std::size_t n1 = g.size(1);
    const std::size_t i = c.base[0] * n1 + c.base[1];
    const double t0 = c.frac[0], t1 = c.frac[1];
    return (1 - t0) * ((1 - t1) * f[i] + t1 * f[i + 1]) + t0 * ((1 - t1) * f[i + n1] + t1 * f[i + n1 + 1]);
  }
  const std::size_t s0 = g.stride(0), s1 = g.stride(1);
  const std::size_t i = c.base[0] * s0 + c.base[1] * s1 + c.base[2];
  const double t0 = c.frac[0], t1 = c.frac[1], t2 = c.frac[2];
  auto lerp2 = [&](std::size_t j) {
    return (1 - t1) * ((1 - t2) * f[j] + t2 * f[j + 1]) + t1 * ((1 - t2) * f[j + s1] + t2 * f[j + s1 + 1]);
  };
  return (1 - t0) * lerp2(i) + t0 * lerp2(i + s0);
}

/// Value and gradient with respect to the query coordinates.
inline double sample_grad(const double* f, const GridSpec& g, const Cell& c, double* grad) {
  if (g.dim() == 2) {
    const std::size_t n1 = g.size(1);
    const std::size_t i = c.base[0] * n1 + c.base[1];
    const double t0 = c.frac[0], t1 = c.frac[1];
    const double f00 = f[i], f01 = f[i + 1], f10 = f[i + n1], f11 = f[i + n1 + 1];
    const double a = (1 - t1) * f00 + t1 * f01;
    const double b = (1 - t1) * f10 + t1 * f11;
    grad[0] = (b - a) * c.dfrac[0];
    grad[1] = ((1 - t0) * (f01 - f00) + t0 * (f11 - f10)) * c.dfrac[1];
    return (1 - t0) * a + t0 * b;
  }
  const std::size_t s0 = g.stride(0), s1 = g.stride(1);
  const std::size_t i = c.base[0] * s0 + c.base[1] * s1 + c.base[2];
  const double t[3] = {c.frac[0], c.frac[1], c.frac[2]};
  double corner[2][2][2];
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int e = 0; e < 2; ++e)
        corner[a][b][e] = f[i + static_cast<std::size_t>(a) * s0 + static_cast<std::size_t>(b) * s1 +
                            static_cast<std::size_t>(e)];
  double val = 0, d0 = 0, d1 = 0, d2 = 0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int e = 0; e < 2; ++e) {
        const double wa = a ? t[0] : 1 - t[0], wb = b ? t[1] : 1 - t[1], we = e ? t[2] : 1 - t[2];
        const double v = corner[a][b][e];
        val += wa * wb * we * v;
        d0 += (a ? 1.0 : -1.0) * wb * we * v;
        d1 += wa * (b ? 1.0 : -1.0) * we * v;
        d2 += wa * wb * (e ? 1.0 : -1.0) * v;
      }
  grad[0] = d0 * c.dfrac[0];
  grad[1] = d1 * c.dfrac[1];
  grad[2] = d2 * c.dfrac[2];
  return val;
}

/// Transpose of sample() with respect to the field values: out += weight * stencil.
inline void scatter(double* out, const GridSpec& g, const Cell& c, double weight) {
  if (g.dim() == 2) {
    const std::size_t n1 = g.size(1);
    const std::size_t i = c.base[0] * n1 + c.base[1];
    const double t0 = c.frac[0], t1 = c.frac[1];
    out[i] += weight * (1 - t0) * (1 - t1);
    out[i + 1] += weight * (1 - t0) * t1;
    out[i + n1] += weight * t0 * (1 - t1);
    out[i + n1 + 1] += weight * t0 * t1;
    return;
  }
  const std::size_t s0 = g.stride(0), s1 = g.stride(1);
  const std::size_t i = c.base[0] * s0 + c.base[1] * s1 + c.base[2];
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int e = 0; e < 2; ++e) {
        const double wa = a ? c.frac[0] : 1 - c.frac[0];
        const double wb = b ? c.frac[1] : 1 - c.frac[1];
        const double we = e ? c.frac[2] : 1 - c.frac[2];
        out[i + static_cast<std::size_t>(a) * s0 + static_cast<std::size_t>(b) * s1 + static_cast<std::size_t>(e)] +=
            weight * wa * wb * we;
      }
}

/// out = d f / d x_axis (overwrites out).
void partial(const double* f, const GridSpec& g, int axis, double* out);
/// out += (d/dx_axis)^T g.
void partial_transpose(const double* g_in, const GridSpec& g, int axis, double* out);

}  // namespace rdmm::stencil
