#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "rdmm/field.hpp"
#include "rdmm/kernels.hpp"

namespace rdmm::testing {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline void fill_random(NodeData& f, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& v : f.values) v = uniform(rng, lo, hi);
}

/// Sum of a few random Gaussian bumps per component, vanishing near the boundary.
inline void fill_smooth(NodeData& f, std::mt19937_64& rng, double amplitude, int bumps = 3) {
  const GridSpec& g = f.grid;
  for (int k = 0; k < f.components; ++k) {
    auto comp = f.component(k);
    std::fill(comp.begin(), comp.end(), 0.0);
    for (int b = 0; b < bumps; ++b) {
      Point c{};
      for (int a = 0; a < g.dim(); ++a) c[a] = uniform(rng, 0.35, 0.65);
      const double s = uniform(rng, 0.08, 0.12);
      const double amp = uniform(rng, -amplitude, amplitude);
      for (std::size_t y = 0; y < g.num_nodes(); ++y) {
        const Point p = g.node_point(y);
        double r2 = 0.0;
        for (int a = 0; a < g.dim(); ++a) r2 += (p[a] - c[a]) * (p[a] - c[a]);
        comp[y] += amp * std::exp(-r2 / (2 * s * s));
      }
    }
  }
}

/// Isotropic 2D Gaussian bump of peak 1.
inline ScalarField blob(const GridSpec& g, double cx, double cy, double r) {
  ScalarField f(g);
  for (std::size_t y = 0; y < g.num_nodes(); ++y) {
    const Point p = g.node_point(y);
    const double d2 = (p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy);
    f[y] = std::exp(-d2 / (2 * r * r));
  }
  return f;
}

/// Disk of intensity 1 rasterised with 2x2 supersampling.
inline ScalarField disk(const GridSpec& g, double cx, double cy, double r) {
  ScalarField f(g);
  for (std::size_t y = 0; y < g.num_nodes(); ++y) {
    const Point p = g.node_point(y);
    double acc = 0.0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        acc += std::hypot(p[0] + (a - 0.5) * 0.5 * g.spacing(0) - cx, p[1] + (b - 0.5) * 0.5 * g.spacing(1) - cy) < r;
    f[y] = 0.25 * acc;
  }
  return f;
}

/// Pre-weights with sum_i h_i^2 = 1: smooth random positive fields, normalised.
inline FieldStack random_preweights(const GridSpec& g, std::size_t N, std::mt19937_64& rng, double contrast = 0.8) {
  FieldStack h(N, ScalarField(g));
  for (auto& hi : h) {
    fill_smooth(hi, rng, 1.0, 2);
    for (auto& v : hi.values) v = 1.0 + contrast * std::tanh(v);
  }
  for (std::size_t y = 0; y < g.num_nodes(); ++y) {
    double s = 0.0;
    for (auto& hi : h) s += hi[y] * hi[y];
    s = std::sqrt(s);
    for (auto& hi : h) hi[y] /= s;
  }
  return h;
}

/// Random pre-weights blended into constant ones near the boundary, where the
/// clamped interpolation of h0 o phi^{-1} is not differentiable.
inline FieldStack interior_preweights(const GridSpec& g, std::size_t N, std::mt19937_64& rng) {
  FieldStack h = random_preweights(g, N, rng);
  const double c = 1.0 / std::sqrt(static_cast<double>(N));
  for (std::size_t y = 0; y < g.num_nodes(); ++y) {
    const Point p = g.node_point(y);
    double b = 1.0;
    for (int a = 0; a < g.dim(); ++a) b *= std::clamp((std::min(p[a], 1.0 - p[a]) - 0.1) / 0.15, 0.0, 1.0);
    double s = 0.0;
    for (auto& hi : h) {
      hi[y] = b * hi[y] + (1.0 - b) * c;
      s += hi[y] * hi[y];
    }
    for (auto& hi : h) hi[y] /= std::sqrt(s);
  }
  return h;
}

inline double max_abs_diff(const NodeData& a, const NodeData& b) {
  double m = 0.0;
  for (std::size_t j = 0; j < a.values.size(); ++j) m = std::max(m, std::abs(a.values[j] - b.values[j]));
  return m;
}

inline double max_abs(const NodeData& a) {
  double m = 0.0;
  for (double v : a.values) m = std::max(m, std::abs(v));
  return m;
}

inline double dot(const NodeData& a, const NodeData& b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.values.size(); ++j) s += a.values[j] * b.values[j];
  return s;
}

}  // namespace rdmm::testing
