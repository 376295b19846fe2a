#include "rdmm/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "rdmm/errors.hpp"

namespace rdmm {

namespace {

constexpr double kLo = 0.02, kHi = 0.98;
constexpr double kGap = 0.02;      // clearance between objects
constexpr double kProbe = 0.005;  // sampling step of the geometric tests

// Platform-independent uniform draws (std distributions are not specified bit-exactly).
class Draw {
 public:
  explicit Draw(std::uint64_t seed) : rng_(seed) {}
  double unit() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(unit() * static_cast<double>(n)); }

 private:
  std::mt19937_64 rng_;
};

ShapeKind random_kind(Draw& d) {
  static const ShapeKind kinds[3] = {ShapeKind::RECTANGLE, ShapeKind::TRIANGLE, ShapeKind::ELLIPSE};
  return kinds[d.index(3)];
}

bool in_bounds(const ShapeSpec& s) {
  double x0, x1, y0, y1;
  s.bounds(0.0, x0, x1, y0, y1);
  return x0 >= kLo && y0 >= kLo && x1 <= kHi && y1 <= kHi;
}

bool overlaps(const ShapeSpec& s, const ShapeSpec& t, double gap) {
  double ax0, ax1, ay0, ay1, bx0, bx1, by0, by1;
  s.bounds(gap, ax0, ax1, ay0, ay1);
  t.bounds(0.0, bx0, bx1, by0, by1);
  const double x0 = std::max(ax0, bx0), x1 = std::min(ax1, bx1), y0 = std::max(ay0, by0), y1 = std::min(ay1, by1);
  if (x0 > x1 || y0 > y1) return false;
  for (double x = x0; x <= x1; x += kProbe)
    for (double y = y0; y <= y1; y += kProbe)
      if (s.contains(x, y, gap) && t.contains(x, y)) return true;
  return false;
}

bool inside(const ShapeSpec& inner, const ShapeSpec& outer, double gap) {
  double x0, x1, y0, y1;
  inner.bounds(gap, x0, x1, y0, y1);
  for (double x = x0; x <= x1 + 1e-12; x += kProbe)
    for (double y = y0; y <= y1 + 1e-12; y += kProbe)
      if (inner.contains(x, y, gap) && !outer.contains(x, y)) return false;
  return true;
}

struct Perturbation {
  double dx = 0.0, dy = 0.0, scale = 1.0, rotation = 0.0;
};

Perturbation draw_perturbation(Draw& d, const SceneParams& p) {
  Perturbation out;
  const double r = p.max_shift * d.unit(), phi = d.uniform(0.0, 2.0 * M_PI);
  out.dx = r * std::cos(phi);
  out.dy = r * std::sin(phi);
  out.scale = std::exp(d.uniform(std::log(p.min_scale), std::log(p.max_scale)));
  out.rotation = d.uniform(-p.max_rotation, p.max_rotation);
  return out;
}

ShapeSpec apply(const ShapeSpec& s, const Perturbation& q) {
  ShapeSpec t = s;
  t.cx += q.dx;
  t.cy += q.dy;
  t.a *= q.scale;
  t.b *= q.scale;
  t.rotation += q.rotation;
  return t;
}

struct Layout {
  std::vector<ShapeSpec> shapes;  // container, two inner, outer...
};

bool try_source(Draw& d, const SceneParams& p, Layout& out) {
  out.shapes.clear();
  ShapeSpec box;
  box.kind = random_kind(d);
  box.a = d.uniform(0.40, 0.52);
  box.b = d.uniform(0.40, 0.52);
  box.cx = d.uniform(0.44, 0.56);
  box.cy = d.uniform(0.44, 0.56);
  box.rotation = d.uniform(-0.5, 0.5);
  box.intensity = d.uniform(0.3, 0.5);
  box.label = 1;
  if (box.kind == ShapeKind::TRIANGLE) box.a = std::max(box.a, box.b) * 1.15;
  if (!in_bounds(box)) return false;
  out.shapes.push_back(box);

  double bx0, bx1, by0, by1;
  box.bounds(0.0, bx0, bx1, by0, by1);
  for (int label = 2; label <= 3; ++label) {
    bool placed = false;
    for (std::size_t tries = 0; tries < p.max_retries && !placed; ++tries) {
      ShapeSpec s;
      s.kind = random_kind(d);
      s.a = d.uniform(0.13, 0.2);
      s.b = d.uniform(0.13, 0.2);
      s.cx = d.uniform(bx0, bx1);
      s.cy = d.uniform(by0, by1);
      s.rotation = d.uniform(-M_PI, M_PI);
      s.intensity = d.uniform(0.6, 1.0);
      s.label = label;
      if (!inside(s, box, kGap)) continue;
      if (label == 3 && overlaps(s, out.shapes[1], kGap)) continue;
      out.shapes.push_back(s);
      placed = true;
    }
    if (!placed) return false;
  }

  const std::size_t n_outside = d.index(p.max_outside + 1);
  int label = 4;
  for (std::size_t k = 0; k < n_outside; ++k) {
    for (std::size_t tries = 0; tries < p.max_retries; ++tries) {
      ShapeSpec s;
      s.kind = random_kind(d);
      s.a = d.uniform(0.12, 0.18);
      s.b = d.uniform(0.12, 0.18);
      s.cx = d.uniform(0.05, 0.95);
      s.cy = d.uniform(0.05, 0.95);
      s.rotation = d.uniform(-M_PI, M_PI);
      s.intensity = d.uniform(0.6, 1.0);
      s.label = label;
      if (!in_bounds(s) || overlaps(s, box, kGap)) continue;
      bool clash = false;
      for (std::size_t j = 3; j < out.shapes.size() && !clash; ++j) clash = overlaps(s, out.shapes[j], kGap);
      if (clash) continue;
      out.shapes.push_back(s);
      ++label;
      break;
    }
  }
  return true;
}

bool try_target(Draw& d, const SceneParams& p, const Layout& src, Layout& out) {
  out.shapes.clear();
  const ShapeSpec& box = src.shapes[0];
  bool ok = false;
  ShapeSpec tbox;
  for (std::size_t tries = 0; tries < p.max_retries && !ok; ++tries) {
    tbox = apply(box, draw_perturbation(d, p));
    ok = in_bounds(tbox);
  }
  if (!ok) return false;
  out.shapes.push_back(tbox);

  for (std::size_t k = 1; k < 3; ++k) {
    ok = false;
    for (std::size_t tries = 0; tries < p.max_retries && !ok; ++tries) {
      const ShapeSpec s = apply(src.shapes[k], draw_perturbation(d, p));
      if (!inside(s, tbox, 0.5 * kGap)) continue;
      if (k == 2 && overlaps(s, out.shapes[1], 0.5 * kGap)) continue;
      out.shapes.push_back(s);
      ok = true;
    }
    if (!ok) return false;
  }

  for (std::size_t k = 3; k < src.shapes.size(); ++k) {
    ok = false;
    for (std::size_t tries = 0; tries < p.max_retries && !ok; ++tries) {
      const ShapeSpec s = p.perturb_outside ? apply(src.shapes[k], draw_perturbation(d, p)) : src.shapes[k];
      if (!in_bounds(s)) continue;
      bool clash = false;
      for (std::size_t j = 0; j < out.shapes.size() && !clash; ++j)
        clash = (j == 0 || j >= 3) && overlaps(s, out.shapes[j], 0.5 * kGap);
      if (clash) continue;
      out.shapes.push_back(s);
      ok = true;
    }
    if (!ok) return false;
  }
  return true;
}

ScalarField foreground_mask(const ScalarField& labels) {
  ScalarField m(labels.grid);
  for (std::size_t y = 0; y < m.num_nodes(); ++y) m[y] = (labels[y] >= 1.0 && labels[y] <= 3.0) ? 1.0 : 0.0;
  return m;
}

}  // namespace

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::RECTANGLE: return "rectangle";
    case ShapeKind::TRIANGLE: return "triangle";
    case ShapeKind::ELLIPSE: return "ellipse";
  }
  return "?";
}

bool ShapeSpec::contains(double x, double y, double margin) const {
  const double dx = x - cx, dy = y - cy;
  const double c = std::cos(rotation), s = std::sin(rotation);
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  switch (kind) {
    case ShapeKind::RECTANGLE:
      return std::abs(u) <= 0.5 * a + margin && std::abs(v) <= 0.5 * b + margin;
    case ShapeKind::ELLIPSE: {
      const double ra = 0.5 * a + margin, rb = 0.5 * b + margin;
      return (u / ra) * (u / ra) + (v / rb) * (v / rb) <= 1.0;
    }
    case ShapeKind::TRIANGLE: {
      // Base of width a at v = -b/2, apex at v = +b/2; sides offset outward by margin.
      const double k = std::sqrt(1.0 + (0.5 * a / b) * (0.5 * a / b));
      return v >= -0.5 * b - margin && std::abs(u) <= 0.5 * a * (0.5 * b - v) / b + margin * k;
    }
  }
  return false;
}

void ShapeSpec::bounds(double margin, double& x0, double& x1, double& y0, double& y1) const {
  double ha = 0.5 * a + margin, hb = 0.5 * b + margin;
  if (kind == ShapeKind::TRIANGLE) {
    const double k = std::sqrt(1.0 + (0.5 * a / b) * (0.5 * a / b));
    ha = 0.5 * a + margin * (k + 0.5 * a / b);
    hb = 0.5 * b + margin * (1.0 + 2.0 * k * b / a);
  }
  const double c = std::abs(std::cos(rotation)), s = std::abs(std::sin(rotation));
  const double ex = c * ha + s * hb, ey = s * ha + c * hb;
  x0 = cx - ex;
  x1 = cx + ex;
  y0 = cy - ey;
  y1 = cy + ey;
}

void SceneParams::validate() const {
  if (!(max_shift >= 0.0)) throw InvalidParameter("max_shift must be nonnegative");
  if (!(min_scale > 0.0 && min_scale <= 1.0 && max_scale >= 1.0)) throw InvalidParameter("scale range must contain 1");
  if (!(max_rotation >= 0.0)) throw InvalidParameter("max_rotation must be nonnegative");
  if (max_outside > 5) throw InvalidParameter("at most five objects outside the container");
  if (max_retries < 1) throw InvalidParameter("max_retries must be >= 1");
}

ScalarField rasterize_image(const std::vector<ShapeSpec>& shapes, const GridSpec& grid) {
  if (grid.dim() != 2) throw InvalidParameter("synthetic scenes are two-dimensional");
  ScalarField f(grid);
  const double o0 = 0.25 * grid.spacing(0), o1 = 0.25 * grid.spacing(1);
  for (std::size_t y = 0; y < grid.num_nodes(); ++y) {
    const Point p = grid.node_point(y);
    double acc = 0.0;
    for (int i = -1; i <= 1; i += 2)
      for (int j = -1; j <= 1; j += 2) {
        const double x = p[0] + i * o0, z = p[1] + j * o1;
        for (std::size_t k = shapes.size(); k-- > 0;)
          if (shapes[k].contains(x, z)) {
            acc += shapes[k].intensity;
            break;
          }
      }
    f[y] = 0.25 * acc;
  }
  return f;
}

ScalarField rasterize_labels(const std::vector<ShapeSpec>& shapes, const GridSpec& grid) {
  if (grid.dim() != 2) throw InvalidParameter("synthetic scenes are two-dimensional");
  ScalarField f(grid);
  for (std::size_t y = 0; y < grid.num_nodes(); ++y) {
    const Point p = grid.node_point(y);
    for (std::size_t k = shapes.size(); k-- > 0;)
      if (shapes[k].contains(p[0], p[1])) {
        f[y] = shapes[k].label;
        break;
      }
  }
  return f;
}

ScenePair generate_pair(std::uint64_t seed, const GridSpec& grid, const SceneParams& params) {
  params.validate();
  if (grid.dim() != 2) throw InvalidParameter("synthetic scenes are two-dimensional");
  if (grid.size(0) < 64 || grid.size(1) < 64) throw InvalidParameter("synthetic scenes need >= 64 nodes per axis");
  Draw d(seed);
  Layout src, tgt;
  bool ok = false;
  for (std::size_t attempt = 0; attempt < params.max_retries && !ok; ++attempt)
    ok = try_source(d, params, src) && try_target(d, params, src, tgt);
  if (!ok) throw GenerationError("no valid layout for seed " + std::to_string(seed));

  ScenePair out;
  out.seed = seed;
  out.source_shapes = src.shapes;
  out.target_shapes = tgt.shapes;
  out.source_image = rasterize_image(src.shapes, grid);
  out.target_image = rasterize_image(tgt.shapes, grid);
  out.source_labels = rasterize_labels(src.shapes, grid);
  out.target_labels = rasterize_labels(tgt.shapes, grid);
  out.foreground_mask_source = foreground_mask(out.source_labels);
  out.foreground_mask_target = foreground_mask(out.target_labels);
  return out;
}

FieldStack region_preweights(const ScalarField& foreground_mask, const std::vector<double>& fg_h_sq,
                             const std::vector<double>& bg_h_sq, const MultiGaussianKernel& kernel) {
  const std::size_t N = kernel.size();
  if (fg_h_sq.size() != N || bg_h_sq.size() != N) throw InvalidParameter("weight lists must match the kernel size");
  for (const auto* list : {&fg_h_sq, &bg_h_sq}) {
    double s = 0.0;
    for (double v : *list) {
      if (v < 0.0) throw InvalidParameter("squared pre-weights must be nonnegative");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) throw InvalidParameter("squared pre-weights must sum to 1");
  }
  FieldStack h(N, ScalarField(foreground_mask.grid));
  for (std::size_t i = 0; i < N; ++i) {
    const double f = std::sqrt(fg_h_sq[i]), b = std::sqrt(bg_h_sq[i]);
    for (std::size_t y = 0; y < foreground_mask.num_nodes(); ++y) h[i][y] = foreground_mask[y] > 0.5 ? f : b;
  }
  return h;
}

FieldStack region_preweights(const ScenePair& scene, const std::vector<double>& fg_h_sq,
                             const std::vector<double>& bg_h_sq, const MultiGaussianKernel& kernel) {
  return region_preweights(scene.foreground_mask_source, fg_h_sq, bg_h_sq, kernel);
}

}  // namespace rdmm
