#include <algorithm>
#include <cmath>
#include <random>

#include "rdmm/errors.hpp"
#include "rdmm/optimizer.hpp"

namespace rdmm {

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

// Interior weight that vanishes within 0.1 of the boundary.
double interior_ramp(const GridSpec& g, const Point& p) {
  double b = 1.0;
  for (int a = 0; a < g.dim(); ++a) b *= std::clamp((std::min(p[a], 1.0 - p[a]) - 0.1) / 0.15, 0.0, 1.0);
  return b;
}

ScalarField textured_image(const GridSpec& g, const double* phase, const Point& shift) {
  ScalarField f(g);
  for (std::size_t y = 0; y < g.num_nodes(); ++y) {
    Point p = g.node_point(y);
    for (int a = 0; a < g.dim(); ++a) p[a] -= shift[a];
    const double r2 = (p[0] - 0.5) * (p[0] - 0.5) + (p[1] - 0.5) * (p[1] - 0.5);
    f[y] = 0.45 + 0.2 * std::sin(2 * M_PI * (1.5 * p[0] + phase[0])) * std::cos(2 * M_PI * (1.2 * p[1] + phase[1])) +
           0.3 * std::exp(-r2 / (2 * 0.15 * 0.15));
  }
  return f;
}

VectorField smooth_momentum(const GridSpec& g, std::mt19937_64& rng, double amplitude) {
  VectorField m(g);
  for (int k = 0; k < g.dim(); ++k) {
    auto c = m.component(k);
    for (int b = 0; b < 3; ++b) {
      const double cx = uniform(rng, 0.35, 0.65), cy = uniform(rng, 0.35, 0.65), s = uniform(rng, 0.08, 0.12);
      const double amp = uniform(rng, -amplitude, amplitude);
      for (std::size_t y = 0; y < g.num_nodes(); ++y) {
        const Point p = g.node_point(y);
        c[y] += amp * std::exp(-((p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy)) / (2 * s * s));
      }
    }
  }
  return m;
}

FieldStack scene_preweights(const GridSpec& g, const RegistrationConfig& cfg, std::mt19937_64& rng) {
  const std::size_t N = cfg.kernel.size();
  if (cfg.mode == RegistrationMode::LDDMM) return constant_preweights(g, cfg.penalties.w0_sq);
  FieldStack h(N, ScalarField(g));
  if (cfg.mode == RegistrationMode::RDMM_FIXED_REG) {
    const std::vector<double> fg{0.2, 0.5, 0.3, 0.0}, bg{0.0, 0.0, 0.0, 1.0};
    for (std::size_t y = 0; y < g.num_nodes(); ++y) {
      const Point p = g.node_point(y);
      const bool inside = std::hypot(p[0] - 0.5, p[1] - 0.5) < 0.25;
      for (std::size_t i = 0; i < N; ++i) h[i][y] = std::sqrt(inside ? fg[i] : bg[i]);
    }
    return h;
  }
  std::vector<double> a(N), cx(N), cy(N);
  for (std::size_t i = 0; i < N; ++i) a[i] = uniform(rng, -0.6, 0.6), cx[i] = uniform(rng, 0.3, 0.7), cy[i] = uniform(rng, 0.3, 0.7);
  for (std::size_t y = 0; y < g.num_nodes(); ++y) {
    const Point p = g.node_point(y);
    const double b = interior_ramp(g, p);
    double s = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double r2 = (p[0] - cx[i]) * (p[0] - cx[i]) + (p[1] - cy[i]) * (p[1] - cy[i]);
      h[i][y] = std::sqrt(cfg.penalties.w0_sq[i]) * (1.0 + b * a[i] * std::exp(-r2 / (2 * 0.1 * 0.1)));
      s += h[i][y] * h[i][y];
    }
    for (std::size_t i = 0; i < N; ++i) h[i][y] /= std::sqrt(s);
  }
  return h;
}

}  // namespace

std::vector<GradientCheck> gradient_check(std::size_t size, std::uint64_t seed, std::size_t n_steps,
                                          std::size_t n_coordinates) {
  if (size < 8) throw InvalidParameter("gradient check needs at least 8 nodes per axis");
  const GridSpec g{size, size};
  std::vector<GradientCheck> out;
  for (auto mode : {RegistrationMode::LDDMM, RegistrationMode::RDMM_FIXED_REG, RegistrationMode::RDMM_JOINT}) {
    std::mt19937_64 rng(seed);
    RegistrationConfig cfg = default_config(mode);
    cfg.integrator.n_steps = n_steps;
    ObjectiveConfig oc;
    oc.similarity = cfg.similarity;
    oc.penalties = cfg.penalties;
    oc.integrator = cfg.integrator;
    oc.lambda_kin = cfg.lambda_kin;
    oc.regularize_h0 = mode == RegistrationMode::RDMM_JOINT;

    const double phase[2] = {uniform(rng, 0, 1), uniform(rng, 0, 1)};
    const ScalarField I0 = textured_image(g, phase, {0, 0, 0});
    const ScalarField I1 = textured_image(g, phase, {uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05), 0});
    const VectorField m0 = smooth_momentum(g, rng, 0.3);
    const FieldStack h0 = scene_preweights(g, cfg, rng);
    const double T = 3.0;
    const bool joint = mode == RegistrationMode::RDMM_JOINT;

    const GradientPair gp = objective_gradient(initial_state(m0, h0), I0, I1, cfg.kernel, oc, T, joint);
    auto f = [&](const VectorField& m, const FieldStack& h) {
      return shooting_objective(initial_state(m, h), I0, I1, cfg.kernel, oc, T).total;
    };

    GradientCheck gc;
    gc.mode = mode;
    double gmax = 0.0;
    for (double v : gp.m0.values) gmax = std::max(gmax, std::abs(v));
    std::vector<std::size_t> candidates;
    for (std::size_t j = 0; j < gp.m0.values.size(); ++j) {
      const Point p = g.node_point(j % g.num_nodes());
      if (interior_ramp(g, p) > 0.0 && std::abs(gp.m0.values[j]) >= 0.1 * gmax) candidates.push_back(j);
    }
    std::shuffle(candidates.begin(), candidates.end(), rng);
    candidates.resize(std::min(candidates.size(), n_coordinates));
    const double eps = 1e-6;
    for (std::size_t j : candidates) {
      VectorField a = m0, b = m0;
      a.values[j] += eps;
      b.values[j] -= eps;
      const double fd = (f(a, h0) - f(b, h0)) / (2 * eps);
      gc.max_rel_error_m0 = std::max(gc.max_rel_error_m0, std::abs(fd - gp.m0.values[j]) / std::abs(gp.m0.values[j]));
      ++gc.coordinates;
    }

    if (joint) {
      const std::size_t N = h0.size();
      for (int t = 0; t < 3; ++t) {
        FieldStack dir(N, ScalarField(g));
        for (std::size_t i = 0; i < N; ++i) {
          const double cx = uniform(rng, 0.35, 0.65), cy = uniform(rng, 0.35, 0.65), amp = uniform(rng, -1, 1);
          for (std::size_t y = 0; y < g.num_nodes(); ++y) {
            const Point p = g.node_point(y);
            dir[i][y] = amp * std::exp(-((p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy)) / (2 * 0.1 * 0.1));
          }
        }
        double analytic = 0.0;
        for (std::size_t y = 0; y < g.num_nodes(); ++y) {
          double proj = 0.0;
          for (std::size_t i = 0; i < N; ++i) proj += dir[i][y] * h0[i][y];
          for (std::size_t i = 0; i < N; ++i) {
            dir[i][y] -= proj * h0[i][y];
            analytic += gp.h0[i][y] * dir[i][y];
          }
        }
        auto shifted = [&](double e) {
          FieldStack h = h0;
          for (std::size_t y = 0; y < g.num_nodes(); ++y) {
            double s = 0.0;
            for (std::size_t i = 0; i < N; ++i) {
              h[i][y] += e * dir[i][y];
              s += h[i][y] * h[i][y];
            }
            for (std::size_t i = 0; i < N; ++i) h[i][y] /= std::sqrt(s);
          }
          return f(m0, h);
        };
        const double fd = (shifted(eps) - shifted(-eps)) / (2 * eps);
        gc.max_rel_error_h0 = std::max(gc.max_rel_error_h0, std::abs(fd - analytic) / std::abs(analytic));
        ++gc.directions;
      }
    }
    out.push_back(gc);
  }
  return out;
}

}  // namespace rdmm
