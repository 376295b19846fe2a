#include "rdmm/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "rdmm/errors.hpp"
#include "rdmm/stencil.hpp"

namespace rdmm {

namespace {

// Sum over the in-bounds part of a (2r+1)^d box, separable along each axis.
void box_sum(std::vector<double>& f, const GridSpec& g, std::size_t r) {
  std::vector<double> line, prefix;
  for (int axis = 0; axis < g.dim(); ++axis) {
    const std::size_t n = g.size(axis), inner = g.stride(axis), outer = g.num_nodes() / (n * inner);
    line.resize(n);
    prefix.resize(n + 1);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < inner; ++j) {
        double* p = f.data() + o * n * inner + j;
        prefix[0] = 0.0;
        for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + p[i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t lo = i >= r ? i - r : 0, hi = std::min(n - 1, i + r);
          line[i] = prefix[hi + 1] - prefix[lo];
        }
        for (std::size_t i = 0; i < n; ++i) p[i * inner] = line[i];
      }
  }
}

std::vector<double> box_counts(const GridSpec& g, std::size_t r) {
  std::vector<double> c(g.num_nodes(), 1.0);
  box_sum(c, g, r);
  return c;
}

// One window of the LNCC loss. Accumulates weight * d loss / d a into grad when non-null.
double lncc_window(const ScalarField& a, const ScalarField& b, std::size_t size, double eps, double weight,
                   ScalarField* grad) {
  const GridSpec& g = a.grid;
  const std::size_t n = g.num_nodes(), r = size / 2;
  const auto count = box_counts(g, r);
  std::vector<double> Sa(a.values), Sb(b.values), Saa(n), Sbb(n), Sab(n);
  for (std::size_t y = 0; y < n; ++y) {
    Saa[y] = a[y] * a[y];
    Sbb[y] = b[y] * b[y];
    Sab[y] = a[y] * b[y];
  }
  for (auto* s : {&Sa, &Sb, &Saa, &Sbb, &Sab}) {
    box_sum(*s, g, r);
    for (std::size_t y = 0; y < n; ++y) (*s)[y] /= count[y];
  }
  double acc = 0.0;
  std::vector<double> gSa, gSaa, gSab;
  if (grad) {
    gSa.resize(n);
    gSaa.resize(n);
    gSab.resize(n);
  }
  const double gbar = -weight / static_cast<double>(n);
  for (std::size_t y = 0; y < n; ++y) {
    const double caa = Saa[y] - Sa[y] * Sa[y] + eps;
    const double cbb = Sbb[y] - Sb[y] * Sb[y] + eps;
    const double cab = Sab[y] - Sa[y] * Sb[y];
    const double D = caa * cbb;
    const double f = cab * cab / D;
    acc += f;
    if (grad) {
      const double fab = 2.0 * cab / D;
      const double faa = -f / caa;
      gSab[y] = gbar * fab / count[y];
      gSaa[y] = gbar * faa / count[y];
      gSa[y] = gbar * (-fab * Sb[y] - 2.0 * Sa[y] * faa) / count[y];
    }
  }
  if (grad) {
    box_sum(gSa, g, r);
    box_sum(gSaa, g, r);
    box_sum(gSab, g, r);
    for (std::size_t y = 0; y < n; ++y) (*grad)[y] += gSa[y] + b[y] * gSab[y] + 2.0 * a[y] * gSaa[y];
  }
  return weight * (1.0 - acc / static_cast<double>(n));
}

std::vector<double> omt_coefficients(const MultiGaussianKernel& kernel) {
  const std::size_t N = kernel.size();
  std::vector<double> c(N, 0.0);
  if (N < 2) return c;
  const double smax = kernel.sigmas.back();
  const double norm = std::pow(std::abs(std::log(smax / kernel.sigmas.front())), kernel.omt_power);
  for (std::size_t i = 0; i < N; ++i)
    c[i] = std::pow(std::abs(std::log(smax / kernel.sigmas[i])), kernel.omt_power) / norm;
  return c;
}

void check_grids(const FieldStack& w, const char* what) {
  if (w.empty()) throw ShapeError(std::string(what) + ": empty weight stack");
  for (const auto& f : w) require_same_grid(f.grid, w.front().grid, what);
}

}  // namespace

std::string to_string(SimilarityKind kind) {
  switch (kind) {
    case SimilarityKind::SSD:
      return "ssd";
    case SimilarityKind::LNCC:
      return "lncc";
    case SimilarityKind::MK_LNCC:
      return "mk-lncc";
  }
  return "?";
}

SimilarityKind similarity_kind_from_string(const std::string& s) {
  if (s == "ssd") return SimilarityKind::SSD;
  if (s == "lncc") return SimilarityKind::LNCC;
  if (s == "mk-lncc" || s == "mk_lncc") return SimilarityKind::MK_LNCC;
  throw InvalidParameter("unknown similarity kind '" + s + "'");
}

void SimilarityConfig::validate() const {
  if (!(eps > 0.0)) throw InvalidParameter("similarity eps must be positive");
  if (kind == SimilarityKind::SSD) return;
  if (windows.empty()) throw InvalidParameter("LNCC needs at least one window");
  double total = 0.0;
  for (const auto& w : windows) {
    if (w.size < 3 || w.size % 2 == 0) throw InvalidParameter("LNCC window sizes must be odd and >= 3");
    if (!(w.weight >= 0.0)) throw InvalidParameter("LNCC window weights must be non-negative");
    total += w.weight;
  }
  if (kind == SimilarityKind::MK_LNCC && std::abs(total - 1.0) > 1e-6)
    throw InvalidParameter("mk-LNCC window weights must sum to 1");
}

SimilarityConfig SimilarityConfig::at_scale(double factor) const {
  SimilarityConfig out = *this;
  for (auto& w : out.windows) {
    auto half = static_cast<std::size_t>(std::lround(static_cast<double>(w.size / 2) * factor));
    w.size = 2 * std::max<std::size_t>(half, 1) + 1;
  }
  return out;
}

void RegPenaltyConfig::validate(std::size_t n_kernels) const {
  if (!(C_omt >= 0.0) || !(C_range >= 0.0)) throw InvalidParameter("penalty constants must be non-negative");
  if (!(K_decay > 0.0)) throw InvalidParameter("decay constant K must be positive");
  if (w0_sq.size() != n_kernels) throw InvalidParameter("w0_sq length must match the number of Gaussians");
  double s = 0.0;
  for (double v : w0_sq) {
    if (!(v >= 0.0)) throw InvalidParameter("w0_sq entries must be non-negative");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-6) throw InvalidParameter("w0_sq must sum to 1");
}

DecayWeights decay_weights(double T, const RegPenaltyConfig& cfg) {
  if (!(T >= 0.0)) throw InvalidParameter("iteration index must be non-negative");
  DecayWeights d;
  // K / (K + e^{T/K}) written to stay finite for very large T
  const double x = T / cfg.K_decay;
  d.lambda_T = x > 700.0 ? 0.0 : cfg.K_decay / (cfg.K_decay + std::exp(x));
  d.lambda_range = cfg.C_range * d.lambda_T;
  d.lambda_omt = cfg.C_omt * (1.0 - d.lambda_T);
  return d;
}

double ssd(const ScalarField& a, const ScalarField& b) {
  require_same_grid(a.grid, b.grid, "ssd");
  double s = 0.0;
  for (std::size_t y = 0; y < a.num_nodes(); ++y) s += (a[y] - b[y]) * (a[y] - b[y]);
  return s * a.grid.cell_volume();
}

double mk_lncc(const ScalarField& a, const ScalarField& b, const SimilarityConfig& cfg) {
  require_same_grid(a.grid, b.grid, "mk_lncc");
  double loss = 0.0;
  for (const auto& w : cfg.windows) loss += lncc_window(a, b, w.size, cfg.eps, w.weight, nullptr);
  return loss;
}

double similarity(const ScalarField& a, const ScalarField& b, const SimilarityConfig& cfg, ScalarField* grad_a) {
  require_same_grid(a.grid, b.grid, "similarity");
  if (grad_a) *grad_a = ScalarField(a.grid);
  switch (cfg.kind) {
    case SimilarityKind::SSD: {
      if (grad_a) {
        const double cv = a.grid.cell_volume();
        for (std::size_t y = 0; y < a.num_nodes(); ++y) (*grad_a)[y] = 2.0 * (a[y] - b[y]) * cv;
      }
      return ssd(a, b);
    }
    case SimilarityKind::LNCC:
      return lncc_window(a, b, cfg.windows.front().size, cfg.eps, 1.0, grad_a);
    case SimilarityKind::MK_LNCC: {
      double loss = 0.0;
      for (const auto& w : cfg.windows) loss += lncc_window(a, b, w.size, cfg.eps, w.weight, grad_a);
      return loss;
    }
  }
  return 0.0;
}

double omt_penalty(const FieldStack& w, const MultiGaussianKernel& kernel) {
  check_grids(w, "omt_penalty");
  if (w.size() != kernel.size()) throw ShapeError("weight count does not match kernel size");
  const auto c = omt_coefficients(kernel);
  const std::size_t n = w.front().num_nodes();
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (c[i] == 0.0) continue;
    double s = 0.0;
    for (double v : w[i].values) s += v * v;
    acc += c[i] * s;
  }
  return acc / static_cast<double>(n);
}

FieldStack omt_gradient(const FieldStack& w, const MultiGaussianKernel& kernel) {
  check_grids(w, "omt_gradient");
  const auto c = omt_coefficients(kernel);
  const double inv_n = 1.0 / static_cast<double>(w.front().num_nodes());
  FieldStack out;
  for (std::size_t i = 0; i < w.size(); ++i) {
    ScalarField gi(w[i].grid);
    for (std::size_t y = 0; y < gi.num_nodes(); ++y) gi[y] = 2.0 * c[i] * w[i][y] * inv_n;
    out.push_back(std::move(gi));
  }
  return out;
}

double range_penalty_weights(const FieldStack& w, const std::vector<double>& w0_sq) {
  check_grids(w, "range_penalty");
  if (w.size() != w0_sq.size()) throw ShapeError("w0_sq length does not match weight count");
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double ref = std::sqrt(w0_sq[i]);
    for (double v : w[i].values) acc += (v - ref) * (v - ref);
  }
  return acc * w.front().grid.cell_volume();
}

double range_penalty(const FieldStack& h0, const RegPenaltyConfig& cfg, const MultiGaussianKernel& kernel) {
  return range_penalty_weights(preweights_to_weights(h0, kernel), cfg.w0_sq);
}

ObjectiveBreakdown weight_penalties(const FieldStack& h0, const MultiGaussianKernel& kernel,
                                    const RegPenaltyConfig& cfg, double T, FieldStack* grad_h0) {
  check_grids(h0, "weight_penalties");
  const GridSpec& g = h0.front().grid;
  const std::size_t n = g.num_nodes(), N = kernel.size();
  const double cv = g.cell_volume();
  FieldStack hn = h0;
  std::vector<double> inv_r(n);
  for (std::size_t y = 0; y < n; ++y) {
    double r2 = 0.0;
    for (std::size_t i = 0; i < N; ++i) r2 += h0[i][y] * h0[i][y];
    inv_r[y] = r2 > 0.0 ? 1.0 / std::sqrt(r2) : 0.0;
    for (std::size_t i = 0; i < N; ++i) hn[i][y] *= inv_r[y];
  }
  const FieldStack w = preweights_to_weights(hn, kernel);
  const DecayWeights dw = decay_weights(T, cfg);
  ObjectiveBreakdown out;
  out.omt = dw.lambda_omt * omt_penalty(w, kernel);
  out.range = dw.lambda_range * range_penalty_weights(w, cfg.w0_sq);
  out.total = out.omt + out.range;
  if (grad_h0) {
    const auto og = omt_gradient(w, kernel);
    FieldStack hbar(N, ScalarField(g));
    for (std::size_t i = 0; i < N; ++i) {
      const double ref = std::sqrt(cfg.w0_sq[i]);
      for (std::size_t y = 0; y < n; ++y)
        hbar[i][y] = dw.lambda_omt * og[i][y] + dw.lambda_range * 2.0 * (w[i][y] - ref) * cv;
      gauss_conv_inplace(hbar[i].values, g, kernel.preweight_sigma);
    }
    if (grad_h0->size() != N) grad_h0->assign(N, ScalarField(g));
    for (std::size_t y = 0; y < n; ++y) {
      double proj = 0.0;
      for (std::size_t i = 0; i < N; ++i) proj += hbar[i][y] * hn[i][y];
      for (std::size_t i = 0; i < N; ++i) (*grad_h0)[i][y] += (hbar[i][y] - hn[i][y] * proj) * inv_r[y];
    }
  }
  return out;
}

ForwardPass objective_forward(const GeodesicState& state0, const ScalarField& I0, const ScalarField& I1,
                              const MultiGaussianKernel& kernel, const ObjectiveConfig& cfg) {
  const GridSpec& g = state0.m.grid;
  require_same_grid(I0.grid, g, "shooting_objective source");
  require_same_grid(I1.grid, g, "shooting_objective target");

  ForwardPass fp;
  fp.traj = integrate_geodesic(state0, kernel, cfg.integrator);
  fp.warped = compose(I0, fp.traj.final_map());
  fp.value.sim = similarity(fp.warped, I1, cfg.similarity, &fp.sim_grad);
  fp.weights0 = current_weights(state0, kernel);
  fp.v0 = kernel_apply(state0.m, fp.weights0.w, kernel);
  fp.value.kinetic = cfg.lambda_kin * 0.5 * velocity_norm_sq(state0.m, fp.v0);
  fp.value.total = fp.value.sim + fp.value.kinetic;
  if (!std::isfinite(fp.value.total)) throw NumericalError("objective is not finite");
  return fp;
}

void objective_backward(const ForwardPass& fp, const ScalarField& I0, const MultiGaussianKernel& kernel,
                        const ObjectiveConfig& cfg, ObjectiveGradient& grad, bool want_h0) {
  const GeodesicState state0 = fp.traj.state(0);
  const GridSpec& g = state0.m.grid;
  const std::size_t n = g.num_nodes(), N = kernel.size();
  const double cv = g.cell_volume();
  const TransformMap& phi1 = fp.traj.final_map();

  TransformMap phi_bar(g);
  double gr[3];
  for (std::size_t y = 0; y < n; ++y) {
    if (fp.sim_grad[y] == 0.0) continue;
    double p[3];
    for (int a = 0; a < g.dim(); ++a) p[a] = phi1.component(a)[y];
    stencil::sample_grad(I0.values.data(), I0.grid, stencil::locate(I0.grid, p), gr);
    for (int a = 0; a < g.dim(); ++a) phi_bar.component(a)[y] = fp.sim_grad[y] * gr[a];
  }
  grad.m0 = VectorField(g);
  grad.h0.clear();
  if (want_h0) grad.h0.assign(N, ScalarField(g));
  integrate_geodesic_adjoint(fp.traj, kernel, cfg.integrator, VectorField(g), phi_bar, grad.m0,
                             want_h0 ? &grad.h0 : nullptr);

  const double ck = cfg.lambda_kin * cv;
  for (std::size_t j = 0; j < grad.m0.values.size(); ++j) grad.m0.values[j] += ck * fp.v0.values[j];

  if (want_h0) {
    FieldStack w_bar(N, ScalarField(g));
    std::vector<double> buf(n);
    for (std::size_t i = 0; i < N; ++i) {
      for (int k = 0; k < g.dim(); ++k) {
        const auto mk = state0.m.component(k);
        for (std::size_t y = 0; y < n; ++y) buf[y] = fp.weights0.w[i][y] * mk[y];
        gauss_conv_inplace(buf, g, kernel.sigmas[i]);
        for (std::size_t y = 0; y < n; ++y) w_bar[i][y] += ck * mk[y] * buf[y];
      }
    }
    current_weights_vjp(state0, kernel, w_bar, nullptr, grad.h0, nullptr);
  }

  bool finite = grad.m0.all_finite();
  for (const auto& h : grad.h0) finite = finite && h.all_finite();
  if (!finite) throw NumericalError("objective gradient is not finite");
}

ObjectiveBreakdown shooting_objective(const GeodesicState& state0, const ScalarField& I0, const ScalarField& I1,
                                      const MultiGaussianKernel& kernel, const ObjectiveConfig& cfg, double T,
                                      ObjectiveGradient* grad, bool want_h0, Trajectory* traj_out) {
  ForwardPass fp = objective_forward(state0, I0, I1, kernel, cfg);
  ObjectiveBreakdown out = fp.value;
  if (grad) objective_backward(fp, I0, kernel, cfg, *grad, want_h0);
  if (cfg.regularize_h0) {
    const auto reg = weight_penalties(state0.h0, kernel, cfg.penalties, T,
                                      grad && want_h0 ? &grad->h0 : nullptr);
    out.omt = reg.omt;
    out.range = reg.range;
    out.total += reg.total;
    if (!std::isfinite(out.total)) throw NumericalError("objective is not finite");
  }
  if (traj_out) *traj_out = std::move(fp.traj);
  return out;
}

}  // namespace rdmm
