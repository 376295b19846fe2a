#include "rdmm/dynamics.hpp"

#include <algorithm>
#include <cmath>

#include "rdmm/errors.hpp"
#include "rdmm/stencil.hpp"

namespace rdmm {

namespace {

using Buf = std::vector<double>;

// Intermediates of one right-hand-side evaluation, kept for the reverse pass.
struct Workspace {
  VectorField m;
  TransformMap phi;
  std::vector<stencil::Cell> cells;
  Buf h_raw, h, w;  // [i*n + y]
  Buf inv_norm;     // 1 / sqrt(sum_i h_raw_i^2)
  Buf nu;           // [(i*d + k)*n + y]
  Buf v;            // [k*n + y]
  Buf dv;           // [(k*d + l)*n + y] = d v_k / d x_l
  Buf dmm;          // [(k*d + l)*n + y] = d m_k / d x_l
  Buf dh;           // [(i*d + l)*n + y] = d h_i / d x_l
  Buf dphi;         // [(k*d + l)*n + y] = d phi_k / d x_l
  Buf q;            // G * (m . nu_i)
  Buf divv;
  VectorField out_m;
  TransformMap out_phi;
};

bool spatially_constant(const FieldStack& h0) {
  return std::all_of(h0.begin(), h0.end(), [](const ScalarField& f) {
    return std::all_of(f.values.begin(), f.values.end(), [&](double x) { return x == f.values.front(); });
  });
}

class RhsEvaluator {
 public:
  RhsEvaluator(const MultiGaussianKernel& kernel, const FieldStack& h0)
      : kernel_(kernel), h0_(h0), grid_(h0.empty() ? GridSpec{} : h0.front().grid) {
    kernel_.validate();
    if (h0.size() != kernel.size()) throw ShapeError("pre-weight count does not match kernel size");
    for (const auto& f : h0) require_same_grid(f.grid, grid_, "pre-weights");
    d_ = grid_.dim();
    n_ = grid_.num_nodes();
    N_ = h0.size();
    h0_constant_ = spatially_constant(h0);
  }

  const GridSpec& grid() const { return grid_; }
  bool h0_constant() const { return h0_constant_; }

  void prepare(Workspace& ws) const {
    const std::size_t n = n_, d = dsz(), N = N_;
    ws.cells.resize(n);
    for (Buf* b : {&ws.h_raw, &ws.h, &ws.w, &ws.q}) b->assign(N * n, 0.0);
    ws.inv_norm.assign(n, 0.0);
    ws.nu.assign(N * d * n, 0.0);
    ws.v.assign(d * n, 0.0);
    for (Buf* b : {&ws.dv, &ws.dmm, &ws.dphi}) b->assign(d * d * n, 0.0);
    ws.dh.assign(N * d * n, 0.0);
    ws.divv.assign(n, 0.0);
    if (ws.out_m.grid.dim() == 0) {
      ws.out_m = VectorField(grid_);
      ws.out_phi = TransformMap(grid_);
    }
  }

  void weights(Workspace& ws) const {
    const std::size_t n = n_, N = N_;
    double p[3];
    for (std::size_t y = 0; y < n; ++y) {
      for (int a = 0; a < d_; ++a) p[a] = ws.phi.component(a)[y];
      ws.cells[y] = stencil::locate(grid_, p);
      double s = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        const double hv = stencil::sample(h0_[i].values.data(), grid_, ws.cells[y]);
        ws.h_raw[i * n + y] = hv;
        s += hv * hv;
      }
      const double inv = s > 0.0 ? 1.0 / std::sqrt(s) : 0.0;
      ws.inv_norm[y] = inv;
      for (std::size_t i = 0; i < N; ++i) ws.h[i * n + y] = ws.h_raw[i * n + y] * inv;
    }
    ws.w = ws.h;
    for (std::size_t i = 0; i < N; ++i)
      gauss_conv_inplace(std::span<double>(ws.w.data() + i * n, n), grid_, kernel_.preweight_sigma);
  }

  /// Velocity from the momentum at the current weights (fills nu and v).
  void velocity(Workspace& ws) const {
    const std::size_t n = n_, d = dsz(), N = N_;
    std::fill(ws.v.begin(), ws.v.end(), 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      const double* wi = ws.w.data() + i * n;
      for (std::size_t k = 0; k < d; ++k) {
        double* nik = ws.nu.data() + (i * d + k) * n;
        const auto mk = ws.m.component(static_cast<int>(k));
        for (std::size_t y = 0; y < n; ++y) nik[y] = wi[y] * mk[y];
        gauss_conv_inplace(std::span<double>(nik, n), grid_, kernel_.sigmas[i]);
        double* vk = ws.v.data() + k * n;
        for (std::size_t y = 0; y < n; ++y) vk[y] += wi[y] * nik[y];
      }
    }
  }

  /// Full right-hand side. Returns false if any output is non-finite.
  bool forward(Workspace& ws, bool with_source = true) const {
    const std::size_t n = n_, d = dsz(), N = N_;
    prepare(ws);
    weights(ws);
    velocity(ws);
    const bool source = with_source && !h0_constant_;
    for (std::size_t k = 0; k < d; ++k)
      for (std::size_t l = 0; l < d; ++l) {
        const int li = static_cast<int>(l);
        stencil::partial(ws.v.data() + k * n, grid_, li, ws.dv.data() + (k * d + l) * n);
        stencil::partial(ws.m.component(static_cast<int>(k)).data(), grid_, li, ws.dmm.data() + (k * d + l) * n);
        stencil::partial(ws.phi.component(static_cast<int>(k)).data(), grid_, li, ws.dphi.data() + (k * d + l) * n);
      }
    for (std::size_t y = 0; y < n; ++y) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += ws.dv[(k * d + k) * n + y];
      ws.divv[y] = s;
    }
    if (source) {
      for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t l = 0; l < d; ++l)
          stencil::partial(ws.h.data() + i * n, grid_, static_cast<int>(l), ws.dh.data() + (i * d + l) * n);
        double* qi = ws.q.data() + i * n;
        for (std::size_t y = 0; y < n; ++y) {
          double s = 0.0;
          for (std::size_t k = 0; k < d; ++k) s += ws.m.component(static_cast<int>(k))[y] * ws.nu[(i * d + k) * n + y];
          qi[y] = s;
        }
        gauss_conv_inplace(std::span<double>(qi, n), grid_, kernel_.preweight_sigma);
      }
    }
    for (std::size_t k = 0; k < d; ++k) {
      auto out = ws.out_m.component(static_cast<int>(k));
      auto outp = ws.out_phi.component(static_cast<int>(k));
      const auto mk = ws.m.component(static_cast<int>(k));
      for (std::size_t y = 0; y < n; ++y) {
        double acc = ws.divv[y] * mk[y];
        double accp = 0.0;
        for (std::size_t l = 0; l < d; ++l) {
          const double vl = ws.v[l * n + y];
          acc += ws.dv[(l * d + k) * n + y] * ws.m.component(static_cast<int>(l))[y];
          acc += ws.dmm[(k * d + l) * n + y] * vl;
          accp += ws.dphi[(k * d + l) * n + y] * vl;
        }
        double src = 0.0;
        if (source)
          for (std::size_t i = 0; i < N; ++i) src += ws.q[i * n + y] * ws.dh[(i * d + k) * n + y];
        out[y] = src - acc;
        outp[y] = -accp;
      }
    }
    return ws.out_m.all_finite() && ws.out_phi.all_finite();
  }

  /// Source term sum_i G*(m . nu_i) grad h_i, always evaluated in full.
  VectorField source_term(Workspace& ws) const {
    const std::size_t n = n_, d = dsz(), N = N_;
    prepare(ws);
    weights(ws);
    velocity(ws);
    VectorField out(grid_);
    Buf q(n), dh(n);
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t y = 0; y < n; ++y) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += ws.m.component(static_cast<int>(k))[y] * ws.nu[(i * d + k) * n + y];
        q[y] = s;
      }
      gauss_conv_inplace(q, grid_, kernel_.preweight_sigma);
      for (std::size_t k = 0; k < d; ++k) {
        stencil::partial(ws.h.data() + i * n, grid_, static_cast<int>(k), dh.data());
        auto ok = out.component(static_cast<int>(k));
        for (std::size_t y = 0; y < n; ++y) ok[y] += q[y] * dh[y];
      }
    }
    return out;
  }

  /// Adjoint of the weight pipeline. w_bar is consumed (convolved in place).
  void weights_vjp(const Workspace& ws, Buf& w_bar, Buf& h_bar, TransformMap* phi_bar, FieldStack* h0_bar) const {
    const std::size_t n = n_, N = N_;
    for (std::size_t i = 0; i < N; ++i) {
      std::span<double> wb(w_bar.data() + i * n, n);
      gauss_conv_inplace(wb, grid_, kernel_.preweight_sigma);
      for (std::size_t y = 0; y < n; ++y) h_bar[i * n + y] += wb[y];
    }
    const bool need_phi = phi_bar != nullptr && !h0_constant_;
    if (!need_phi && h0_bar == nullptr) return;
    Buf raw_bar(N);
    double g[3];
    for (std::size_t y = 0; y < n; ++y) {
      double dot = 0.0;
      for (std::size_t i = 0; i < N; ++i) dot += h_bar[i * n + y] * ws.h[i * n + y];
      for (std::size_t i = 0; i < N; ++i) raw_bar[i] = ws.inv_norm[y] * (h_bar[i * n + y] - ws.h[i * n + y] * dot);
      for (std::size_t i = 0; i < N; ++i) {
        if (h0_bar != nullptr) stencil::scatter((*h0_bar)[i].values.data(), grid_, ws.cells[y], raw_bar[i]);
        if (need_phi) {
          stencil::sample_grad(h0_[i].values.data(), grid_, ws.cells[y], g);
          for (int a = 0; a < d_; ++a) phi_bar->component(a)[y] += raw_bar[i] * g[a];
        }
      }
    }
  }

  /// Accumulates the pull-back of (A, B) = adjoints of (dm, dphi) into m_bar, phi_bar, h0_bar.
  void vjp(const Workspace& ws, const VectorField& A, const TransformMap& B, VectorField& m_bar, TransformMap& phi_bar,
           FieldStack* h0_bar) const {
    const std::size_t n = n_, d = dsz(), N = N_;
    const bool source = !h0_constant_;
    Buf vbar(d * n, 0.0), dvbar(d * d * n, 0.0), dmbar(d * d * n, 0.0);
    Buf nubar(N * d * n, 0.0), wbar(N * n, 0.0), hbar(N * n, 0.0);
    Buf qbar, dhbar;
    if (source) {
      qbar.assign(N * n, 0.0);
      dhbar.assign(N * d * n, 0.0);
    }
    Buf tmp(n);

    // dphi_k = -sum_l (d_l phi_k) v_l
    for (std::size_t k = 0; k < d; ++k) {
      const auto Bk = B.component(static_cast<int>(k));
      for (std::size_t l = 0; l < d; ++l) {
        const double* vl = ws.v.data() + l * n;
        const double* gkl = ws.dphi.data() + (k * d + l) * n;
        double* vb = vbar.data() + l * n;
        for (std::size_t y = 0; y < n; ++y) {
          tmp[y] = -Bk[y] * vl[y];
          vb[y] -= Bk[y] * gkl[y];
        }
        stencil::partial_transpose(tmp.data(), grid_, static_cast<int>(l), phi_bar.component(static_cast<int>(k)).data());
      }
    }

    // dm_k = -(div v m_k + sum_l d_k v_l m_l + sum_l d_l m_k v_l) + sum_i q_i d_k h_i
    for (std::size_t y = 0; y < n; ++y) {
      double divbar = 0.0;
      for (std::size_t k = 0; k < d; ++k) divbar -= A.component(static_cast<int>(k))[y] * ws.m.component(static_cast<int>(k))[y];
      for (std::size_t k = 0; k < d; ++k) {
        const double a = A.component(static_cast<int>(k))[y];
        dvbar[(k * d + k) * n + y] += divbar;
        m_bar.component(static_cast<int>(k))[y] -= a * ws.divv[y];
        for (std::size_t l = 0; l < d; ++l) {
          const double ml = ws.m.component(static_cast<int>(l))[y];
          const double vl = ws.v[l * n + y];
          dvbar[(l * d + k) * n + y] -= a * ml;
          m_bar.component(static_cast<int>(l))[y] -= a * ws.dv[(l * d + k) * n + y];
          dmbar[(k * d + l) * n + y] -= a * vl;
          vbar[l * n + y] -= a * ws.dmm[(k * d + l) * n + y];
        }
        if (source)
          for (std::size_t i = 0; i < N; ++i) {
            qbar[i * n + y] += a * ws.dh[(i * d + k) * n + y];
            dhbar[(i * d + k) * n + y] += a * ws.q[i * n + y];
          }
      }
    }

    for (std::size_t k = 0; k < d; ++k)
      for (std::size_t l = 0; l < d; ++l) {
        stencil::partial_transpose(dvbar.data() + (k * d + l) * n, grid_, static_cast<int>(l), vbar.data() + k * n);
        stencil::partial_transpose(dmbar.data() + (k * d + l) * n, grid_, static_cast<int>(l),
                                   m_bar.component(static_cast<int>(k)).data());
      }

    if (source) {
      for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t k = 0; k < d; ++k)
          stencil::partial_transpose(dhbar.data() + (i * d + k) * n, grid_, static_cast<int>(k), hbar.data() + i * n);
        std::span<double> pb(qbar.data() + i * n, n);
        gauss_conv_inplace(pb, grid_, kernel_.preweight_sigma);
        for (std::size_t k = 0; k < d; ++k) {
          const double* nik = ws.nu.data() + (i * d + k) * n;
          double* nbik = nubar.data() + (i * d + k) * n;
          auto mb = m_bar.component(static_cast<int>(k));
          const auto mk = ws.m.component(static_cast<int>(k));
          for (std::size_t y = 0; y < n; ++y) {
            mb[y] += pb[y] * nik[y];
            nbik[y] += pb[y] * mk[y];
          }
        }
      }
    }

    // v_k = sum_i w_i nu_ik, nu_ik = K_i * (w_i m_k)
    for (std::size_t i = 0; i < N; ++i) {
      const double* wi = ws.w.data() + i * n;
      double* wbi = wbar.data() + i * n;
      for (std::size_t k = 0; k < d; ++k) {
        const double* nik = ws.nu.data() + (i * d + k) * n;
        double* nbik = nubar.data() + (i * d + k) * n;
        const double* vb = vbar.data() + k * n;
        for (std::size_t y = 0; y < n; ++y) {
          wbi[y] += vb[y] * nik[y];
          nbik[y] += vb[y] * wi[y];
        }
        gauss_conv_inplace(std::span<double>(nbik, n), grid_, kernel_.sigmas[i]);
        auto mb = m_bar.component(static_cast<int>(k));
        const auto mk = ws.m.component(static_cast<int>(k));
        for (std::size_t y = 0; y < n; ++y) {
          wbi[y] += nbik[y] * mk[y];
          mb[y] += nbik[y] * wi[y];
        }
      }
    }

    weights_vjp(ws, wbar, hbar, &phi_bar, h0_bar);
  }

 private:
  std::size_t dsz() const { return static_cast<std::size_t>(d_); }

  MultiGaussianKernel kernel_;
  const FieldStack& h0_;
  GridSpec grid_;
  int d_ = 0;
  std::size_t n_ = 0, N_ = 0;
  bool h0_constant_ = false;
};

void load_state(Workspace& ws, const VectorField& m, const TransformMap& phi) {
  ws.m = m;
  ws.phi = phi;
}

// out = y + c * k  (values only; grids already match)
void axpy_into(NodeData& out, const NodeData& y, double c, const NodeData& k) {
  out.grid = y.grid;
  out.components = y.components;
  out.values.resize(y.values.size());
  for (std::size_t j = 0; j < y.values.size(); ++j) out.values[j] = y.values[j] + c * k.values[j];
}

void check_state(const GeodesicState& s, const MultiGaussianKernel& kernel) {
  if (s.h0.size() != kernel.size()) throw ShapeError("pre-weight count does not match kernel size");
  require_same_grid(s.m.grid, s.phi_inv.grid, "state momentum/map");
  for (const auto& h : s.h0) require_same_grid(h.grid, s.m.grid, "state pre-weights");
}

}  // namespace

GeodesicState initial_state(VectorField m0, FieldStack h0) {
  GeodesicState s;
  s.phi_inv = identity_map(m0.grid);
  s.m = std::move(m0);
  s.h0 = std::move(h0);
  s.t = 0.0;
  return s;
}

CurrentWeights current_weights(const GeodesicState& state, const MultiGaussianKernel& kernel) {
  check_state(state, kernel);
  RhsEvaluator ev(kernel, state.h0);
  Workspace ws;
  load_state(ws, state.m, state.phi_inv);
  ev.prepare(ws);
  ev.weights(ws);
  const GridSpec& g = state.m.grid;
  const std::size_t n = g.num_nodes();
  CurrentWeights out;
  for (std::size_t i = 0; i < kernel.size(); ++i) {
    ScalarField h(g), w(g);
    std::copy_n(ws.h.begin() + static_cast<std::ptrdiff_t>(i * n), n, h.values.begin());
    std::copy_n(ws.w.begin() + static_cast<std::ptrdiff_t>(i * n), n, w.values.begin());
    out.h.push_back(std::move(h));
    out.w.push_back(std::move(w));
  }
  return out;
}

RhsResult rdmm_rhs(const GeodesicState& state, const MultiGaussianKernel& kernel) {
  check_state(state, kernel);
  RhsEvaluator ev(kernel, state.h0);
  Workspace ws;
  load_state(ws, state.m, state.phi_inv);
  if (!ev.forward(ws)) throw IntegrationBlowup("non-finite right-hand side", 0);
  return {std::move(ws.out_m), std::move(ws.out_phi)};
}

VectorField rdmm_source_term(const GeodesicState& state, const MultiGaussianKernel& kernel) {
  check_state(state, kernel);
  RhsEvaluator ev(kernel, state.h0);
  Workspace ws;
  load_state(ws, state.m, state.phi_inv);
  return ev.source_term(ws);
}

Trajectory integrate_geodesic(const GeodesicState& state0, const MultiGaussianKernel& kernel,
                              const IntegratorConfig& cfg) {
  check_state(state0, kernel);
  if (cfg.n_steps < 1) throw InvalidParameter("n_steps must be at least 1");
  RhsEvaluator ev(kernel, state0.h0);
  const double dt = 1.0 / static_cast<double>(cfg.n_steps);

  Trajectory traj;
  traj.h0 = state0.h0;
  traj.m.reserve(cfg.n_steps + 1);
  traj.phi_inv.reserve(cfg.n_steps + 1);
  traj.m.push_back(state0.m);
  traj.phi_inv.push_back(state0.phi_inv);
  traj.t.push_back(state0.t);

  Workspace ws;
  VectorField km(state0.m.grid);  // running weighted sum of stage slopes
  TransformMap kp(state0.m.grid);
  for (std::size_t s = 0; s < cfg.n_steps; ++s) {
    const VectorField& ym = traj.m.back();
    const TransformMap& yp = traj.phi_inv.back();
    static constexpr double stage_c[3] = {0.5, 0.5, 1.0};
    static constexpr double stage_w[4] = {1.0, 2.0, 2.0, 1.0};
    std::fill(km.values.begin(), km.values.end(), 0.0);
    std::fill(kp.values.begin(), kp.values.end(), 0.0);
    load_state(ws, ym, yp);
    for (int stage = 0; stage < 4; ++stage) {
      if (!ev.forward(ws)) throw IntegrationBlowup("non-finite state during geodesic shooting", s);
      for (std::size_t j = 0; j < km.values.size(); ++j) {
        km.values[j] += stage_w[stage] * ws.out_m.values[j];
        kp.values[j] += stage_w[stage] * ws.out_phi.values[j];
      }
      if (stage < 3) {
        const double c = stage_c[stage] * dt;
        VectorField nm;
        TransformMap np;
        axpy_into(nm, ym, c, ws.out_m);
        axpy_into(np, yp, c, ws.out_phi);
        ws.m = std::move(nm);
        ws.phi = std::move(np);
      }
    }
    VectorField m_next;
    TransformMap p_next;
    axpy_into(m_next, ym, dt / 6.0, km);
    axpy_into(p_next, yp, dt / 6.0, kp);
    traj.m.push_back(std::move(m_next));
    traj.phi_inv.push_back(std::move(p_next));
    traj.t.push_back(state0.t + static_cast<double>(s + 1) * dt);
  }
  return traj;
}

double energy(const GeodesicState& state, const MultiGaussianKernel& kernel) {
  const auto cw = current_weights(state, kernel);
  return 0.5 * velocity_norm_sq(state.m, kernel_apply(state.m, cw.w, kernel));
}

void current_weights_vjp(const GeodesicState& state, const MultiGaussianKernel& kernel, const FieldStack& w_bar,
                         const FieldStack* h_bar, FieldStack& h0_bar, TransformMap* phi_bar) {
  check_state(state, kernel);
  RhsEvaluator ev(kernel, state.h0);
  Workspace ws;
  load_state(ws, state.m, state.phi_inv);
  ev.prepare(ws);
  ev.weights(ws);
  const std::size_t n = state.m.num_nodes(), N = kernel.size();
  Buf wb(N * n), hb(N * n, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    std::copy(w_bar[i].values.begin(), w_bar[i].values.end(), wb.begin() + static_cast<std::ptrdiff_t>(i * n));
    if (h_bar != nullptr)
      std::copy((*h_bar)[i].values.begin(), (*h_bar)[i].values.end(), hb.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  if (h0_bar.size() != N) h0_bar.assign(N, ScalarField(state.m.grid));
  ev.weights_vjp(ws, wb, hb, phi_bar, &h0_bar);
}

void integrate_geodesic_adjoint(const Trajectory& traj, const MultiGaussianKernel& kernel,
                                const IntegratorConfig& cfg, const VectorField& m_bar_final,
                                const TransformMap& phi_bar_final, VectorField& m0_bar, FieldStack* h0_bar) {
  if (traj.size() != cfg.n_steps + 1) throw InvalidParameter("trajectory does not match integrator config");
  RhsEvaluator ev(kernel, traj.h0);
  const GridSpec& g = ev.grid();
  const double dt = 1.0 / static_cast<double>(cfg.n_steps);
  if (h0_bar != nullptr && h0_bar->size() != kernel.size()) h0_bar->assign(kernel.size(), ScalarField(g));

  VectorField m_bar = m_bar_final;
  TransformMap phi_bar = phi_bar_final;
  std::array<Workspace, 4> ws;
  static constexpr double stage_c[3] = {0.5, 0.5, 1.0};
  static constexpr double stage_w[4] = {1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0};

  for (std::size_t s = cfg.n_steps; s-- > 0;) {
    const VectorField& ym = traj.m[s];
    const TransformMap& yp = traj.phi_inv[s];
    load_state(ws[0], ym, yp);
    for (int stage = 0; stage < 4; ++stage) {
      if (!ev.forward(ws[static_cast<std::size_t>(stage)]))
        throw IntegrationBlowup("non-finite state during adjoint recomputation", s);
      if (stage < 3) {
        auto& next = ws[static_cast<std::size_t>(stage + 1)];
        axpy_into(next.m, ym, stage_c[stage] * dt, ws[static_cast<std::size_t>(stage)].out_m);
        axpy_into(next.phi, yp, stage_c[stage] * dt, ws[static_cast<std::size_t>(stage)].out_phi);
      }
    }

    // Adjoints of the stage slopes k_j, seeded from the step update.
    std::array<VectorField, 4> kbar_m;
    std::array<TransformMap, 4> kbar_p;
    for (std::size_t j = 0; j < 4; ++j) {
      kbar_m[j] = VectorField(g);
      kbar_p[j] = TransformMap(g);
      for (std::size_t e = 0; e < m_bar.values.size(); ++e) {
        kbar_m[j].values[e] = stage_w[j] * dt * m_bar.values[e];
        kbar_p[j].values[e] = stage_w[j] * dt * phi_bar.values[e];
      }
    }
    VectorField ybar_m = m_bar;
    TransformMap ybar_p = phi_bar;
    for (std::size_t stage = 4; stage-- > 0;) {
      VectorField Ybar_m(g);
      TransformMap Ybar_p(g);
      ev.vjp(ws[stage], kbar_m[stage], kbar_p[stage], Ybar_m, Ybar_p, h0_bar);
      for (std::size_t e = 0; e < ybar_m.values.size(); ++e) {
        ybar_m.values[e] += Ybar_m.values[e];
        ybar_p.values[e] += Ybar_p.values[e];
      }
      if (stage > 0) {
        const double c = stage_c[stage - 1] * dt;
        for (std::size_t e = 0; e < ybar_m.values.size(); ++e) {
          kbar_m[stage - 1].values[e] += c * Ybar_m.values[e];
          kbar_p[stage - 1].values[e] += c * Ybar_p.values[e];
        }
      }
    }
    m_bar = std::move(ybar_m);
    phi_bar = std::move(ybar_p);
  }
  for (std::size_t e = 0; e < m0_bar.values.size(); ++e) m0_bar.values[e] += m_bar.values[e];
}

}  // namespace rdmm
