#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "rdmm/dynamics.hpp"
#include "rdmm/errors.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace rdmm;
using namespace rdmm::testing;

namespace {

const MultiGaussianKernel kKernel3{{0.06, 0.1, 0.16}, 0.05, 2.0};

// Smooth momentum rescaled so that the initial velocity has sup-norm vmax.
VectorField smooth_momentum(const GridSpec& g, std::uint64_t seed, double vmax,
                            const FieldStack* h0 = nullptr) {
  std::mt19937_64 rng(seed);
  VectorField m(g);
  fill_smooth(m, rng, 1.0);
  const FieldStack w = h0 ? preweights_to_weights(*h0, kKernel3) : constant_preweights(g, {0.2, 0.3, 0.5});
  const double cur = max_abs(kernel_apply(m, w, kKernel3));
  for (auto& v : m.values) v *= vmax / cur;
  return m;
}

double rel_max_diff(const NodeData& a, const NodeData& b) {
  return max_abs_diff(a, b) / std::max(max_abs(b), 1e-300);
}

// Analytic scene for the image-based oracle: m = lambda grad I + sum_i gamma_i grad h_i with
// h = (cos a, sin a cos b, sin a sin b) so that sum h_i^2 = 1 identically.
struct AnalyticScene {
  static constexpr double pi = std::numbers::pi;
  static double I(double x, double y) { return std::sin(2 * pi * x) * std::cos(pi * y) + x * y; }
  static std::array<double, 2> dI(double x, double y) {
    return {2 * pi * std::cos(2 * pi * x) * std::cos(pi * y) + y, -pi * std::sin(2 * pi * x) * std::sin(pi * y) + x};
  }
  static std::array<double, 4> HI(double x, double y) {
    const double xx = -4 * pi * pi * std::sin(2 * pi * x) * std::cos(pi * y);
    const double xy = -2 * pi * pi * std::cos(2 * pi * x) * std::sin(pi * y) + 1;
    const double yy = -pi * pi * std::sin(2 * pi * x) * std::cos(pi * y);
    return {xx, xy, xy, yy};
  }
  static double lam(double x, double y) { return 0.3 * std::exp(-((x - 0.5) * (x - 0.5) + (y - 0.45) * (y - 0.45)) / 0.05); }
  static std::array<double, 2> dlam(double x, double y) {
    const double e = lam(x, y);
    return {-e * 2 * (x - 0.5) / 0.05, -e * 2 * (y - 0.45) / 0.05};
  }
  static double gam(int i, double x, double y) {
    const double cx = 0.4 + 0.1 * i, cy = 0.6 - 0.1 * i;
    return (0.2 - 0.05 * i) * std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / 0.03);
  }
  static std::array<double, 2> dgam(int i, double x, double y) {
    const double cx = 0.4 + 0.1 * i, cy = 0.6 - 0.1 * i, e = gam(i, x, y);
    return {-e * 2 * (x - cx) / 0.03, -e * 2 * (y - cy) / 0.03};
  }
  // angles and their derivatives
  static double a(double x, double y) { return 0.8 + 0.4 * std::sin(pi * x) * std::sin(2 * pi * y); }
  static std::array<double, 2> da(double x, double y) {
    return {0.4 * pi * std::cos(pi * x) * std::sin(2 * pi * y), 0.8 * pi * std::sin(pi * x) * std::cos(2 * pi * y)};
  }
  static std::array<double, 4> Ha(double x, double y) {
    const double xx = -0.4 * pi * pi * std::sin(pi * x) * std::sin(2 * pi * y);
    const double xy = 0.8 * pi * pi * std::cos(pi * x) * std::cos(2 * pi * y);
    const double yy = -1.6 * pi * pi * std::sin(pi * x) * std::sin(2 * pi * y);
    return {xx, xy, xy, yy};
  }
  static double b(double x, double y) { return 0.7 + 0.3 * std::cos(2 * pi * x * y); }
  static std::array<double, 2> db(double x, double y) {
    const double s = -0.3 * 2 * pi * std::sin(2 * pi * x * y);
    return {s * y, s * x};
  }
  static std::array<double, 4> Hb(double x, double y) {
    const double c = -0.3 * 4 * pi * pi * std::cos(2 * pi * x * y);
    const double s = -0.3 * 2 * pi * std::sin(2 * pi * x * y);
    return {c * y * y, c * x * y + s, c * x * y + s, c * x * x};
  }

  // h_i value, gradient and Hessian by the chain rule on (a, b).
  static void h(int i, double x, double y, double& val, std::array<double, 2>& grad, std::array<double, 4>& hess) {
    const double A = a(x, y), B = b(x, y);
    const auto gA = da(x, y), gB = db(x, y);
    const auto hA = Ha(x, y), hB = Hb(x, y);
    // f(A,B) and partials
    double f, fa, fb, faa, fab, fbb;
    if (i == 0) {
      f = std::cos(A), fa = -std::sin(A), fb = 0, faa = -std::cos(A), fab = 0, fbb = 0;
    } else if (i == 1) {
      f = std::sin(A) * std::cos(B), fa = std::cos(A) * std::cos(B), fb = -std::sin(A) * std::sin(B);
      faa = -f, fab = -std::cos(A) * std::sin(B), fbb = -f;
    } else {
      f = std::sin(A) * std::sin(B), fa = std::cos(A) * std::sin(B), fb = std::sin(A) * std::cos(B);
      faa = -f, fab = std::cos(A) * std::cos(B), fbb = -f;
    }
    val = f;
    for (int p = 0; p < 2; ++p) grad[p] = fa * gA[p] + fb * gB[p];
    for (int p = 0; p < 2; ++p)
      for (int q = 0; q < 2; ++q)
        hess[p * 2 + q] = faa * gA[p] * gA[q] + fab * (gA[p] * gB[q] + gB[p] * gA[q]) + fbb * gB[p] * gB[q] +
                          fa * hA[p * 2 + q] + fb * hB[p * 2 + q];
  }
};

// Compares the momentum RHS with the Thm.-style image-based expansion on the interior [0.25, 0.75]^2.
double image_based_oracle_error(std::size_t n) {
  using S = AnalyticScene;
  const GridSpec g{n, n};
  const std::size_t N = 3, nn = g.num_nodes();
  const MultiGaussianKernel k = kKernel3;
  FieldStack h0(N, ScalarField(g));
  VectorField m(g);
  std::vector<std::array<double, 2>> gI(nn), gl(nn);
  std::vector<std::array<double, 4>> hI(nn);
  std::vector<double> lv(nn);
  std::vector<std::vector<double>> gv(N, std::vector<double>(nn));
  std::vector<std::vector<std::array<double, 2>>> ggam(N, std::vector<std::array<double, 2>>(nn)), gh = ggam;
  std::vector<std::vector<std::array<double, 4>>> hh(N, std::vector<std::array<double, 4>>(nn));
  for (std::size_t y = 0; y < nn; ++y) {
    const Point p = g.node_point(y);
    gI[y] = S::dI(p[0], p[1]);
    hI[y] = S::HI(p[0], p[1]);
    lv[y] = S::lam(p[0], p[1]);
    gl[y] = S::dlam(p[0], p[1]);
    std::array<double, 2> mm{lv[y] * gI[y][0], lv[y] * gI[y][1]};
    for (std::size_t i = 0; i < N; ++i) {
      double val;
      S::h(static_cast<int>(i), p[0], p[1], val, gh[i][y], hh[i][y]);
      h0[i][y] = val;
      gv[i][y] = S::gam(static_cast<int>(i), p[0], p[1]);
      ggam[i][y] = S::dgam(static_cast<int>(i), p[0], p[1]);
      for (int c = 0; c < 2; ++c) mm[c] += gv[i][y] * gh[i][y][c];
    }
    m.component(0)[y] = mm[0];
    m.component(1)[y] = mm[1];
  }
  const auto state = initial_state(m, h0);
  const auto rhs = rdmm_rhs(state, k);

  // velocity and q_i from the kernel building blocks
  const auto w = preweights_to_weights(h0, k);
  const auto v = kernel_apply(m, w, k);
  std::vector<ScalarField> q;
  for (std::size_t i = 0; i < N; ++i) {
    ScalarField wm0(g), wm1(g);
    for (std::size_t y = 0; y < nn; ++y) {
      wm0[y] = w[i][y] * m.component(0)[y];
      wm1[y] = w[i][y] * m.component(1)[y];
    }
    const auto nu0 = gauss_conv(wm0, k.sigmas[i]), nu1 = gauss_conv(wm1, k.sigmas[i]);
    ScalarField qi(g);
    for (std::size_t y = 0; y < nn; ++y) qi[y] = m.component(0)[y] * nu0[y] + m.component(1)[y] * nu1[y];
    q.push_back(gauss_conv(qi, k.preweight_sigma));
  }
  ScalarField v0(g), v1(g);
  std::copy(v.component(0).begin(), v.component(0).end(), v0.values.begin());
  std::copy(v.component(1).begin(), v.component(1).end(), v1.values.begin());
  const auto gv0 = gradient(v0), gv1 = gradient(v1);

  double err = 0.0, scale = 0.0;
  for (std::size_t y = 0; y < nn; ++y) {
    const Point p = g.node_point(y);
    const double vv[2] = {v0[y], v1[y]};
    // Dv[k][l] = d v_k / d x_l
    const double Dv[2][2] = {{gv0.component(0)[y], gv0.component(1)[y]}, {gv1.component(0)[y], gv1.component(1)[y]}};
    const double divv = Dv[0][0] + Dv[1][1];
    double minus_mt[2];
    for (int c = 0; c < 2; ++c) {
      // div(lambda v) grad I + lambda grad(grad I . v)
      const double divlv = gl[y][0] * vv[0] + gl[y][1] * vv[1] + lv[y] * divv;
      double grad_Iv = hI[y][c * 2 + 0] * vv[0] + hI[y][c * 2 + 1] * vv[1] + Dv[0][c] * gI[y][0] + Dv[1][c] * gI[y][1];
      double r = divlv * gI[y][c] + lv[y] * grad_Iv;
      for (std::size_t i = 0; i < N; ++i) {
        const double divgv = ggam[i][y][0] * vv[0] + ggam[i][y][1] * vv[1] + gv[i][y] * divv;
        const double grad_hv = hh[i][y][c * 2 + 0] * vv[0] + hh[i][y][c * 2 + 1] * vv[1] + Dv[0][c] * gh[i][y][0] +
                               Dv[1][c] * gh[i][y][1];
        r += (divgv - q[i][y]) * gh[i][y][c] + gv[i][y] * grad_hv;
      }
      minus_mt[c] = r;
    }
    if (p[0] < 0.25 || p[0] > 0.75 || p[1] < 0.25 || p[1] > 0.75) continue;
    for (int c = 0; c < 2; ++c) {
      err = std::max(err, std::abs(rhs.dm.component(c)[y] + minus_mt[c]));
      scale = std::max(scale, std::abs(minus_mt[c]));
    }
  }
  return err / scale;
}

}  // namespace

TEST_CASE("zero momentum is a fixed point") {
  const GridSpec g{24, 24};
  std::mt19937_64 rng(1);
  const auto h0 = random_preweights(g, 3, rng);
  const auto s = initial_state(VectorField(g), h0);
  const auto r = rdmm_rhs(s, kKernel3);
  CHECK(max_abs(r.dm) == 0.0);
  CHECK(max_abs(r.dphi_inv) == 0.0);
  const auto traj = integrate_geodesic(s, kKernel3, {5});
  CHECK(max_abs_diff(traj.final_map(), identity_map(g)) == 0.0);
  CHECK(energy(s, kKernel3) == 0.0);
}

TEST_CASE("current weights") {
  const GridSpec g{65, 65};
  std::mt19937_64 rng(2);
  const auto h0 = random_preweights(g, 3, rng);
  const auto s = initial_state(VectorField(g), h0);
  const auto cw = current_weights(s, kKernel3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(max_abs_diff(cw.h[i], h0[i]) < 1e-15);
  for (std::size_t y = 0; y < g.num_nodes(); ++y) {
    double sum = 0.0;
    for (std::size_t i = 0; i < 3; ++i) sum += cw.h[i][y] * cw.h[i][y];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }

  // spatially constant pre-weights stay put under any map
  auto sc = initial_state(VectorField(g), constant_preweights(g, {0.2, 0.3, 0.5}));
  fill_random(sc.phi_inv, rng, 0.0, 1.0);
  const auto cc = current_weights(sc, kKernel3);
  CHECK(std::abs(cc.h[1][17] - std::sqrt(0.3)) < 1e-15);

  // translation: h(t)(x) = h0(x - a), with h0 given in closed form
  auto analytic_h = [](int i, double x, double y) {
    double val;
    std::array<double, 2> gr;
    std::array<double, 4> he;
    AnalyticScene::h(i, x, y, val, gr, he);
    return val;
  };
  FieldStack ha(3, ScalarField(g));
  for (std::size_t y = 0; y < g.num_nodes(); ++y)
    for (int i = 0; i < 3; ++i) ha[i][y] = analytic_h(i, g.node_point(y)[0], g.node_point(y)[1]);
  const double a0 = 0.05, a1 = -0.03;
  auto st = initial_state(VectorField(g), ha);
  for (std::size_t y = 0; y < g.num_nodes(); ++y) {
    st.phi_inv.component(0)[y] -= a0;
    st.phi_inv.component(1)[y] -= a1;
  }
  const auto ct = current_weights(st, kKernel3);
  double err = 0.0;
  for (std::size_t y = 0; y < g.num_nodes(); ++y) {
    const Point p = g.node_point(y);
    if (p[0] < 0.1 || p[0] > 0.9 || p[1] < 0.1 || p[1] > 0.9) continue;
    for (int i = 0; i < 3; ++i) err = std::max(err, std::abs(ct.h[i][y] - analytic_h(i, p[0] - a0, p[1] - a1)));
  }
  CHECK(err < 1e-3);
}

TEST_CASE("constant weights reduce to EPDiff") {
  const GridSpec g{33, 33};
  const std::vector<double> c_sq{0.2, 0.3, 0.5};
  const auto h0 = constant_preweights(g, c_sq);
  const auto m0 = smooth_momentum(g, 5, 0.15);
  const auto s = initial_state(m0, h0);

  CHECK(std::sqrt(dot(rdmm_source_term(s, kKernel3), rdmm_source_term(s, kKernel3))) < 1e-12);

  const Epdiff ref{kKernel3, c_sq};
  VectorField dm;
  TransformMap dphi;
  ref.rhs(m0, identity_map(g), dm, dphi);
  const auto r = rdmm_rhs(s, kKernel3);
  CHECK(rel_max_diff(r.dm, dm) < 1e-10);

  const auto traj = integrate_geodesic(s, kKernel3, {20});
  const auto phi_ref = ref.shoot(m0, 20);
  CHECK(rel_max_diff(traj.final_map(), phi_ref) < 1e-6);
}

TEST_CASE("momentum RHS agrees with the image-based expansion under refinement") {
  const double e33 = image_based_oracle_error(33);
  const double e65 = image_based_oracle_error(65);
  const double e129 = image_based_oracle_error(129);
  MESSAGE("image-based oracle rel error: 33^2 " << e33 << ", 65^2 " << e65 << ", 129^2 " << e129);
  CHECK(e33 < 5e-2);
  CHECK(e129 < 5e-3);
  CHECK(std::log2(e33 / e65) > 1.7);
  CHECK(std::log2(e65 / e129) > 1.7);
}

TEST_CASE("RK4 self-convergence on the final map") {
  const GridSpec g{33, 33};
  std::mt19937_64 rng(7);
  const auto h0 = random_preweights(g, 3, rng);
  const auto m0 = smooth_momentum(g, 8, 0.15, &h0);
  const auto s = initial_state(m0, h0);
  const auto t10 = integrate_geodesic(s, kKernel3, {10});
  const auto t20 = integrate_geodesic(s, kKernel3, {20});
  const auto t40 = integrate_geodesic(s, kKernel3, {40});
  const double e20 = rel_max_diff(t20.final_map(), t40.final_map());
  const double e10 = rel_max_diff(t10.final_map(), t40.final_map());
  CHECK(e20 < 1e-4);
  CHECK(e10 / e20 > 8.0);
}

TEST_CASE("energy is conserved and quadratic") {
  const GridSpec g{65, 65};
  std::mt19937_64 rng(9);
  const auto h0 = random_preweights(g, 3, rng);
  const auto m0 = smooth_momentum(g, 10, 0.15, &h0);
  const auto s = initial_state(m0, h0);
  const auto traj = integrate_geodesic(s, kKernel3, {20});
  const double e0 = energy(traj.state(0), kKernel3);
  const double e5 = energy(traj.state(10), kKernel3);
  const double e1 = energy(traj.state(20), kKernel3);
  CHECK(e0 > 0.0);
  CHECK(std::abs(e5 - e0) / e0 < 0.01);
  CHECK(std::abs(e1 - e0) / e0 < 0.01);

  VectorField m2 = m0;
  for (auto& v : m2.values) v *= 2;
  CHECK(energy(initial_state(m2, h0), kKernel3) == doctest::Approx(4 * e0).epsilon(1e-12));
}

TEST_CASE("small momenta give positive Jacobians") {
  const GridSpec g{49, 49};
  std::mt19937_64 rng(13);
  const auto h0 = random_preweights(g, 3, rng);
  auto m0 = smooth_momentum(g, 14, 1.0, &h0);
  const auto w = preweights_to_weights(h0, kKernel3);
  const double vmax = max_abs(kernel_apply(m0, w, kKernel3));
  for (auto& v : m0.values) v *= 0.2 / vmax;
  const auto traj = integrate_geodesic(initial_state(m0, h0), kKernel3, {20});
  const auto det = jacobian_determinant(traj.final_map());
  for (std::size_t y = 0; y < g.num_nodes(); ++y) CHECK(det[y] > 0.0);
}

TEST_CASE("blowup is reported with a step index") {
  const GridSpec g{16, 16};
  const auto h0 = constant_preweights(g, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  VectorField m(g);
  m.values[5] = std::nan("");
  CHECK_THROWS_AS(integrate_geodesic(initial_state(m, h0), kKernel3, {4}), IntegrationBlowup);
  CHECK_THROWS_AS(rdmm_rhs(initial_state(m, h0), kKernel3), IntegrationBlowup);
  CHECK_THROWS_AS(integrate_geodesic(initial_state(VectorField(g), h0), kKernel3, {0}), InvalidParameter);
}

TEST_CASE("adjoint of the shooting map matches finite differences") {
  const GridSpec g{14, 15};
  std::mt19937_64 rng(21);
  const auto h0 = random_preweights(g, 3, rng);
  const auto m0 = smooth_momentum(g, 22, 0.1, &h0);
  const IntegratorConfig cfg{4};
  VectorField a(g);
  TransformMap b(g);
  fill_random(a, rng);
  fill_random(b, rng);
  auto J = [&](const VectorField& m, const FieldStack& h) {
    const auto t = integrate_geodesic(initial_state(m, h), kKernel3, cfg);
    return dot(a, t.m.back()) + dot(b, t.final_map());
  };
  const auto traj = integrate_geodesic(initial_state(m0, h0), kKernel3, cfg);
  VectorField gm(g);
  FieldStack gh;
  integrate_geodesic_adjoint(traj, kKernel3, cfg, a, b, gm, &gh);

  const double eps = 1e-5;
  std::uniform_int_distribution<std::size_t> pick_m(0, m0.values.size() - 1), pick_h(0, g.num_nodes() - 1);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t j = pick_m(rng);
    VectorField mp = m0, mm = m0;
    mp.values[j] += eps;
    mm.values[j] -= eps;
    const double fd = (J(mp, h0) - J(mm, h0)) / (2 * eps);
    CHECK(gm.values[j] == doctest::Approx(fd).epsilon(1e-5).scale(1e-2 * max_abs(gm)));
  }
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t i = static_cast<std::size_t>(trial % 3), y = pick_h(rng);
    FieldStack hp = h0, hm = h0;
    hp[i][y] += eps;
    hm[i][y] -= eps;
    const double fd = (J(m0, hp) - J(m0, hm)) / (2 * eps);
    CHECK(gh[i][y] == doctest::Approx(fd).epsilon(1e-5).scale(1e-2 * max_abs(gh[i])));
  }
}

TEST_CASE("weight-pipeline adjoint matches finite differences") {
  const GridSpec g{12, 13};
  std::mt19937_64 rng(31);
  const auto h0 = random_preweights(g, 3, rng);
  auto s = initial_state(smooth_momentum(g, 1, 0.1), h0);
  // keep query points off the grid lines, where bilinear interpolation has kinks
  for (std::size_t y = 0; y < g.num_nodes(); ++y) {
    s.phi_inv.component(0)[y] += 0.013 * std::sin(7.0 * static_cast<double>(y));
    s.phi_inv.component(1)[y] += 0.011 * std::cos(5.0 * static_cast<double>(y));
  }
  FieldStack wb(3, ScalarField(g)), hb(3, ScalarField(g));
  for (auto& f : wb) fill_random(f, rng);
  for (auto& f : hb) fill_random(f, rng);
  auto J = [&](const GeodesicState& st) {
    const auto cw = current_weights(st, kKernel3);
    double acc = 0.0;
    for (std::size_t i = 0; i < 3; ++i) acc += dot(cw.w[i], wb[i]) + dot(cw.h[i], hb[i]);
    return acc;
  };
  FieldStack h0_bar;
  TransformMap phi_bar(g);
  current_weights_vjp(s, kKernel3, wb, &hb, h0_bar, &phi_bar);
  const double eps = 1e-6;
  for (std::size_t y : {5ul, 40ul, 77ul, 120ul}) {
    auto sp = s, sm = s;
    sp.phi_inv.component(1)[y] += eps;
    sm.phi_inv.component(1)[y] -= eps;
    CHECK(phi_bar.component(1)[y] == doctest::Approx((J(sp) - J(sm)) / (2 * eps)).epsilon(1e-6));
    sp = s, sm = s;
    sp.h0[2][y] += eps;
    sm.h0[2][y] -= eps;
    CHECK(h0_bar[2][y] == doctest::Approx((J(sp) - J(sm)) / (2 * eps)).epsilon(1e-6));
  }
}
