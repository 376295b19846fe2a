// Acceptance run: one PASS/FAIL line per criterion, exit status 0 iff all pass.
//
//   rdmm_acceptance            run every criterion
//   rdmm_acceptance 3 6        run a subset
//
// The lines are also written to acceptance_results.txt in the working directory.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "rdmm/dynamics.hpp"
#include "rdmm/io.hpp"
#include "rdmm/objectives.hpp"
#include "rdmm/optimizer.hpp"
#include "rdmm/pipeline.hpp"
#include "rdmm/synthdata.hpp"
#include "test_util.hpp"

using namespace rdmm;
using namespace rdmm::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double rel_max_diff(const NodeData& a, const NodeData& b) {
  return max_abs_diff(a, b) / std::max(max_abs(b), 1e-300);
}

VectorField smooth_momentum(const GridSpec& g, std::uint64_t seed, double vmax, const FieldStack& h0,
                            const MultiGaussianKernel& k) {
  std::mt19937_64 rng(seed);
  VectorField m(g);
  fill_smooth(m, rng, 1.0);
  const double cur = max_abs(kernel_apply(m, preweights_to_weights(h0, k), k));
  for (auto& v : m.values) v *= vmax / cur;
  return m;
}

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string modes;
  for (const auto& c : gradient_check(16, 1, 5)) {
    const double e = std::max(c.max_rel_error_m0, c.max_rel_error_h0);
    worst = std::max(worst, e);
    modes += fmt(" %s %.2e", to_string(c.mode).c_str(), e);
  }
  const double t = seconds_since(t0);
  return {worst < 1e-4 && t < 60.0, fmt("max rel err %.3e (<1e-4) in %.1f s (<60 s);", worst, t) + modes};
}

Outcome lddmm_special_case() {
  const GridSpec g{33, 33};
  const MultiGaussianKernel k{{0.06, 0.1, 0.16}, 0.05, 2.0};
  const std::vector<double> c_sq{0.2, 0.3, 0.5};
  const FieldStack h0 = constant_preweights(g, c_sq);
  const VectorField m0 = smooth_momentum(g, 5, 0.15, h0, k);
  const GeodesicState s = initial_state(m0, h0);
  const VectorField src = rdmm_source_term(s, k);
  const double src_norm = std::sqrt(dot(src, src));
  const TransformMap phi = integrate_geodesic(s, k, {20}).final_map();
  const TransformMap ref = Epdiff{k, c_sq}.shoot(m0, 20);
  const double err = rel_max_diff(phi, ref);
  return {err < 1e-6 && src_norm < 1e-12,
          fmt("final map rel err vs EPDiff %.3e (<1e-6), source term norm %.3e (<1e-12)", err, src_norm)};
}

struct DriftSurvey {
  double worst_drift = 0.0;           // n_steps = 20
  double worst_order = 1e300;         // successive differences of drift at n = 5, 10, 20
  double worst_order_fine = 1e300;    // same at n = 10, 20, 40
  double worst_raw_ratio = 1e300;     // log2(drift(10) / drift(20))
};

// The drift at fixed n is a time-stepping error plus an O(h^2) spatial floor
// independent of n, so the order comes from successive differences. Below
// about 1e-8 the time-stepping error is dominated by the kinks of bilinear
// interpolation in h0 o phi^{-1}, which is what the finer triple shows.
DriftSurvey drift_survey(double vmax) {
  const GridSpec g{65, 65};
  const MultiGaussianKernel k{{0.06, 0.1, 0.16}, 0.05, 2.0};
  DriftSurvey r;
  for (std::uint64_t draw = 0; draw < 10; ++draw) {
    std::mt19937_64 rng(100 + draw);
    const FieldStack h0 = random_preweights(g, 3, rng);
    const VectorField m0 = smooth_momentum(g, 200 + draw, vmax, h0, k);
    const GeodesicState s = initial_state(m0, h0);
    auto drift = [&](std::size_t n) {
      const auto traj = integrate_geodesic(s, k, {n});
      const double e0 = energy(traj.state(0), k);
      return (energy(traj.state(n), k) - e0) / e0;
    };
    const double d5 = drift(5), d10 = drift(10), d20 = drift(20), d40 = drift(40);
    r.worst_drift = std::max(r.worst_drift, std::abs(d20));
    r.worst_order = std::min(r.worst_order, std::log2(std::abs(d5 - d10) / std::abs(d10 - d20)));
    r.worst_order_fine = std::min(r.worst_order_fine, std::log2(std::abs(d10 - d20) / std::abs(d20 - d40)));
    r.worst_raw_ratio = std::min(r.worst_raw_ratio, std::log2(std::abs(d10) / std::abs(d20)));
  }
  return r;
}

Outcome energy_conservation() {
  const auto t0 = Clock::now();
  const double vmax = SceneParams{}.max_shift;
  const DriftSurvey d = drift_survey(vmax);
  const double t = seconds_since(t0);
  const DriftSurvey big = drift_survey(1.5 * vmax);
  return {d.worst_drift < 0.01 && d.worst_order >= 3.0 && t < 120.0,
          fmt("sup|v0| %.3g: worst drift at n=20 %.3e (<0.01), worst time-stepping order n=5,10,20 %.2f (>=3), "
              "%.1f s (<120 s); n=10,20,40 order %.2f; raw log2 drift(10)/drift(20) %.2f; at sup|v0| %.3g worst "
              "drift %.3e",
              vmax, d.worst_drift, d.worst_order, t, d.worst_order_fine, d.worst_raw_ratio, 1.5 * vmax,
              big.worst_drift)};
}

struct CorpusRun {
  double mean_dice = 0.0, identity_dice = 0.0, seconds = 0.0;
  std::size_t fold_free = 0, pairs = 0;
};

CorpusRun run_corpus(RegistrationMode mode) {
  CorpusRun r;
  const auto t0 = Clock::now();
  const RegistrationConfig cfg = desk_config(mode);
  std::size_t objects = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const ScenePair s = generate_pair(seed, GridSpec{200, 200});
    const auto res = optimize(s.source_image, s.target_image, cfg, nullptr, &s.source_labels, &s.target_labels);
    for (std::size_t j = 0; j < res.metrics.labels.size(); ++j) {
      r.mean_dice += res.metrics.dice[j];
      r.identity_dice += dice(s.source_labels, s.target_labels, res.metrics.labels[j]);
      ++objects;
    }
    if (res.metrics.folds.interior_count == 0) ++r.fold_free;
    ++r.pairs;
    std::fprintf(stderr, "  %s seed %2llu: interior folds %zu, %.1f s elapsed\n", to_string(mode).c_str(),
                 static_cast<unsigned long long>(seed), res.metrics.folds.interior_count, seconds_since(t0));
  }
  r.mean_dice /= static_cast<double>(objects);
  r.identity_dice /= static_cast<double>(objects);
  r.seconds = seconds_since(t0);
  return r;
}

const CorpusRun& joint_corpus() {
  static const CorpusRun r = run_corpus(RegistrationMode::RDMM_JOINT);
  return r;
}

Outcome corpus_diffeomorphy() {
  const CorpusRun& j = joint_corpus();
  return {j.fold_free >= 38, fmt("rdmm-joint pairs without interior folds %zu/%zu (>=38)", j.fold_free, j.pairs)};
}

Outcome corpus_quality() {
  const CorpusRun& j = joint_corpus();
  const CorpusRun l = run_corpus(RegistrationMode::LDDMM);
  const double total = j.seconds + l.seconds;
  const bool pass = j.mean_dice >= 0.85 && j.mean_dice >= j.identity_dice + 0.15 &&
                    std::abs(l.mean_dice - j.mean_dice) <= 0.03;
  return {pass, fmt("mean Dice rdmm-joint %.4f (>=0.85), identity %.4f (joint >= +0.15), lddmm %.4f (|diff| %.4f "
                    "<=0.03); runtime %.1f min for both modes (target <30)",
                    j.mean_dice, j.identity_dice, l.mean_dice, std::abs(l.mean_dice - j.mean_dice), total / 60.0)};
}

struct AdvectionRun {
  double overlap = 0.0, ratio = 0.0;
  bool pass() const { return overlap >= 0.8 && ratio > 3.0; }
};

AdvectionRun advected_regularizer_scene(std::uint64_t seed) {
  SceneParams p;
  p.perturb_outside = false;
  const ScenePair s = generate_pair(seed, GridSpec{200, 200}, p);
  const RegistrationConfig cfg = desk_config(RegistrationMode::RDMM_FIXED_REG);
  const std::vector<double> fg{0.2, 0.5, 0.3, 0.0}, bg{0.0, 0.0, 0.0, 1.0};
  const FieldStack h0 = region_preweights(s, fg, bg, cfg.kernel);
  const auto res = optimize(s.source_image, s.target_image, cfg, &h0, &s.source_labels, &s.target_labels);

  // threshold halfway between the foreground and background sigma(x)
  double var_fg = 0.0, var_bg = 0.0;
  for (std::size_t i = 0; i < fg.size(); ++i) {
    var_fg += fg[i] * cfg.kernel.sigmas[i] * cfg.kernel.sigmas[i];
    var_bg += bg[i] * cfg.kernel.sigmas[i] * cfg.kernel.sigmas[i];
  }
  const double threshold = 0.5 * (std::sqrt(var_fg) + std::sqrt(var_bg));
  ScalarField region(res.std_map_t1.grid);
  for (std::size_t y = 0; y < region.num_nodes(); ++y) region[y] = res.std_map_t1[y] < threshold ? 1.0 : 0.0;

  AdvectionRun r;
  r.overlap = dice(region, s.foreground_mask_target, 1);
  const GridSpec& g = res.phi_inv_final.grid;
  const TransformMap id = identity_map(g);
  double in = 0.0, out = 0.0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t y = 0; y < g.num_nodes(); ++y) {
    double d2 = 0.0;
    for (int c = 0; c < 2; ++c) {
      const double d = res.phi_inv_final.component(c)[y] - id.component(c)[y];
      d2 += d * d;
    }
    if (s.foreground_mask_target[y] > 0.5) {
      in += std::sqrt(d2);
      ++n_in;
    } else {
      out += std::sqrt(d2);
      ++n_out;
    }
  }
  r.ratio = (in / static_cast<double>(n_in)) / std::max(out / static_cast<double>(n_out), 1e-300);
  return r;
}

Outcome advected_regularizer() {
  std::size_t passed = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const AdvectionRun r = advected_regularizer_scene(seed);
    if (r.pass()) ++passed;
    detail += fmt("; seed %llu Dice %.4f ratio %.2f", static_cast<unsigned long long>(seed), r.overlap, r.ratio);
  }
  return {passed >= 4, fmt("static-outside scenes meeting Dice(sigma_t1 region, target foreground) >= 0.8 and "
                           "inside/outside displacement > 3: %zu/5 (>=4)",
                           passed) +
                           detail};
}

Outcome omt_anchors() {
  const GridSpec g{17, 19};
  const MultiGaussianKernel k{{0.02, 0.04, 0.06, 0.08}, 0.05, 2.0};
  FieldStack last(4, ScalarField(g)), first(4, ScalarField(g));
  last[3].values.assign(g.num_nodes(), 1.0);
  first[0].values.assign(g.num_nodes(), 1.0);
  const double a = omt_penalty(last, k), b = omt_penalty(first, k);
  return {std::abs(a) < 1e-12 && std::abs(b - 1.0) < 1e-12,
          fmt("all mass on largest sigma %.3e (0), on smallest sigma %.17g (1)", a, b)};
}

Outcome kernel_oracle() {
  const GridSpec g{33, 33};
  const MultiGaussianKernel k{{0.06, 0.15}, 0.05, 2.0};
  std::mt19937_64 rng(8);
  VectorField m(g);
  fill_random(m, rng);
  FieldStack w(2, ScalarField(g));
  for (auto& wi : w) fill_random(wi, rng, 0.0, 1.0);
  const VectorField v = kernel_apply(m, w, k), ref = kernel_apply_oracle(m, w, k);
  double err = 0.0;
  for (std::size_t j = 0; j < v.values.size(); ++j)
    err = std::max(err, std::abs(v.values[j] - ref.values[j]) / std::max(std::abs(ref.values[j]), 1e-3 * max_abs(ref)));

  const GridSpec g2{24, 28};
  const MultiGaussianKernel k3{{0.03, 0.07, 0.2}, 0.05, 2.0};
  double asym = 0.0, min_quad = 1e300;
  for (int draw = 0; draw < 100; ++draw) {
    FieldStack wd(3, ScalarField(g2));
    for (auto& wi : wd) fill_random(wi, rng, 0.0, 1.0);
    VectorField a(g2), b(g2);
    fill_random(a, rng);
    fill_random(b, rng);
    const double ab = dot(a, kernel_apply(b, wd, k3)), ba = dot(b, kernel_apply(a, wd, k3));
    asym = std::max(asym, std::abs(ab - ba) / std::max(std::abs(ab), 1e-12));
    min_quad = std::min(min_quad, dot(a, kernel_apply(a, wd, k3)));
  }
  return {err < 1e-8 && asym < 1e-10 && min_quad >= 0.0,
          fmt("rel err vs double sum %.3e (<1e-8); 100 draws: max rel asymmetry %.3e, min <a,Ka> %.3e (>=0)", err,
              asym, min_quad)};
}

bool same_bytes(const fs::path& a, const fs::path& b) { return read_file(a) == read_file(b); }

Outcome reproducibility() {
  const fs::path root = fs::temp_directory_path() / "rdmm_acceptance_rerun";
  fs::remove_all(root);
  generate_scene_files(21, 96, SceneParams{}, root / "scene");
  std::size_t runs = 0, identical = 0;
  for (RegistrationMode mode : {RegistrationMode::LDDMM, RegistrationMode::RDMM_FIXED_REG, RegistrationMode::RDMM_JOINT}) {
    RegisterRequest req;
    req.config = desk_config(mode);
    req.config.scales = {{0.5, 10}, {1.0, 3}};
    req.source = root / "scene" / "source.tns";
    req.target = root / "scene" / "target.tns";
    req.labels_source = root / "scene" / "source_labels.tns";
    req.labels_target = root / "scene" / "target_labels.tns";
    if (mode == RegistrationMode::RDMM_FIXED_REG) {
      req.fg_mask = root / "scene" / "source_fg.tns";
      req.fg_h2 = {0.2, 0.5, 0.3, 0.0};
      req.bg_h2 = {0.0, 0.0, 0.0, 1.0};
    }
    const fs::path first = root / (to_string(mode) + "_a"), second = root / (to_string(mode) + "_b");
    req.out_dir = first;
    run_register(req);
    run_register(request_from_manifest(first / "manifest.json", second));
    std::vector<std::string> files = register_output_files();
    files.push_back("manifest.json");
    for (const auto& f : files) {
      ++runs;
      if (same_bytes(first / f, second / f)) ++identical;
    }
  }
  fs::remove_all(root);
  return {identical == runs, fmt("%zu/%zu output files byte-identical over lddmm, rdmm-fixed, rdmm-joint", identical, runs)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "gradient correctness", gradient_correctness},
      {2, "LDDMM special case", lddmm_special_case},
      {3, "energy conservation", energy_conservation},
      {4, "diffeomorphy on the corpus", corpus_diffeomorphy},
      {5, "registration quality on the corpus", corpus_quality},
      {6, "advected regularizer", advected_regularizer},
      {7, "OMT anchors", omt_anchors},
      {8, "kernel oracle equivalence", kernel_oracle},
      {9, "reproducibility from manifest", reproducibility},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  FILE* report = std::fopen("acceptance_results.txt", "w");
  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    for (FILE* f : {stdout, report}) {
      if (!f) continue;
      std::fprintf(f, "[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
      std::fflush(f);
    }
    if (!o.pass) ++failed;
  }
  if (report) std::fclose(report);
  return failed == 0 ? 0 : 1;
}
