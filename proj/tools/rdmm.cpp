// Command-line front end: gen, register, eval, check-grad.
//
// Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rdmm/errors.hpp"
#include "rdmm/io.hpp"
#include "rdmm/optimizer.hpp"
#include "rdmm/pipeline.hpp"

namespace fs = std::filesystem;
using namespace rdmm;

namespace {

constexpr int kUsage = 1, kIo = 2, kNumerical = 3;

struct GenArgs {
  std::uint64_t seed = 0;
  std::size_t size = 200;
  std::string out;
  bool static_outside = false;
};

struct RegisterArgs {
  std::string mode, source, target, preweights, fg_mask, config, labels_source, labels_target, out, from_manifest;
  std::vector<double> fg_h2, bg_h2;
};

struct EvalArgs {
  std::string result, labels_source, labels_target;
};

struct GradArgs {
  std::size_t size = 16;
  std::uint64_t seed = 1;
  std::size_t steps = 5;
};

int run_gen(const GenArgs& a) {
  SceneParams p;
  p.perturb_outside = !a.static_outside;
  generate_scene_files(a.seed, a.size, p, a.out);
  std::cout << "wrote scene " << a.seed << " to " << a.out << "\n";
  return 0;
}

int run_register_cmd(const RegisterArgs& a) {
  RegisterRequest req;
  if (!a.from_manifest.empty()) {
    req = request_from_manifest(a.from_manifest, a.out.empty() ? std::nullopt : std::optional<fs::path>(a.out));
  } else {
    if (a.mode.empty() || a.source.empty() || a.target.empty() || a.out.empty())
      throw CLI::ValidationError("register needs --mode, --source, --target and --out (or --from-manifest)");
    const RegistrationMode mode = registration_mode_from_string(a.mode);
    if (!a.config.empty()) {
      const auto bytes = read_file(a.config);
      req.config = config_from_json(std::string(bytes.begin(), bytes.end()));
    } else {
      req.config = default_config(mode);
    }
    req.config.mode = mode;
    req.source = a.source;
    req.target = a.target;
    if (!a.preweights.empty()) req.preweights = a.preweights;
    if (!a.fg_mask.empty()) {
      req.fg_mask = a.fg_mask;
      req.fg_h2 = a.fg_h2;
      req.bg_h2 = a.bg_h2;
    }
    if (!a.labels_source.empty() != !a.labels_target.empty())
      throw CLI::ValidationError("--labels-source and --labels-target go together");
    if (!a.labels_source.empty()) {
      req.labels_source = a.labels_source;
      req.labels_target = a.labels_target;
    }
    req.out_dir = a.out;
  }
  const RegistrationResult res = run_register(req);
  std::printf("status %s, %zu iterations, interior folds %zu, energy drift %.3g\n", res.status.c_str(),
              res.per_iteration.size(), res.metrics.folds.interior_count, res.metrics.energy_drift);
  for (std::size_t k = 0; k < res.metrics.labels.size(); ++k)
    std::printf("dice label %d: %.4f\n", res.metrics.labels[k], res.metrics.dice[k]);
  return 0;
}

int run_eval(const EvalArgs& a) {
  const RegistrationMetrics m = evaluate_result(a.result, a.labels_source, a.labels_target);
  std::cout << metrics_csv(m);
  return 0;
}

int run_check_grad(const GradArgs& a) {
  const auto checks = gradient_check(a.size, a.seed, a.steps);
  double worst = 0.0;
  for (const auto& c : checks) {
    std::printf("%-11s momentum %zu coords max rel err %.3e", to_string(c.mode).c_str(), c.coordinates,
                c.max_rel_error_m0);
    if (c.directions > 0) std::printf(", pre-weights %zu dirs max rel err %.3e", c.directions, c.max_rel_error_h0);
    std::printf("\n");
    worst = std::max({worst, c.max_rel_error_m0, c.max_rel_error_h0});
  }
  std::printf("max rel error %.3e\n", worst);
  return worst < 1e-4 ? 0 : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Region-specific diffeomorphic metric mapping (RDMM) registration"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a seeded synthetic scene pair");
  g->add_option("--seed", gen.seed, "Scene seed")->required();
  g->add_option("--size", gen.size, "Nodes per axis")->check(CLI::Range(64, 4096));
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_flag("--static-outside", gen.static_outside, "Keep objects outside the container in place");

  RegisterArgs reg;
  auto* r = app.add_subcommand("register", "Register a source image to a target image");
  r->add_option("--mode", reg.mode, "lddmm | rdmm-fixed | rdmm-joint");
  r->add_option("--source", reg.source, "Source image (PGM or TensorFile)");
  r->add_option("--target", reg.target, "Target image (PGM or TensorFile)");
  r->add_option("--preweights", reg.preweights, "Pre-weight tensor [N, n0, n1]");
  auto* fg = r->add_option("--fg-mask", reg.fg_mask, "Foreground mask for region pre-weights");
  r->add_option("--fg-h2", reg.fg_h2, "Foreground squared pre-weights")->delimiter(',')->needs(fg);
  r->add_option("--bg-h2", reg.bg_h2, "Background squared pre-weights")->delimiter(',')->needs(fg);
  r->add_option("--config", reg.config, "Registration config (JSON)");
  r->add_option("--labels-source", reg.labels_source, "Source label image, for Dice metrics");
  r->add_option("--labels-target", reg.labels_target, "Target label image, for Dice metrics");
  r->add_option("--out", reg.out, "Output directory");
  r->add_option("--from-manifest", reg.from_manifest, "Repeat the run recorded in a manifest");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Dice, folds and energy drift of a registration result");
  e->add_option("--result", ev.result, "Result directory of register")->required();
  e->add_option("--labels-source", ev.labels_source, "Source label image")->required();
  e->add_option("--labels-target", ev.labels_target, "Target label image")->required();

  GradArgs gr;
  auto* c = app.add_subcommand("check-grad", "Finite-difference check of the adjoint gradients");
  c->add_option("--size", gr.size, "Nodes per axis")->check(CLI::Range(8, 256));
  c->add_option("--seed", gr.seed, "Scene seed");
  c->add_option("--steps", gr.steps, "Integration steps")->check(CLI::Range(1, 1000));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*g) return run_gen(gen);
    if (*r) return run_register_cmd(reg);
    if (*e) return run_eval(ev);
    if (*c) return run_check_grad(gr);
  } catch (const CLI::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const FormatError& err) {
    std::cerr << "format error: " << err.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "I/O error: " << err.what() << "\n";
    return kIo;
  } catch (const IntegrationBlowup& err) {
    std::cerr << "numerical failure: " << err.what() << "\n";
    return kNumerical;
  } catch (const NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << "\n";
    return kNumerical;
  } catch (const std::invalid_argument& err) {
    std::cerr << "invalid argument: " << err.what() << "\n";
    return kUsage;
  } catch (const GenerationError& err) {
    std::cerr << "generation failed: " << err.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
