#include "rdmm/pipeline.hpp"

#include <algorithm>

#include <json.hpp>

#include "rdmm/errors.hpp"
#include "rdmm/io.hpp"

namespace rdmm {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json params_json(const SceneParams& p) {
  return {{"max_shift", p.max_shift},     {"min_scale", p.min_scale},     {"max_scale", p.max_scale},
          {"max_rotation", p.max_rotation}, {"max_outside", p.max_outside}, {"perturb_outside", p.perturb_outside},
          {"max_retries", p.max_retries}};
}

json breakdown_json(const ObjectiveBreakdown& v) {
  return {{"total", v.total}, {"sim", v.sim}, {"kinetic", v.kinetic}, {"omt", v.omt}, {"range", v.range}};
}

json metrics_json(const RegistrationMetrics& m) {
  json dice = json::array();
  for (std::size_t k = 0; k < m.labels.size(); ++k) dice.push_back({{"label", m.labels[k]}, {"dice", m.dice[k]}});
  return {{"dice", dice},
          {"fold_count", m.folds.count},
          {"fold_interior_count", m.folds.interior_count},
          {"fold_mass", m.folds.mass},
          {"energy_drift", m.energy_drift}};
}

std::string abs_str(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("bad manifest: ") + e.what(), e.byte);
  }
}

}  // namespace

void generate_scene_files(std::uint64_t seed, std::size_t size, const SceneParams& params, const fs::path& out_dir) {
  const ScenePair s = generate_pair(seed, GridSpec{size, size}, params);
  fs::create_directories(out_dir);
  const std::vector<std::string> files = {"source.tns",        "target.tns",        "source.pgm",
                                          "target.pgm",        "source_labels.tns", "target_labels.tns",
                                          "source_fg.tns",     "target_fg.tns"};
  write_image(out_dir / files[0], s.source_image);
  write_image(out_dir / files[1], s.target_image);
  write_image(out_dir / files[2], s.source_image);
  write_image(out_dir / files[3], s.target_image);
  write_tensor(out_dir / files[4], labels_to_tensor(s.source_labels));
  write_tensor(out_dir / files[5], labels_to_tensor(s.target_labels));
  write_tensor(out_dir / files[6], labels_to_tensor(s.foreground_mask_source));
  write_tensor(out_dir / files[7], labels_to_tensor(s.foreground_mask_target));

  json shapes = json::array();
  for (std::size_t k = 0; k < s.source_shapes.size(); ++k) {
    const auto& a = s.source_shapes[k];
    const auto& b = s.target_shapes[k];
    auto pose = [](const ShapeSpec& p) {
      return json{{"cx", p.cx}, {"cy", p.cy}, {"a", p.a}, {"b", p.b}, {"rotation", p.rotation}};
    };
    shapes.push_back({{"label", a.label},
                      {"kind", to_string(a.kind)},
                      {"intensity", a.intensity},
                      {"source", pose(a)},
                      {"target", pose(b)}});
  }
  write_json(out_dir / "manifest.json", {{"command", "gen"},
                                         {"seed", seed},
                                         {"size", size},
                                         {"params", params_json(params)},
                                         {"shapes", shapes},
                                         {"outputs", files}});
}

const std::vector<std::string>& register_output_files() {
  static const std::vector<std::string> files = {"phi_inv.tns",    "warped.tns",     "warped.pgm",
                                                 "m0.tns",         "h0.tns",         "std_map_t0.pgm",
                                                 "std_map_t1.pgm", "detjac.pgm",     "iterations.csv",
                                                 "metrics.csv"};
  return files;
}

RegistrationResult run_register(const RegisterRequest& req) {
  const RegistrationConfig& cfg = req.config;
  cfg.validate();
  const ScalarField I0 = read_image(req.source);
  const ScalarField I1 = read_image(req.target);
  require_same_grid(I0.grid, I1.grid, "register images");

  std::optional<FieldStack> h0;
  if (req.preweights) {
    h0 = stack_from_tensor(read_tensor(*req.preweights));
  } else if (req.fg_mask) {
    h0 = region_preweights(read_field(*req.fg_mask), req.fg_h2, req.bg_h2, cfg.kernel);
  }
  if (cfg.mode == RegistrationMode::RDMM_FIXED_REG && !h0)
    throw InvalidParameter("rdmm-fixed mode needs --preweights or --fg-mask with --fg-h2/--bg-h2");

  std::optional<ScalarField> l0, l1;
  if (req.labels_source && req.labels_target) {
    l0 = read_field(*req.labels_source);
    l1 = read_field(*req.labels_target);
  }

  const RegistrationResult res = optimize(I0, I1, cfg, h0 ? &*h0 : nullptr, l0 ? &*l0 : nullptr, l1 ? &*l1 : nullptr);

  const fs::path& out = req.out_dir;
  fs::create_directories(out);
  const auto& files = register_output_files();
  write_tensor(out / files[0], to_tensor(res.phi_inv_final));
  write_tensor(out / files[1], to_tensor(res.warped));
  write_image(out / files[2], res.warped);
  write_tensor(out / files[3], to_tensor(res.m0));
  write_tensor(out / files[4], stack_to_tensor(res.h0));
  render_figure(res.std_map_t0, RenderKind::STD_MAP, out / files[5], &cfg.kernel);
  render_figure(res.std_map_t1, RenderKind::STD_MAP, out / files[6], &cfg.kernel);
  render_figure(jacobian_determinant(res.phi_inv_final), RenderKind::DETJAC, out / files[7]);
  write_file_atomic(out / files[8], iteration_csv(res.per_iteration));
  write_file_atomic(out / files[9], metrics_csv(res.metrics));

  json inputs = {{"source", abs_str(req.source)}, {"target", abs_str(req.target)}};
  if (req.preweights) inputs["preweights"] = abs_str(*req.preweights);
  if (req.fg_mask) {
    inputs["fg_mask"] = abs_str(*req.fg_mask);
    inputs["fg_h2"] = req.fg_h2;
    inputs["bg_h2"] = req.bg_h2;
  }
  if (l0) {
    inputs["labels_source"] = abs_str(*req.labels_source);
    inputs["labels_target"] = abs_str(*req.labels_target);
  }
  json iterations = json::array();
  for (const auto& r : res.per_iteration) {
    json row = breakdown_json(r.value);
    row["iteration"] = r.iteration;
    row["scale"] = r.scale;
    row["step_size"] = r.step_size;
    iterations.push_back(std::move(row));
  }
  write_json(out / "manifest.json", {{"command", "register"},
                                     {"config", json::parse(config_to_json(cfg))},
                                     {"inputs", inputs},
                                     {"outputs", files},
                                     {"per_iteration", iterations},
                                     {"metrics", metrics_json(res.metrics)},
                                     {"status", res.status}});
  return res;
}

RegisterRequest request_from_manifest(const fs::path& manifest, const std::optional<fs::path>& out_dir) {
  const json j = read_json(manifest);
  try {
    if (j.at("command") != "register") throw InvalidParameter("manifest is not from a register run");
    RegisterRequest req;
    req.config = config_from_json(j.at("config").dump());
    const json& in = j.at("inputs");
    req.source = in.at("source").get<std::string>();
    req.target = in.at("target").get<std::string>();
    if (in.contains("preweights")) req.preweights = in.at("preweights").get<std::string>();
    if (in.contains("fg_mask")) {
      req.fg_mask = in.at("fg_mask").get<std::string>();
      req.fg_h2 = in.at("fg_h2").get<std::vector<double>>();
      req.bg_h2 = in.at("bg_h2").get<std::vector<double>>();
    }
    if (in.contains("labels_source")) {
      req.labels_source = in.at("labels_source").get<std::string>();
      req.labels_target = in.at("labels_target").get<std::string>();
    }
    req.out_dir = out_dir ? *out_dir : manifest.parent_path();
    return req;
  } catch (const json::exception& e) {
    throw InvalidParameter(std::string("bad manifest field: ") + e.what());
  }
}

RegistrationMetrics evaluate_result(const fs::path& result_dir, const fs::path& labels_source,
                                    const fs::path& labels_target) {
  const RegisterRequest req = request_from_manifest(result_dir / "manifest.json", result_dir);
  const TransformMap phi = map_from_tensor(read_tensor(result_dir / "phi_inv.tns"));
  const VectorField m0 = vector_from_tensor(read_tensor(result_dir / "m0.tns"));
  const FieldStack h0 = stack_from_tensor(read_tensor(result_dir / "h0.tns"));
  const ScalarField l0 = read_field(labels_source);
  const ScalarField l1 = read_field(labels_target);
  require_same_grid(l0.grid, phi.grid, "eval labels");
  require_same_grid(l1.grid, phi.grid, "eval labels");

  RegistrationMetrics m;
  const ScalarField warped = compose_nearest(l0, phi);
  std::vector<int> ids = label_ids(l0);
  for (int id : label_ids(l1))
    if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  for (int id : ids) {
    m.labels.push_back(id);
    m.dice.push_back(dice(warped, l1, id));
  }
  m.folds = fold_measure(phi);
  m.energy_drift = shooting_energy_drift(m0, h0, req.config);
  write_file_atomic(result_dir / "eval.csv", metrics_csv(m));
  return m;
}

}  // namespace rdmm
