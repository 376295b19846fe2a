#pragma once

// File-level pipeline behind the command-line tool: scene generation,
// registration with a JSON manifest, re-runs from a manifest, evaluation.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rdmm/optimizer.hpp"
#include "rdmm/synthdata.hpp"

namespace rdmm {

/// Writes source/target images (.tns and .pgm), label and foreground-mask
/// tensors and manifest.json into out_dir.
void generate_scene_files(std::uint64_t seed, std::size_t size, const SceneParams& params,
                          const std::filesystem::path& out_dir);

struct RegisterRequest {
  RegistrationConfig config;
  std::filesystem::path source, target;
  std::optional<std::filesystem::path> preweights;  // [N, n0, n1] tensor
  std::optional<std::filesystem::path> fg_mask;     // with fg_h2 / bg_h2
  std::vector<double> fg_h2, bg_h2;
  std::optional<std::filesystem::path> labels_source, labels_target;
  std::filesystem::path out_dir;
};

/// Registers and writes phi_inv.tns, warped.tns, warped.pgm, m0.tns, h0.tns,
/// std_map_t0.pgm, std_map_t1.pgm, detjac.pgm, iterations.csv, metrics.csv
/// and manifest.json into out_dir.
RegistrationResult run_register(const RegisterRequest& req);

/// Request recorded in a register manifest; out_dir replaces the recorded one when given.
RegisterRequest request_from_manifest(const std::filesystem::path& manifest,
                                      const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Re-evaluates a result directory against label images; writes eval.csv there.
RegistrationMetrics evaluate_result(const std::filesystem::path& result_dir,
                                    const std::filesystem::path& labels_source,
                                    const std::filesystem::path& labels_target);

/// Output files written by run_register, relative to out_dir.
const std::vector<std::string>& register_output_files();

}  // namespace rdmm
