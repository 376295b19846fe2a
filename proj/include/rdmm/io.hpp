#pragma once

// File formats: TensorFile (binary arrays), PGM images, CSV logs, JSON
// manifests, and grayscale renders of fields.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rdmm/field.hpp"
#include "rdmm/kernels.hpp"
#include "rdmm/optimizer.hpp"

namespace rdmm {

enum class DType : std::uint32_t { F64 = 0, I32 = 1 };

/// "RDMMTNS1", u32 dtype, u32 rank, u64 dims[rank], row-major payload; all little endian.
struct Tensor {
  DType dtype = DType::F64;
  std::vector<std::uint64_t> dims;
  std::vector<double> f64;
  std::vector<std::int32_t> i32;

  std::size_t num_values() const;
};

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
/// Throws FormatError with the byte offset of the first inconsistency.
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

/// Fields map to tensors of shape [components, n0, n1(, n2)], scalars to [n0, n1(, n2)].
Tensor to_tensor(const NodeData& field);
ScalarField scalar_from_tensor(const Tensor& t);
VectorField vector_from_tensor(const Tensor& t);
TransformMap map_from_tensor(const Tensor& t);
/// Pre-weights are stored as a [N, n0, n1] tensor.
Tensor stack_to_tensor(const FieldStack& h);
FieldStack stack_from_tensor(const Tensor& t);

/// Integer label image as an i32 tensor (values rounded).
Tensor labels_to_tensor(const ScalarField& labels);

struct PgmImage {
  std::size_t width = 0, height = 0;
  std::uint32_t maxval = 255;
  std::vector<std::uint16_t> pixels;  // row-major, height rows
};

std::vector<std::uint8_t> encode_pgm(const PgmImage& img);
PgmImage decode_pgm(const std::vector<std::uint8_t>& bytes);

/// Rows map to axis 0, columns to axis 1.
ScalarField pgm_to_field(const PgmImage& img);

/// Maps the 0.1th and 99.9th percentiles (linear interpolation between order
/// statistics) to 0 and 1 and clamps; all zeros when the two coincide.
ScalarField normalize_intensity(const ScalarField& image);

/// PGM or TensorFile by magic bytes, normalized with normalize_intensity.
ScalarField read_image(const std::filesystem::path& path);
/// Raw scalar field (TensorFile or PGM grey levels), no normalization.
ScalarField read_field(const std::filesystem::path& path);
/// ".pgm" writes 16-bit grey levels of the image clamped to [0,1]; anything else a TensorFile.
void write_image(const std::filesystem::path& path, const ScalarField& image);

enum class RenderKind { GRAY, SIGNED, STD_MAP, DETJAC };

/// 8-bit render. gray: [min,max]; signed: [-a,a] with a = max|x|; std_map:
/// [sigma_0, sigma_{N-1}]; detjac: [0,2]. Values outside are clamped.
PgmImage render(const ScalarField& field, RenderKind kind, const MultiGaussianKernel* kernel = nullptr);
void render_figure(const ScalarField& field, RenderKind kind, const std::filesystem::path& path,
                   const MultiGaussianKernel* kernel = nullptr);

/// Decimal with 17 significant digits, locale independent.
std::string format_double(double x);

/// Columns: iteration, total, sim, kinetic, omt, range, step_size.
std::string iteration_csv(const std::vector<IterationRecord>& rows);
/// Columns metric,label,value: one dice row per label, then fold_count,
/// fold_interior_count, fold_mass and energy_drift rows.
std::string metrics_csv(const RegistrationMetrics& m);

/// Writes to a sibling temporary file and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& contents);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace rdmm
