#include "rdmm/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "rdmm/errors.hpp"

namespace rdmm {

namespace {

constexpr char kMagic[8] = {'R', 'D', 'M', 'M', 'T', 'N', 'S', '1'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t k = 0; k < sizeof(T); ++k) out.push_back(static_cast<std::uint8_t>((v >> (8 * k)) & 0xffu));
}

template <typename T>
T get_le(const std::vector<std::uint8_t>& in, std::size_t& pos, const char* what) {
  if (in.size() - pos < sizeof(T)) throw FormatError(std::string("truncated ") + what, in.size());
  T v = 0;
  for (std::size_t k = 0; k < sizeof(T); ++k) v |= static_cast<T>(static_cast<T>(in[pos + k]) << (8 * k));
  pos += sizeof(T);
  return v;
}

GridSpec grid_from_dims(const std::vector<std::uint64_t>& dims, std::size_t first) {
  std::vector<std::size_t> d;
  for (std::size_t k = first; k < dims.size(); ++k) d.push_back(static_cast<std::size_t>(dims[k]));
  if (d.size() < 2 || d.size() > 3) throw ShapeError("tensor does not describe a 2D or 3D grid");
  for (std::size_t n : d)
    if (n < 2) throw ShapeError("grid axes need at least 2 nodes");
  return GridSpec(std::span<const std::size_t>(d));
}

std::vector<double> as_doubles(const Tensor& t) {
  if (t.dtype == DType::F64) return t.f64;
  return {t.i32.begin(), t.i32.end()};
}

NodeData node_data_from_tensor(const Tensor& t, int components) {
  const bool has_comp_axis = components > 0;
  const GridSpec g = grid_from_dims(t.dims, has_comp_axis ? 1 : 0);
  const int comps = has_comp_axis ? static_cast<int>(t.dims[0]) : 1;
  if (has_comp_axis && comps != g.dim()) throw ShapeError("component count does not match grid dimension");
  NodeData d(g, comps);
  d.values = as_doubles(t);
  return d;
}

// Percentile with linear interpolation between order statistics.
double percentile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return sorted[lo] + f * (sorted[hi] - sorted[lo]);
}

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

std::size_t read_header_uint(const std::vector<std::uint8_t>& in, std::size_t& pos, std::size_t* start = nullptr) {
  while (pos < in.size()) {
    if (in[pos] == '#') {
      while (pos < in.size() && in[pos] != '\n') ++pos;
    } else if (is_space(in[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  if (pos >= in.size()) throw FormatError("truncated PGM header", pos);
  if (in[pos] < '0' || in[pos] > '9') throw FormatError("expected a number in PGM header", pos);
  if (start) *start = pos;
  std::size_t v = 0;
  while (pos < in.size() && in[pos] >= '0' && in[pos] <= '9') {
    v = v * 10 + static_cast<std::size_t>(in[pos] - '0');
    if (v > (1u << 30)) throw FormatError("PGM header value too large", pos);
    ++pos;
  }
  return v;
}

std::uint8_t to_byte(double t) {
  if (!(t > 0.0)) return 0;
  if (t >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::lround(t * 255.0));
}

}  // namespace

std::size_t Tensor::num_values() const {
  std::size_t n = 1;
  for (auto d : dims) n *= static_cast<std::size_t>(d);
  return n;
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  const std::size_t n = t.num_values();
  if ((t.dtype == DType::F64 ? t.f64.size() : t.i32.size()) != n)
    throw ShapeError("tensor payload does not match its dims");
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dtype));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) put_le<std::uint64_t>(out, d);
  out.reserve(out.size() + n * (t.dtype == DType::F64 ? 8 : 4));
  if (t.dtype == DType::F64) {
    for (double v : t.f64) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_le<std::uint64_t>(out, bits);
    }
  } else {
    for (std::int32_t v : t.i32) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw FormatError("truncated magic", bytes.size());
  for (std::size_t k = 0; k < 8; ++k)
    if (bytes[k] != static_cast<std::uint8_t>(kMagic[k])) throw FormatError("bad TensorFile magic", k);
  std::size_t pos = 8;
  Tensor t;
  const std::size_t dtype_pos = pos;
  const auto dtype = get_le<std::uint32_t>(bytes, pos, "dtype");
  if (dtype > 1) throw FormatError("unknown dtype " + std::to_string(dtype), dtype_pos);
  t.dtype = static_cast<DType>(dtype);
  const std::size_t rank_pos = pos;
  const auto rank = get_le<std::uint32_t>(bytes, pos, "rank");
  if (rank == 0 || rank > 8) throw FormatError("unsupported rank " + std::to_string(rank), rank_pos);
  std::size_t n = 1;
  for (std::uint32_t k = 0; k < rank; ++k) {
    const std::size_t dpos = pos;
    const auto d = get_le<std::uint64_t>(bytes, pos, "dims");
    if (d == 0 || d > (std::uint64_t{1} << 32) || n > std::numeric_limits<std::size_t>::max() / d)
      throw FormatError("bad dimension", dpos);
    n *= static_cast<std::size_t>(d);
    t.dims.push_back(d);
  }
  const std::size_t width = t.dtype == DType::F64 ? 8 : 4;
  if ((bytes.size() - pos) / width < n) throw FormatError("truncated payload", bytes.size());
  if (bytes.size() - pos != n * width) throw FormatError("trailing bytes after payload", pos + n * width);
  if (t.dtype == DType::F64) {
    t.f64.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto bits = get_le<std::uint64_t>(bytes, pos, "payload");
      std::memcpy(&t.f64[i], &bits, 8);
    }
  } else {
    t.i32.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      t.i32[i] = static_cast<std::int32_t>(get_le<std::uint32_t>(bytes, pos, "payload"));
  }
  return t;
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) { write_file_atomic(path, encode_tensor(t)); }

Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

Tensor to_tensor(const NodeData& field) {
  Tensor t;
  if (field.components != 1) t.dims.push_back(static_cast<std::uint64_t>(field.components));
  for (int a = 0; a < field.grid.dim(); ++a) t.dims.push_back(field.grid.size(a));
  t.f64 = field.values;
  return t;
}

ScalarField scalar_from_tensor(const Tensor& t) {
  NodeData d = node_data_from_tensor(t, 0);
  ScalarField s(d.grid);
  s.values = std::move(d.values);
  return s;
}

VectorField vector_from_tensor(const Tensor& t) {
  NodeData d = node_data_from_tensor(t, 1);
  VectorField v(d.grid);
  v.values = std::move(d.values);
  return v;
}

TransformMap map_from_tensor(const Tensor& t) {
  NodeData d = node_data_from_tensor(t, 1);
  TransformMap m(d.grid);
  m.values = std::move(d.values);
  return m;
}

Tensor stack_to_tensor(const FieldStack& h) {
  if (h.empty()) throw ShapeError("empty field stack");
  Tensor t;
  t.dims.push_back(h.size());
  for (int a = 0; a < h[0].grid.dim(); ++a) t.dims.push_back(h[0].grid.size(a));
  for (const auto& f : h) {
    require_same_grid(f.grid, h[0].grid, "stack_to_tensor");
    t.f64.insert(t.f64.end(), f.values.begin(), f.values.end());
  }
  return t;
}

FieldStack stack_from_tensor(const Tensor& t) {
  const GridSpec g = grid_from_dims(t.dims, 1);
  const std::vector<double> v = as_doubles(t);
  FieldStack h(static_cast<std::size_t>(t.dims[0]), ScalarField(g));
  for (std::size_t i = 0; i < h.size(); ++i)
    std::copy(v.begin() + static_cast<long>(i * g.num_nodes()), v.begin() + static_cast<long>((i + 1) * g.num_nodes()),
              h[i].values.begin());
  return h;
}

Tensor labels_to_tensor(const ScalarField& labels) {
  Tensor t;
  t.dtype = DType::I32;
  for (int a = 0; a < labels.grid.dim(); ++a) t.dims.push_back(labels.grid.size(a));
  t.i32.reserve(labels.values.size());
  for (double v : labels.values) t.i32.push_back(static_cast<std::int32_t>(std::lround(v)));
  return t;
}

std::vector<std::uint8_t> encode_pgm(const PgmImage& img) {
  if (img.maxval == 0 || img.maxval > 65535) throw InvalidParameter("PGM maxval must be in [1, 65535]");
  if (img.pixels.size() != img.width * img.height) throw ShapeError("PGM pixel count does not match its size");
  const std::string header =
      "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n" + std::to_string(img.maxval) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const bool wide = img.maxval > 255;
  for (std::uint16_t p : img.pixels) {
    const std::uint16_t v = std::min<std::uint16_t>(p, static_cast<std::uint16_t>(img.maxval));
    if (wide) out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xffu));
  }
  return out;
}

PgmImage decode_pgm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError("not a binary PGM (P5)", 0);
  std::size_t pos = 2;
  PgmImage img;
  std::size_t width_pos = 0, maxval_pos = 0;
  img.width = read_header_uint(bytes, pos, &width_pos);
  img.height = read_header_uint(bytes, pos);
  const std::size_t maxval = read_header_uint(bytes, pos, &maxval_pos);
  if (img.width == 0 || img.height == 0) throw FormatError("empty PGM", width_pos);
  if (maxval == 0 || maxval > 65535) throw FormatError("PGM maxval out of range", maxval_pos);
  img.maxval = static_cast<std::uint32_t>(maxval);
  if (pos >= bytes.size() || !is_space(bytes[pos])) throw FormatError("missing whitespace after PGM maxval", pos);
  ++pos;
  const std::size_t n = img.width * img.height, width = maxval > 255 ? 2 : 1;
  if ((bytes.size() - pos) / width < n) throw FormatError("truncated PGM raster", bytes.size());
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint16_t v = bytes[pos++];
    if (width == 2) v = static_cast<std::uint16_t>((v << 8) | bytes[pos++]);
    if (v > maxval) throw FormatError("PGM sample exceeds maxval", pos - width);
    img.pixels[i] = v;
  }
  return img;
}

ScalarField pgm_to_field(const PgmImage& img) {
  if (img.width < 2 || img.height < 2) throw ShapeError("image needs at least 2x2 pixels");
  ScalarField f(GridSpec{img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) f[i] = static_cast<double>(img.pixels[i]);
  return f;
}

ScalarField normalize_intensity(const ScalarField& image) {
  std::vector<double> s = image.values;
  if (s.empty()) return image;
  std::sort(s.begin(), s.end());
  const double lo = percentile(s, 0.001), hi = percentile(s, 0.999);
  ScalarField out(image.grid);
  if (!(hi > lo)) return out;
  for (std::size_t y = 0; y < out.num_nodes(); ++y) out[y] = std::clamp((image[y] - lo) / (hi - lo), 0.0, 1.0);
  return out;
}

ScalarField read_field(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return pgm_to_field(decode_pgm(bytes));
  return scalar_from_tensor(decode_tensor(bytes));
}

ScalarField read_image(const std::filesystem::path& path) { return normalize_intensity(read_field(path)); }

void write_image(const std::filesystem::path& path, const ScalarField& image) {
  if (path.extension() != ".pgm") {
    write_tensor(path, to_tensor(image));
    return;
  }
  if (image.grid.dim() != 2) throw ShapeError("PGM output needs a 2D image");
  PgmImage img;
  img.height = image.grid.size(0);
  img.width = image.grid.size(1);
  img.maxval = 65535;
  img.pixels.resize(image.num_nodes());
  for (std::size_t y = 0; y < image.num_nodes(); ++y) {
    const double v = std::isfinite(image[y]) ? std::clamp(image[y], 0.0, 1.0) : 0.0;
    img.pixels[y] = static_cast<std::uint16_t>(std::lround(v * 65535.0));
  }
  write_file_atomic(path, encode_pgm(img));
}

PgmImage render(const ScalarField& field, RenderKind kind, const MultiGaussianKernel* kernel) {
  if (field.grid.dim() != 2) throw ShapeError("renders need a 2D field");
  PgmImage img;
  img.height = field.grid.size(0);
  img.width = field.grid.size(1);
  img.maxval = 255;
  img.pixels.resize(field.num_nodes());
  double lo = 0.0, hi = 1.0;
  switch (kind) {
    case RenderKind::GRAY: {
      const auto [mn, mx] = std::minmax_element(field.values.begin(), field.values.end());
      lo = *mn;
      hi = *mx;
      break;
    }
    case RenderKind::SIGNED: {
      double a = 0.0;
      for (double v : field.values) a = std::max(a, std::abs(v));
      lo = -a;
      hi = a;
      break;
    }
    case RenderKind::STD_MAP:
      if (!kernel || kernel->sigmas.empty()) throw InvalidParameter("std_map render needs the kernel sigmas");
      lo = kernel->sigmas.front();
      hi = kernel->sigmas.back();
      break;
    case RenderKind::DETJAC:
      lo = 0.0;
      hi = 2.0;
      break;
  }
  for (std::size_t y = 0; y < field.num_nodes(); ++y) {
    double t;
    if (hi > lo) {
      t = (field[y] - lo) / (hi - lo);
    } else {
      t = kind == RenderKind::SIGNED ? 0.5 : 0.0;
    }
    img.pixels[y] = to_byte(t);
  }
  return img;
}

void render_figure(const ScalarField& field, RenderKind kind, const std::filesystem::path& path,
                   const MultiGaussianKernel* kernel) {
  write_file_atomic(path, encode_pgm(render(field, kind, kernel)));
}

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::general, 17);
  return {buf, res.ptr};
}

std::string iteration_csv(const std::vector<IterationRecord>& rows) {
  std::string out = "iteration,total,sim,kinetic,omt,range,step_size\n";
  for (const auto& r : rows) {
    out += std::to_string(r.iteration);
    for (double v : {r.value.total, r.value.sim, r.value.kinetic, r.value.omt, r.value.range, r.step_size}) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

std::string metrics_csv(const RegistrationMetrics& m) {
  std::string out = "metric,label,value\n";
  for (std::size_t k = 0; k < m.labels.size(); ++k)
    out += "dice," + std::to_string(m.labels[k]) + "," + format_double(m.dice[k]) + "\n";
  out += "fold_count,," + std::to_string(m.folds.count) + "\n";
  out += "fold_interior_count,," + std::to_string(m.folds.interior_count) + "\n";
  out += "fold_mass,," + format_double(m.folds.mass) + "\n";
  out += "energy_drift,," + format_double(m.energy_drift) + "\n";
  return out;
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::filesystem::filesystem_error("cannot open for writing", tmp, std::make_error_code(std::errc::io_error));
    f.write(reinterpret_cast<const char*>(contents.data()), static_cast<std::streamsize>(contents.size()));
    if (!f) throw std::filesystem::filesystem_error("write failed", tmp, std::make_error_code(std::errc::io_error));
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  write_file_atomic(path, std::vector<std::uint8_t>(contents.begin(), contents.end()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::filesystem::filesystem_error("cannot open for reading", path, std::make_error_code(std::errc::no_such_file_or_directory));
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace rdmm
