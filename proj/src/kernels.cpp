#include "rdmm/kernels.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <tuple>

#include "rdmm/errors.hpp"

namespace rdmm {

namespace {

using GridKey = std::tuple<int, std::size_t, std::size_t, std::size_t>;

GridKey key_of(const GridSpec& g) {
  return {g.dim(), g.size(0), g.size(1), g.dim() > 2 ? g.size(2) : std::size_t{1}};
}

std::size_t spectrum_size(const GridSpec& g) {
  std::size_t n = 1;
  for (int a = 0; a + 1 < g.dim(); ++a) n *= g.size(a);
  return n * (g.size(g.dim() - 1) / 2 + 1);
}

struct Plans {
  fftw_plan forward = nullptr;
  fftw_plan backward = nullptr;
  Plans() = default;
  Plans(const Plans&) = delete;
  Plans& operator=(const Plans&) = delete;
  ~Plans() {
    if (forward) fftw_destroy_plan(forward);
    if (backward) fftw_destroy_plan(backward);
  }
};

// Plans and Gaussian frequency responses, built once per grid (and sigma).
// FFTW_ESTIMATE keeps plan selection deterministic between runs.
class FftCache {
 public:
  static FftCache& instance() {
    static FftCache cache;
    return cache;
  }

  const Plans& plans(const GridSpec& g) {
    std::lock_guard lock(mutex_);
    auto& slot = plans_[key_of(g)];
    if (!slot) {
      slot = std::make_unique<Plans>();
      int n[3];
      for (int a = 0; a < g.dim(); ++a) n[a] = static_cast<int>(g.size(a));
      std::vector<double> real(g.num_nodes());
      std::vector<std::complex<double>> spec(spectrum_size(g));
      auto* c = reinterpret_cast<fftw_complex*>(spec.data());
      const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
      slot->forward = fftw_plan_dft_r2c(g.dim(), n, real.data(), c, flags);
      slot->backward = fftw_plan_dft_c2r(g.dim(), n, c, real.data(), flags | FFTW_DESTROY_INPUT);
    }
    return *slot;
  }

  std::shared_ptr<const std::vector<double>> response(const GridSpec& g, double sigma) {
    std::lock_guard lock(mutex_);
    auto& slot = responses_[{key_of(g), sigma}];
    if (!slot) slot = std::make_shared<const std::vector<double>>(build_response(g, sigma));
    return slot;
  }

 private:
  static std::vector<double> dft_1d(std::size_t n, double spacing, double sigma, std::size_t count) {
    const auto g = sampled_gaussian(n, spacing, sigma);
    std::vector<double> out(count);
    for (std::size_t k = 0; k < count; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t phase = (j * k) % n;
        acc += g[j] * std::cos(2.0 * std::numbers::pi * static_cast<double>(phase) / static_cast<double>(n));
      }
      out[k] = acc;
    }
    return out;
  }

  static std::vector<double> build_response(const GridSpec& g, double sigma) {
    const int d = g.dim();
    std::vector<std::vector<double>> axes(static_cast<std::size_t>(d));
    for (int a = 0; a < d; ++a) {
      const std::size_t count = a + 1 == d ? g.size(a) / 2 + 1 : g.size(a);
      axes[static_cast<std::size_t>(a)] = dft_1d(g.size(a), g.spacing(a), sigma, count);
    }
    std::vector<double> out(spectrum_size(g));
    const std::size_t last = g.size(d - 1) / 2 + 1;
    if (d == 2) {
      for (std::size_t i = 0; i < g.size(0); ++i)
        for (std::size_t j = 0; j < last; ++j) out[i * last + j] = axes[0][i] * axes[1][j];
    } else {
      for (std::size_t i = 0; i < g.size(0); ++i)
        for (std::size_t j = 0; j < g.size(1); ++j)
          for (std::size_t k = 0; k < last; ++k)
            out[(i * g.size(1) + j) * last + k] = axes[0][i] * axes[1][j] * axes[2][k];
    }
    return out;
  }

  std::mutex mutex_;
  std::map<GridKey, std::unique_ptr<Plans>> plans_;
  std::map<std::pair<GridKey, double>, std::shared_ptr<const std::vector<double>>> responses_;
};

void check_sigma(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidParameter("gaussian sigma must be positive");
}

}  // namespace

void MultiGaussianKernel::validate() const {
  if (sigmas.empty()) throw InvalidParameter("multi-Gaussian kernel needs at least one sigma");
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    if (!(sigmas[i] > 0.0)) throw InvalidParameter("kernel sigmas must be positive");
    if (i > 0 && !(sigmas[i] > sigmas[i - 1])) throw InvalidParameter("kernel sigmas must be strictly increasing");
  }
  if (!(preweight_sigma > 0.0)) throw InvalidParameter("pre-weight sigma must be positive");
  if (!(omt_power > 0.0)) throw InvalidParameter("OMT power must be positive");
}

std::vector<double> sampled_gaussian(std::size_t n, double spacing, double sigma) {
  check_sigma(sigma);
  std::vector<double> g(n);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double dist = static_cast<double>(std::min(j, n - j)) * spacing;
    g[j] = std::exp(-dist * dist / (2.0 * sigma * sigma));
    sum += g[j];
  }
  for (auto& v : g) v /= sum;
  return g;
}

void gauss_conv_inplace(std::span<double> data, const GridSpec& grid, double sigma) {
  check_sigma(sigma);
  if (data.size() != grid.num_nodes()) throw ShapeError("gauss_conv: data size does not match grid");
  auto& cache = FftCache::instance();
  const Plans& plans = cache.plans(grid);
  const auto resp = cache.response(grid, sigma);

  thread_local std::vector<std::complex<double>> spec;
  spec.resize(resp->size());
  auto* c = reinterpret_cast<fftw_complex*>(spec.data());
  fftw_execute_dft_r2c(plans.forward, data.data(), c);
  const double scale = 1.0 / static_cast<double>(grid.num_nodes());
  for (std::size_t k = 0; k < spec.size(); ++k) spec[k] *= (*resp)[k] * scale;
  fftw_execute_dft_c2r(plans.backward, c, data.data());
}

ScalarField gauss_conv(const ScalarField& field, double sigma) {
  ScalarField out = field;
  gauss_conv_inplace(out.values, out.grid, sigma);
  return out;
}

VectorField gauss_conv(const VectorField& field, double sigma) {
  VectorField out = field;
  for (int k = 0; k < out.components; ++k) gauss_conv_inplace(out.component(k), out.grid, sigma);
  return out;
}

FieldStack constant_preweights(const GridSpec& grid, const std::vector<double>& h_sq) {
  FieldStack h;
  for (double s : h_sq) {
    if (s < 0.0) throw InvalidParameter("squared pre-weights must be nonnegative");
    h.emplace_back(grid, std::sqrt(s));
  }
  return h;
}

FieldStack preweights_to_weights(const FieldStack& h, const MultiGaussianKernel& kernel) {
  if (h.size() != kernel.size()) throw ShapeError("pre-weight count does not match kernel size");
  FieldStack w;
  w.reserve(h.size());
  for (const auto& hi : h) w.push_back(gauss_conv(hi, kernel.preweight_sigma));
  return w;
}

VectorField kernel_apply(const VectorField& m, const FieldStack& w, const MultiGaussianKernel& kernel) {
  if (w.size() != kernel.size()) throw ShapeError("weight count does not match kernel size");
  VectorField v(m.grid);
  const std::size_t n = m.num_nodes();
  std::vector<double> buf(n);
  for (std::size_t i = 0; i < w.size(); ++i) {
    require_same_grid(m.grid, w[i].grid, "kernel_apply");
    for (int k = 0; k < m.components; ++k) {
      const auto mk = m.component(k);
      for (std::size_t y = 0; y < n; ++y) buf[y] = w[i][y] * mk[y];
      gauss_conv_inplace(buf, m.grid, kernel.sigmas[i]);
      auto vk = v.component(k);
      for (std::size_t y = 0; y < n; ++y) vk[y] += w[i][y] * buf[y];
    }
  }
  return v;
}

double velocity_norm_sq(const VectorField& m, const VectorField& v) {
  require_same_grid(m.grid, v.grid, "velocity_norm_sq");
  double acc = 0.0;
  for (std::size_t j = 0; j < m.values.size(); ++j) acc += m.values[j] * v.values[j];
  return acc * m.grid.cell_volume();
}

ScalarField local_std_map(const FieldStack& w, const MultiGaussianKernel& kernel) {
  if (w.size() != kernel.size() || w.empty()) throw ShapeError("weight count does not match kernel size");
  ScalarField out(w.front().grid);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double s2 = kernel.sigmas[i] * kernel.sigmas[i];
    for (std::size_t y = 0; y < out.num_nodes(); ++y) out[y] += w[i][y] * w[i][y] * s2;
  }
  for (auto& v : out.values) v = std::sqrt(v);
  return out;
}

}  // namespace rdmm
