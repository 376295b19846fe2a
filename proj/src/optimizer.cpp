#include "rdmm/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <set>

#include <json.hpp>

#include "rdmm/errors.hpp"

namespace rdmm {

using json = nlohmann::json;

std::string to_string(RegistrationMode mode) {
  switch (mode) {
    case RegistrationMode::LDDMM: return "lddmm";
    case RegistrationMode::RDMM_FIXED_REG: return "rdmm-fixed";
    case RegistrationMode::RDMM_JOINT: return "rdmm-joint";
  }
  return "?";
}

RegistrationMode registration_mode_from_string(const std::string& s) {
  if (s == "lddmm") return RegistrationMode::LDDMM;
  if (s == "rdmm-fixed") return RegistrationMode::RDMM_FIXED_REG;
  if (s == "rdmm-joint") return RegistrationMode::RDMM_JOINT;
  throw InvalidParameter("unknown registration mode '" + s + "'");
}

std::string to_string(DescentMethod method) {
  return method == DescentMethod::LBFGS ? "lbfgs" : "gd";
}

DescentMethod descent_method_from_string(const std::string& s) {
  if (s == "lbfgs") return DescentMethod::LBFGS;
  if (s == "gd") return DescentMethod::GRADIENT;
  throw InvalidParameter("unknown descent method '" + s + "'");
}

void RegistrationConfig::validate() const {
  if (scales.empty()) throw InvalidParameter("at least one scale level is required");
  for (std::size_t l = 0; l < scales.size(); ++l) {
    const auto& s = scales[l];
    if (!(s.factor > 0.0 && s.factor <= 1.0)) throw InvalidParameter("scale factors must lie in (0, 1]");
    if (l > 0 && !(s.factor > scales[l - 1].factor)) throw InvalidParameter("scale factors must ascend");
    if (s.iterations < 1) throw InvalidParameter("iteration counts must be >= 1");
  }
  kernel.validate();
  penalties.validate(kernel.size());
  similarity.validate();
  if (integrator.n_steps < 1) throw InvalidParameter("n_steps must be >= 1");
  const auto& o = optimizer;
  if (!(o.step_size > 0.0)) throw InvalidParameter("step_size must be positive");
  if (!(o.shrink > 0.0 && o.shrink < 1.0)) throw InvalidParameter("shrink must lie in (0, 1)");
  if (!(o.armijo > 0.0 && o.armijo < 1.0)) throw InvalidParameter("armijo must lie in (0, 1)");
  if (!(o.grad_tol >= 0.0)) throw InvalidParameter("grad_tol must be nonnegative");
  if (!(o.preweight_step_scale > 0.0)) throw InvalidParameter("preweight_step_scale must be positive");
  if (o.lbfgs_memory < 1) throw InvalidParameter("lbfgs_memory must be >= 1");
  if (!(lambda_kin >= 0.0)) throw InvalidParameter("lambda_kin must be nonnegative");
  if (!(min_kernel_nodes >= 0.0)) throw InvalidParameter("min_kernel_nodes must be nonnegative");
}

RegistrationConfig default_config(RegistrationMode mode) {
  RegistrationConfig cfg;
  cfg.mode = mode;
  if (mode == RegistrationMode::RDMM_FIXED_REG) {
    cfg.kernel.sigmas = {0.03, 0.06, 0.09, 0.3};
    cfg.kernel.preweight_sigma = 0.02;
    cfg.penalties.w0_sq = {0.0, 0.0, 0.0, 1.0};
    cfg.scales = {{0.25, 60}, {0.5, 60}, {1.0, 60}};
  } else {
    cfg.kernel.sigmas = {0.02, 0.04, 0.06, 0.08};
    cfg.kernel.preweight_sigma = 0.05;
    cfg.penalties.w0_sq = {0.1, 0.3, 0.3, 0.3};
    cfg.scales = {{0.25, 100}, {0.5, 100}, {1.0, 400}};
  }
  cfg.penalties.C_omt = 0.05;
  cfg.penalties.C_range = 10.0;
  cfg.penalties.K_decay = 10.0;
  return cfg;
}

RegistrationConfig desk_config(RegistrationMode mode) {
  RegistrationConfig cfg = default_config(mode);
  if (mode == RegistrationMode::RDMM_FIXED_REG) {
    cfg.scales = {{0.25, 60}, {0.5, 10}};
  } else {
    cfg.scales = {{0.25, 100}, {0.5, 10}};
  }
  cfg.integrator.n_steps = 5;
  return cfg;
}

std::string config_to_json(const RegistrationConfig& cfg) {
  json j;
  j["mode"] = to_string(cfg.mode);
  j["scales"] = json::array();
  for (const auto& s : cfg.scales) j["scales"].push_back({{"factor", s.factor}, {"iterations", s.iterations}});
  j["kernel"] = {{"sigmas", cfg.kernel.sigmas},
                 {"preweight_sigma", cfg.kernel.preweight_sigma},
                 {"omt_power", cfg.kernel.omt_power}};
  j["penalties"] = {{"C_omt", cfg.penalties.C_omt},
                    {"C_range", cfg.penalties.C_range},
                    {"K_decay", cfg.penalties.K_decay},
                    {"w0_sq", cfg.penalties.w0_sq}};
  json windows = json::array();
  for (const auto& w : cfg.similarity.windows) windows.push_back({{"size", w.size}, {"weight", w.weight}});
  j["similarity"] = {{"kind", to_string(cfg.similarity.kind)}, {"windows", windows}, {"eps", cfg.similarity.eps}};
  j["integrator"] = {{"n_steps", cfg.integrator.n_steps}};
  const auto& o = cfg.optimizer;
  j["optimizer"] = {{"method", to_string(o.method)},
                    {"step_size", o.step_size},
                    {"grad_tol", o.grad_tol},
                    {"shrink", o.shrink},
                    {"armijo", o.armijo},
                    {"max_backtracks", o.max_backtracks},
                    {"lbfgs_memory", o.lbfgs_memory},
                    {"preweight_step_scale", o.preweight_step_scale},
                    {"precondition", o.precondition},
                    {"reject_folds", o.reject_folds}};
  j["lambda_kin"] = cfg.lambda_kin;
  j["min_kernel_nodes"] = cfg.min_kernel_nodes;
  return j.dump(2);
}

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RegistrationConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("invalid config JSON: ") + e.what(), e.byte);
  }
  try {
    const RegistrationMode mode =
        registration_mode_from_string(j.value("mode", std::string("rdmm-joint")));
    RegistrationConfig cfg = default_config(mode);
    if (j.contains("scales")) {
      cfg.scales.clear();
      for (const auto& s : j.at("scales"))
        cfg.scales.push_back({s.at("factor").get<double>(), s.at("iterations").get<std::size_t>()});
    }
    if (j.contains("kernel")) {
      const auto& k = j.at("kernel");
      read_opt(k, "sigmas", cfg.kernel.sigmas);
      read_opt(k, "preweight_sigma", cfg.kernel.preweight_sigma);
      read_opt(k, "omt_power", cfg.kernel.omt_power);
    }
    if (j.contains("penalties")) {
      const auto& p = j.at("penalties");
      read_opt(p, "C_omt", cfg.penalties.C_omt);
      read_opt(p, "C_range", cfg.penalties.C_range);
      read_opt(p, "K_decay", cfg.penalties.K_decay);
      read_opt(p, "w0_sq", cfg.penalties.w0_sq);
    }
    if (j.contains("similarity")) {
      const auto& s = j.at("similarity");
      if (s.contains("kind")) cfg.similarity.kind = similarity_kind_from_string(s.at("kind").get<std::string>());
      if (s.contains("windows")) {
        cfg.similarity.windows.clear();
        for (const auto& w : s.at("windows"))
          cfg.similarity.windows.push_back({w.at("size").get<std::size_t>(), w.at("weight").get<double>()});
      }
      read_opt(s, "eps", cfg.similarity.eps);
    }
    if (j.contains("integrator")) read_opt(j.at("integrator"), "n_steps", cfg.integrator.n_steps);
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      auto& so = cfg.optimizer;
      if (o.contains("method")) so.method = descent_method_from_string(o.at("method").get<std::string>());
      read_opt(o, "step_size", so.step_size);
      read_opt(o, "grad_tol", so.grad_tol);
      read_opt(o, "shrink", so.shrink);
      read_opt(o, "armijo", so.armijo);
      read_opt(o, "max_backtracks", so.max_backtracks);
      read_opt(o, "lbfgs_memory", so.lbfgs_memory);
      read_opt(o, "preweight_step_scale", so.preweight_step_scale);
      read_opt(o, "precondition", so.precondition);
      read_opt(o, "reject_folds", so.reject_folds);
    }
    read_opt(j, "lambda_kin", cfg.lambda_kin);
    read_opt(j, "min_kernel_nodes", cfg.min_kernel_nodes);
    cfg.validate();
    return cfg;
  } catch (const json::exception& e) {
    throw InvalidParameter(std::string("bad config field: ") + e.what());
  }
}

FoldMeasure fold_measure(const TransformMap& map) {
  const GridSpec& g = map.grid;
  const ScalarField det = jacobian_determinant(map);
  FoldMeasure out;
  double neg = 0.0;
  for (std::size_t y = 0; y < det.num_nodes(); ++y) {
    if (!(det[y] < 0.0)) continue;
    ++out.count;
    neg += det[y];
    const auto idx = g.unravel(y);
    bool interior = true;
    for (int a = 0; a < g.dim(); ++a)
      if (idx[static_cast<std::size_t>(a)] == 0 || idx[static_cast<std::size_t>(a)] + 1 == g.size(a))
        interior = false;
    if (interior) ++out.interior_count;
  }
  out.mass = std::abs(neg) * g.cell_volume();
  return out;
}

double dice(const ScalarField& labels_a, const ScalarField& labels_b, int label_id) {
  require_same_grid(labels_a.grid, labels_b.grid, "dice");
  const double id = static_cast<double>(label_id);
  std::size_t na = 0, nb = 0, nab = 0;
  for (std::size_t y = 0; y < labels_a.num_nodes(); ++y) {
    const bool a = labels_a[y] == id, b = labels_b[y] == id;
    na += a;
    nb += b;
    nab += a && b;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(nab) / static_cast<double>(na + nb);
}

std::vector<int> label_ids(const ScalarField& labels) {
  std::set<int> ids;
  for (double v : labels.values)
    if (v > 0.0) ids.insert(static_cast<int>(std::lround(v)));
  return {ids.begin(), ids.end()};
}

namespace {

void normalize_preweights(FieldStack& h) {
  const std::size_t n = h.front().num_nodes(), N = h.size();
  const double uniform = 1.0 / std::sqrt(static_cast<double>(N));
  for (std::size_t y = 0; y < n; ++y) {
    double r2 = 0.0;
    for (std::size_t i = 0; i < N; ++i) r2 += h[i][y] * h[i][y];
    if (r2 > 0.0) {
      const double inv = 1.0 / std::sqrt(r2);
      for (std::size_t i = 0; i < N; ++i) h[i][y] = std::abs(h[i][y]) * inv;
    } else {
      for (std::size_t i = 0; i < N; ++i) h[i][y] = uniform;
    }
  }
}

void project_tangent(FieldStack& g, const FieldStack& h) {
  const std::size_t n = h.front().num_nodes(), N = h.size();
  for (std::size_t y = 0; y < n; ++y) {
    double r2 = 0.0, dot = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      r2 += h[i][y] * h[i][y];
      dot += g[i][y] * h[i][y];
    }
    if (r2 <= 0.0) continue;
    for (std::size_t i = 0; i < N; ++i) g[i][y] -= h[i][y] * dot / r2;
  }
}

FieldStack resample_stack(const FieldStack& h, const GridSpec& target) {
  FieldStack out;
  for (const auto& hi : h) out.push_back(hi.grid == target ? hi : resample(hi, target));
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
  return s;
}

double max_abs(const double* p, std::size_t n) {
  double m = 0.0;
  for (std::size_t j = 0; j < n; ++j) m = std::max(m, std::abs(p[j]));
  return m;
}

// Optimization variables on one level: x = [m0 components, z_0 .. z_{N-1}],
// with h = |z| / ||z|| pointwise when the pre-weights are free.
// Cells of a 2D map with a non-positive corner determinant, i.e. whose
// bilinear interpolant is not orientation preserving. Other dimensions
// fall back to the nodal central-difference count.
std::size_t count_inverted_cells(const TransformMap& map) {
  const GridSpec& g = map.grid;
  if (g.dim() != 2) return fold_measure(map).interior_count;
  const std::size_t n0 = g.size(0), n1 = g.size(1), n = g.num_nodes();
  const double* p0 = map.values.data();
  const double* p1 = p0 + n;
  auto at = [&](std::size_t i, std::size_t j) { return i * n1 + j; };
  std::size_t count = 0;
  for (std::size_t i = 0; i + 1 < n0; ++i)
    for (std::size_t j = 0; j + 1 < n1; ++j) {
      const std::size_t c[4] = {at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)};
      const bool boundary = i == 0 || j == 0 || i + 2 == n0 || j + 2 == n1;
      for (int k = 0; k < 4; ++k) {
        const std::size_t o = c[k], a = c[(k + 1) % 4], b = c[(k + 3) % 4];
        const double det = (p0[a] - p0[o]) * (p1[b] - p1[o]) - (p1[a] - p1[o]) * (p0[b] - p0[o]);
        if (det < 0.0 || (!boundary && det == 0.0)) {
          ++count;
          break;
        }
      }
    }
  return count;
}

class LevelProblem {
 public:
  struct Eval {
    ForwardPass fp;
    FieldStack h;
    std::size_t inverted_cells = 0;
  };

  LevelProblem(const ScalarField& I0, const ScalarField& I1, const MultiGaussianKernel& kernel,
               const ObjectiveConfig& ocfg, bool joint, FieldStack fixed_h, bool reject_folds)
      : I0_(I0), I1_(I1), kernel_(kernel), ocfg_(ocfg), joint_(joint), fixed_h_(std::move(fixed_h)),
        reject_folds_(reject_folds),
        grid_(I0.grid), n_(grid_.num_nodes()), nm_(n_ * static_cast<std::size_t>(grid_.dim())) {
    ocfg_.regularize_h0 = false;
  }

  std::size_t size() const { return nm_ + (joint_ ? kernel_.size() * n_ : 0); }
  std::size_t momentum_size() const { return nm_; }
  const MultiGaussianKernel& kernel() const { return kernel_; }

  std::vector<double> pack(const VectorField& m, const FieldStack* z) const {
    std::vector<double> x(size());
    std::copy(m.values.begin(), m.values.end(), x.begin());
    if (joint_)
      for (std::size_t i = 0; i < kernel_.size(); ++i)
        std::copy((*z)[i].values.begin(), (*z)[i].values.end(), x.begin() + static_cast<long>(nm_ + i * n_));
    return x;
  }

  VectorField momentum(const std::vector<double>& x) const {
    VectorField m(grid_);
    std::copy(x.begin(), x.begin() + static_cast<long>(nm_), m.values.begin());
    return m;
  }

  FieldStack preweights(const std::vector<double>& x) const {
    if (!joint_) return fixed_h_;
    FieldStack h(kernel_.size(), ScalarField(grid_));
    for (std::size_t i = 0; i < kernel_.size(); ++i)
      for (std::size_t y = 0; y < n_; ++y) h[i][y] = x[nm_ + i * n_ + y];
    normalize_preweights(h);
    return h;
  }

  /// Replaces z by h(z); the objective is unchanged.
  void renormalize(std::vector<double>& x) const {
    if (!joint_) return;
    const FieldStack h = preweights(x);
    for (std::size_t i = 0; i < kernel_.size(); ++i)
      for (std::size_t y = 0; y < n_; ++y) x[nm_ + i * n_ + y] = h[i][y];
  }

  /// With current given, trial points that invert more cells than it are rejected.
  std::optional<Eval> forward(const std::vector<double>& x, const Eval* current = nullptr) const {
    Eval e;
    e.h = preweights(x);
    try {
      e.fp = objective_forward(initial_state(momentum(x), e.h), I0_, I1_, kernel_, ocfg_);
    } catch (const IntegrationBlowup&) {
      return std::nullopt;
    } catch (const NumericalError&) {
      return std::nullopt;
    }
    if (reject_folds_) {
      e.inverted_cells = count_inverted_cells(e.fp.traj.final_map());
      if (current && e.inverted_cells > current->inverted_cells) return std::nullopt;
    }
    return e;
  }

  ObjectiveBreakdown value(const Eval& e, double T) const {
    ObjectiveBreakdown v = e.fp.value;
    if (joint_) {
      const auto reg = weight_penalties(e.h, kernel_, ocfg_.penalties, T);
      v.omt = reg.omt;
      v.range = reg.range;
      v.total += reg.total;
    }
    return v;
  }

  /// Gradient of the similarity and kinetic terms w.r.t. x (the core part).
  struct CoreGradient {
    std::vector<double> g;
    FieldStack h_bar;  // raw, before the z chain
  };

  CoreGradient core_gradient(const Eval& e) const {
    ObjectiveGradient og;
    objective_backward(e.fp, I0_, kernel_, ocfg_, og, joint_);
    CoreGradient out;
    out.g.assign(size(), 0.0);
    std::copy(og.m0.values.begin(), og.m0.values.end(), out.g.begin());
    out.h_bar = std::move(og.h0);
    return out;
  }

  std::vector<double> full_gradient(const CoreGradient& core, const Eval& e, const std::vector<double>& x,
                                    double T) const {
    std::vector<double> g = core.g;
    if (!joint_) return g;
    FieldStack h_bar = core.h_bar;
    weight_penalties(e.h, kernel_, ocfg_.penalties, T, &h_bar);
    const std::size_t N = kernel_.size();
    for (std::size_t y = 0; y < n_; ++y) {
      double r2 = 0.0, proj = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        const double z = x[nm_ + i * n_ + y];
        r2 += z * z;
        proj += h_bar[i][y] * e.h[i][y];
      }
      if (r2 <= 0.0) continue;
      const double r = std::sqrt(r2);
      for (std::size_t i = 0; i < N; ++i) {
        const double z = x[nm_ + i * n_ + y];
        const double s = z > 0.0 ? 1.0 : (z < 0.0 ? -1.0 : 0.0);
        g[nm_ + i * n_ + y] = s * h_bar[i][y] / r - z * proj / r2;
      }
    }
    return g;
  }

 private:
  const ScalarField& I0_;
  const ScalarField& I1_;
  const MultiGaussianKernel& kernel_;
  ObjectiveConfig ocfg_;
  bool joint_;
  FieldStack fixed_h_;
  bool reject_folds_;
  GridSpec grid_;
  std::size_t n_, nm_;
};

// Two-loop recursion around a base inverse Hessian H0 (the descent preconditioner).
class Lbfgs {
 public:
  using Apply = std::function<std::vector<double>(const std::vector<double>&)>;

  explicit Lbfgs(std::size_t memory) : memory_(memory) {}

  void clear() { pairs_.clear(); }
  bool empty() const { return pairs_.empty(); }

  void push(std::vector<double> s, std::vector<double> y) {
    const double sy = dot(s, y);
    if (!(sy > 1e-14 * std::sqrt(dot(s, s) * dot(y, y)))) return;
    pairs_.push_back({std::move(s), std::move(y), 1.0 / sy});
    if (pairs_.size() > memory_) pairs_.pop_front();
  }

  std::vector<double> direction(const std::vector<double>& g, const Apply& h0) const {
    std::vector<double> q = g;
    std::vector<double> alpha(pairs_.size());
    for (std::size_t k = pairs_.size(); k-- > 0;) {
      const auto& p = pairs_[k];
      alpha[k] = p.rho * dot(p.s, q);
      for (std::size_t j = 0; j < q.size(); ++j) q[j] -= alpha[k] * p.y[j];
    }
    double gamma = 1.0;
    if (!pairs_.empty()) {
      const auto& p = pairs_.back();
      const double yhy = dot(p.y, h0(p.y));
      if (yhy > 0.0) gamma = 1.0 / (p.rho * yhy);
    }
    q = h0(q);
    for (double& v : q) v *= gamma;
    for (std::size_t k = 0; k < pairs_.size(); ++k) {
      const auto& p = pairs_[k];
      const double beta = p.rho * dot(p.y, q);
      for (std::size_t j = 0; j < q.size(); ++j) q[j] += (alpha[k] - beta) * p.s[j];
    }
    for (double& v : q) v = -v;
    return q;
  }

 private:
  struct Pair {
    std::vector<double> s, y;
    double rho;
  };
  std::size_t memory_;
  std::deque<Pair> pairs_;
};

// Kernel used on a level grid: all sigmas scaled up together when the
// smallest would span fewer than min_nodes grid spacings.
MultiGaussianKernel level_kernel(const MultiGaussianKernel& kernel, const GridSpec& grid, double min_nodes) {
  double h = 0.0;
  for (int a = 0; a < grid.dim(); ++a) h = std::max(h, grid.spacing(a));
  const double floor = min_nodes * h;
  MultiGaussianKernel out = kernel;
  if (min_nodes > 0.0 && kernel.sigmas.front() < floor) {
    const double f = floor / kernel.sigmas.front();
    for (double& s : out.sigmas) s *= f;
  }
  return out;
}

struct LevelOutcome {
  std::vector<double> x;
  LevelProblem::Eval eval;
  bool converged = false;
};

LevelOutcome run_level(const LevelProblem& prob, std::vector<double> x, const OptimizerSettings& opt,
                       std::size_t iterations, std::size_t level, std::size_t& T,
                       std::vector<IterationRecord>& log) {
  const std::size_t nm = prob.momentum_size(), nx = prob.size();
  const double zs = opt.preweight_step_scale;

  auto ev = prob.forward(x);
  // A transferred momentum that folds on this grid is shrunk until it does not.
  for (int k = 0; k < 40 && ev && ev->inverted_cells > 0; ++k) {
    for (std::size_t j = 0; j < nm; ++j) x[j] *= 0.8;
    ev = prob.forward(x);
  }
  if (!ev) throw IntegrationBlowup("integration failed at the start of scale " + std::to_string(level), 0);
  LevelOutcome out;
  auto core = prob.core_gradient(*ev);
  log.push_back({T, level, prob.value(*ev, static_cast<double>(T)), 0.0});

  Lbfgs memory(opt.lbfgs_memory);
  // Momentum part smoothed by the kernel at t = 0 when preconditioning.
  const Lbfgs::Apply precond = [&](const std::vector<double>& v) {
    std::vector<double> out(nx);
    if (opt.precondition) {
      const VectorField vm = kernel_apply(prob.momentum(v), ev->fp.weights0.w, prob.kernel());
      std::copy(vm.values.begin(), vm.values.end(), out.begin());
    } else {
      std::copy(v.begin(), v.begin() + static_cast<long>(nm), out.begin());
    }
    for (std::size_t j = nm; j < nx; ++j) out[j] = v[j] * zs;
    return out;
  };
  auto steepest = [&](const std::vector<double>& grad) {
    std::vector<double> d = precond(grad);
    for (double& v : d) v = -v;
    return d;
  };
  bool first = true;
  double alpha_gd = 0.0;

  for (std::size_t it = 0; it < iterations; ++it) {
    const double Td = static_cast<double>(T);
    const double f0 = prob.value(*ev, Td).total;
    const std::vector<double> g = prob.full_gradient(core, *ev, x, Td);
    if (max_abs(g.data(), nx) <= opt.grad_tol) {
      out.converged = true;
      break;
    }

    bool accepted = false;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      std::vector<double> d;
      const bool quasi_newton = opt.method == DescentMethod::LBFGS && !memory.empty();
      d = quasi_newton ? memory.direction(g, precond) : steepest(g);
      double slope = dot(g, d);
      if (!(slope < 0.0)) {
        memory.clear();
        d = steepest(g);
        slope = dot(g, d);
      }
      double alpha;
      if (quasi_newton) {
        alpha = 1.0;
      } else if (first || opt.method == DescentMethod::LBFGS || alpha_gd <= 0.0) {
        double dmax = max_abs(d.data(), nm);
        if (dmax == 0.0) dmax = max_abs(d.data(), nx);
        alpha = dmax > 0.0 ? opt.step_size / dmax : 0.0;
      } else {
        alpha = alpha_gd;
      }
      if (!(alpha > 0.0)) break;

      for (std::size_t b = 0; b <= opt.max_backtracks; ++b) {
        std::vector<double> xt(nx);
        for (std::size_t j = 0; j < nx; ++j) xt[j] = x[j] + alpha * d[j];
        prob.renormalize(xt);
        auto et = prob.forward(xt, &*ev);
        if (et) {
          const double ft = prob.value(*et, Td).total;
          if (ft <= f0 + opt.armijo * alpha * slope) {
            auto core_t = prob.core_gradient(*et);
            if (opt.method == DescentMethod::LBFGS) {
              const std::vector<double> gt = prob.full_gradient(core_t, *et, xt, Td);
              std::vector<double> s(nx), y(nx);
              for (std::size_t j = 0; j < nx; ++j) {
                s[j] = xt[j] - x[j];
                y[j] = gt[j] - g[j];
              }
              memory.push(std::move(s), std::move(y));
            } else {
              alpha_gd = b == 0 ? alpha / opt.shrink : alpha;
            }
            ++T;
            log.push_back({T, level, prob.value(*et, Td), alpha});
            x = std::move(xt);
            ev = std::move(et);
            core = std::move(core_t);
            accepted = true;
            break;
          }
        }
        alpha *= opt.shrink;
      }
      if (!accepted) {
        if (memory.empty()) break;
        memory.clear();
      }
    }
    first = false;
    if (!accepted) {
      out.converged = true;
      break;
    }
  }
  out.x = std::move(x);
  out.eval = std::move(*ev);
  return out;
}

}  // namespace

double shooting_energy_drift(const VectorField& m0, const FieldStack& h0, const RegistrationConfig& cfg) {
  FieldStack h = resample_stack(h0, m0.grid);
  normalize_preweights(h);
  const MultiGaussianKernel kl = level_kernel(cfg.kernel, m0.grid, cfg.min_kernel_nodes);
  const Trajectory traj = integrate_geodesic(initial_state(m0, std::move(h)), kl, cfg.integrator);
  const double e0 = energy(traj.state(0), kl);
  const double e1 = energy(traj.state(traj.size() - 1), kl);
  return e0 > 0.0 ? std::abs(e1 - e0) / e0 : 0.0;
}

GradientPair objective_gradient(const GeodesicState& state0, const ScalarField& I0, const ScalarField& I1,
                                const MultiGaussianKernel& kernel, const ObjectiveConfig& cfg, double T,
                                bool want_h0) {
  ObjectiveGradient og;
  GradientPair out;
  out.value = shooting_objective(state0, I0, I1, kernel, cfg, T, &og, want_h0);
  out.m0 = std::move(og.m0);
  if (want_h0) {
    out.h0 = std::move(og.h0);
    project_tangent(out.h0, state0.h0);
  }
  return out;
}

ScalarField downsample_image(const ScalarField& image, const GridSpec& target) {
  if (image.grid == target) return image;
  double coarse = 0.0, fine = 0.0;
  for (int a = 0; a < target.dim(); ++a) {
    coarse = std::max(coarse, target.spacing(a));
    fine = std::max(fine, image.grid.spacing(a));
  }
  if (coarse <= fine) return resample(image, target);
  return resample(gauss_conv(image, 0.5 * std::sqrt(coarse * coarse - fine * fine)), target);
}

RegistrationResult optimize(const ScalarField& I0, const ScalarField& I1, const RegistrationConfig& cfg,
                            const FieldStack* fixed_h0, const ScalarField* labels0, const ScalarField* labels1) {
  cfg.validate();
  const GridSpec& g = I0.grid;
  require_same_grid(g, I1.grid, "optimize");
  const std::size_t N = cfg.kernel.size();
  const bool joint = cfg.mode == RegistrationMode::RDMM_JOINT;

  FieldStack h0_full;
  if (cfg.mode == RegistrationMode::RDMM_FIXED_REG) {
    if (!fixed_h0) throw InvalidParameter("rdmm-fixed mode requires pre-weights");
    if (fixed_h0->size() != N) throw ShapeError("pre-weight count does not match kernel size");
    for (const auto& h : *fixed_h0) require_same_grid(h.grid, g, "optimize pre-weights");
    for (std::size_t y = 0; y < g.num_nodes(); ++y) {
      double s = 0.0;
      for (const auto& h : *fixed_h0) {
        if (h[y] < 0.0) throw InvalidParameter("pre-weights must be nonnegative");
        s += h[y] * h[y];
      }
      if (std::abs(s - 1.0) > 1e-6) throw InvalidParameter("pre-weights must satisfy sum h_i^2 = 1");
    }
    h0_full = *fixed_h0;
  } else {
    h0_full = constant_preweights(g, cfg.penalties.w0_sq);
  }

  RegistrationResult res;
  std::size_t T = 0;
  VectorField m;
  FieldStack z;
  std::optional<LevelProblem::Eval> last;
  bool converged = false;

  for (std::size_t l = 0; l < cfg.scales.size(); ++l) {
    const GridSpec gl = cfg.scales[l].factor == 1.0 ? g : g.scaled(cfg.scales[l].factor);
    const ScalarField I0l = downsample_image(I0, gl);
    const ScalarField I1l = downsample_image(I1, gl);
    m = l == 0 ? VectorField(gl) : (m.grid == gl ? m : resample(m, gl));
    FieldStack hl;
    if (joint) {
      z = l == 0 ? resample_stack(h0_full, gl) : resample_stack(z, gl);
      normalize_preweights(z);
    } else {
      hl = resample_stack(h0_full, gl);
      if (!(gl == g)) normalize_preweights(hl);
    }

    ObjectiveConfig ocfg;
    ocfg.similarity = cfg.similarity.at_scale(static_cast<double>(gl.size(0) - 1) / static_cast<double>(g.size(0) - 1));
    ocfg.penalties = cfg.penalties;
    ocfg.integrator = cfg.integrator;
    ocfg.lambda_kin = cfg.lambda_kin;
    const MultiGaussianKernel kl = level_kernel(cfg.kernel, gl, cfg.min_kernel_nodes);
    LevelProblem prob(I0l, I1l, kl, ocfg, joint, std::move(hl), cfg.optimizer.reject_folds);

    auto outcome = run_level(prob, prob.pack(m, joint ? &z : nullptr), cfg.optimizer, cfg.scales[l].iterations, l,
                             T, res.per_iteration);
    m = prob.momentum(outcome.x);
    if (joint) z = prob.preweights(outcome.x);
    converged = outcome.converged;
    last = std::move(outcome.eval);
  }

  const TransformMap& phi_l = last->fp.traj.final_map();
  res.phi_inv_final = phi_l.grid == g ? phi_l : resample(phi_l, g);
  res.m0 = m;
  if (joint) {
    res.h0 = resample_stack(z, g);
    normalize_preweights(res.h0);
  } else {
    res.h0 = h0_full;
  }
  res.warped = compose(I0, res.phi_inv_final);

  const FieldStack w0 = preweights_to_weights(res.h0, cfg.kernel);
  res.std_map_t0 = local_std_map(w0, cfg.kernel);
  const GeodesicState s1{VectorField(g), res.phi_inv_final, res.h0, 1.0};
  res.std_map_t1 = local_std_map(current_weights(s1, cfg.kernel).w, cfg.kernel);

  res.metrics.folds = fold_measure(res.phi_inv_final);
  res.metrics.energy_drift = shooting_energy_drift(res.m0, res.h0, cfg);
  if (labels0 && labels1) {
    require_same_grid(labels0->grid, g, "optimize labels");
    require_same_grid(labels1->grid, g, "optimize labels");
    const ScalarField warped_labels = compose_nearest(*labels0, res.phi_inv_final);
    std::set<int> ids;
    for (int id : label_ids(*labels0)) ids.insert(id);
    for (int id : label_ids(*labels1)) ids.insert(id);
    for (int id : ids) {
      res.metrics.labels.push_back(id);
      res.metrics.dice.push_back(dice(warped_labels, *labels1, id));
    }
  }
  res.status = converged ? "converged" : "max_iterations";
  return res;
}

}  // namespace rdmm
