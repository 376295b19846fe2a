// Python module _rdmm. Fields cross the boundary as float64 arrays shaped
// [n0, n1] (scalar) or [components, n0, n1] (vector, map, stacks).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>

#include "rdmm/dynamics.hpp"
#include "rdmm/errors.hpp"
#include "rdmm/io.hpp"
#include "rdmm/optimizer.hpp"
#include "rdmm/pipeline.hpp"
#include "rdmm/synthdata.hpp"

namespace py = pybind11;
using namespace rdmm;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const NodeData& f) {
  std::vector<py::ssize_t> shape;
  if (f.components != 1) shape.push_back(f.components);
  for (int a = 0; a < f.grid.dim(); ++a) shape.push_back(static_cast<py::ssize_t>(f.grid.size(a)));
  Array out(shape);
  std::copy(f.values.begin(), f.values.end(), out.mutable_data());
  return out;
}

Array to_array(const FieldStack& h) {
  const GridSpec& g = h.at(0).grid;
  std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(h.size())};
  for (int a = 0; a < g.dim(); ++a) shape.push_back(static_cast<py::ssize_t>(g.size(a)));
  Array out(shape);
  double* p = out.mutable_data();
  for (const auto& f : h) p = std::copy(f.values.begin(), f.values.end(), p);
  return out;
}

GridSpec grid_of(const Array& a, int skip) {
  std::vector<std::size_t> dims;
  for (py::ssize_t i = skip; i < a.ndim(); ++i) dims.push_back(static_cast<std::size_t>(a.shape(i)));
  return GridSpec(std::span<const std::size_t>(dims));
}

ScalarField scalar_from(const Array& a) {
  ScalarField f(grid_of(a, 0));
  std::copy(a.data(), a.data() + f.values.size(), f.values.begin());
  return f;
}

template <class F>
F vector_from(const Array& a) {
  if (a.ndim() < 2) throw ShapeError("expected an array shaped [d, n0, ...]");
  F f(grid_of(a, 1));
  if (static_cast<py::ssize_t>(f.components) != a.shape(0)) throw ShapeError("component count does not match the grid");
  std::copy(a.data(), a.data() + f.values.size(), f.values.begin());
  return f;
}

FieldStack stack_from(const Array& a) {
  if (a.ndim() < 2) throw ShapeError("expected an array shaped [N, n0, ...]");
  const GridSpec g = grid_of(a, 1);
  FieldStack h(static_cast<std::size_t>(a.shape(0)), ScalarField(g));
  const double* p = a.data();
  for (auto& f : h) {
    std::copy(p, p + f.values.size(), f.values.begin());
    p += f.values.size();
  }
  return h;
}

MultiGaussianKernel make_kernel(std::vector<double> sigmas, double preweight_sigma) {
  MultiGaussianKernel k;
  k.sigmas = std::move(sigmas);
  k.preweight_sigma = preweight_sigma;
  k.validate();
  return k;
}

py::dict metrics_dict(const RegistrationMetrics& m) {
  py::dict d;
  d["labels"] = m.labels;
  d["dice"] = m.dice;
  d["fold_count"] = m.folds.count;
  d["fold_interior_count"] = m.folds.interior_count;
  d["fold_mass"] = m.folds.mass;
  d["energy_drift"] = m.energy_drift;
  return d;
}

}  // namespace

PYBIND11_MODULE(_rdmm, mod) {
  mod.doc() = "Region-specific diffeomorphic metric mapping";

  py::register_exception<InvalidParameter>(mod, "InvalidParameter", PyExc_ValueError);
  py::register_exception<ShapeError>(mod, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(mod, "FormatError", PyExc_ValueError);
  py::register_exception<IntegrationBlowup>(mod, "IntegrationBlowup", PyExc_ArithmeticError);

  mod.def(
      "generate_pair",
      [](std::uint64_t seed, std::size_t size, bool static_outside) {
        SceneParams p;
        p.perturb_outside = !static_outside;
        const ScenePair s = generate_pair(seed, GridSpec{size, size}, p);
        py::dict d;
        d["source"] = to_array(s.source_image);
        d["target"] = to_array(s.target_image);
        d["source_labels"] = to_array(s.source_labels);
        d["target_labels"] = to_array(s.target_labels);
        d["source_fg"] = to_array(s.foreground_mask_source);
        d["target_fg"] = to_array(s.foreground_mask_target);
        return d;
      },
      py::arg("seed"), py::arg("size") = 200, py::arg("static_outside") = false);

  mod.def(
      "default_config", [](const std::string& mode) { return config_to_json(default_config(registration_mode_from_string(mode))); },
      py::arg("mode"), "Default configuration of a mode as JSON text.");
  mod.def(
      "desk_config", [](const std::string& mode) { return config_to_json(desk_config(registration_mode_from_string(mode))); },
      py::arg("mode"), "Shortened single-core configuration of a mode as JSON text.");

  mod.def(
      "register",
      [](const Array& source, const Array& target, const std::string& config_json, std::optional<Array> preweights,
         std::optional<Array> labels_source, std::optional<Array> labels_target) {
        const RegistrationConfig cfg = config_from_json(config_json);
        const ScalarField I0 = scalar_from(source), I1 = scalar_from(target);
        std::optional<FieldStack> h0;
        if (preweights) h0 = stack_from(*preweights);
        std::optional<ScalarField> l0, l1;
        if (labels_source && labels_target) {
          l0 = scalar_from(*labels_source);
          l1 = scalar_from(*labels_target);
        }
        RegistrationResult res;
        {
          py::gil_scoped_release release;
          res = optimize(I0, I1, cfg, h0 ? &*h0 : nullptr, l0 ? &*l0 : nullptr, l1 ? &*l1 : nullptr);
        }
        py::dict d;
        d["phi_inv"] = to_array(res.phi_inv_final);
        d["warped"] = to_array(res.warped);
        d["m0"] = to_array(res.m0);
        d["h0"] = to_array(res.h0);
        d["std_map_t0"] = to_array(res.std_map_t0);
        d["std_map_t1"] = to_array(res.std_map_t1);
        d["metrics"] = metrics_dict(res.metrics);
        d["status"] = res.status;
        py::list its;
        for (const auto& r : res.per_iteration) its.append(py::make_tuple(r.iteration, r.scale, r.value.total, r.step_size));
        d["iterations"] = its;
        return d;
      },
      py::arg("source"), py::arg("target"), py::arg("config"), py::arg("preweights") = py::none(),
      py::arg("labels_source") = py::none(), py::arg("labels_target") = py::none(),
      "Registers source to target; config is JSON text as produced by default_config.");

  mod.def(
      "region_preweights",
      [](const Array& mask, const std::vector<double>& fg_h_sq, const std::vector<double>& bg_h_sq,
         std::vector<double> sigmas, double preweight_sigma) {
        return to_array(region_preweights(scalar_from(mask), fg_h_sq, bg_h_sq, make_kernel(std::move(sigmas), preweight_sigma)));
      },
      py::arg("mask"), py::arg("fg_h_sq"), py::arg("bg_h_sq"), py::arg("sigmas"), py::arg("preweight_sigma"));

  mod.def(
      "kernel_apply",
      [](const Array& m, const Array& w, std::vector<double> sigmas) {
        return to_array(kernel_apply(vector_from<VectorField>(m), stack_from(w), make_kernel(std::move(sigmas), 0.05)));
      },
      py::arg("m"), py::arg("w"), py::arg("sigmas"), "v = sum_i w_i K_i * (w_i m).");

  mod.def(
      "shoot",
      [](const Array& m0, const Array& h0, std::vector<double> sigmas, double preweight_sigma, std::size_t n_steps) {
        const MultiGaussianKernel k = make_kernel(std::move(sigmas), preweight_sigma);
        const GeodesicState s = initial_state(vector_from<VectorField>(m0), stack_from(h0));
        const Trajectory traj = integrate_geodesic(s, k, {n_steps});
        py::dict d;
        d["phi_inv"] = to_array(traj.final_map());
        d["energy0"] = energy(traj.state(0), k);
        d["energy1"] = energy(traj.state(n_steps), k);
        return d;
      },
      py::arg("m0"), py::arg("h0"), py::arg("sigmas"), py::arg("preweight_sigma") = 0.05, py::arg("n_steps") = 20,
      "Integrates the shooting equations; returns the final inverse map and the energy at t = 0 and t = 1.");

  mod.def(
      "gradient_check",
      [](std::size_t size, std::uint64_t seed, std::size_t n_steps) {
        py::dict d;
        for (const auto& c : gradient_check(size, seed, n_steps))
          d[py::str(to_string(c.mode))] = std::max(c.max_rel_error_m0, c.max_rel_error_h0);
        return d;
      },
      py::arg("size") = 16, py::arg("seed") = 1, py::arg("n_steps") = 5,
      "Largest relative error of the adjoint gradient against central differences, per mode.");

  mod.def(
      "read_tensor",
      [](const std::string& path) {
        const Tensor t = read_tensor(path);
        std::vector<py::ssize_t> shape(t.dims.begin(), t.dims.end());
        Array out(shape);
        if (t.dtype == DType::F64) {
          std::copy(t.f64.begin(), t.f64.end(), out.mutable_data());
        } else {
          std::copy(t.i32.begin(), t.i32.end(), out.mutable_data());
        }
        return out;
      },
      py::arg("path"));
  mod.def(
      "write_tensor",
      [](const std::string& path, const Array& a) {
        Tensor t;
        for (py::ssize_t i = 0; i < a.ndim(); ++i) t.dims.push_back(static_cast<std::uint64_t>(a.shape(i)));
        t.f64.assign(a.data(), a.data() + a.size());
        write_tensor(path, t);
      },
      py::arg("path"), py::arg("array"));
}
