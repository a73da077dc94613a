#include "curvlab/curvature.hpp"
#include "curvlab/data.hpp"
#include "curvlab/harness.hpp"
#include "curvlab/kfac.hpp"
#include "curvlab/laplace.hpp"
#include "curvlab/net.hpp"
#include "curvlab/optimizers.hpp"
#include "curvlab/validation.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace curvlab;

namespace {

Targets make_targets(const py::object& labels) {
  py::array arr = py::array::ensure(labels);
  if (!arr) throw py::type_error("targets must be array-like");
  const char kind = arr.dtype().kind();
  if (arr.ndim() == 1 && (kind == 'i' || kind == 'u')) return Targets::from_classes(arr.cast<std::vector<int>>());
  return Targets::from_values(arr.cast<Mat>());
}

}  // namespace

PYBIND11_MODULE(_curvlab, m) {
  m.doc() = "Curvature-based optimizers for small fully-connected networks";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<FactorizationError>(m, "FactorizationError", PyExc_ArithmeticError);
  py::register_exception<SizeGuardError>(m, "SizeGuardError", PyExc_MemoryError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);

  py::enum_<Activation>(m, "Activation").value("relu", Activation::kRelu).value("tanh", Activation::kTanh);
  py::enum_<LossKind>(m, "Loss")
      .value("cross_entropy", LossKind::kCrossEntropy)
      .value("squared_error", LossKind::kSquaredError);
  py::enum_<FisherMode>(m, "FisherMode").value("mc", FisherMode::kMonteCarlo).value("full", FisherMode::kFull);
  py::enum_<SolveRoute>(m, "SolveRoute")
      .value("auto", SolveRoute::kAuto)
      .value("woodbury", SolveRoute::kWoodbury)
      .value("primal", SolveRoute::kPrimal);

  py::class_<Network>(m, "Network")
      .def(py::init<std::vector<Mat>, Activation, LossKind>(), py::arg("weights"),
           py::arg("activation") = Activation::kRelu, py::arg("loss") = LossKind::kCrossEntropy)
      .def_static(
          "kaiming",
          [](const std::vector<Index>& sizes, Activation a, LossKind l, std::uint64_t seed) {
            return Network::kaiming(sizes, a, l, seed);
          },
          py::arg("sizes"), py::arg("activation") = Activation::kRelu, py::arg("loss") = LossKind::kCrossEntropy,
          py::arg("seed") = 0)
      .def_property_readonly("weights", &Network::weights)
      .def_property_readonly("num_params", &Network::num_params)
      .def_property_readonly("num_layers", &Network::num_layers)
      .def("flat_weights", &Network::flat_weights)
      .def("set_flat_weights", &Network::set_flat_weights)
      .def(
          "apply_update", [](Network& n, const std::vector<Mat>& d, double s) { n.apply_update(d, s); },
          py::arg("delta"), py::arg("scale") = 1.0)
      .def("outputs", [](const Network& n, const Mat& x) { return forward(n, x).outputs(); })
      .def("loss", [](const Network& n, const Mat& x, const py::object& y) { return loss(n, x, make_targets(y)); });

  m.def(
      "gradients",
      [](const Network& n, const Mat& x, const py::object& y) {
        BatchTrace trace = forward(n, x);
        return backward(n, trace, make_targets(y));
      },
      "Per-layer gradients of the mean loss.", py::arg("net"), py::arg("inputs"), py::arg("targets"));

  py::class_<ImplicitCurvature>(m, "Curvature")
      .def_property_readonly("num_params", &ImplicitCurvature::num_params)
      .def_property_readonly("num_columns", &ImplicitCurvature::num_columns)
      .def_property_readonly("mode", &ImplicitCurvature::mode);

  m.def("build_curvature", &build_curvature, py::arg("net"), py::arg("inputs"),
        py::arg("mode") = FisherMode::kMonteCarlo, py::arg("seed") = 0);
  m.def("gram", [](const ImplicitCurvature& c) { return gram(c); });
  m.def("g_transpose_vec", &g_transpose_vec);
  m.def("g_lincomb", &g_lincomb);
  m.def("fisher_matrix", &fisher_matrix);
  m.def(
      "natural_gradient",
      [](const ImplicitCurvature& c, const Vec& u, double damping, SolveRoute route) {
        return natural_gradient(c, u, damping, route);
      },
      py::arg("curvature"), py::arg("u"), py::arg("damping"), py::arg("route") = SolveRoute::kAuto);
  m.def(
      "natural_gradient_blockdiag",
      [](const ImplicitCurvature& c, const Vec& u, double damping, SolveRoute route) {
        return natural_gradient_blockdiag(c, u, damping, route);
      },
      py::arg("curvature"), py::arg("u"), py::arg("damping"), py::arg("route") = SolveRoute::kAuto);

  py::class_<DampingSplit>(m, "DampingSplit")
      .def_readonly("act", &DampingSplit::act)
      .def_readonly("err", &DampingSplit::err)
      .def_readonly("clamped", &DampingSplit::clamped);
  m.def("damping_split", &damping_split, py::arg("damping"), py::arg("trace_act"), py::arg("trace_err"),
        py::arg("out_dim"), py::arg("in_dim"));
  m.def(
      "amortization_schedule",
      [](std::int64_t t, std::int64_t period, std::int64_t window) {
        const auto s = amortization_schedule(t, period, window);
        return py::make_tuple(s.refresh_inverse, s.accumulate);
      },
      "Returns (refresh_inverse, accumulate).");
  m.def("activation_factor", &activation_factor);
  m.def("damped_inverse", &damped_inverse);
  m.def("kfac_heuristic_direction", &kfac_heuristic_direction, py::arg("grad"), py::arg("inv_act"), py::arg("inv_err"));
  m.def(
      "kfac_standard_direction",
      [](const Mat& grad, const Mat& sigma_act, const Mat& sigma_err, double damping) {
        return kfac_standard_direction(grad, eigenbasis(sigma_act), eigenbasis(sigma_err), damping);
      },
      py::arg("grad"), py::arg("sigma_act"), py::arg("sigma_err"), py::arg("damping"));
  m.def("foof_direction", &foof_direction, py::arg("grad"), py::arg("inv_act"));

  m.def(
      "laplace_samples",
      [](const Vec& prior, const ImplicitCurvature& c, double data_count, std::uint64_t seed, std::size_t count) {
        const LaplaceSampler sampler(LaplaceSpec{prior, c, data_count, seed});
        Mat out(prior.size(), static_cast<Index>(count));
        for (std::size_t i = 0; i < count; ++i) out.col(static_cast<Index>(i)) = sampler.sample(i);
        return out;
      },
      "Exact posterior samples as columns.", py::arg("prior_diag"), py::arg("curvature"), py::arg("data_count"),
      py::arg("seed") = 0, py::arg("count") = 1);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("name", &Dataset::name)
      .def_readonly("inputs", &Dataset::inputs)
      .def_property_readonly("labels", [](const Dataset& d) { return d.targets.classes; })
      .def_property_readonly("values", [](const Dataset& d) { return d.targets.values; })
      .def_readonly("num_classes", &Dataset::num_classes)
      .def("__len__", &Dataset::size);
  m.def("load_idx", &load_idx, py::arg("images"), py::arg("labels"));
  m.def("synth_toy", &synth_toy);
  m.def("synth_toy_network", &synth_toy_network);

  m.def(
      "train",
      [](const std::string& config_text, bool write_csv) {
        const auto result = run_experiment(parse_config(config_text), RunOptions{write_csv, false});
        py::list seeds;
        for (const auto& s : result.seeds) {
          py::dict d;
          d["seed"] = s.seed;
          d["final_train_loss"] = s.final_train_loss;
          d["final_eval_loss"] = s.final_eval_loss;
          d["final_eval_accuracy"] = s.final_eval_accuracy;
          d["diverged"] = s.diverged;
          d["train_loss"] = [&] {
            std::vector<double> xs;
            for (const auto& r : s.rows) xs.push_back(r.train_loss);
            return xs;
          }();
          seeds.append(d);
        }
        return seeds;
      },
      "Runs an experiment from config text; one dict per seed.", py::arg("config"), py::arg("write_csv") = false);

  m.def(
      "validate_oracle",
      [](std::uint64_t seed, std::size_t instances) {
        py::dict out;
        for (const auto& c : validate_oracle(ValidationOptions{seed, instances, false})) {
          out[py::str(c.name)] = py::make_tuple(c.passed(), c.max_deviation, c.tolerance);
        }
        return out;
      },
      "Maps check name to (passed, max_deviation, tolerance).", py::arg("seed") = 7, py::arg("instances") = 16);
}
