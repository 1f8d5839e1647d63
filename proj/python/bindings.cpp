#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "pisml/analysis.hpp"
#include "pisml/distill.hpp"
#include "pisml/io.hpp"
#include "pisml/microgrid.hpp"
#include "pisml/training.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace pisml;

namespace {

// Configs cross the boundary as JSON text so that Python sees the same
// field names as the config files.
template <class T>
T from_text(const std::string& text, T value = {}) {
  if (text.empty()) return value;
  json merged = value;
  merged.merge_patch(json::parse(text));
  return merged.get<T>();
}

py::dict traj_to_dict(const Trajectory& t) {
  py::dict d;
  d["t"] = Eigen::Map<const Eigen::VectorXd>(t.times.data(), static_cast<Eigen::Index>(t.times.size()));
  d["x"] = t.states;
  d["u"] = Eigen::Map<const Eigen::VectorXd>(t.inputs.data(), static_cast<Eigen::Index>(t.inputs.size()));
  d["meta"] = io::trajectory_sidecar(t).dump();
  return d;
}

py::list spectrum(const std::vector<analysis::Complex>& v) {
  py::list out;
  for (const auto& z : v) out.append(py::make_tuple(z.real(), z.imag()));
  return out;
}

}  // namespace

PYBIND11_MODULE(_pisml, m) {
  m.doc() = "Hybrid sparse/neural models of grid-forming inverters";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  py::class_<Trajectory>(m, "Trajectory")
      .def_property_readonly("t", [](const Trajectory& t) { return t.times; })
      .def_property_readonly("x", [](const Trajectory& t) { return t.states; })
      .def_property_readonly("u", [](const Trajectory& t) { return t.inputs; })
      .def("to_dict", &traj_to_dict)
      .def("to_csv", &io::trajectory_csv)
      .def("__len__", &Trajectory::size);

  py::class_<sim::Dataset>(m, "Dataset")
      .def_property_readonly("trajectories", [](const sim::Dataset& d) { return d.trajectories; })
      .def_property_readonly("n_records", [](const sim::Dataset& d) { return d.records.size(); })
      .def("save", [](const sim::Dataset& d, const std::string& dir) { io::write_dataset(dir, d); });

  py::class_<HybridModel>(m, "Model")
      .def_property_readonly("mode", [](const HybridModel& h) { return to_string(h.mode); })
      .def("derivative", &HybridModel::derivative, py::arg("x"), py::arg("u"))
      .def("jacobian", &HybridModel::jacobian, py::arg("x"), py::arg("u"))
      .def("to_json", [](const HybridModel& h) { return json(h).dump(); })
      .def_static("from_json", [](const std::string& s) { return json::parse(s).get<HybridModel>(); })
      .def_static("load", &load_model)
      .def("equations", [](const HybridModel& h) { return distill::render_equations(h); })
      .def("complexity", [](const HybridModel& h) {
        const auto c = analysis::complexity(h);
        return py::make_tuple(c.active_coefficients, c.parameter_count);
      });

  m.def("default_params", []() { return json(sim::GfmParams{}).dump(); });

  m.def("gfm_derivative",
        [](const Eigen::VectorXd& x, double u, const std::string& params) {
          if (x.size() != kStateDim) throw ValidationError("x needs 13 entries");
          return Eigen::VectorXd(sim::gfm_derivative(StateVector(x), u, from_text<sim::GfmParams>(params)));
        },
        py::arg("x"), py::arg("u"), py::arg("params") = "");

  m.def("equilibrium",
        [](double u, const std::string& params) {
          return Eigen::VectorXd(sim::find_equilibrium(from_text<sim::GfmParams>(params), u));
        },
        py::arg("u"), py::arg("params") = "");

  m.def("simulate_scenario",
        [](const std::string& params, const std::string& scenario, bool saturation) {
          auto p = from_text<sim::GfmParams>(params);
          if (saturation) p = sim::saturation_variant(p);
          return sim::simulate_scenario(p, from_text<sim::TestScenario>(scenario));
        },
        py::arg("params") = "", py::arg("scenario") = "", py::arg("saturation") = false);

  m.def("generate_dataset",
        [](const std::string& spec, const std::string& params, bool saturation) {
          auto p = from_text<sim::GfmParams>(params);
          if (saturation) p = sim::saturation_variant(p);
          return sim::generate_dataset(p, from_text<sim::DatasetSpec>(spec));
        },
        py::arg("spec") = "", py::arg("params") = "", py::arg("saturation") = false);

  m.def("load_dataset", [](const std::string& dir) { return io::read_dataset(dir); });
  m.def("load_trajectory", [](const std::string& stem) { return io::read_trajectory(stem); });

  m.def("method_names", &train::method_names);

  m.def("fit_method",
        [](const std::string& method, const sim::Dataset& data, const std::string& train_cfg) {
          auto preset = train::method_preset(method);
          preset.train = from_text<train::TrainConfig>(train_cfg, preset.train);
          train::TrainReport report;
          HybridModel h;
          {
            py::gil_scoped_release release;
            h = train::fit_method(preset, data, &report);
          }
          return py::make_tuple(h, json(report).dump());
        },
        py::arg("method"), py::arg("data"), py::arg("train") = "");

  m.def("rollout",
        [](const HybridModel& h, const Trajectory& like) {
          return rollout(h, like.states.row(0).transpose(), like.input, like.times.back());
        },
        py::arg("model"), py::arg("reference"),
        "Rolls the model out from the first sample of `reference` under its input.");

  m.def("relative_l2",
        [](const Trajectory& pred, const Trajectory& truth, const std::string& window) {
          analysis::Window w;
          if (window == "IOD") w = analysis::iod_window();
          else if (window == "OOD") w = analysis::ood_window();
          else throw ValidationError("window must be IOD or OOD");
          const auto r = analysis::relative_l2(pred, truth, w);
          return py::make_tuple(r.mean, r.per_channel);
        },
        py::arg("pred"), py::arg("truth"), py::arg("window"));

  m.def("truth_spectrum",
        [](double u, const std::string& params) {
          return spectrum(analysis::truth_spectrum(from_text<sim::GfmParams>(params), u).values);
        },
        py::arg("u"), py::arg("params") = "");

  m.def("model_spectrum",
        [](const HybridModel& h, double u, const std::string& params) {
          const auto truth = analysis::truth_spectrum(from_text<sim::GfmParams>(params), u);
          return spectrum(analysis::model_spectrum(h, u, truth.x, "model").values);
        },
        py::arg("model"), py::arg("u"), py::arg("params") = "");

  m.def("wasserstein",
        [](const std::vector<std::pair<double, double>>& a, const std::vector<std::pair<double, double>>& b) {
          std::vector<analysis::Complex> za, zb;
          for (const auto& [re, im] : a) za.emplace_back(re, im);
          for (const auto& [re, im] : b) zb.emplace_back(re, im);
          return analysis::wasserstein_distance(za, zb);
        });

  m.def("distill",
        [](const HybridModel& h, const sim::Dataset& data, const std::string& cfg) {
          py::gil_scoped_release release;
          return distill::distill_model(h, data.trajectories, from_text<distill::DistillConfig>(cfg));
        },
        py::arg("model"), py::arg("data"), py::arg("config") = "");

  m.def("microgrid_nominal_spectrum", []() {
    const sim::Microgrid grid(sim::MicrogridParams::reference());
    return spectrum(analysis::eigenvalues(grid.reduced_jacobian(grid.equilibrium(false), false)));
  });
}
