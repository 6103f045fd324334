#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "advobs/attack.hpp"
#include "advobs/detect.hpp"
#include "advobs/errors.hpp"
#include "advobs/harness.hpp"
#include "advobs/synth.hpp"

namespace py = pybind11;
using namespace advobs;
namespace h = advobs::harness;
namespace fs = std::filesystem;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Field to_field(const Array& a) {
  if (a.ndim() != 3) throw py::value_error("expected an array of shape (n_lat, n_lon, n_var)");
  const Shape s{int(a.shape(0)), int(a.shape(1)), int(a.shape(2))};
  return Field(s, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Field& f) {
  const auto& s = f.shape();
  Array out(std::vector<py::ssize_t>{s.n_lat, s.n_lon, s.n_var});
  std::copy(f.data().begin(), f.data().end(), out.mutable_data());
  return out;
}

h::ExperimentConfig config_of(const py::object& cfg) {
  if (cfg.is_none()) return h::ExperimentConfig{};
  const std::string text = py::module_::import("json").attr("dumps")(cfg).cast<std::string>();
  return h::ExperimentConfig::from_json(io::json::parse(text));
}

using Command = fs::path (*)(const h::ExperimentConfig&, const fs::path&, const h::Log&);

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Adversarial observation perturbations against a toy diffusion forecaster";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeMismatch>(m, "ShapeMismatch", PyExc_ValueError);

  m.def("project", [](const Array& d, double eps) { return to_array(project(to_field(d), eps)); }, py::arg("delta"),
        py::arg("eps"), "Zero-mean, std-capped projection applied per channel.");
  m.def(
      "channel_moments",
      [](const Array& a) {
        const auto cm = channel_moments(to_field(a));
        return py::make_tuple(cm.mean, cm.std);
      },
      py::arg("field"));
  m.def("effective_epsilon",
        [](const Array& t, const Array& tm1) { return effective_epsilon(to_field(t), to_field(tm1)); });
  m.def("step_size", &step_size, py::arg("eps"), py::arg("i"), py::arg("n_iterations"));
  m.def("min_budget_search", &min_budget_search, py::arg("budgets"), py::arg("deviations"), py::arg("threshold"));

  m.def("analytic_power", &analytic_power, py::arg("m"), py::arg("sigma_b2"), py::arg("epsilon"), py::arg("alpha"));
  m.def("analytic_miss_probability", &analytic_miss_probability, py::arg("m"), py::arg("sigma_b2"),
        py::arg("epsilon"), py::arg("alpha"));
  m.def(
      "monte_carlo_power",
      [](std::int64_t mm, double s2, double e, double a, int trials, std::uint64_t seed) {
        Rng rng(seed);
        return monte_carlo_power(mm, s2, e, a, trials, rng);
      },
      py::arg("m"), py::arg("sigma_b2"), py::arg("epsilon"), py::arg("alpha"), py::arg("trials"),
      py::arg("seed") = 0);
  m.def(
      "chi_square_test",
      [](const std::vector<double>& r, double s2, double alpha) {
        const auto res = chi_square_test(r, s2, alpha);
        return py::make_tuple(res.statistic, res.p_value, res.reject);
      },
      py::arg("residuals"), py::arg("sigma_b2"), py::arg("alpha"));

  m.def(
      "simulate",
      [](int n_steps, std::uint64_t seed, int n_lat, int n_lon) {
        auto spec = std::make_shared<const GridSpec>(n_lat, n_lon, GridSpec::desk_default().variables());
        const Trajectory traj = simulate(spec, SynthParams{}, seed, n_steps);
        const Shape s = spec->shape();
        Array out(std::vector<py::ssize_t>{py::ssize_t(traj.size()), s.n_lat, s.n_lon, s.n_var});
        double* p = out.mutable_data();
        for (const auto& st : traj.states) p = std::copy(st.values.data().begin(), st.values.data().end(), p);
        return out;
      },
      py::arg("n_steps"), py::arg("seed") = 1, py::arg("n_lat") = 16, py::arg("n_lon") = 32,
      "Raw trajectory of shape (n_steps, n_lat, n_lon, n_var) on the desk variable set.");
  m.def("variable_names", [] {
    const GridSpec spec = GridSpec::desk_default();
    std::vector<std::string> out;
    for (const auto& v : spec.variables()) out.push_back(v.name);
    return out;
  });

  m.def(
      "default_config", [] { return py::module_::import("json").attr("loads")(h::ExperimentConfig{}.to_json().dump()); },
      "Resolved default experiment configuration as a dict.");
  const std::pair<const char*, Command> commands[] = {
      {"simulate", h::cmd_simulate}, {"train", h::cmd_train}, {"attack", h::cmd_attack}, {"sweep", h::cmd_sweep},
      {"ablate", h::cmd_ablate},     {"detect", h::cmd_detect}, {"report", h::cmd_report}};
  for (const auto& [name, cmd] : commands) {
    m.def(
        ("run_" + std::string(name)).c_str(),
        [cmd = cmd](const fs::path& out, const py::object& config) {
          const auto c = config_of(config);
          py::gil_scoped_release release;
          return cmd(c, out, {});
        },
        py::arg("out"), py::arg("config") = py::none());
  }
  m.def("audit", [](const fs::path& dir) { return h::audit(dir); }, py::arg("report_dir"));
}
