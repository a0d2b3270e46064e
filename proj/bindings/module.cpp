#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "spruft/errors.hpp"
#include "spruft/experiment.hpp"
#include "spruft/importance.hpp"
#include "spruft/memory.hpp"
#include "spruft/serialization.hpp"
#include "spruft/spsa_study.hpp"

namespace py = pybind11;
using namespace spruft;

namespace {

Tensor from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-d array");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return Tensor({rows, cols}, std::vector<double>(a.data(), a.data() + rows * cols));
}

py::array_t<double> to_array(const Tensor& t) {
  py::array_t<double> out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

LabeledBatch batch_of(const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
                      const std::vector<int>& y) {
  return {from_array(x), y};
}

}  // namespace

PYBIND11_MODULE(_spruft, m) {
  m.doc() = "Row-selective sparse fine-tuning core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  py::class_<Model>(m, "Model")
      .def_static("mlp", [](std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t num_classes,
                            std::uint64_t seed) { return make_mlp({input_dim, std::move(hidden), num_classes}, seed); },
                  py::arg("input_dim"), py::arg("hidden"), py::arg("num_classes"), py::arg("seed") = 0)
      .def_static("transformer",
                  [](std::size_t seq_len, std::size_t token_dim, std::size_t d_model, std::size_t mlp_hidden,
                     std::size_t num_classes, std::uint64_t seed) {
                    return make_transformer({seq_len, token_dim, d_model, mlp_hidden, num_classes}, seed);
                  },
                  py::arg("seq_len") = 4, py::arg("token_dim") = 8, py::arg("d_model") = 32,
                  py::arg("mlp_hidden") = 64, py::arg("num_classes") = 3, py::arg("seed") = 0)
      .def_static("from_json", [](const std::string& s) { return model_from_json(Json::parse(s)); })
      .def("to_json", [](const Model& self) { return model_to_json(self).dump(); })
      .def_readonly("input_dim", &Model::input_dim)
      .def_readonly("num_classes", &Model::num_classes)
      .def("parameter_count", &Model::parameter_count)
      .def("parameter_names", &Model::parameter_names)
      .def("linear_layers", [](const Model& self) {
        std::vector<std::string> ids;
        for (const auto& l : self.linear_layers()) ids.push_back(l.id);
        return ids;
      })
      .def("parameter", [](const Model& self, const std::string& name) { return to_array(self.parameter(name)); })
      .def("logits", [](const Model& self, const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
        BaseParameters policy;
        return to_array(predict_logits(self, from_array(x), policy));
      })
      .def("loss", [](const Model& self, const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
                      const std::vector<int>& y) { return model_loss(self, batch_of(x, y)).loss; })
      .def("merge", [](const Model& self, const std::string& adapter_json) {
        const Json doc = Json::parse(adapter_json);
        Model out = self;
        const AdapterSet adapters = adapters_from_json(doc, out);
        apply_base_parameters(doc, out);
        return merge(out, adapters);
      });

  m.def("magnitude_importance", [](const Model& model, const std::string& layer) {
    return magnitude_importance(model.linear(layer)).scores;
  });
  m.def("taylor_importance",
        [](const Model& model, const std::string& layer,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& x, const std::vector<int>& y) {
          return taylor_importance(model, layer, batch_of(x, y)).scores;
        });
  m.def("qm_taylor_importance",
        [](const Model& model, const std::string& layer,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& x, const std::vector<int>& y) {
          return quantiles_mean(classwise_taylor(model, layer, batch_of(x, y))).scores;
        });
  m.def("quantiles_mean", [](const std::vector<double>& row) { return quantiles_mean(row); });
  m.def("select_top_r", [](const std::vector<double>& scores, std::size_t r) { return select_top_r(scores, r).indices(); });
  m.def("pair_rank_probability", &pair_rank_probability, py::arg("g_i"), py::arg("g_j"), py::arg("var_i"),
        py::arg("var_j"));

  m.def(
      "spsa_moments",
      [](const std::vector<double>& g, std::size_t n, std::size_t k, std::size_t samples, double epsilon,
         std::uint64_t seed) {
        const MomentStudy study = spsa_moment_study(g, n, k, samples, epsilon, seed);
        py::list rows;
        for (const auto& r : study.rows) {
          py::dict d;
          d["g"] = r.g;
          d["mean"] = r.mean;
          d["std_error"] = r.std_error;
          d["variance"] = r.variance;
          d["law_variance"] = r.law_variance;
          rows.append(d);
        }
        return rows;
      },
      py::arg("g"), py::arg("n"), py::arg("k"), py::arg("samples"), py::arg("epsilon") = 1e-3, py::arg("seed") = 0);

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "spruft");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        return run_cli(static_cast<int>(argv.size()), argv.data());
      },
      py::arg("args"));
}
