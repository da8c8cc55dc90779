#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "alps/errors.hpp"
#include "alps/metrics.hpp"
#include "alps/selection.hpp"
#include "alps/sweep.hpp"
#include "alps/trainer.hpp"

namespace py = pybind11;
using namespace alps;

namespace {

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::array tensor_to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  if (t.dtype() == DType::F32) {
    py::array_t<float> a(shape);
    std::copy(t.f32().begin(), t.f32().end(), a.mutable_data());
    return a;
  }
  py::array_t<double> a(shape);
  std::copy(t.f64().begin(), t.f64().end(), a.mutable_data());
  return a;
}

Tensor numpy_to_tensor(const py::array& arr) {
  Shape shape(arr.shape(), arr.shape() + arr.ndim());
  if (py::isinstance<py::array_t<float>>(arr)) {
    const auto a = py::array_t<float, py::array::c_style | py::array::forcecast>::ensure(arr);
    return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
  }
  const auto a = py::array_t<double, py::array::c_style | py::array::forcecast>::ensure(arr);
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

}  // namespace

PYBIND11_MODULE(_alps, m) {
  m.doc() = "Head scoring, selection and masked fine-tuning";

  auto base = py::register_exception<Error>(m, "AlpsError", PyExc_RuntimeError);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<VersionError>(m, "VersionError", base);
  py::register_exception<CorruptError>(m, "CorruptError", base);
  py::register_exception<MissingTensorError>(m, "MissingTensorError", base);
  py::register_exception<ShapeError>(m, "ShapeError", base);
  py::register_exception<GeometryError>(m, "GeometryError", base);
  py::register_exception<IoError>(m, "IoError", base);
  py::register_exception<RangeError>(m, "RangeError", base);
  py::register_exception<NumericError>(m, "NumericError", base);
  auto value = py::register_exception<ValueError>(m, "ValueError", base);
  py::register_exception<NonFiniteError>(m, "NonFiniteError", value);

  py::class_<ModelGeometry>(m, "ModelGeometry")
      .def(py::init(&ModelGeometry::make), py::arg("n_layers"), py::arg("d_model"), py::arg("n_heads"),
           py::arg("n_kv_groups"), py::arg("d_k") = 0, py::arg("d_v") = 0)
      .def_readonly("n_layers", &ModelGeometry::n_layers)
      .def_readonly("d_model", &ModelGeometry::d_model)
      .def_readonly("n_heads", &ModelGeometry::n_heads)
      .def_readonly("n_kv_groups", &ModelGeometry::n_kv_groups)
      .def_readonly("d_k", &ModelGeometry::d_k)
      .def_readonly("d_v", &ModelGeometry::d_v)
      .def("validate", &ModelGeometry::validate)
      .def("total_heads", &ModelGeometry::total_heads)
      .def("to_dict", [](const ModelGeometry& g) { return to_py(geometry_to_json(g)); })
      .def("__eq__", [](const ModelGeometry& a, const ModelGeometry& b) { return a == b; });

  m.def("toy_geometry", &toy_geometry);
  m.def("kv_group_of", &kv_group_of, py::arg("head"), py::arg("geometry"));

  // Container I/O.
  m.def(
      "read_checkpoint",
      [](const std::filesystem::path& path) {
        const auto ckpt = read_checkpoint(path);
        py::dict tensors;
        for (const auto& name : ckpt.names()) tensors[py::str(name)] = tensor_to_numpy(ckpt.tensor(name));
        return py::make_tuple(tensors, to_py(ckpt.meta()), ckpt.fingerprint());
      },
      py::arg("path"), "Returns (tensors, meta, fingerprint).");
  m.def(
      "write_checkpoint",
      [](const std::filesystem::path& path, const py::dict& tensors, const py::object& meta) {
        TensorMap map;
        for (const auto& [k, v] : tensors) map.emplace(k.cast<std::string>(), numpy_to_tensor(py::array::ensure(v)));
        write_checkpoint(map, meta.is_none() ? nlohmann::json::object() : from_py(meta), path);
      },
      py::arg("path"), py::arg("tensors"), py::arg("meta") = py::none());

  // Metrics on raw matrices.
  m.def("head_projection", &head_projection, py::arg("wq"), py::arg("wk"), py::arg("wv"));
  m.def(
      "tempered_softmax", [](const Matrix& w, double tau) { return tempered_softmax(w, tau); }, py::arg("w"),
      py::arg("tau") = 1.0);
  m.def(
      "w1_distance",
      [](const std::vector<double>& p, const std::vector<double>& q) { return w1_distance(p, q); }, py::arg("p"),
      py::arg("q"));
  m.def(
      "kl_divergence",
      [](const std::vector<double>& p, const std::vector<double>& q) { return kl_divergence(p, q); }, py::arg("p"),
      py::arg("q"));
  m.def(
      "score_head",
      [](const Matrix& a, const Matrix& b, const std::string& metric, std::optional<std::string> domain, double tau) {
        const Metric mt = parse_metric(metric);
        return score_head(a, b, mt, domain ? parse_domain(*domain) : default_domain(mt), tau);
      },
      py::arg("base"), py::arg("task"), py::arg("metric") = "pad", py::arg("domain") = py::none(),
      py::arg("tau") = 1.0);

  // Pipeline operations on files, exchanging JSON-shaped dicts.
  m.def(
      "score",
      [](const std::filesystem::path& base, const std::filesystem::path& task, const std::string& metric, double tau,
         std::optional<std::string> domain) {
        ScoreOptions opt;
        opt.metric = parse_metric(metric);
        opt.tau = tau;
        if (domain) opt.domain = parse_domain(*domain);
        ScoreReport report;
        {
          py::gil_scoped_release release;
          report = score_all_heads(read_checkpoint(base), read_checkpoint(task), opt);
        }
        return to_py(report_to_json(report));
      },
      py::arg("base"), py::arg("task"), py::arg("metric") = "pad", py::arg("tau") = 1.0,
      py::arg("domain") = py::none());
  m.def(
      "select",
      [](const py::object& report, double ratio, const std::string& strategy, std::uint64_t seed) {
        const auto r = report_from_json(from_py(report));
        return to_py(mask_to_json(make_mask(parse_strategy(strategy), ratio, seed, r.geometry, &r)));
      },
      py::arg("report"), py::arg("ratio") = 0.1, py::arg("strategy") = "topk", py::arg("seed") = 0);
  m.def(
      "heatmap_csv", [](const py::object& report) { return heatmap_csv(report_from_json(from_py(report))); },
      py::arg("report"));
  m.def(
      "init_model",
      [](const std::filesystem::path& out, std::uint64_t seed, std::optional<ModelGeometry> geometry) {
        save_model(init_model(geometry.value_or(toy_geometry()), seed), out);
      },
      py::arg("out"), py::arg("seed") = 0, py::arg("geometry") = py::none());
  m.def(
      "train",
      [](const py::object& config, const std::filesystem::path& out, const py::object& mask) {
        const TrainConfig cfg = config_from_json(from_py(config));
        std::optional<HeadMask> hm;
        if (!mask.is_none()) hm = mask_from_json(from_py(mask));
        TrainResult result;
        {
          py::gil_scoped_release release;
          result = train(initial_model(cfg), cfg, hm ? &*hm : nullptr);
          save_model(result.model, out);
        }
        nlohmann::json log = result.log;
        return to_py({{"eval_loss", result.final_eval.loss},
                      {"eval_accuracy", result.final_eval.accuracy},
                      {"log", std::move(log)}});
      },
      py::arg("config"), py::arg("out"), py::arg("mask") = py::none());
  m.def(
      "evaluate",
      [](const std::filesystem::path& model, const std::string& family, std::uint64_t dataset_seed, int eval_size) {
        TrainConfig cfg;
        cfg.task_family = parse_family(family);
        cfg.dataset_seed = dataset_seed;
        cfg.eval_size = eval_size;
        const auto r = evaluate(load_model(model), eval_split(cfg));
        return py::make_tuple(r.loss, r.accuracy);
      },
      py::arg("model"), py::arg("family") = "copy", py::arg("dataset_seed") = 0, py::arg("eval_size") = 256);
  m.def(
      "ablate",
      [](const std::filesystem::path& model, const std::string& family, double ratio, std::uint64_t dataset_seed,
         int eval_size) {
        TrainConfig cfg;
        cfg.task_family = parse_family(family);
        cfg.dataset_seed = dataset_seed;
        cfg.eval_size = eval_size;
        return to_py(ablation_to_json(ablation_sensitivity(load_model(model), eval_split(cfg), ratio)));
      },
      py::arg("model"), py::arg("family") = "copy", py::arg("ratio") = 0.1, py::arg("dataset_seed") = 0,
      py::arg("eval_size") = 256);
}
