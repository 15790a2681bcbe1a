#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "rrlab/experiment.hpp"
#include "rrlab/gradcheck.hpp"

namespace py = pybind11;
using namespace rrlab;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> to_tensor(const FloatArray& a) {
  Tensor<float> t;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) t.shape.push_back(static_cast<std::size_t>(a.shape(i)));
  t.data.assign(a.data(), a.data() + a.size());
  return t;
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<T> out(shape);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

Dataset make_dataset(const FloatArray& images, std::vector<std::uint32_t> labels, std::uint32_t classes) {
  Dataset d;
  d.images = to_tensor(images);
  if (d.images.rank() == 3) d.images.shape.push_back(1);
  d.labels = std::move(labels);
  d.classes = classes;
  d.validate();
  return d;
}

py::dict run_to_dict(const RunResult& r) {
  py::dict d;
  d["seed"] = r.seed;
  d["error"] = r.eval.error_rate;
  d["protocol"] = std::string(protocol_name(r.eval.protocol));
  d["per_class_error"] = r.eval.per_class_error;
  d["refresh_passes"] = r.refresh.forward_passes;
  d["weights_digest"] = r.weights_digest;
  d["stats_digest"] = r.eval.stats_digest;
  d["labeled"] = r.labeled;
  d["unlabeled_in"] = r.in_class_unlabeled;
  d["unlabeled_out"] = r.out_class_unlabeled;
  d["seconds"] = r.seconds;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "ROI regularization, VAT and entropy minimization for semi-supervised image classification";
  m.attr("__version__") = std::string(version_string());

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  // Scalar objectives.
  m.def("entropy", [](const std::vector<double>& p) { return entropy(p); }, py::arg("p"));
  m.def("kl_divergence", [](const std::vector<double>& p, const std::vector<double>& q) { return kl_divergence(p, q); },
        py::arg("p"), py::arg("q"));
  m.def("reliability", [](const std::vector<double>& p) { return reliability(p); }, py::arg("p"),
        "1 - H(p) / log K");

  // Masking.
  m.def("select_mask",
        [](const std::vector<double>& r2d, double lambda) {
          const MaskRegion r = select_mask(r2d, lambda);
          return py::make_tuple(r.blocks, r.mass);
        },
        py::arg("r2d"), py::arg("lam"), "Blocks in selection order and their accumulated mass.");

  py::class_<AdamSchedule>(m, "AdamSchedule")
      .def(py::init([](double lr, std::uint64_t n_update, std::uint64_t n_decay) {
             AdamSchedule s{lr, n_update, n_decay};
             s.validate();
             return s;
           }),
           py::arg("lr") = 0.001, py::arg("n_update") = 48000, py::arg("n_decay") = 16000)
      .def("learning_rate", &AdamSchedule::learning_rate, py::arg("t"))
      .def("beta1", &AdamSchedule::beta1, py::arg("t"))
      .def_readonly("lr", &AdamSchedule::lr)
      .def_readonly("n_update", &AdamSchedule::n_update)
      .def_readonly("n_decay", &AdamSchedule::n_decay);

  // Data.
  m.def("generate_glyphs",
        [](std::uint32_t classes, std::size_t per_class, std::uint64_t seed, double noise, int clutter) {
          GlyphSpec g;
          g.classes = classes;
          g.per_class = per_class;
          g.seed = seed;
          g.noise = noise;
          g.clutter = clutter;
          const Dataset d = generate_synthetic(g);
          return py::make_tuple(to_array(d.images), d.labels);
        },
        py::arg("classes") = 4, py::arg("per_class") = 100, py::arg("seed") = 1, py::arg("noise") = GlyphSpec{}.noise,
        py::arg("clutter") = GlyphSpec{}.clutter, "Raw [0, 255] images (N, 16, 16, 1) and 0-based labels.");
  m.def("save_dataset",
        [](const std::filesystem::path& path, const FloatArray& images, std::vector<std::uint32_t> labels,
           std::uint32_t classes) { save_dataset(path, make_dataset(images, std::move(labels), classes)); },
        py::arg("path"), py::arg("images"), py::arg("labels"), py::arg("classes"));
  m.def("load_dataset",
        [](const std::filesystem::path& path) {
          const Dataset d = load_dataset(path);
          return py::make_tuple(to_array(d.images), d.labels, d.classes);
        },
        py::arg("path"));

  py::class_<ZcaTransform>(m, "ZcaTransform")
      .def_static("fit", [](const FloatArray& images, double eps) { return ZcaTransform::fit(to_tensor(images), eps); },
                  py::arg("images"), py::arg("eps") = 1e-5)
      .def("apply", [](const ZcaTransform& z, const FloatArray& images) { return to_array(z.apply(to_tensor(images))); })
      .def("invert", [](const ZcaTransform& z, const FloatArray& images) { return to_array(z.invert(to_tensor(images))); });

  // Models.
  py::class_<ModelState<float>>(m, "Model")
      .def_static(
          "conv_tiny",
          [](int rows, int cols, int channels, int classes, std::uint64_t seed) {
            return build_model<float>(ArchitectureSpec::conv_tiny(rows, cols, channels, classes), seed);
          },
          py::arg("rows") = 16, py::arg("cols") = 16, py::arg("channels") = 1, py::arg("classes") = 4, py::arg("seed") = 1)
      .def_static(
          "conv_large",
          [](int classes, bool final_bn, std::uint64_t seed) {
            return build_model<float>(ArchitectureSpec::conv_large(classes, final_bn), seed);
          },
          py::arg("classes") = 10, py::arg("final_bn") = true, py::arg("seed") = 1)
      .def_static("load", [](const std::filesystem::path& path, const ModelState<float>& like) {
        return load_checkpoint(path, like.spec);
      })
      .def("save", [](const ModelState<float>& model, const std::filesystem::path& path) { save_checkpoint(path, model); })
      .def_property_readonly("parameter_count", &ModelState<float>::parameter_count)
      .def_property_readonly("step", [](const ModelState<float>& model) { return model.step; })
      .def_property_readonly("weights_digest", &ModelState<float>::weights_digest)
      .def("predict",
           [](const ModelState<float>& model, const FloatArray& batch, bool training) {
             ForwardOptions o;
             o.training = training;
             o.dropout = false;
             return to_array(predict(model, to_tensor(batch), o));
           },
           py::arg("batch"), py::arg("training") = false, "Class probabilities (N, K).")
      .def("sensitivity",
           [](const ModelState<float>& model, const FloatArray& batch, int block_rows, int block_cols) {
             const Tensor<float> x = to_tensor(batch);
             ForwardOptions o;
             o.training = false;
             std::vector<SensitivityMap> maps = pixel_sensitivity(model_probability_fn(model, o), x);
             const BlockPartition p = BlockPartition::grid(model.spec.rows, model.spec.cols, block_rows, block_cols);
             py::list out;
             for (auto& map : maps) {
               block_sensitivity(map, p);
               out.append(py::make_tuple(map.r3d, map.r2d));
             }
             return out;
           },
           py::arg("batch"), py::arg("block_rows") = 2, py::arg("block_cols") = 2,
           "Per image: the L1-normalized input gradient r3d and the block masses r2d.")
      .def("vat_perturbation",
           [](const ModelState<float>& model, const FloatArray& batch, double epsilon, std::uint64_t seed) {
             const ModelState<double> md = model.cast<double>();
             VatConfig cfg;
             cfg.epsilon = epsilon;
             const Tensor<float> x = to_tensor(batch);
             return to_array(vat_direction(model_probability_fn(md, ForwardOptions{}), x.cast<double>(), cfg, seed).perturbation);
           },
           py::arg("batch"), py::arg("epsilon") = 1.0, py::arg("seed") = 1);

  // Experiments.
  m.def("profile_names", &profile_names);
  m.def("config_text",
        [](const std::string& text) { return parse_config(text, "<python>").to_text(); }, py::arg("text"),
        "Parses a config and returns its canonical form with every default resolved.");
  m.def("train",
        [](const std::string& text, std::uint64_t seed, const std::string& run_dir) {
          const ExperimentConfig cfg = parse_config(text, "<python>");
          RunResult r;
          {
            py::gil_scoped_release release;
            r = run_single(cfg, prepare_data(cfg, seed), seed, run_dir);
          }
          return run_to_dict(r);
        },
        py::arg("config"), py::arg("seed") = 1, py::arg("run_dir") = "",
        "Trains, refreshes BN statistics and evaluates one seed of a config.");
  m.def("gradcheck",
        [](bool losses, std::size_t per_tensor) {
          std::vector<GradcheckCase> cases = primitive_cases();
          if (losses) {
            for (auto& c : loss_cases(1, per_tensor)) cases.push_back(std::move(c));
          }
          py::list out;
          for (const auto& r : run_gradcheck(cases)) {
            py::dict d;
            d["name"] = r.name;
            d["group"] = r.group;
            d["max_rel_error"] = r.max_rel_error;
            d["passed"] = r.passed;
            out.append(d);
          }
          return out;
        },
        py::arg("losses") = true, py::arg("per_tensor") = 12);
}
