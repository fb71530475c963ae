// regseg_py.cpp — python veneer over the core: the pipeline commands keyed
// by experiment-config JSON, plus numpy-facing metrics, similarity,
// registration, phantom, and inference helpers.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <array>
#include <stdexcept>
#include <string>

#include "regseg/cli.hpp"
#include "regseg/evalkit.hpp"
#include "regseg/phantom.hpp"
#include "regseg/registration.hpp"
#include "regseg/resample.hpp"
#include "regseg/similarity.hpp"
#include "regseg/trainer.hpp"

namespace py = pybind11;
using namespace regseg;

namespace {

template <class T>
using ndarray = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <class T>
Array3<T> to_array3(const ndarray<T>& a) {
  if (a.ndim() != 3)
    throw std::invalid_argument("expected a 3-d array (z, y, x)");
  Array3<T> out(Dims{static_cast<int>(a.shape(0)),
                     static_cast<int>(a.shape(1)),
                     static_cast<int>(a.shape(2))});
  std::copy(a.data(), a.data() + a.size(), out.data());
  return out;
}

template <class T>
py::array_t<T> from_array3(const Array3<T>& a) {
  py::array_t<T> out({a.depth(), a.height(), a.width()});
  std::copy(a.data(), a.data() + a.size(), out.mutable_data());
  return out;
}

Volume to_volume(const ndarray<double>& voxels,
                 const std::array<double, 3>& spacing, const char* id) {
  Volume v;
  v.id = id;
  v.spacing = Spacing{spacing[0], spacing[1], spacing[2]};
  v.voxels = to_array3<double>(voxels);
  return v;
}

AffineTransform to_affine(const ndarray<double>& mat) {
  if (mat.ndim() != 2 || mat.shape(0) != 4 || mat.shape(1) != 4)
    throw std::invalid_argument("expected a 4x4 matrix");
  AffineTransform t;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) t.m(r, c) = mat.at(r, c);
  return t;
}

py::array_t<double> from_affine(const AffineTransform& t) {
  py::array_t<double> mat({4, 4});
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) mat.mutable_at(r, c) = t.m(r, c);
  return mat;
}

RegistrationConfig reg_config(const std::string& json_text) {
  return json_text.empty() ? RegistrationConfig{}
                           : RegistrationConfig::from_json(json_text);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "cross-teaching segmentation with registration supervision";

  // ---- pipeline commands, each driven by experiment-config JSON ----------
  m.def("default_config", [] { return ExperimentConfig{}.to_json(); },
        "the full experiment config schema with default values, as JSON");
  m.def(
      "generate",
      [](const std::string& cfg) { cmd_generate(ExperimentConfig::parse(cfg)); },
      py::arg("config_json"), "build and save the phantom cohort");
  m.def(
      "register_pairs",
      [](const std::string& cfg) { cmd_register(ExperimentConfig::parse(cfg)); },
      py::arg("config_json"), "build the pairwise transform table");
  m.def(
      "prepare_rsl",
      [](const std::string& cfg) {
        cmd_prepare_rsl(ExperimentConfig::parse(cfg));
      },
      py::arg("config_json"),
      "registered labels for every unlabeled train volume");
  m.def(
      "train",
      [](const std::string& cfg) {
        return cmd_train(ExperimentConfig::parse(cfg));
      },
      py::arg("config_json"), "one training run; returns the run directory");
  m.def(
      "evaluate",
      [](const std::string& cfg, const std::string& run_dir) {
        cmd_eval(ExperimentConfig::parse(cfg), run_dir);
      },
      py::arg("config_json"), py::arg("run_dir") = "",
      "score a finished run on the test cases");
  m.def(
      "evaluate_reg_only",
      [](const std::string& cfg) {
        cmd_eval_reg_only(ExperimentConfig::parse(cfg));
      },
      py::arg("config_json"),
      "score registration-propagated labels, no networks");
  m.def(
      "ablate",
      [](const std::string& cfg) { cmd_ablate(ExperimentConfig::parse(cfg)); },
      py::arg("config_json"), "train + eval the configured flag grid");

  // ---- metrics -----------------------------------------------------------
  m.def(
      "dsc",
      [](const ndarray<std::int32_t>& pred, const ndarray<std::int32_t>& gt,
         int cls) { return dsc(to_array3<std::int32_t>(pred),
                               to_array3<std::int32_t>(gt), cls); },
      py::arg("pred"), py::arg("gt"), py::arg("cls"));
  m.def(
      "hd95",
      [](const ndarray<std::int32_t>& pred, const ndarray<std::int32_t>& gt,
         int cls, const std::array<double, 3>& spacing,
         bool volumetric) -> py::object {
        const Hd95 h =
            hd95(to_array3<std::int32_t>(pred), to_array3<std::int32_t>(gt),
                 cls, Spacing{spacing[0], spacing[1], spacing[2]}, volumetric);
        if (!h.defined) return py::none();
        return py::float_(h.value);
      },
      py::arg("pred"), py::arg("gt"), py::arg("cls"),
      py::arg("spacing") = std::array<double, 3>{1.0, 1.0, 1.0},
      py::arg("volumetric") = false,
      "95th-percentile symmetric boundary distance; None when undefined");

  // ---- similarity --------------------------------------------------------
  m.def(
      "mutual_information",
      [](const ndarray<double>& a, const ndarray<double>& b, int bins) {
        return mutual_information(to_array3<double>(a), to_array3<double>(b),
                                  bins);
      },
      py::arg("a"), py::arg("b"), py::arg("bins") = 32);
  m.def(
      "rmse",
      [](const ndarray<double>& a, const ndarray<double>& b) {
        return rmse(to_array3<double>(a), to_array3<double>(b));
      },
      py::arg("a"), py::arg("b"));

  // ---- phantoms ----------------------------------------------------------
  m.def(
      "make_phantom",
      [](const std::array<int, 3>& dims, std::uint64_t seed) {
        PhantomSpec spec;
        spec.dims = Dims{dims[0], dims[1], dims[2]};
        Rng rng(seed);
        const TemplatePhantom t = generate_template(spec, rng);
        return py::make_tuple(from_array3(t.vol.voxels),
                              from_array3(t.lab.voxels));
      },
      py::arg("dims") = std::array<int, 3>{32, 32, 32}, py::arg("seed") = 0,
      "(volume, labels) for the template phantom at the given grid");

  // ---- registration ------------------------------------------------------
  m.def(
      "register_volumes",
      [](const ndarray<double>& fixed, const ndarray<double>& moving,
         const std::array<double, 3>& spacing, const std::string& config) {
        const RegistrationResult r =
            register_affine(to_volume(fixed, spacing, "fixed"),
                            to_volume(moving, spacing, "moving"),
                            reg_config(config));
        py::dict out;
        out["matrix"] = from_affine(r.transform);
        out["score"] = r.score;
        out["evaluations"] = r.evaluations;
        out["converged"] = r.converged;
        return out;
      },
      py::arg("fixed"), py::arg("moving"),
      py::arg("spacing") = std::array<double, 3>{1.0, 1.0, 1.0},
      py::arg("config_json") = std::string(),
      "affine moving -> fixed; matrix acts on physical (z, y, x, 1)");
  m.def(
      "resample_volume",
      [](const ndarray<double>& vol, const ndarray<double>& matrix,
         const std::array<double, 3>& spacing) {
        const Volume v = to_volume(vol, spacing, "volume");
        return from_array3(
            resample(v, Transform::from_affine(to_affine(matrix)),
                     GridSpec::like(v))
                .voxels);
      },
      py::arg("volume"), py::arg("matrix"),
      py::arg("spacing") = std::array<double, 3>{1.0, 1.0, 1.0},
      "push a volume through a forward affine, onto its own grid");

  // ---- training schedule + inference -------------------------------------
  m.def("w_cps_schedule", &w_cps_schedule, py::arg("iteration"),
        py::arg("t_total"), "cross-teaching weight warm-up");
  m.def(
      "infer",
      [](const std::string& checkpoint_dir, const ndarray<double>& vol,
         const std::array<double, 3>& spacing) {
        const Model a = Model::load(checkpoint_dir + "/model_a.ckpt");
        const Model b = Model::load(checkpoint_dir + "/model_b.ckpt");
        return from_array3(
            infer_volume(a, b, to_volume(vol, spacing, "query")).voxels);
      },
      py::arg("checkpoint_dir"), py::arg("volume"),
      py::arg("spacing") = std::array<double, 3>{1.0, 1.0, 1.0},
      "argmax of the two checkpointed models' mean logits, slice by slice");
}
