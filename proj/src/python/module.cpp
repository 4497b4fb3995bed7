// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "ctquant/biomarkers.hpp"
#include "ctquant/digest.hpp"
#include "ctquant/error.hpp"
#include "ctquant/features.hpp"
#include "ctquant/fusion.hpp"
#include "ctquant/metrics.hpp"
#include "ctquant/phantom.hpp"
#include "ctquant/train.hpp"
#include "ctquant/volume.hpp"

namespace py = pybind11;
using namespace ctquant;

namespace {

GridGeometry grid_for(const py::buffer_info& info, std::array<double, 3> spacing, std::array<double, 3> origin) {
  if (info.ndim != 3) throw py::value_error("expected a 3-d array indexed [z, y, x]");
  GridGeometry g;
  g.dims = {static_cast<int>(info.shape[2]), static_cast<int>(info.shape[1]), static_cast<int>(info.shape[0])};
  g.spacing = spacing;
  g.origin = origin;
  g.validate();
  return g;
}

template <typename T>
py::array_t<T> as_array(const GridGeometry& g, const std::vector<T>& data) {
  py::array_t<T> out({g.dims[2], g.dims[1], g.dims[0]});
  std::memcpy(out.mutable_data(), data.data(), data.size() * sizeof(T));
  return out;
}

py::dict biomarkers_dict(const BiomarkerVector& b) {
  py::dict d;
  for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
    const auto& m = b.fields[i];
    d[py::str(std::string(kBiomarkerNames[i]))] = py::make_tuple(m.value, std::string(to_string(m.status)));
  }
  return d;
}

py::dict truth_dict(const GroundTruth& t) {
  py::dict d;
  for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
    const auto& e = t.fields[i];
    py::dict row;
    row["status"] = std::string(to_string(e.status));
    row["value"] = e.value;
    row["abs_tol"] = e.abs_tol;
    row["rel_tol"] = e.rel_tol;
    d[py::str(std::string(kBiomarkerNames[i]))] = row;
  }
  return d;
}

py::dict report_dict(const PredictionReport& r) {
  py::dict d;
  d["scan_id"] = r.scan_id;
  d["probability"] = r.probability;
  py::dict c;
  for (std::size_t i = 0; i < r.names.size(); ++i) c[py::str(r.names[i])] = r.contributions[i];
  d["contributions"] = c;
  d["model_hash"] = r.model_hash;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Quantitative CT biomarkers and CVD risk fusion";

  static py::exception<Error> ctquant_error(m, "CtquantError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      ctquant_error(e.what());
    }
  });

  m.attr("BIOMARKER_NAMES") = [] {
    py::list names;
    for (auto n : kBiomarkerNames) names.append(std::string(n));
    return names;
  }();

  py::class_<CtVolume>(m, "Volume")
      .def(py::init([](py::array_t<std::int16_t, py::array::c_style | py::array::forcecast> hu,
                       std::array<double, 3> spacing, std::array<double, 3> origin) {
             const auto info = hu.request();
             CtVolume v(grid_for(info, spacing, origin), 0);
             std::memcpy(v.hu.data(), info.ptr, v.hu.size() * sizeof(std::int16_t));
             v.clamped_count = v.clamp_hu();
             return v;
           }),
           py::arg("hu"), py::arg("spacing") = std::array<double, 3>{1, 1, 1},
           py::arg("origin") = std::array<double, 3>{0, 0, 0})
      .def_property_readonly("dims", [](const CtVolume& v) { return v.geometry.dims; })
      .def_property_readonly("spacing", [](const CtVolume& v) { return v.geometry.spacing; })
      .def_property_readonly("origin", [](const CtVolume& v) { return v.geometry.origin; })
      .def_property_readonly("hu", [](const CtVolume& v) { return as_array(v.geometry, v.hu); },
                             "copy of the samples as an int16 array [z, y, x]")
      .def_readonly("clamped_count", &CtVolume::clamped_count);

  py::class_<LabelMask>(m, "Mask")
      .def(py::init([](py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> labels,
                       const std::string& schema, std::array<double, 3> spacing, std::array<double, 3> origin) {
             const auto info = labels.request();
             LabelMask mask(grid_for(info, spacing, origin), mask_schema_from_string(schema));
             std::memcpy(mask.labels.data(), info.ptr, mask.labels.size());
             mask.validate_labels();
             return mask;
           }),
           py::arg("labels"), py::arg("schema"), py::arg("spacing") = std::array<double, 3>{1, 1, 1},
           py::arg("origin") = std::array<double, 3>{0, 0, 0})
      .def_property_readonly("schema", [](const LabelMask& mk) { return std::string(to_string(mk.schema)); })
      .def_property_readonly("dims", [](const LabelMask& mk) { return mk.geometry.dims; })
      .def_property_readonly("labels", [](const LabelMask& mk) { return as_array(mk.geometry, mk.labels); });

  m.def("load_volume", &load_volume, py::arg("header"));
  m.def("save_volume", &save_volume, py::arg("volume"), py::arg("header"));
  m.def(
      "load_mask", [](const std::filesystem::path& p, const std::string& schema) {
        return load_mask(p, mask_schema_from_string(schema));
      },
      py::arg("header"), py::arg("schema"));
  m.def("save_mask", &save_mask, py::arg("mask"), py::arg("header"));

  m.def(
      "extract_all",
      [](const CtVolume& v, std::optional<LabelMask> pericardium, std::optional<LabelMask> calcium,
         std::optional<LabelMask> aorta, std::optional<LabelMask> lungs) {
        MaskSet set{std::move(pericardium), std::move(calcium), std::move(aorta), std::move(lungs)};
        BiomarkerVector b;
        {
          py::gil_scoped_release release;
          b = extract_all(v, set);
        }
        return biomarkers_dict(b);
      },
      py::arg("volume"), py::arg("pericardium") = py::none(), py::arg("calcium") = py::none(),
      py::arg("aorta") = py::none(), py::arg("lungs") = py::none(),
      "All 18 biomarkers as {name: (value, status)}.");
  m.def("agatston_weight", &agatston_weight, py::arg("peak_hu"));

  m.def(
      "generate_phantom",
      [](const std::string& spec_json) {
        Phantom ph;
        {
          const auto spec = phantom_spec_from_json(spec_json);
          py::gil_scoped_release release;
          ph = generate(spec);
        }
        py::dict d;
        d["volume"] = ph.volume;
        d["pericardium"] = *ph.masks.pericardium;
        d["calcium"] = *ph.masks.calcium;
        d["aorta"] = *ph.masks.aorta;
        d["lungs"] = *ph.masks.lungs;
        d["truth"] = truth_dict(ph.truth);
        return d;
      },
      py::arg("spec_json"), "Phantom volume, masks and ground truth from a JSON spec string.");

  m.def("roc_auc", &roc_auc, py::arg("scores"), py::arg("labels"));
  m.def(
      "select_threshold",
      [](const std::vector<double>& s, const std::vector<int>& y) {
        const auto c = select_threshold(s, y);
        return py::make_tuple(c.threshold, c.youden, c.degenerate);
      },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "mcnemar_test",
      [](const std::vector<int>& a, const std::vector<int>& b, const std::vector<int>& y) {
        const auto r = mcnemar_test(a, b, y);
        py::dict d;
        d["b"] = r.b;
        d["c"] = r.c;
        d["exact"] = r.exact;
        d["p_value"] = r.p_value;
        return d;
      },
      py::arg("pred_a"), py::arg("pred_b"), py::arg("labels"));
  m.def(
      "bootstrap_auc_ci",
      [](const std::vector<double>& s, const std::vector<int>& y, int replicates, std::uint64_t seed) {
        const auto ci = bootstrap_ci(roc_auc, s, y, replicates, seed);
        return py::make_tuple(ci.lo, ci.hi);
      },
      py::arg("scores"), py::arg("labels"), py::arg("replicates") = 1000, py::arg("seed") = 0);

  py::class_<FusionModel>(m, "Model")
      .def_property_readonly("version_hash", &FusionModel::version_hash)
      .def_property_readonly("parameter_count", &FusionModel::parameter_count)
      .def_property_readonly("deep_dim", [](const FusionModel& fm) { return fm.config.deep_dim; })
      .def_property_readonly("attribution_names", [](const FusionModel& fm) { return attribution_names(fm.config); });
  m.def(
      "init_model",
      [](int deep_dim, int embed, int heads, int head_dim, int encoder_hidden, double dropout, std::uint64_t seed) {
        FusionConfig c;
        c.deep_dim = deep_dim;
        c.embed = embed;
        c.heads = heads;
        c.head_dim = head_dim;
        c.encoder_hidden = encoder_hidden;
        c.dropout = dropout;
        c.seed = seed;
        c.validate();
        return init_model(c);
      },
      py::arg("deep_dim") = 512, py::arg("embed") = 32, py::arg("heads") = 2, py::arg("head_dim") = 16,
      py::arg("encoder_hidden") = 64, py::arg("dropout") = 0.5, py::arg("seed") = 0);
  m.def(
      "train",
      [](const FusionModel& initial, const std::filesystem::path& train_features,
         const std::filesystem::path& val_features, int epochs, double learning_rate, int batch_size, int patience,
         std::uint64_t seed) {
        const auto dim = static_cast<std::size_t>(initial.config.deep_dim);
        const auto tr = import_features(train_features, dim);
        const auto va = import_features(val_features, dim);
        TrainConfig tc;
        tc.epochs = epochs;
        tc.learning_rate = learning_rate;
        tc.batch_size = batch_size;
        tc.patience = patience;
        tc.seed = seed;
        tc.validate();
        TrainResult result;
        {
          py::gil_scoped_release release;
          result = train(initial, tr, va, tc);
        }
        return py::make_tuple(std::move(result.model), result.best_epoch, result.best_val_auc);
      },
      py::arg("model"), py::arg("train_features"), py::arg("val_features"), py::arg("epochs") = 50,
      py::arg("learning_rate") = 1e-3, py::arg("batch_size") = 32, py::arg("patience") = 10, py::arg("seed") = 0,
      "Returns (best model, best epoch, best validation AUC).");
  m.def("load_model", &load_model, py::arg("path"));
  m.def("save_model", &save_model, py::arg("model"), py::arg("path"));
  m.def(
      "predict",
      [](const FusionModel& model, std::vector<double> x1, std::vector<double> biomarkers, const std::string& scan_id) {
        if (biomarkers.size() != kBiomarkerCount) throw py::value_error("expected 18 biomarker values");
        FeatureRecord r;
        r.scan_id = scan_id;
        r.x1 = std::move(x1);
        for (std::size_t i = 0; i < kBiomarkerCount; ++i) r.biomarkers.fields[i] = Measurement::ok(biomarkers[i]);
        return report_dict(predict(model, r));
      },
      py::arg("model"), py::arg("x1"), py::arg("biomarkers"), py::arg("scan_id") = "scan");
  m.def(
      "predict_file",
      [](const FusionModel& model, const std::filesystem::path& features) {
        const auto records = import_features(features, static_cast<std::size_t>(model.config.deep_dim));
        py::list out;
        for (const auto& r : predict_batch(model, records)) out.append(report_dict(r));
        return out;
      },
      py::arg("model"), py::arg("features"));
  m.def(
      "write_synthetic_cohort",
      [](const std::filesystem::path& path, std::size_t n, std::size_t dim, std::size_t informative, double effect,
         std::uint64_t seed) { export_features(synthetic_cohort(n, dim, informative, effect, seed), path); },
      py::arg("path"), py::arg("n"), py::arg("dim") = kDeepFeatureDim, py::arg("informative") = 3,
      py::arg("effect") = 3.0, py::arg("seed") = 0);
}
