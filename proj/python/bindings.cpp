#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sizefit/errors.hpp"
#include "sizefit/geometry.hpp"
#include "sizefit/gradcheck.hpp"
#include "sizefit/maskops.hpp"
#include "sizefit/metrics.hpp"
#include "sizefit/nn.hpp"
#include "sizefit/pipeline.hpp"
#include "sizefit/synthdata.hpp"

namespace py = pybind11;
using namespace sizefit;
using nlohmann::json;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Labels = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

// JSON crosses the boundary as text; the package wrapper parses it.
std::string dump(const json& j) { return j.dump(); }

std::vector<double> flat(const Array& a) { return {a.data(), a.data() + a.size()}; }

void require_2d(const py::buffer_info& b, const char* what) {
  if (b.ndim != 2) throw ShapeError(std::string(what) + " must be a 2-D array");
}

Mask to_mask(const Array& a) {
  require_2d(a.request(), "mask");
  return Mask(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), flat(a));
}

ResidualMask to_residual(const Array& a) {
  require_2d(a.request(), "residual");
  return ResidualMask(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), flat(a));
}

PartLabelMap to_parts(const Labels& a) {
  require_2d(a.request(), "part map");
  PartLabelMap p(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  const auto v = a.unchecked<2>();
  for (int y = 0; y < p.height(); ++y)
    for (int x = 0; x < p.width(); ++x) {
      if (v(y, x) >= kPartLabelCount) throw DataError("part label out of range");
      p.at(y, x) = static_cast<PartLabel>(v(y, x));
    }
  return p;
}

template <class M>
Array from_grid(const M& m) {
  Array out({m.height(), m.width()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

Labels from_parts(const PartLabelMap& p) {
  Labels out({p.height(), p.width()});
  auto* d = out.mutable_data();
  for (PartLabel l : p.labels()) *d++ = static_cast<std::uint8_t>(l);
  return out;
}

Array from_tensor(const tensor::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  const auto v = t.values();
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

tensor::Tensor to_tensor(const Array& a) {
  std::vector<std::size_t> shape(a.shape(), a.shape() + a.ndim());
  return tensor::Tensor(shape, flat(a));
}

py::dict rendering(const synth::Rendering& r) {
  py::dict d;
  d["image"] = from_tensor(r.image);
  d["mask"] = from_grid(r.mask);
  d["parts"] = from_parts(r.parts);
  d["keypoints"] = dump(geometry::to_json(r.keypoints));
  return d;
}

metrics::SemMode sem_mode(const std::string& s) {
  if (s == "soft") return metrics::SemMode::soft;
  if (s == "binary") return metrics::SemMode::binary;
  throw UsageError("mode must be 'soft' or 'binary'");
}

std::vector<geometry::Point2> points(const Array& a) {
  if (a.ndim() != 2 || a.shape(1) != 2) throw ShapeError("points must have shape (n, 2)");
  std::vector<geometry::Point2> out(static_cast<std::size_t>(a.shape(0)));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {a.data()[2 * i], a.data()[2 * i + 1]};
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Size-aware garment mask deformation";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  // ---- masks and metrics ----
  m.def("residual_from", [](const Array& m_g, const Array& m_r) {
    return from_grid(residual_from(to_mask(m_g), to_mask(m_r)));
  });
  m.def("apply_residual", [](const Array& m_r, const Array& rm) {
    return from_grid(apply_residual(to_mask(m_r), to_residual(rm)));
  });
  m.def(
      "sem",
      [](const Array& m_d, const Labels& parts_d, const Array& m_g, const Labels& parts_g, const std::string& mode) {
        return dump(metrics::to_json(
            metrics::sem(to_mask(m_d), to_parts(parts_d), to_mask(m_g), to_parts(parts_g), sem_mode(mode))));
      },
      py::arg("m_d"), py::arg("parts_d"), py::arg("m_g"), py::arg("parts_g"), py::arg("mode") = "soft");
  m.def(
      "iou", [](const Array& a, const Array& b, double threshold) { return metrics::iou(to_mask(a), to_mask(b), threshold); },
      py::arg("a"), py::arg("b"), py::arg("threshold") = kDefaultThreshold);

  // ---- geometry ----
  m.def("estimate_homography", [](const Array& src, const Array& dst) {
    const auto h = geometry::estimate_homography(points(src), points(dst));
    Array out({3, 3});
    std::copy(h.matrix().begin(), h.matrix().end(), out.mutable_data());
    return out;
  });

  // ---- synthetic data ----
  m.def("garment_size", [](int garment_id, const std::string& label) {
    return dump(synth::to_json(synth::garment_size(garment_id, synth::size_from_name(label))));
  });
  m.def(
      "make_pair",
      [](std::uint64_t seed, int body_id, int pose_id, int garment_id, const std::string& ref_label,
         const std::string& try_label, double jitter) {
        Rng rng(seed);
        const auto p = synth::make_pair(synth::sample_body(seed, body_id, pose_id), garment_id,
                                        synth::garment_size(garment_id, synth::size_from_name(ref_label)),
                                        synth::garment_size(garment_id, synth::size_from_name(try_label)), jitter, rng);
        py::dict d;
        d["ref"] = rendering(p.ref);
        d["try"] = rendering(p.tryon);
        d["s_ref"] = dump(synth::to_json(p.s_ref));
        d["s_try"] = dump(synth::to_json(p.s_try));
        return d;
      },
      py::arg("seed"), py::arg("body_id"), py::arg("pose_id"), py::arg("garment_id"), py::arg("ref_label"),
      py::arg("try_label"), py::arg("jitter") = 0.0);
  m.def(
      "build_dataset",
      [](const std::string& config, const std::string& root) {
        const auto c = synth::dataset_config_from_json(json::parse(config));
        py::gil_scoped_release release;
        return dump(synth::build_dataset(c, root));
      },
      py::arg("config"), py::arg("root"));

  // ---- numerics ----
  m.def(
      "gradcheck",
      [](int instances_per_case) {
        gradcheck::Options opt;
        opt.instances_per_case = instances_per_case;
        const auto r = gradcheck::run_suite(opt);
        return dump({{"max_rel_error", r.max_rel_error},
                     {"instances", r.instances},
                     {"cases", r.cases.size()},
                     {"seconds", r.seconds}});
      },
      py::arg("instances_per_case") = 4);

  // ---- training and inference ----
  m.def(
      "train",
      [](const std::string& config) {
        const auto c = pipeline::train_config_from_json(json::parse(config));
        pipeline::validate(c);
        json log = json::array();
        {
          py::gil_scoped_release release;
          for (const auto& e : pipeline::train(c).log) log.push_back(pipeline::to_json(e));
        }
        return dump(log);
      },
      py::arg("config"));
  m.def("default_train_config", [] { return dump(pipeline::to_json(pipeline::TrainConfig{})); });

  py::class_<pipeline::LoadedModel>(m, "Model")
      .def(py::init([](const std::string& path) { return pipeline::load_model(path); }), py::arg("checkpoint"))
      .def_property_readonly("config", [](const pipeline::LoadedModel& lm) { return dump(lm.checkpoint.config); })
      .def_property_readonly("hash", [](const pipeline::LoadedModel& lm) { return lm.checkpoint.hash(); })
      .def(
          "deform",
          [](const pipeline::LoadedModel& lm, const Array& person, const Array& m_ref, const std::string& s_ref,
             const std::string& s_try) {
            const auto p = nn::predict(lm.model, lm.normalizer, to_tensor(person), to_mask(m_ref),
                                       synth::size_from_json(json::parse(s_ref)),
                                       synth::size_from_json(json::parse(s_try)));
            return py::make_tuple(from_grid(p.m_d), from_grid(p.rm_d));
          },
          py::arg("person"), py::arg("m_ref"), py::arg("s_ref"), py::arg("s_try"))
      .def(
          "evaluate",
          [](const pipeline::LoadedModel& lm, const std::string& root, const std::string& split,
             const std::string& mode) {
            const auto mm = sem_mode(mode);
            py::gil_scoped_release release;
            return dump(pipeline::to_json(pipeline::evaluate(lm, root, split, mm)));
          },
          py::arg("data_root"), py::arg("split"), py::arg("mode") = "soft");
}
