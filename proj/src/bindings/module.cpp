#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ookd/augment.hpp"
#include "ookd/checkpoint.hpp"
#include "ookd/evalkit.hpp"
#include "ookd/losses.hpp"
#include "ookd/pipeline.hpp"
#include "ookd/plot.hpp"
#include "ookd/qfa.hpp"

namespace py = pybind11;
using namespace ookd;

namespace {

nn::Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  std::vector<int> shape;
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) {
    shape.push_back(static_cast<int>(arr.shape(i)));
  }
  std::vector<double> values(arr.data(), arr.data() + arr.size());
  return nn::Tensor::from(shape, std::move(values));
}

py::array_t<double> array_from_tensor(const nn::Tensor& t) {
  std::vector<py::ssize_t> shape;
  for (int i = 0; i < t.ndim(); ++i) shape.push_back(t.dim(i));
  py::array_t<double> arr(shape);
  std::copy(t.data(), t.data() + t.numel(), arr.mutable_data());
  return arr;
}

data::Box box_from_seq(const std::vector<double>& b) {
  if (b.size() != 4) throw ValidationError("box must have 4 elements (cx, cy, w, h)");
  return {b[0], b[1], b[2], b[3]};
}

std::vector<data::Mask> masks_from_array(
    const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& arr) {
  if (arr.ndim() != 3) throw ValidationError("masks must be a T x H x W uint8 array");
  int T = static_cast<int>(arr.shape(0));
  int H = static_cast<int>(arr.shape(1));
  int W = static_cast<int>(arr.shape(2));
  std::vector<data::Mask> out;
  const uint8_t* p = arr.data();
  for (int t = 0; t < T; ++t) {
    data::Mask m(H, W);
    for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) {
      m.bits[static_cast<size_t>(i)] = p[static_cast<int64_t>(t) * H * W + i] ? 1 : 0;
    }
    out.push_back(std::move(m));
  }
  return out;
}

py::dict clip_to_dict(const data::VideoClip& clip) {
  py::dict d;
  d["clip_id"] = clip.clip_id;
  int T = clip.num_frames(), H = clip.height, W = clip.width;
  py::array_t<uint8_t> frames({T, H, W, 3});
  uint8_t* fp = frames.mutable_data();
  for (int t = 0; t < T; ++t) {
    std::copy(clip.frames[static_cast<size_t>(t)].pixels.begin(),
              clip.frames[static_cast<size_t>(t)].pixels.end(),
              fp + static_cast<int64_t>(t) * H * W * 3);
  }
  d["frames"] = frames;
  py::list instances;
  for (const data::InstanceTrack& tr : clip.instances) {
    py::dict inst;
    inst["instance_id"] = tr.instance_id;
    inst["class_id"] = tr.class_id;
    py::array_t<uint8_t> masks({T, H, W});
    uint8_t* mp = masks.mutable_data();
    for (int t = 0; t < T; ++t) {
      std::copy(tr.masks[static_cast<size_t>(t)].bits.begin(),
                tr.masks[static_cast<size_t>(t)].bits.end(),
                mp + static_cast<int64_t>(t) * H * W);
    }
    inst["masks"] = masks;
    py::array_t<double> boxes({T, 4});
    double* bp = boxes.mutable_data();
    for (int t = 0; t < T; ++t) {
      for (int k = 0; k < 4; ++k) {
        bp[t * 4 + k] = tr.boxes[static_cast<size_t>(t)][static_cast<size_t>(k)];
      }
    }
    inst["boxes"] = boxes;
    py::array_t<uint8_t> visible(T);
    std::copy(tr.visible.begin(), tr.visible.end(), visible.mutable_data());
    inst["visible"] = visible;
    instances.append(inst);
  }
  d["instances"] = instances;
  return d;
}

}  // namespace

PYBIND11_MODULE(_ookd, m) {
  m.doc() = "Offline-to-online knowledge distillation for video instance segmentation";
  m.attr("__version__") = "0.1.0";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_IOError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);

  m.def(
      "generate_clip",
      [](int num_frames, int height, int width, uint64_t seed, int min_instances,
         int max_instances, const std::string& clip_id) {
        data::ClipSpec spec;
        spec.num_frames = num_frames;
        spec.height = height;
        spec.width = width;
        spec.palette = data::default_palette();
        spec.min_instances = min_instances;
        spec.max_instances = max_instances;
        return clip_to_dict(data::generate_clip(spec, seed, clip_id));
      },
      py::arg("num_frames") = 12, py::arg("height") = 64, py::arg("width") = 64,
      py::arg("seed") = 0, py::arg("min_instances") = 2, py::arg("max_instances") = 4,
      py::arg("clip_id") = "",
      "Generate one synthetic clip with the default 7-class palette.");

  m.def("default_palette", []() {
    py::list out;
    for (const data::ShapeClass& c : data::default_palette()) {
      py::dict d;
      d["name"] = c.name;
      d["kind"] = c.kind;
      d["color"] = py::make_tuple(c.color[0], c.color[1], c.color[2]);
      d["weight"] = c.weight;
      out.append(d);
    }
    return out;
  });

  m.def("paste_probabilities", &augment::paste_probabilities, py::arg("frequencies"),
        py::arg("k") = 0.7,
        "Per-class paste probability: k * (max(p) - p_c) / (max(p) - min(p)).");

  m.def(
      "giou",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        return qfa::giou(box_from_seq(a), box_from_seq(b));
      },
      py::arg("box_a"), py::arg("box_b"),
      "Generalized IoU of two (cx, cy, w, h) boxes.");

  m.def(
      "class_cost",
      [](const std::vector<double>& logits, int gt_class) {
        return qfa::class_cost(nn::Tensor::from({static_cast<int>(logits.size())},
                                                std::vector<double>(logits)),
                               gt_class);
      },
      py::arg("logits"), py::arg("gt_class"));

  m.def(
      "hungarian_match",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& cost) {
        nn::Tensor S = tensor_from_array(cost);
        if (S.ndim() != 2) throw ValidationError("cost matrix must be 2D");
        return qfa::match(S, qfa::MatchMode::Hungarian).sigma;
      },
      py::arg("cost"), "Injective min-cost assignment of columns to rows (N >= M).");

  m.def(
      "argmin_match",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& cost) {
        nn::Tensor S = tensor_from_array(cost);
        if (S.ndim() != 2) throw ValidationError("cost matrix must be 2D");
        return qfa::match(S, qfa::MatchMode::Argmin).sigma;
      },
      py::arg("cost"));

  m.def(
      "kd_loss",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& student,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& teacher) {
        return losses::kd_loss_value(tensor_from_array(student), tensor_from_array(teacher));
      },
      py::arg("student"), py::arg("teacher"),
      "Mean (1 - cosine similarity) over associated embedding pairs.");

  m.def(
      "sequence_iou",
      [](const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& gt) {
        return evalkit::sequence_iou(masks_from_array(pred), masks_from_array(gt));
      },
      py::arg("pred"), py::arg("gt"), "Mask-sequence IoU of two T x H x W tracks.");

  m.def(
      "video_map",
      [](const py::list& preds, const py::list& gts, int num_classes) {
        std::vector<evalkit::PredTrack> ps;
        for (const auto& item : preds) {
          py::dict d = item.cast<py::dict>();
          ps.push_back({d["clip_id"].cast<std::string>(), d["class_id"].cast<int>(),
                        d["score"].cast<double>(),
                        masks_from_array(d["masks"].cast<py::array_t<uint8_t>>())});
        }
        std::vector<evalkit::GtTrack> gs;
        for (const auto& item : gts) {
          py::dict d = item.cast<py::dict>();
          gs.push_back({d["clip_id"].cast<std::string>(), d["class_id"].cast<int>(),
                        masks_from_array(d["masks"].cast<py::array_t<uint8_t>>())});
        }
        evalkit::EvalResult r = evalkit::video_map(ps, gs, num_classes);
        return py::module_::import("json").attr("loads")(r.to_json().dump());
      },
      py::arg("predictions"), py::arg("ground_truth"), py::arg("num_classes"),
      "Video AP/AR over mask-sequence IoU.");

  // Pipeline entry points; configs travel as JSON strings.
  m.def(
      "generate_datasets",
      [](const std::string& config_json, const std::string& out_root) {
        pipeline::RunConfig cfg =
            pipeline::RunConfig::from_json(nlohmann::json::parse(config_json));
        pipeline::generate_datasets(cfg.data_gen, out_root);
      },
      py::arg("config_json"), py::arg("out_root"));

  m.def(
      "train_baseline",
      [](const std::string& config_json, const std::string& run_dir,
         const std::string& init_checkpoint) {
        pipeline::RunConfig cfg =
            pipeline::RunConfig::from_json(nlohmann::json::parse(config_json));
        pipeline::StageOutcome o = pipeline::train_baseline(cfg, run_dir, init_checkpoint);
        py::dict d;
        d["checkpoint"] = o.checkpoint;
        d["initial_loss"] = o.initial_loss;
        d["final_loss"] = o.final_loss;
        return d;
      },
      py::arg("config_json"), py::arg("run_dir"), py::arg("init_checkpoint") = "");

  m.def(
      "distill",
      [](const std::string& config_json, const std::string& run_dir,
         const std::string& student_init, const std::string& teacher_ckpt,
         const std::string& aggregator_ckpt) {
        pipeline::RunConfig cfg =
            pipeline::RunConfig::from_json(nlohmann::json::parse(config_json));
        pipeline::StageOutcome o =
            pipeline::distill(cfg, run_dir, student_init, teacher_ckpt, aggregator_ckpt);
        py::dict d;
        d["checkpoint"] = o.checkpoint;
        d["final_loss"] = o.final_loss;
        d["final_kd"] = o.final_kd;
        return d;
      },
      py::arg("config_json"), py::arg("run_dir"), py::arg("student_init"),
      py::arg("teacher_checkpoint"), py::arg("aggregator_checkpoint"));

  m.def(
      "train_teacher",
      [](const std::string& config_json, const std::string& run_dir,
         const std::string& baseline_ckpt) {
        pipeline::RunConfig cfg =
            pipeline::RunConfig::from_json(nlohmann::json::parse(config_json));
        pipeline::StageOutcome o = pipeline::train_teacher(cfg, run_dir, baseline_ckpt);
        py::dict d;
        d["checkpoint"] = o.checkpoint;
        d["final_loss"] = o.final_loss;
        return d;
      },
      py::arg("config_json"), py::arg("run_dir"), py::arg("baseline_checkpoint"));

  m.def(
      "evaluate_checkpoint",
      [](const std::string& config_json, const std::string& checkpoint,
         const std::string& dataset_root, const std::string& out_dir) {
        pipeline::RunConfig cfg =
            pipeline::RunConfig::from_json(nlohmann::json::parse(config_json));
        nlohmann::json metrics =
            pipeline::evaluate_checkpoint(cfg, checkpoint, dataset_root, out_dir);
        return py::module_::import("json").attr("loads")(metrics.dump());
      },
      py::arg("config_json"), py::arg("checkpoint"), py::arg("dataset_root"),
      py::arg("out_dir"));

  m.def("default_config", []() {
    return pipeline::RunConfig{}.to_json().dump(2);
  });
}
