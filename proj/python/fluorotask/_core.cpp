#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fluorotask/metrics.hpp"
#include "fluorotask/prioritizer.hpp"
#include "fluorotask/synth.hpp"
#include "fluorotask/trainer.hpp"

namespace py = pybind11;
using namespace fluorotask;

namespace {

GeneratorConfig generator_from_json(const std::string& cfg_json) {
  if (cfg_json.empty() || cfg_json == "{}") return GeneratorConfig{};
  return nlohmann::json::parse(cfg_json).get<GeneratorConfig>();
}

py::array_t<double> to_array_2d(const std::vector<double>& data, int h, int w) {
  py::array_t<double> out({h, w});
  std::copy(data.begin(), data.end(), out.mutable_data());
  return out;
}

py::array_t<std::uint8_t> mask_to_array(const std::vector<std::uint8_t>& mask, int h, int w) {
  py::array_t<std::uint8_t> out({h, w});
  std::copy(mask.begin(), mask.end(), out.mutable_data());
  return out;
}

std::vector<std::uint8_t> mask_from_array(const py::array_t<std::uint8_t>& arr) {
  const auto buf = arr.unchecked<2>();
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(buf.shape(0) * buf.shape(1)));
  for (py::ssize_t y = 0; y < buf.shape(0); ++y) {
    for (py::ssize_t x = 0; x < buf.shape(1); ++x) out.push_back(buf(y, x) ? 1 : 0);
  }
  return out;
}

std::vector<ElectrodeBox> boxes_from_array(const py::array_t<double>& arr) {
  if (arr.ndim() != 2 || arr.shape(1) != 4) {
    throw std::invalid_argument("boxes must have shape [n, 4] (cx, cy, w, h)");
  }
  const auto buf = arr.unchecked<2>();
  std::vector<ElectrodeBox> out;
  for (py::ssize_t i = 0; i < buf.shape(0); ++i) {
    out.push_back({buf(i, 0), buf(i, 1), buf(i, 2), buf(i, 3)});
  }
  return out;
}

std::vector<Detection> detections_from_array(const py::array_t<double>& arr) {
  if (arr.ndim() != 2 || arr.shape(1) != 5) {
    throw std::invalid_argument("detections must have shape [n, 5] (cx, cy, w, h, score)");
  }
  const auto buf = arr.unchecked<2>();
  std::vector<Detection> out;
  for (py::ssize_t i = 0; i < buf.shape(0); ++i) {
    out.push_back({buf(i, 0), buf(i, 1), buf(i, 2), buf(i, 3), buf(i, 4)});
  }
  return out;
}

py::dict record_to_dict(const SampleRecord& rec) {
  py::dict out;
  out["id"] = rec.id;
  out["seed"] = rec.seed;
  out["size"] = rec.size;
  out["image"] = to_array_2d(rec.image, rec.size, rec.size);
  out["mask"] = mask_to_array(rec.mask, rec.size, rec.size);
  py::array_t<double> boxes({static_cast<py::ssize_t>(rec.electrodes.size()), py::ssize_t{4}});
  auto b = boxes.mutable_unchecked<2>();
  for (std::size_t i = 0; i < rec.electrodes.size(); ++i) {
    b(static_cast<py::ssize_t>(i), 0) = rec.electrodes[i].cx;
    b(static_cast<py::ssize_t>(i), 1) = rec.electrodes[i].cy;
    b(static_cast<py::ssize_t>(i), 2) = rec.electrodes[i].w;
    b(static_cast<py::ssize_t>(i), 3) = rec.electrodes[i].h;
  }
  out["electrodes"] = boxes;
  py::array_t<double> line({static_cast<py::ssize_t>(rec.centerline.size()), py::ssize_t{2}});
  auto l = line.mutable_unchecked<2>();
  for (std::size_t i = 0; i < rec.centerline.size(); ++i) {
    l(static_cast<py::ssize_t>(i), 0) = rec.centerline[i][0];
    l(static_cast<py::ssize_t>(i), 1) = rec.centerline[i][1];
  }
  out["centerline"] = line;
  return out;
}

py::dict report_to_dict(const EvalReport& report) {
  py::dict out;
  out["ap"] = report.ap;
  out["mean_j"] = report.mean_j;
  out["mae_px"] = report.mae_px;
  out["rmse_px"] = report.rmse_px;
  out["mean_kpi"] = report.mean_kpi;
  out["n_samples"] = report.per_sample.size();
  return out;
}

py::dict train_from_config(const RunConfig& cfg) {
  const TrainResult r = train(cfg);
  py::dict out = report_to_dict(r.test_report);
  out["iterations"] = r.loss_history.size();
  out["skipped"] = r.skipped_iterations;
  out["best_val_kpi"] = r.best_val_kpi;
  out["best_checkpoint"] = r.best_checkpoint;
  out["last_checkpoint"] = r.last_checkpoint;
  py::array_t<double> losses(
      std::vector<py::ssize_t>{static_cast<py::ssize_t>(r.loss_history.size())});
  std::copy(r.loss_history.begin(), r.loss_history.end(), losses.mutable_data());
  out["loss_history"] = losses;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "multi-task electrode detection / catheter segmentation core";

  m.def(
      "generate",
      [](std::uint64_t seed, const std::string& cfg_json) {
        return record_to_dict(generate_sample(seed, generator_from_json(cfg_json)));
      },
      py::arg("seed"), py::arg("cfg_json") = "{}",
      "Render one synthetic fluoroscopy sample as a dict of numpy arrays.");

  m.def(
      "targets",
      [](std::uint64_t seed, int stride, const std::string& cfg_json) {
        const SampleRecord rec = generate_sample(seed, generator_from_json(cfg_json));
        const TargetBundle t = make_targets(rec, stride);
        py::dict out;
        out["heatmap"] = to_array_2d(t.heatmap, t.gh, t.gw);
        py::array_t<double> sizes({2, t.gh, t.gw});
        std::copy(t.size_map.begin(), t.size_map.end(), sizes.mutable_data());
        out["size_map"] = sizes;
        out["center_mask"] = to_array_2d(t.center_mask, t.gh, t.gw);
        out["peak_count"] = t.peak_count;
        out["stride"] = t.stride;
        return out;
      },
      py::arg("seed"), py::arg("stride") = 4, py::arg("cfg_json") = "{}",
      "Training targets (center heatmap, size map, center mask) for a generated sample.");

  m.def(
      "decode",
      [](const py::array_t<double>& center_logits, const py::array_t<double>& size_pred,
         int max_det, int stride) {
        if (center_logits.ndim() != 2 || size_pred.ndim() != 3 || size_pred.shape(0) != 2) {
          throw std::invalid_argument("decode expects center [gh, gw] and sizes [2, gh, gw]");
        }
        const int gh = static_cast<int>(center_logits.shape(0));
        const int gw = static_cast<int>(center_logits.shape(1));
        std::vector<double> logits(center_logits.data(), center_logits.data() + gh * gw);
        std::vector<double> sizes(size_pred.data(), size_pred.data() + 2 * gh * gw);
        const Tensor ct = Tensor::from_data({1, 1, gh, gw}, std::move(logits));
        const Tensor st = Tensor::from_data({1, 2, gh, gw}, std::move(sizes));
        const std::vector<Detection> dets = decode_detections(ct, st, max_det, stride)[0];
        py::array_t<double> out({static_cast<py::ssize_t>(dets.size()), py::ssize_t{5}});
        auto b = out.mutable_unchecked<2>();
        for (std::size_t i = 0; i < dets.size(); ++i) {
          b(static_cast<py::ssize_t>(i), 0) = dets[i].cx;
          b(static_cast<py::ssize_t>(i), 1) = dets[i].cy;
          b(static_cast<py::ssize_t>(i), 2) = dets[i].w;
          b(static_cast<py::ssize_t>(i), 3) = dets[i].h;
          b(static_cast<py::ssize_t>(i), 4) = dets[i].score;
        }
        return out;
      },
      py::arg("center_logits"), py::arg("size_pred"), py::arg("max_det") = 8,
      py::arg("stride") = 4,
      "Decode center logits + size predictions into [n, 5] detections "
      "(cx, cy, w, h, score).");

  m.def(
      "average_precision",
      [](const py::array_t<double>& dets, const py::array_t<double>& gts,
         std::optional<std::vector<double>> thresholds) {
        const std::vector<double> thr = thresholds ? *thresholds : default_iou_thresholds();
        return average_precision(detections_from_array(dets), boxes_from_array(gts), thr);
      },
      py::arg("detections"), py::arg("ground_truth"), py::arg("thresholds") = py::none(),
      "Single-image average precision; default thresholds 0.50:0.05:0.95.");

  m.def(
      "localization_errors",
      [](const py::array_t<double>& dets, const py::array_t<double>& gts, double penalty_px) {
        const LocErrors e =
            localization_errors(detections_from_array(dets), boxes_from_array(gts), penalty_px);
        return py::make_tuple(e.mae, e.rmse);
      },
      py::arg("detections"), py::arg("ground_truth"), py::arg("penalty_px"),
      "(MAE, RMSE) of matched center distances; unmatched electrodes cost the penalty.");

  m.def(
      "region_similarity",
      [](const py::array_t<std::uint8_t>& pred, const py::array_t<std::uint8_t>& gt) {
        return region_similarity(mask_from_array(pred), mask_from_array(gt));
      },
      py::arg("pred"), py::arg("gt"), "Jaccard index of two binary masks.");

  m.def(
      "dice",
      [](const py::array_t<std::uint8_t>& pred, const py::array_t<std::uint8_t>& gt) {
        return dice(mask_from_array(pred), mask_from_array(gt));
      },
      py::arg("pred"), py::arg("gt"), "Dice coefficient of two binary masks.");

  m.def(
      "skeletonize",
      [](const py::array_t<std::uint8_t>& mask) {
        const int h = static_cast<int>(mask.shape(0));
        const int w = static_cast<int>(mask.shape(1));
        return mask_to_array(skeletonize(mask_from_array(mask), w, h), h, w);
      },
      py::arg("mask"), "Thin a binary mask to a 1-px-wide, connectivity-preserving skeleton.");

  m.def(
      "select_samples",
      [](const std::vector<double>& difficulty, const std::vector<std::uint8_t>& available,
         const std::string& policy_json) {
        const PrioritizationPolicy policy =
            nlohmann::json::parse(policy_json).get<PrioritizationPolicy>();
        policy.validate();
        const SelectionResult r = select_samples(difficulty, available, policy);
        py::array_t<double> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(r.delta.size())});
        std::copy(r.delta.begin(), r.delta.end(), out.mutable_data());
        return out;
      },
      py::arg("difficulty"), py::arg("available"), py::arg("policy_json"),
      "Per-sample selection weights for a policy given as a JSON string.");

  py::class_<KpiState>(m, "KpiTracker")
      .def(py::init([](double alpha, double eps_floor) {
             KpiState s;
             s.alpha = alpha;
             s.eps_floor = eps_floor;
             return s;
           }),
           py::arg("alpha") = 0.5, py::arg("eps_floor") = 0.05)
      .def(
          "update",
          [](KpiState& s, std::optional<double> kpi_d, std::optional<double> kpi_s) {
            ema_update(s, kpi_d, kpi_s);
          },
          py::arg("kpi_d") = py::none(), py::arg("kpi_s") = py::none(),
          "One smoothing step; None leaves that task untouched.")
      .def("task_weights", [](const KpiState& s) { return task_weights(s); })
      .def_readonly("kpi_bar_d", &KpiState::kpi_bar_d)
      .def_readonly("kpi_bar_s", &KpiState::kpi_bar_s)
      .def_readonly("tau", &KpiState::tau);

  m.def(
      "gen_data",
      [](const std::string& out_dir, int n, std::uint64_t seed, bool force,
         const std::string& cfg_json) {
        gen_data(generator_from_json(cfg_json), n, out_dir, seed, force);
      },
      py::arg("out_dir"), py::arg("n"), py::arg("seed"), py::arg("force") = false,
      py::arg("cfg_json") = "{}", "Write a synthetic dataset directory.");

  m.def(
      "train_config",
      [](const std::string& path) { return train_from_config(load_run_config(path)); },
      py::arg("path"), "Run training from a JSON config file; returns the test report.");

  m.def(
      "train_json",
      [](const std::string& config_json) {
        RunConfig cfg = nlohmann::json::parse(config_json).get<RunConfig>();
        cfg.validate();
        return train_from_config(cfg);
      },
      py::arg("config_json"), "Run training from an in-memory JSON config string.");

  m.def(
      "evaluate_checkpoint",
      [](const std::string& ckpt_path, const std::string& data_dir, const std::string& split) {
        const Checkpoint ckpt = load_checkpoint(ckpt_path);
        const MultiTaskNet net = MultiTaskNet::from_checkpoint(ckpt);
        Dataset ds = load_dataset(data_dir);
        if (ds.records.empty()) {
          throw std::invalid_argument("no samples in " + data_dir);
        }
        std::vector<const SampleRecord*> records;
        if (split == "all") {
          for (const SampleRecord& r : ds.records) records.push_back(&r);
        } else {
          records = ds.split_records(split);
        }
        return report_to_dict(evaluate(net, records));
      },
      py::arg("ckpt_path"), py::arg("data_dir"), py::arg("split") = "test",
      "Score a checkpoint against one split of a dataset directory.");
}
