#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fluorotask/trainer.hpp"

namespace fluorotask {

namespace fs = std::filesystem;

std::vector<std::string> ablation_variants(const std::string& axis) {
  if (axis == "task_weight") {
    return {"1:1", "2:1", "5:1", "10:1", "1:2", "1:5", "1:10", "dynamic"};
  }
  if (axis == "kpi_metric") {
    return {"mae+iou", "rmse+iou", "mae+dice", "rmse+dice", "focal+ce"};
  }
  if (axis == "strategy") {
    return {"soft",
            "hard_threshold",
            "fixed_fraction_30",
            "fixed_fraction_50",
            "fixed_fraction_70",
            "topk_soft",
            "topk_hard"};
  }
  if (axis == "backbone_scale") {
    return {"base4", "base8", "base16"};
  }
  throw std::invalid_argument("unknown ablation axis '" + axis +
                              "' (task_weight|kpi_metric|strategy|backbone_scale)");
}

namespace {

void apply_variant(const std::string& axis, const std::string& variant, RunConfig& cfg,
                   TrainOptions& opts) {
  if (axis == "task_weight") {
    if (variant != "dynamic") {
      const auto colon = variant.find(':');
      opts.pinned_task_weights = {std::stod(variant.substr(0, colon)),
                                  std::stod(variant.substr(colon + 1))};
    }
    return;
  }
  if (axis == "kpi_metric") {
    const auto plus = variant.find('+');
    const std::string det = variant.substr(0, plus);
    cfg.prioritization.kpi_metric_d = det_kpi_metric_from_string(det == "focal" ? "focal_loss" : det);
    cfg.prioritization.kpi_metric_s = seg_kpi_metric_from_string(variant.substr(plus + 1));
    return;
  }
  if (axis == "strategy") {
    if (variant.rfind("fixed_fraction_", 0) == 0) {
      cfg.prioritization.strategy = Strategy::kFixedFraction;
      cfg.prioritization.retention_rho = std::stod(variant.substr(15)) / 100.0;
    } else {
      cfg.prioritization.strategy = strategy_from_string(variant);
    }
    return;
  }
  // backbone_scale
  cfg.model.base_channels = std::stoi(variant.substr(4));
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (const double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

std::vector<AblationRow> ablate(const RunConfig& base, const std::string& axis, int n_seeds,
                                const std::string& out_dir) {
  const std::vector<std::string> variants = ablation_variants(axis);
  if (n_seeds < 1) {
    throw std::invalid_argument("ablate: need at least one seed");
  }
  std::vector<AblationRow> rows;
  for (const std::string& variant : variants) {
    AblationRow row;
    row.variant = variant;
    for (int k = 0; k < n_seeds; ++k) {
      RunConfig cfg = base;
      TrainOptions opts;
      cfg.seed = base.seed + static_cast<std::uint64_t>(k);
      cfg.output_dir.clear();  // variants share seeds but never artifacts
      try {
        apply_variant(axis, variant, cfg, opts);
        const TrainResult r = train(cfg, opts);
        row.ap.push_back(r.test_report.ap);
        row.mean_j.push_back(r.test_report.mean_j);
        row.mean_kpi.push_back(r.test_report.mean_kpi);
      } catch (const std::exception& e) {
        std::fprintf(stderr, "ablate: variant '%s' seed %d failed: %s\n", variant.c_str(), k,
                     e.what());
        row.failed = true;
        break;
      }
    }
    rows.push_back(std::move(row));
  }

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    const fs::path csv_path = fs::path(out_dir) / ("ablation_" + axis + ".csv");
    std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
    csv << "variant,seed,status,ap,mean_j,mean_kpi\n";
    for (const AblationRow& row : rows) {
      if (row.failed) {
        csv << row.variant << ",,failed,,,\n";
        continue;
      }
      for (std::size_t k = 0; k < row.ap.size(); ++k) {
        char line[160];
        std::snprintf(line, sizeof(line), ",%zu,ok,%.6f,%.6f,%.6f\n", k, row.ap[k], row.mean_j[k],
                      row.mean_kpi[k]);
        csv << row.variant << line;
      }
    }
    if (!csv.flush()) {
      throw std::runtime_error("cannot write ablation table: " + csv_path.string());
    }

    const fs::path txt_path = fs::path(out_dir) / ("ablation_" + axis + ".txt");
    std::ofstream txt(txt_path, std::ios::binary | std::ios::trunc);
    char line[200];
    std::snprintf(line, sizeof(line), "%-20s %16s %16s %16s\n", ("axis: " + axis).c_str(), "AP",
                  "mean J", "mean KPI");
    txt << line;
    for (const AblationRow& row : rows) {
      if (row.failed) {
        std::snprintf(line, sizeof(line), "%-20s %16s %16s %16s\n", row.variant.c_str(), "FAILED",
                      "FAILED", "FAILED");
      } else {
        char ap[24], mj[24], mk[24];
        std::snprintf(ap, sizeof(ap), "%.3f+-%.3f", mean_of(row.ap), sd_of(row.ap));
        std::snprintf(mj, sizeof(mj), "%.3f+-%.3f", mean_of(row.mean_j), sd_of(row.mean_j));
        std::snprintf(mk, sizeof(mk), "%.3f+-%.3f", mean_of(row.mean_kpi), sd_of(row.mean_kpi));
        std::snprintf(line, sizeof(line), "%-20s %16s %16s %16s\n", row.variant.c_str(), ap, mj,
                      mk);
      }
      txt << line;
    }
    txt.flush();
  }
  return rows;
}

}  // namespace fluorotask
