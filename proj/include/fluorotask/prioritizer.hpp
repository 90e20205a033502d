#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fluorotask/metrics.hpp"
#include "fluorotask/synth.hpp"
#include "fluorotask/tensor.hpp"

namespace fluorotask {

enum class Strategy { kSoft, kHardThreshold, kFixedFraction, kTopkSoft, kTopkHard };
Strategy strategy_from_string(const std::string& s);
std::string strategy_to_string(Strategy s);

// How the per-sample detection KPI is measured.
enum class DetKpiMetric { kMae, kRmse, kFocalLossBased };
DetKpiMetric det_kpi_metric_from_string(const std::string& s);
std::string det_kpi_metric_to_string(DetKpiMetric m);

// How the per-sample segmentation KPI is measured.
enum class SegKpiMetric { kIou, kDice, kCeBased };
SegKpiMetric seg_kpi_metric_from_string(const std::string& s);
std::string seg_kpi_metric_to_string(SegKpiMetric m);

struct PrioritizationPolicy {
  Strategy strategy = Strategy::kTopkHard;
  double retention_rho = 0.7;  // fraction of available samples kept
  double threshold_eta = 0.5;  // hard_threshold cut on the soft weight
  double alpha = 0.5;          // smoothing discount; larger favors recent KPIs
  DetKpiMetric kpi_metric_d = DetKpiMetric::kMae;
  SegKpiMetric kpi_metric_s = SegKpiMetric::kIou;
  double eps_floor = 0.05;          // lower clamp on smoothed KPIs
  bool difficulty_momentum = true;  // smooth per-sample difficulty as well
  void validate() const;
};
void to_json(nlohmann::json& j, const PrioritizationPolicy& p);
void from_json(const nlohmann::json& j, PrioritizationPolicy& p);

// One sample's decoded predictions, as consumed by KPI scoring.
struct SamplePrediction {
  std::vector<Detection> detections;
  std::vector<std::uint8_t> mask;  // thresholded segmentation
  double focal_loss = 0.0;         // per-sample detection loss, for kFocalLossBased
  double ce_loss = 0.0;            // per-sample cross-entropy, for kCeBased
};

struct SampleTarget {
  std::vector<ElectrodeBox> electrodes;
  std::vector<std::uint8_t> mask;
  double diag_px = 0.0;  // image diagonal, scales the localization mapping
};

// Per-sample KPIs in [0,1]; a task with no ground truth (or an undefined
// score) is flagged unavailable and its value pinned to 0, never NaN.
struct SampleKpis {
  std::vector<double> kpi_d, kpi_s;
  std::vector<std::uint8_t> avail_d, avail_s;
};

SampleKpis compute_sample_kpis(const std::vector<SamplePrediction>& preds,
                               const std::vector<SampleTarget>& targets,
                               const PrioritizationPolicy& policy);

// Per-task difficulty trace of one sample, kept for curve reporting.
struct TaskDifficulty {
  double value = 0.0;
  bool init = false;
  std::uint8_t selected = 0;  // 1 iff the last iteration assigned weight 1
};
struct SampleDifficulty {
  TaskDifficulty det, seg;
};

// Smoothed-KPI tracker: one value per task plus the per-sample difficulty
// registry (ids appear only once observed). tau advances once per iteration.
struct KpiState {
  double alpha = 0.5;
  double eps_floor = 0.05;
  double kpi_bar_d = 1.0, kpi_bar_s = 1.0;
  bool init_d = false, init_s = false;
  std::int64_t tau = 0;
  bool difficulty_momentum = true;
  std::map<std::int64_t, SampleDifficulty> sample_difficulty;

  static KpiState from_policy(const PrioritizationPolicy& policy);
};
void to_json(nlohmann::json& j, const KpiState& s);
void from_json(const nlohmann::json& j, KpiState& s);

// One smoothing step: new_bar = alpha * kpi + (1 - alpha) * old_bar, the
// first observation initializing the average directly; the floor is applied
// last. A task given no value keeps its state. Advances tau by one.
void ema_update(KpiState& state, std::optional<double> kpi_d, std::optional<double> kpi_s);

struct SelectionResult {
  std::vector<double> delta;  // per-sample weights in [0,1]
  bool skipped = false;       // true when no sample was available
};

// Turns per-sample difficulties into selection weights. Unavailable samples
// always get 0. Ranked strategies keep ceil(rho * n_available) samples, ties
// broken by the smaller sample id (ids default to batch positions); the
// fixed_fraction strategy instead applies the caller's once-per-epoch flags.
SelectionResult select_samples(const std::vector<double>& difficulty,
                               const std::vector<std::uint8_t>& available,
                               const PrioritizationPolicy& policy,
                               const std::vector<std::int64_t>* sample_ids = nullptr,
                               const std::vector<std::uint8_t>* epoch_selected = nullptr);

// Weighted mean over the FULL batch size: sum(delta_i * loss_i) / n.
Tensor masked_task_loss(const Tensor& per_sample_losses, const std::vector<double>& delta);

// (w_d, w_s) with w_t = 1 / max(kpi_bar_t, eps_floor).
std::pair<double, double> task_weights(const KpiState& state);

// Per-sample difficulty D = 1 / max(kpi, eps_floor), smoothed with alpha when
// momentum is on; records which samples the current iteration selected.
void update_sample_difficulties(KpiState& state, const std::vector<std::int64_t>& ids,
                                const SampleKpis& kpis, const std::vector<double>& delta_d,
                                const std::vector<double>& delta_s);

// The difficulties update_sample_difficulties would assign, computed without
// touching the registry. Selection ranks these previews so that the values a
// sample is chosen by and the values stored afterwards are the same numbers.
// Unavailable tasks fall back to the stored value (1.0 before any history).
struct BatchDifficulty {
  std::vector<double> det;
  std::vector<double> seg;
};
BatchDifficulty batch_difficulties(const KpiState& state, const std::vector<std::int64_t>& ids,
                                   const SampleKpis& kpis);

// Append-only CSV sink for difficulty curves. A sink that cannot be opened
// or written warns once on stderr and drops rows; training is never blocked.
class CurveRecorder {
 public:
  CurveRecorder() = default;  // disabled sink
  CurveRecorder(const std::string& path, std::vector<std::int64_t> tracked_ids);
  void append_row(std::int64_t tau, std::int64_t sample_id, char task, double difficulty,
                  bool selected);
  const std::vector<std::int64_t>& tracked() const { return tracked_; }
  bool enabled() const { return enabled_; }

 private:
  std::ofstream out_;
  std::vector<std::int64_t> tracked_;
  bool enabled_ = false;
  bool warned_ = false;
  std::string path_;
  void fail();
};

// Writes one row per tracked sample and task (only tasks observed so far)
// with the state's current tau.
void record_difficulty_curves(const KpiState& state, CurveRecorder& sink);

}  // namespace fluorotask
