#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fluorotask/synth.hpp"
#include "fluorotask/tensor.hpp"

namespace fluorotask {

struct Detection {
  double cx = 0.0, cy = 0.0;  // pixel coordinates
  double w = 0.0, h = 0.0;    // pixel extents
  double score = 0.0;         // confidence in [0,1]
};

// Default evaluation threshold grid: 0.50:0.05:0.95.
std::vector<double> default_iou_thresholds();

// Axis-aligned IoU of two center+extent boxes.
double box_iou(double acx, double acy, double aw, double ah, double bcx, double bcy,
               double bw, double bh);

// Minimum probability for a suppression survivor to be emitted; keeps flat
// near-zero background from producing a spurious first-cell detection.
inline constexpr double kMinPeakScore = 0.01;

// Decodes one batch of center logits and size predictions into per-sample
// detection lists. A cell survives 3x3 suppression iff its probability is
// strictly above every earlier-in-scan neighbor and at least every later one
// (so ties keep the first cell) and clears kMinPeakScore; surviving peaks are
// refined by a log-space parabola fit along each axis (skipped at borders and
// degenerate curvature) and scaled by the stride. Detections are emitted
// sorted by descending score, at most max_det (>= 1) each.
std::vector<std::vector<Detection>> decode_detections(const Tensor& center_logits,
                                                      const Tensor& size_pred,
                                                      int max_det, int stride);

// Average precision for ONE image: greedy matching by descending score
// (ties by emission order; candidate ground truths by highest IoU, then
// smallest index), 101-point interpolated PR, averaged over thresholds.
// No ground truth: 1.0 without detections, 0.0 with them.
double average_precision(const std::vector<Detection>& dets,
                         const std::vector<ElectrodeBox>& gts,
                         const std::vector<double>& thresholds);

// Region similarity (IoU) of two equally-shaped binary masks; both-empty = 1.
double region_similarity(const std::vector<std::uint8_t>& pred,
                         const std::vector<std::uint8_t>& gt);

// Dice coefficient; both-empty = 1. Equals 2J/(1+J).
double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt);

struct LocErrors {
  double mae = 0.0;
  double rmse = 0.0;
};

// Center localization errors over ground truths, matched greedily at IoU 0.5.
// Every unmatched ground truth contributes `penalty_px` (the image diagonal).
LocErrors localization_errors(const std::vector<Detection>& dets,
                              const std::vector<ElectrodeBox>& gts, double penalty_px);

// Iterative morphological thinning to a one-pixel-wide, 8-connected skeleton
// with no fully-set 2x2 block.
std::vector<std::uint8_t> skeletonize(const std::vector<std::uint8_t>& mask, int w, int h);

struct PerSampleEval {
  std::string id;
  double ap50 = 0.0;
  double j = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
};

struct EvalReport {
  double ap = 0.0;      // fraction in [0,1]; serialized as a percentage
  double mean_j = 0.0;  // fraction in [0,1]; serialized as a percentage
  double mae_px = 0.0;
  double rmse_px = 0.0;
  double mean_kpi = 0.0;  // (ap + mean_j) / 2
  std::vector<PerSampleEval> per_sample;
};

// report.json with scores as percentages rounded to 2 decimals.
void write_report_json(const std::string& path, const EvalReport& report);
// per_sample.csv with header id,ap50,j,mae,rmse.
void write_per_sample_csv(const std::string& path, const EvalReport& report);

}  // namespace fluorotask
