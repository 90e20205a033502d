#pragma once

#include <cstdint>
#include <vector>

#include "fluorotask/tensor.hpp"

namespace fluorotask {

struct LossWeights {
  double lambda_size = 1.0;  // scale of the size term inside the detection loss
};

// Batch scalar plus the per-sample breakdown it averages; `valid` marks
// samples that actually contributed (e.g. had at least one center cell).
struct LossResult {
  Tensor scalar;                    // [] mean over the batch
  Tensor per_sample;                // [B]
  std::vector<std::uint8_t> valid;  // [B]
};

// Penalty-reduced pixelwise focal loss on sigmoid probabilities. Positives
// are the cells where center_mask is 1 (target exactly 1 there); negatives
// are weighted by (1-target)^4 and the loss by prob^2; each sample is
// normalized by its peak count (minimum 1).
LossResult focal_center_loss(const Tensor& center_logits, const Tensor& heatmap_target,
                             const Tensor& center_mask);

// Mean absolute error over the two size components at center cells. Samples
// without any center cell contribute zero and are flagged invalid.
LossResult size_l1_loss(const Tensor& size_pred, const Tensor& size_target,
                        const Tensor& center_mask);

// Pixelwise binary cross-entropy plus soft-IoU loss, summed per sample.
LossResult bce_iou_seg_loss(const Tensor& seg_logits, const Tensor& mask);

// Total = loss_d / max(kpi_bar_d, eps_w) + loss_s / max(kpi_bar_s, eps_w).
// Throws std::runtime_error when either component is non-finite.
Tensor combine_losses(const Tensor& loss_d, const Tensor& loss_s, double kpi_bar_d,
                      double kpi_bar_s, double eps_w = 0.05);

}  // namespace fluorotask
