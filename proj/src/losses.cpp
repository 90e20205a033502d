#include "fluorotask/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "fluorotask/ops.hpp"

namespace fluorotask {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape " + shape_str(a.shape()) +
                                " does not match " + shape_str(b.shape()));
  }
}

int batch_of(const Tensor& t, const char* what) {
  if (t.shape().size() != 4) {
    throw std::invalid_argument(std::string(what) + ": expected a 4-d tensor, got " +
                                shape_str(t.shape()));
  }
  return t.shape()[0];
}

// per-sample count of set cells in a {0,1} mask
std::vector<double> mask_counts(const Tensor& mask) {
  const Shape& s = mask.shape();
  const std::int64_t per = shape_numel(s) / s[0];
  std::vector<double> counts(s[0], 0.0);
  for (int b = 0; b < s[0]; ++b) {
    for (std::int64_t i = 0; i < per; ++i) counts[b] += mask.data()[b * per + i];
  }
  return counts;
}

void require_binary(const Tensor& t, const char* what) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double v = t.data()[i];
    if (v != 0.0 && v != 1.0) {
      throw std::invalid_argument(std::string(what) + ": expected a binary mask");
    }
  }
}

}  // namespace

LossResult focal_center_loss(const Tensor& center_logits, const Tensor& heatmap_target,
                             const Tensor& center_mask) {
  const int b = batch_of(center_logits, "focal");
  require_same_shape(center_logits, heatmap_target, "focal");
  require_same_shape(center_logits, center_mask, "focal");
  require_binary(center_mask, "focal");
  for (std::int64_t i = 0; i < heatmap_target.numel(); ++i) {
    const double v = heatmap_target.data()[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw std::invalid_argument("focal: target value " + std::to_string(v) +
                                  " outside [0,1]");
    }
  }

  const Tensor p = sigmoid(center_logits);
  const Tensor one_minus_p = add_scalar(neg(p), 1.0);
  // positives: -(1-p)^2 log p at peak cells
  const Tensor pos = mul(center_mask, mul(mul(one_minus_p, one_minus_p), log_clamped(p)));
  // negatives: -(1-t)^4 p^2 log(1-p) everywhere else
  const Tensor one_minus_t = add_scalar(neg(heatmap_target), 1.0);
  const Tensor t4 = mul(mul(one_minus_t, one_minus_t), mul(one_minus_t, one_minus_t));
  const Tensor neg_mask = add_scalar(neg(center_mask), 1.0);
  const Tensor negs = mul(neg_mask, mul(t4, mul(mul(p, p), log_clamped(one_minus_p))));

  const Tensor total = neg(add(pos, negs));
  const Tensor sums = reduce_sum(total, {1, 2, 3});

  const std::vector<double> counts = mask_counts(center_mask);
  Tensor inv({b}, /*requires_grad=*/false);
  LossResult out;
  out.valid.assign(b, 1);
  for (int i = 0; i < b; ++i) inv.data()[i] = 1.0 / std::max(counts[i], 1.0);
  out.per_sample = mul(sums, inv);
  out.scalar = mean(out.per_sample);
  return out;
}

LossResult size_l1_loss(const Tensor& size_pred, const Tensor& size_target,
                        const Tensor& center_mask) {
  const int b = batch_of(size_pred, "size");
  require_same_shape(size_pred, size_target, "size");
  if (size_pred.shape()[1] != 2) {
    throw std::invalid_argument("size: expected 2 channels, got " +
                                shape_str(size_pred.shape()));
  }
  if (center_mask.shape() != Shape{b, 1, size_pred.shape()[2], size_pred.shape()[3]}) {
    throw std::invalid_argument("size: mask shape " + shape_str(center_mask.shape()) +
                                " does not match predictions " +
                                shape_str(size_pred.shape()));
  }
  require_binary(center_mask, "size");

  const Tensor masked = mul(abs(sub(size_pred, size_target)), center_mask);
  const Tensor sums = reduce_sum(masked, {1, 2, 3});

  const std::vector<double> counts = mask_counts(center_mask);
  Tensor inv({b}, /*requires_grad=*/false);
  LossResult out;
  out.valid.assign(b, 1);
  for (int i = 0; i < b; ++i) {
    if (counts[i] > 0.0) {
      inv.data()[i] = 1.0 / (2.0 * counts[i]);
    } else {
      inv.data()[i] = 0.0;
      out.valid[i] = 0;
    }
  }
  out.per_sample = mul(sums, inv);
  out.scalar = mean(out.per_sample);
  return out;
}

LossResult bce_iou_seg_loss(const Tensor& seg_logits, const Tensor& mask) {
  const int b = batch_of(seg_logits, "segmentation");
  require_same_shape(seg_logits, mask, "segmentation");
  require_binary(mask, "segmentation");

  const Tensor p = sigmoid(seg_logits);
  const Tensor one_minus_p = add_scalar(neg(p), 1.0);
  const Tensor one_minus_m = add_scalar(neg(mask), 1.0);
  const Tensor bce = neg(add(mul(mask, log_clamped(p)), mul(one_minus_m, log_clamped(one_minus_p))));
  const Tensor bce_ps = reduce_mean(bce, {1, 2, 3});

  const Tensor inter = reduce_sum(mul(p, mask), {1, 2, 3});
  const Tensor uni = sub(add(reduce_sum(p, {1, 2, 3}), reduce_sum(mask, {1, 2, 3})), inter);
  const Tensor iou_ps = add_scalar(neg(div(inter, uni)), 1.0);

  LossResult out;
  out.valid.assign(b, 1);
  out.per_sample = add(bce_ps, iou_ps);
  out.scalar = mean(out.per_sample);
  return out;
}

Tensor combine_losses(const Tensor& loss_d, const Tensor& loss_s, double kpi_bar_d,
                      double kpi_bar_s, double eps_w) {
  if (loss_d.numel() != 1 || loss_s.numel() != 1) {
    throw std::invalid_argument("combine: task losses must be scalars");
  }
  if (!std::isfinite(loss_d.item())) {
    throw std::runtime_error("combine: non-finite detection loss " +
                             std::to_string(loss_d.item()));
  }
  if (!std::isfinite(loss_s.item())) {
    throw std::runtime_error("combine: non-finite segmentation loss " +
                             std::to_string(loss_s.item()));
  }
  const double wd = 1.0 / std::max(kpi_bar_d, eps_w);
  const double ws = 1.0 / std::max(kpi_bar_s, eps_w);
  return add(mul_scalar(loss_d, wd), mul_scalar(loss_s, ws));
}

}  // namespace fluorotask
