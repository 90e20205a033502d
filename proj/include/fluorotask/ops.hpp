#pragma once

#include "fluorotask/tensor.hpp"

namespace fluorotask {

// Epsilon guard shared by every potentially singular denominator / log input.
inline constexpr double kEps = 1e-12;

// ---- elementwise (binary ops broadcast, numpy-style right alignment) ------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Denominator is clamped to at least kEps before use.
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
// log(max(x, kEps)); the clamp keeps log finite for non-positive inputs.
Tensor log_clamped(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor pow_scalar(const Tensor& x, double exponent);

// ---- reductions ------------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
// Max over axes; gradient flows to the first maximal element of each group in
// row-major order.
Tensor reduce_max(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);

// ---- shape -----------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// ---- structured ops (NCHW) -------------------------------------------------
// input [B,Cin,H,W], kernel [Cout,Cin,kh,kw] with odd kh/kw, optional bias
// [Cout] (pass a default-constructed Tensor for none). Output spatial size is
// (H + 2*padding - kh) / stride + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding);

// Window k with step `stride`, no padding; ties route the gradient to the
// earliest maximal element in row-major order.
Tensor max_pool2d(const Tensor& input, int k, int stride);

Tensor upsample_nearest(const Tensor& input, int factor);
// Fixed bilinear interpolation (half-pixel centers, edges clamped); not
// learned but fully differentiable.
Tensor upsample_bilinear(const Tensor& input, int factor);

// Weighted per-sample reduction: x is [B], weights has length B; returns the
// scalar sum(w[i] * x[i]) / B. The weights are constants, not graph nodes.
Tensor weighted_mean(const Tensor& x, const std::vector<double>& weights);

}  // namespace fluorotask
