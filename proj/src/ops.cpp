#include "fluorotask/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fluorotask {

namespace {

bool any_requires_grad(std::initializer_list<const Tensor*> ins) {
  for (const Tensor* t : ins) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Right-aligned numpy-style broadcast plan. Strides are per *output* axis and
// zero along axes where the operand is being broadcast.
struct BPlan {
  Shape out;
  bool same = false;
  std::vector<std::int64_t> sa, sb;
};

std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 0);
  std::int64_t acc = 1;
  for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
    st[d] = acc;
    acc *= s[d];
  }
  return st;
}

BPlan make_plan(const Shape& a, const Shape& b) {
  if (a == b) {
    BPlan p;
    p.out = a;
    p.same = true;
    return p;
  }
  const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  BPlan p;
  p.out.resize(r);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  const auto sta = row_major_strides(a), stb = row_major_strides(b);
  for (int d = r - 1; d >= 0; --d) {
    const int da = d - (r - ra), db = d - (r - rb);
    const int ea = da >= 0 ? a[da] : 1;
    const int eb = db >= 0 ? b[db] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw std::invalid_argument("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    p.out[d] = std::max(ea, eb);
    if (da >= 0 && ea != 1) p.sa[d] = sta[da];
    if (db >= 0 && eb != 1) p.sb[d] = stb[db];
  }
  return p;
}

// Walks the broadcast output space once, handing (out_index, a_offset,
// b_offset) to `fn`.
template <class Fn>
void for_each_bcast(const BPlan& p, Fn&& fn) {
  const std::int64_t n = shape_numel(p.out);
  const int r = static_cast<int>(p.out.size());
  std::vector<int> ctr(r, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    fn(i, oa, ob);
    for (int d = r - 1; d >= 0; --d) {
      ++ctr[d];
      oa += p.sa[d];
      ob += p.sb[d];
      if (ctr[d] < p.out[d]) break;
      ctr[d] = 0;
      oa -= p.sa[d] * p.out[d];
      ob -= p.sb[d] * p.out[d];
    }
  }
}

// Generic elementwise binary op. f computes the value; dfa/dfb give the
// partial derivatives as functions of the two input values.
template <class F, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  const BPlan plan = make_plan(a.shape(), b.shape());
  const bool rg = any_requires_grad({&a, &b});
  Tensor out(plan.out, rg);
  const double* ad = a.data();
  const double* bd = b.data();
  double* od = out.data();
  if (plan.same) {
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) od[i] = f(ad[i], bd[i]);
  } else {
    for_each_bcast(plan, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
      od[i] = f(ad[oa], bd[ob]);
    });
  }
  if (rg && Tape::active()) {
    auto an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
    Tape::active()->record(name, {a.id(), b.id()}, out, [an, bn, on, plan, dfa, dfb]() {
      const double* go = on->grad.data();
      const double* av = an->data.data();
      const double* bv = bn->data.data();
      const bool need_a = an->requires_grad, need_b = bn->requires_grad;
      if (need_a && an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
      if (need_b && bn->grad.empty()) bn->grad.assign(bn->data.size(), 0.0);
      double* ga = an->grad.data();
      double* gb = bn->grad.data();
      if (plan.same) {
        const std::int64_t n = static_cast<std::int64_t>(on->data.size());
        for (std::int64_t i = 0; i < n; ++i) {
          if (need_a) ga[i] += dfa(av[i], bv[i]) * go[i];
          if (need_b) gb[i] += dfb(av[i], bv[i]) * go[i];
        }
      } else {
        for_each_bcast(plan, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
          if (need_a) ga[oa] += dfa(av[oa], bv[ob]) * go[i];
          if (need_b) gb[ob] += dfb(av[oa], bv[ob]) * go[i];
        });
      }
    });
  }
  return out;
}

// Generic elementwise unary op; df receives (input value, output value).
template <class F, class DF>
Tensor unary_op(const char* name, const Tensor& x, F f, DF df) {
  const bool rg = x.requires_grad();
  Tensor out(x.shape(), rg);
  const double* xd = x.data();
  double* od = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) od[i] = f(xd[i]);
  if (rg && Tape::active()) {
    auto xn = x.node_ptr(), on = out.node_ptr();
    Tape::active()->record(name, {x.id()}, out, [xn, on, df]() {
      const double* go = on->grad.data();
      const double* xv = xn->data.data();
      const double* ov = on->data.data();
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      double* gx = xn->grad.data();
      const std::int64_t m = static_cast<std::int64_t>(on->data.size());
      for (std::int64_t i = 0; i < m; ++i) gx[i] += df(xv[i], ov[i]) * go[i];
    });
  }
  return out;
}

void check_axes(const Shape& shape, const std::vector<int>& axes) {
  for (int ax : axes) {
    if (ax < 0 || ax >= static_cast<int>(shape.size())) {
      throw std::invalid_argument("reduction axis " + std::to_string(ax) +
                                  " out of range for shape " + shape_str(shape));
    }
  }
}

// Maps every linear index of `shape` to the linear index of the reduced
// output (reduced axes contribute stride 0).
struct ReduceMap {
  Shape in_shape;
  Shape out_shape;  // with keepdims applied
  std::vector<std::int64_t> out_stride;  // per input axis
  std::int64_t group = 1;                // elements folded into each output

  ReduceMap(const Shape& shape, const std::vector<int>& axes, bool keepdims) {
    check_axes(shape, axes);
    in_shape = shape;
    std::vector<bool> reduced(shape.size(), false);
    for (int ax : axes) reduced[ax] = true;
    Shape kept(shape.size());
    for (std::size_t d = 0; d < shape.size(); ++d) {
      kept[d] = reduced[d] ? 1 : shape[d];
      if (reduced[d]) group *= shape[d];
    }
    const auto kst = row_major_strides(kept);
    out_stride.assign(shape.size(), 0);
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (!reduced[d]) out_stride[d] = kst[d];
    }
    if (keepdims) {
      out_shape = kept;
    } else {
      for (std::size_t d = 0; d < shape.size(); ++d) {
        if (!reduced[d]) out_shape.push_back(shape[d]);
      }
    }
  }

  template <class Fn>
  void for_each(Fn&& fn) const {
    const std::int64_t n = shape_numel(in_shape);
    const int r = static_cast<int>(in_shape.size());
    std::vector<int> ctr(r, 0);
    std::int64_t of = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      fn(i, of);
      for (int d = r - 1; d >= 0; --d) {
        ++ctr[d];
        of += out_stride[d];
        if (ctr[d] < in_shape[d]) break;
        ctr[d] = 0;
        of -= out_stride[d] * in_shape[d];
      }
    }
  }
};

}  // namespace

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b,
      [](double x, double y) { return x / std::max(y, kEps); },
      [](double, double y) { return 1.0 / std::max(y, kEps); },
      [](double x, double y) { return y > kEps ? -x / (y * y) : 0.0; });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      "neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      "add_scalar", x, [c](double v) { return v + c; },
      [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary_op(
      "mul_scalar", x, [c](double v) { return v * c; },
      [c](double, double) { return c; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log_clamped(const Tensor& x) {
  return unary_op(
      "log", x, [](double v) { return std::log(std::max(v, kEps)); },
      [](double v, double) { return v > kEps ? 1.0 / v : 0.0; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor pow_scalar(const Tensor& x, double exponent) {
  return unary_op(
      "pow", x, [exponent](double v) { return std::pow(v, exponent); },
      [exponent](double v, double) {
        return exponent * std::pow(v, exponent - 1.0);
      });
}

// ---- reductions ------------------------------------------------------------

Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  ReduceMap map(x.shape(), axes, keepdims);
  const bool rg = x.requires_grad();
  Tensor out(map.out_shape, rg);
  const double* xd = x.data();
  double* od = out.data();
  map.for_each([&](std::int64_t i, std::int64_t of) { od[of] += xd[i]; });
  if (rg && Tape::active()) {
    auto xn = x.node_ptr(), on = out.node_ptr();
    Tape::active()->record("reduce_sum", {x.id()}, out, [xn, on, map]() {
      const double* go = on->grad.data();
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      double* gx = xn->grad.data();
      map.for_each([&](std::int64_t i, std::int64_t of) { gx[i] += go[of]; });
    });
  }
  return out;
}

Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  ReduceMap map(x.shape(), axes, keepdims);
  const double inv = 1.0 / static_cast<double>(map.group);
  const bool rg = x.requires_grad();
  Tensor out(map.out_shape, rg);
  const double* xd = x.data();
  double* od = out.data();
  map.for_each([&](std::int64_t i, std::int64_t of) { od[of] += xd[i]; });
  for (auto& v : out.vec()) v *= inv;
  if (rg && Tape::active()) {
    auto xn = x.node_ptr(), on = out.node_ptr();
    Tape::active()->record("reduce_mean", {x.id()}, out, [xn, on, map, inv]() {
      const double* go = on->grad.data();
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      double* gx = xn->grad.data();
      map.for_each([&](std::int64_t i, std::int64_t of) { gx[i] += go[of] * inv; });
    });
  }
  return out;
}

Tensor reduce_max(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  ReduceMap map(x.shape(), axes, keepdims);
  const bool rg = x.requires_grad();
  Tensor out(map.out_shape, rg);
  const double* xd = x.data();
  double* od = out.data();
  auto arg = std::make_shared<std::vector<std::int64_t>>(out.numel(), -1);
  map.for_each([&](std::int64_t i, std::int64_t of) {
    if ((*arg)[of] < 0 || xd[i] > od[of]) {
      od[of] = xd[i];
      (*arg)[of] = i;
    }
  });
  if (rg && Tape::active()) {
    auto xn = x.node_ptr(), on = out.node_ptr();
    Tape::active()->record("reduce_max", {x.id()}, out, [xn, on, arg]() {
      const double* go = on->grad.data();
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      double* gx = xn->grad.data();
      for (std::size_t of = 0; of < arg->size(); ++of) gx[(*arg)[of]] += go[of];
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  std::vector<int> axes(x.rank());
  for (int d = 0; d < x.rank(); ++d) axes[d] = d;
  return reduce_sum(x, axes, false);
}

Tensor mean(const Tensor& x) {
  std::vector<int> axes(x.rank());
  for (int d = 0; d < x.rank(); ++d) axes[d] = d;
  return reduce_mean(x, axes, false);
}

// ---- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) +
                                " as " + shape_str(new_shape));
  }
  const bool rg = x.requires_grad();
  Tensor out = Tensor::from_data(std::move(new_shape), x.vec(), rg);
  if (rg && Tape::active()) {
    auto xn = x.node_ptr(), on = out.node_ptr();
    Tape::active()->record("reshape", {x.id()}, out, [xn, on]() {
      accumulate_grad(xn.get(), on->grad.data(), static_cast<std::int64_t>(on->grad.size()));
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(ref.size())) {
    throw std::invalid_argument("concat: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(ref));
  }
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != static_cast<int>(ref.size())) {
      throw std::invalid_argument("concat: rank mismatch");
    }
    for (int d = 0; d < p.rank(); ++d) {
      if (d != axis && p.dim(d) != ref[d]) {
        throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape()) +
                                    " vs " + shape_str(ref));
      }
    }
    total += p.dim(axis);
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  bool rg = false;
  for (const Tensor& p : parts) rg = rg || p.requires_grad();
  Tensor out(out_shape, rg);

  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= ref[d];
  for (int d = axis + 1; d < static_cast<int>(ref.size()); ++d) inner *= ref[d];

  std::int64_t offset = 0;
  for (const Tensor& p : parts) {
    const std::int64_t block = p.dim(axis) * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(p.data() + o * block, block,
                  out.data() + o * total * inner + offset * inner);
    }
    offset += p.dim(axis);
  }
  if (rg && Tape::active()) {
    std::vector<std::uint64_t> ids;
    std::vector<std::shared_ptr<detail::Node>> nodes;
    for (const Tensor& p : parts) {
      ids.push_back(p.id());
      nodes.push_back(p.node_ptr());
    }
    auto on = out.node_ptr();
    Tape::active()->record("concat", std::move(ids), out,
                           [nodes, on, outer, inner, total, axis]() {
      const double* go = on->grad.data();
      std::int64_t offset = 0;
      for (auto& pn : nodes) {
        const std::int64_t extent = pn->shape[axis];
        const std::int64_t block = extent * inner;
        if (pn->requires_grad) {
          if (pn->grad.empty()) pn->grad.assign(pn->data.size(), 0.0);
          for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = go + o * total * inner + offset * inner;
            double* dst = pn->grad.data() + o * block;
            for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
        offset += extent;
      }
    });
  }
  return out;
}

// ---- structured ops ---------------------------------------------------------

namespace {

void check_4d(const Tensor& t, const char* what) {
  if (!t.defined() || t.rank() != 4) {
    throw std::invalid_argument(std::string(what) + " must be 4-D, got " +
                                (t.defined() ? shape_str(t.shape()) : std::string("<none>")));
  }
}

// Valid output range along one spatial axis for a given kernel offset:
// o in [lo, hi) such that o*stride + k - pad lands inside [0, extent).
void conv_range(int extent, int out_extent, int stride, int pad, int k, int& lo, int& hi) {
  int num = pad - k;
  lo = num <= 0 ? 0 : (num + stride - 1) / stride;
  hi = std::min(out_extent, (extent - 1 + pad - k) / stride + 1);
  if (hi < lo) hi = lo;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding) {
  check_4d(input, "conv2d input");
  check_4d(kernel, "conv2d kernel");
  const int B = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Co = kernel.dim(0), Kc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (Kc != Ci) {
    throw std::invalid_argument("conv2d: input channels " + shape_str(input.shape()) +
                                " do not match kernel " + shape_str(kernel.shape()));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw std::invalid_argument("conv2d: kernel extents must be odd, got " +
                                shape_str(kernel.shape()));
  }
  if (stride < 1 || padding < 0) {
    throw std::invalid_argument("conv2d: bad stride/padding");
  }
  if (H + 2 * padding < kh || W + 2 * padding < kw) {
    throw std::invalid_argument("conv2d: kernel " + shape_str(kernel.shape()) +
                                " larger than padded input " + shape_str(input.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Co)) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(bias.shape()) +
                                " does not match " + std::to_string(Co) + " output channels");
  }
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;

  const bool rg = any_requires_grad({&input, &kernel, &bias});
  Tensor out({B, Co, Ho, Wo}, rg);
  const double* in = input.data();
  const double* kd = kernel.data();
  double* od = out.data();

  for (int b = 0; b < B; ++b) {
    for (int oc = 0; oc < Co; ++oc) {
      double* oplane = od + (static_cast<std::int64_t>(b) * Co + oc) * Ho * Wo;
      if (bias.defined()) {
        const double bv = bias.data()[oc];
        for (int i = 0; i < Ho * Wo; ++i) oplane[i] = bv;
      }
      for (int ic = 0; ic < Ci; ++ic) {
        const double* iplane = in + (static_cast<std::int64_t>(b) * Ci + ic) * H * W;
        const double* kplane = kd + (static_cast<std::int64_t>(oc) * Ci + ic) * kh * kw;
        for (int ky = 0; ky < kh; ++ky) {
          int oy_lo, oy_hi;
          conv_range(H, Ho, stride, padding, ky, oy_lo, oy_hi);
          for (int kx = 0; kx < kw; ++kx) {
            const double wv = kplane[ky * kw + kx];
            int ox_lo, ox_hi;
            conv_range(W, Wo, stride, padding, kx, ox_lo, ox_hi);
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
              const double* irow = iplane + (oy * stride + ky - padding) * W + (kx - padding);
              double* orow = oplane + oy * Wo;
              if (stride == 1) {
                for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * irow[ox];
              } else {
                for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * irow[ox * stride];
              }
            }
          }
        }
      }
    }
  }

  if (rg && Tape::active()) {
    auto in_n = input.node_ptr(), k_n = kernel.node_ptr(), on = out.node_ptr();
    auto b_n = bias.defined() ? bias.node_ptr() : nullptr;
    std::vector<std::uint64_t> ids{input.id(), kernel.id()};
    if (bias.defined()) ids.push_back(bias.id());
    Tape::active()->record("conv2d", std::move(ids), out,
                           [in_n, k_n, b_n, on, B, Ci, Co, H, W, Ho, Wo, kh, kw, stride, padding]() {
      const double* go = on->grad.data();
      const double* in = in_n->data.data();
      const double* kd = k_n->data.data();

      if (b_n && b_n->requires_grad) {
        if (b_n->grad.empty()) b_n->grad.assign(b_n->data.size(), 0.0);
        double* gb = b_n->grad.data();
        for (int b = 0; b < B; ++b) {
          for (int oc = 0; oc < Co; ++oc) {
            const double* gplane = go + (static_cast<std::int64_t>(b) * Co + oc) * Ho * Wo;
            double acc = 0.0;
            for (int i = 0; i < Ho * Wo; ++i) acc += gplane[i];
            gb[oc] += acc;
          }
        }
      }

      const bool need_in = in_n->requires_grad;
      const bool need_k = k_n->requires_grad;
      if (need_in && in_n->grad.empty()) in_n->grad.assign(in_n->data.size(), 0.0);
      if (need_k && k_n->grad.empty()) k_n->grad.assign(k_n->data.size(), 0.0);
      double* gi = in_n->grad.data();
      double* gk = k_n->grad.data();

      for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < Co; ++oc) {
          const double* gplane = go + (static_cast<std::int64_t>(b) * Co + oc) * Ho * Wo;
          for (int ic = 0; ic < Ci; ++ic) {
            const double* iplane = in + (static_cast<std::int64_t>(b) * Ci + ic) * H * W;
            double* giplane = need_in ? gi + (static_cast<std::int64_t>(b) * Ci + ic) * H * W : nullptr;
            const std::int64_t kbase = (static_cast<std::int64_t>(oc) * Ci + ic) * kh * kw;
            for (int ky = 0; ky < kh; ++ky) {
              int oy_lo, oy_hi;
              conv_range(H, Ho, stride, padding, ky, oy_lo, oy_hi);
              for (int kx = 0; kx < kw; ++kx) {
                int ox_lo, ox_hi;
                conv_range(W, Wo, stride, padding, kx, ox_lo, ox_hi);
                const double wv = kd[kbase + ky * kw + kx];
                double wacc = 0.0;
                for (int oy = oy_lo; oy < oy_hi; ++oy) {
                  const std::int64_t ibase = (oy * stride + ky - padding) * W + (kx - padding);
                  const double* grow = gplane + oy * Wo;
                  const double* irow = iplane + ibase;
                  if (need_k) {
                    if (stride == 1) {
                      for (int ox = ox_lo; ox < ox_hi; ++ox) wacc += irow[ox] * grow[ox];
                    } else {
                      for (int ox = ox_lo; ox < ox_hi; ++ox) wacc += irow[ox * stride] * grow[ox];
                    }
                  }
                  if (need_in) {
                    double* girow = giplane + ibase;
                    if (stride == 1) {
                      for (int ox = ox_lo; ox < ox_hi; ++ox) girow[ox] += wv * grow[ox];
                    } else {
                      for (int ox = ox_lo; ox < ox_hi; ++ox) girow[ox * stride] += wv * grow[ox];
                    }
                  }
                }
                if (need_k) gk[kbase + ky * kw + kx] += wacc;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor max_pool2d(const Tensor& input, int k, int stride) {
  check_4d(input, "max_pool2d input");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (k < 1 || stride < 1) throw std::invalid_argument("max_pool2d: bad window/stride");
  if (k > H || k > W) {
    throw std::invalid_argument("max_pool2d: window " + std::to_string(k) +
                                " larger than input " + shape_str(input.shape()));
  }
  const int Ho = (H - k) / stride + 1;
  const int Wo = (W - k) / stride + 1;
  const bool rg = input.requires_grad();
  Tensor out({B, C, Ho, Wo}, rg);
  const double* in = input.data();
  double* od = out.data();
  auto arg = std::make_shared<std::vector<std::int64_t>>(out.numel());
  std::int64_t o = 0;
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(B) * C; ++p) {
    const double* plane = in + p * H * W;
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox, ++o) {
        double best = plane[oy * stride * W + ox * stride];
        std::int64_t best_idx = p * H * W + oy * stride * W + ox * stride;
        for (int dy = 0; dy < k; ++dy) {
          for (int dx = 0; dx < k; ++dx) {
            const std::int64_t idx = p * H * W + (oy * stride + dy) * W + ox * stride + dx;
            if (in[idx] > best) {  // strict: ties keep the earliest element
              best = in[idx];
              best_idx = idx;
            }
          }
        }
        od[o] = best;
        (*arg)[o] = best_idx;
      }
    }
  }
  if (rg && Tape::active()) {
    auto xn = input.node_ptr(), on = out.node_ptr();
    Tape::active()->record("max_pool2d", {input.id()}, out, [xn, on, arg]() {
      const double* go = on->grad.data();
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      double* gx = xn->grad.data();
      for (std::size_t i = 0; i < arg->size(); ++i) gx[(*arg)[i]] += go[i];
    });
  }
  return out;
}

Tensor upsample_nearest(const Tensor& input, int factor) {
  check_4d(input, "upsample_nearest input");
  if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Ho = H * factor, Wo = W * factor;
  const bool rg = input.requires_grad();
  Tensor out({B, C, Ho, Wo}, rg);
  const double* in = input.data();
  double* od = out.data();
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(B) * C; ++p) {
    const double* iplane = in + p * H * W;
    double* oplane = od + p * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const double* irow = iplane + (oy / factor) * W;
      double* orow = oplane + oy * Wo;
      for (int ox = 0; ox < Wo; ++ox) orow[ox] = irow[ox / factor];
    }
  }
  if (rg && Tape::active()) {
    auto xn = input.node_ptr(), on = out.node_ptr();
    Tape::active()->record("upsample_nearest", {input.id()}, out,
                           [xn, on, B, C, H, W, factor]() {
      const int Ho = H * factor, Wo = W * factor;
      const double* go = on->grad.data();
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      double* gx = xn->grad.data();
      for (std::int64_t p = 0; p < static_cast<std::int64_t>(B) * C; ++p) {
        const double* gplane = go + p * Ho * Wo;
        double* gxplane = gx + p * H * W;
        for (int oy = 0; oy < Ho; ++oy) {
          const double* grow = gplane + oy * Wo;
          double* gxrow = gxplane + (oy / factor) * W;
          for (int ox = 0; ox < Wo; ++ox) gxrow[ox / factor] += grow[ox];
        }
      }
    });
  }
  return out;
}

namespace {

// One interpolation tap: two source indices and the blend weight of the
// second one (half-pixel centers, clamped at the borders).
struct Tap {
  int i0, i1;
  double w1;
};

std::vector<Tap> bilinear_taps(int in_extent, int factor) {
  std::vector<Tap> taps(in_extent * factor);
  for (int o = 0; o < in_extent * factor; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    if (src < 0.0) src = 0.0;
    if (src > in_extent - 1) src = in_extent - 1;
    const int i0 = static_cast<int>(src);
    taps[o] = {i0, std::min(i0 + 1, in_extent - 1), src - i0};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& input, int factor) {
  check_4d(input, "upsample_bilinear input");
  if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Ho = H * factor, Wo = W * factor;
  auto ytaps = std::make_shared<std::vector<Tap>>(bilinear_taps(H, factor));
  auto xtaps = std::make_shared<std::vector<Tap>>(bilinear_taps(W, factor));
  const bool rg = input.requires_grad();
  Tensor out({B, C, Ho, Wo}, rg);
  const double* in = input.data();
  double* od = out.data();
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(B) * C; ++p) {
    const double* iplane = in + p * H * W;
    double* oplane = od + p * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const Tap ty = (*ytaps)[oy];
      const double* r0 = iplane + ty.i0 * W;
      const double* r1 = iplane + ty.i1 * W;
      double* orow = oplane + oy * Wo;
      for (int ox = 0; ox < Wo; ++ox) {
        const Tap tx = (*xtaps)[ox];
        const double top = r0[tx.i0] * (1.0 - tx.w1) + r0[tx.i1] * tx.w1;
        const double bot = r1[tx.i0] * (1.0 - tx.w1) + r1[tx.i1] * tx.w1;
        orow[ox] = top * (1.0 - ty.w1) + bot * ty.w1;
      }
    }
  }
  if (rg && Tape::active()) {
    auto xn = input.node_ptr(), on = out.node_ptr();
    Tape::active()->record("upsample_bilinear", {input.id()}, out,
                           [xn, on, ytaps, xtaps, B, C, H, W, Ho, Wo]() {
      const double* go = on->grad.data();
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      double* gx = xn->grad.data();
      for (std::int64_t p = 0; p < static_cast<std::int64_t>(B) * C; ++p) {
        const double* gplane = go + p * Ho * Wo;
        double* gxplane = gx + p * H * W;
        for (int oy = 0; oy < Ho; ++oy) {
          const Tap ty = (*ytaps)[oy];
          const double* grow = gplane + oy * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const Tap tx = (*xtaps)[ox];
            const double g = grow[ox];
            gxplane[ty.i0 * W + tx.i0] += g * (1.0 - ty.w1) * (1.0 - tx.w1);
            gxplane[ty.i0 * W + tx.i1] += g * (1.0 - ty.w1) * tx.w1;
            gxplane[ty.i1 * W + tx.i0] += g * ty.w1 * (1.0 - tx.w1);
            gxplane[ty.i1 * W + tx.i1] += g * ty.w1 * tx.w1;
          }
        }
      }
    });
  }
  return out;
}

Tensor weighted_mean(const Tensor& x, const std::vector<double>& weights) {
  if (x.rank() != 1 || x.dim(0) != static_cast<int>(weights.size())) {
    throw std::invalid_argument("weighted_mean: " + shape_str(x.shape()) + " vs " +
                                std::to_string(weights.size()) + " weights");
  }
  const int n = x.dim(0);
  const bool rg = x.requires_grad();
  Tensor out(Shape{}, rg);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += weights[i] * x.data()[i];
  out.data()[0] = acc / n;
  if (rg && Tape::active()) {
    auto xn = x.node_ptr(), on = out.node_ptr();
    Tape::active()->record("weighted_mean", {x.id()}, out, [xn, on, weights, n]() {
      const double g = on->grad[0];
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      for (int i = 0; i < n; ++i) xn->grad[i] += g * weights[i] / n;
    });
  }
  return out;
}

}  // namespace fluorotask
