#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "fluorotask/ops.hpp"
#include "fluorotask/rng.hpp"
#include "fluorotask/tensor.hpp"

namespace ftt {

using fluorotask::RngStream;
using fluorotask::Shape;
using fluorotask::Tape;
using fluorotask::Tensor;

inline Tensor random_tensor(Shape shape, RngStream& rng, bool requires_grad = true,
                            double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape), requires_grad);
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

// Central-difference gradient check. Runs the function once under a tape to
// collect analytic gradients, then probes at least `n_coords` coordinates of
// every grad-requiring input with symmetric finite differences and compares
// with rel err = |analytic - numeric| / max(1, |numeric|).
inline void check_gradients(const std::function<Tensor(std::vector<Tensor>&)>& fn,
                            std::vector<Tensor> inputs, int n_coords = 20,
                            double tol = 1e-6) {
  {
    Tape tape;
    Tensor out = fn(inputs);
    REQUIRE(out.numel() == 1);
    tape.backward(out);
  }
  RngStream pick(987654321);
  double worst = 0.0;
  long skipped = 0, probed = 0;
  for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
    Tensor& in = inputs[ii];
    if (!in.requires_grad()) continue;
    const std::int64_t n = in.numel();
    std::vector<std::int64_t> coords(n);
    for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
    if (n > n_coords) {
      for (int i = 0; i < n_coords; ++i) {
        const int j = i + pick.uniform_int(0, static_cast<int>(n) - 1 - i);
        std::swap(coords[i], coords[j]);
      }
      coords.resize(n_coords);
    }
    for (std::int64_t idx : coords) {
      const double x0 = in.data()[idx];
      const double h = 1e-5 * std::max(1.0, std::fabs(x0));
      const double f0 = fn(inputs).item();
      in.data()[idx] = x0 + h;
      const double fp = fn(inputs).item();
      in.data()[idx] = x0 - h;
      const double fm = fn(inputs).item();
      in.data()[idx] = x0;
      // a kink (e.g. a relu unit crossing zero) inside the probe window makes
      // the symmetric difference meaningless: detect it via the second
      // difference, which collapses to O(h^2) only at smooth points
      const double curvature = std::fabs(fp - 2.0 * f0 + fm);
      if (curvature > 0.05 * std::fabs(fp - fm) + 1e-12) {
        ++skipped;
        continue;
      }
      ++probed;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = in.has_grad() ? in.node()->grad[idx] : 0.0;
      const double rel = std::fabs(analytic - numeric) / std::max(1.0, std::fabs(numeric));
      if (rel > worst) worst = rel;
      if (rel > tol) {
        CAPTURE(ii);
        CAPTURE(idx);
        CAPTURE(analytic);
        CAPTURE(numeric);
        REQUIRE(rel <= tol);
      }
    }
  }
  CHECK(worst <= tol);
  // non-smooth probe points must be the rare exception, not the rule
  CHECK(skipped * 4 <= probed);
}

}  // namespace ftt
