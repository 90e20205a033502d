#include "fluorotask/optim.hpp"

#include <cmath>

namespace fluorotask {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor& p = params_[pi];
    const std::int64_t n = p.numel();
    const double* g = p.has_grad() ? p.node()->grad.data() : nullptr;

    if (g) {
      bool finite = true;
      for (std::int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(g[i])) {
          finite = false;
          break;
        }
      }
      if (!finite) {
        ++skipped_;
        continue;
      }
    }

    double* pd = p.data();
    double* m = m_[pi].data();
    double* v = v_[pi].data();
    for (std::int64_t i = 0; i < n; ++i) {
      const double gi = g ? g[i] : 0.0;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      pd[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * pd[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace fluorotask
