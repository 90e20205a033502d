#pragma once

#include <cstdint>
#include <vector>

#include "fluorotask/tensor.hpp"

namespace fluorotask {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// AdamW with decoupled weight decay and bias-corrected moments. A parameter
// whose gradient contains a non-finite value is skipped for that step (its
// moments and weights stay untouched); the skip is counted so callers can log
// it.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg = {});

  void step();
  void zero_grad();

  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  std::int64_t skipped() const { return skipped_; }
  const AdamWConfig& config() const { return cfg_; }
  AdamWConfig& config() { return cfg_; }

  std::size_t size() const { return params_.size(); }
  const Tensor& param(std::size_t i) const { return params_[i]; }
  std::vector<double>& moment1(std::size_t i) { return m_[i]; }
  std::vector<double>& moment2(std::size_t i) { return v_[i]; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::int64_t skipped_ = 0;
};

}  // namespace fluorotask
