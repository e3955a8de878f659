// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "lungpipe/nn/layers.hpp"

namespace lungpipe::nn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;

  void validate() const;
};

/// Adam with bias correction and decoupled weight decay
/// (p <- p - lr * wd * p before the moment update).
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg);

  /// One update of every trainable parameter. Non-finite gradients throw
  /// NumericalError naming the parameter; nothing is modified in that case.
  void step(const std::vector<NamedParameter<T>>& params);

  std::int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

 private:
  AdamConfig cfg_;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace lungpipe::nn
