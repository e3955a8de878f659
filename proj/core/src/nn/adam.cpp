// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/nn/adam.hpp"

#include <cmath>

namespace lungpipe::nn {

void AdamConfig::validate() const {
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw ValidationError("adam: beta1 and beta2 must lie in (0, 1)");
  }
  if (!(learning_rate >= 0.0) || !(epsilon > 0.0) || !(weight_decay >= 0.0)) {
    throw ValidationError("adam: learning rate and weight decay must be >= 0, epsilon > 0");
  }
}

template <typename T>
Adam<T>::Adam(AdamConfig cfg) : cfg_(cfg) {
  cfg_.validate();
}

template <typename T>
void Adam<T>::step(const std::vector<NamedParameter<T>>& params) {
  std::vector<Parameter<T>*> live;
  for (const auto& p : params) {
    if (!p.param->trainable) continue;
    for (T g : p.param->grad.values()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericalError("adam: non-finite gradient in parameter " + p.name);
      }
    }
    live.push_back(p.param);
  }
  if (m_.empty()) {
    for (auto* p : live) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }
  if (m_.size() != live.size()) throw ValidationError("adam: parameter set changed between steps");

  ++step_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2, lr = cfg_.learning_rate;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double decay = 1.0 - lr * cfg_.weight_decay;
  for (std::size_t k = 0; k < live.size(); ++k) {
    Parameter<T>& p = *live[k];
    if (m_[k].size() != p.value.size()) throw ValidationError("adam: parameter shape changed between steps");
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      double w = static_cast<double>(p.value[i]) * decay;
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      w -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.epsilon);
      p.value[i] = static_cast<T>(w);
    }
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace lungpipe::nn
