// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lungpipe/nn/layers.hpp"

namespace lungpipe::nn {

/// A named top-level layer chain with parameter bookkeeping.
template <typename T>
class Network {
 public:
  using ProbeFn = typename Sequential<T>::ProbeFn;

  explicit Network(std::string architecture_id = {}) : architecture_id_(std::move(architecture_id)) {}
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const std::string& architecture_id() const { return architecture_id_; }
  Sequential<T>& body() { return body_; }
  const Sequential<T>& body() const { return body_; }

  Shape5 output_shape(const Shape5& input) const { return body_.output_shape(input); }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) { return body_.forward(x, mode); }
  Tensor<T> forward(const Tensor<T>& x, Mode mode, const ProbeFn& probe) { return body_.forward(x, mode, probe); }
  Tensor<T> backward(const Tensor<T>& grad_output) { return body_.backward(grad_output); }

  /// Every parameter and buffer, in a stable order.
  std::vector<NamedParameter<T>> named_parameters();
  std::vector<NamedParameter<T>> trainable_parameters();
  std::size_t parameter_count();

  void zero_grad();
  /// He-normal weights from a seeded stream; the first layer skips its input gradient.
  void initialize(std::uint64_t seed);

  /// Copies values of same-named, same-shaped parameters from `other`.
  /// Returns the number of copied tensors.
  template <typename U>
  std::size_t copy_matching_from(Network<U>& other);

 private:
  std::string architecture_id_;
  Sequential<T> body_;
};

template <typename T>
template <typename U>
std::size_t Network<T>::copy_matching_from(Network<U>& other) {
  auto src = other.named_parameters();
  std::size_t copied = 0;
  for (auto& dst : named_parameters()) {
    for (auto& s : src) {
      if (s.name == dst.name && s.param->value.shape() == dst.param->value.shape()) {
        dst.param->value = s.param->value.template cast<T>();
        ++copied;
        break;
      }
    }
  }
  return copied;
}

extern template class Network<float>;
extern template class Network<double>;

}  // namespace lungpipe::nn
