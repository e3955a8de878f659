// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/nn/tensor.hpp"

#include <algorithm>

namespace lungpipe::nn {

std::string Shape5::to_string() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(d) + "," + std::to_string(h) +
         "," + std::to_string(w) + ")";
}

template <typename T>
Tensor<T>::Tensor(Shape5 shape, T fill) : shape_(shape) {
  if (shape.n < 0 || shape.c < 0 || shape.d < 0 || shape.h < 0 || shape.w < 0) {
    throw ValidationError("negative tensor dimension in " + shape.to_string());
  }
  values_.assign(shape.size(), fill);
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(values_.begin(), values_.end(), v);
}

template <typename T>
void Tensor<T>::reshape(Shape5 shape) {
  if (shape.size() != values_.size()) {
    throw ValidationError("cannot reshape " + shape_.to_string() + " to " + shape.to_string());
  }
  shape_ = shape;
}

void require_shape(const Shape5& got, const Shape5& expected, const std::string& what) {
  static constexpr const char* kNames[] = {"batch", "channel", "depth", "height", "width"};
  const int g[] = {got.n, got.c, got.d, got.h, got.w};
  const int e[] = {expected.n, expected.c, expected.d, expected.h, expected.w};
  for (int i = 0; i < 5; ++i) {
    if (g[i] != e[i]) {
      throw ValidationError(what + ": " + kNames[i] + " dimension is " + std::to_string(g[i]) + ", expected " +
                            std::to_string(e[i]));
    }
  }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace lungpipe::nn
