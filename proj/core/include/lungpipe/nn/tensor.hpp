// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "lungpipe/error.hpp"

namespace lungpipe::nn {

/// (batch, channel, depth, height, width); width is fastest in memory.
struct Shape5 {
  int n = 0;
  int c = 0;
  int d = 1;
  int h = 1;
  int w = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * static_cast<std::size_t>(d) * h * static_cast<std::size_t>(w);
  }
  std::size_t spatial() const { return static_cast<std::size_t>(d) * h * static_cast<std::size_t>(w); }
  std::size_t per_sample() const { return static_cast<std::size_t>(c) * spatial(); }
  std::string to_string() const;
  friend bool operator==(const Shape5&, const Shape5&) = default;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape5 shape, T fill = T{0});

  const Shape5& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }
  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  std::size_t offset(int n, int c, int d, int h, int w) const {
    return (((static_cast<std::size_t>(n) * shape_.c + c) * shape_.d + d) * shape_.h + h) * shape_.w + w;
  }
  T& at(int n, int c, int d, int h, int w) { return values_[offset(n, c, d, h, w)]; }
  const T& at(int n, int c, int d, int h, int w) const { return values_[offset(n, c, d, h, w)]; }

  /// Contiguous slice for sample n.
  std::span<T> sample(int n) { return {values_.data() + n * shape_.per_sample(), shape_.per_sample()}; }
  std::span<const T> sample(int n) const {
    return {values_.data() + n * shape_.per_sample(), shape_.per_sample()};
  }

  void fill(T v);
  /// Same values, new shape of equal element count.
  void reshape(Shape5 shape);

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < values_.size(); ++i) out[i] = static_cast<U>(values_[i]);
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape5 shape_{};
  std::vector<T> values_;
};

/// Throws ValidationError naming `what` and the mismatching dimension.
void require_shape(const Shape5& got, const Shape5& expected, const std::string& what);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace lungpipe::nn
