// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/nn/network.hpp"

#include <random>

namespace lungpipe::nn {

template <typename T>
std::vector<NamedParameter<T>> Network<T>::named_parameters() {
  std::vector<NamedParameter<T>> out;
  body_.parameters("", out);
  return out;
}

template <typename T>
std::vector<NamedParameter<T>> Network<T>::trainable_parameters() {
  std::vector<NamedParameter<T>> out;
  for (auto& p : named_parameters()) {
    if (p.param->trainable) out.push_back(p);
  }
  return out;
}

template <typename T>
std::size_t Network<T>::parameter_count() {
  std::size_t n = 0;
  for (auto& p : trainable_parameters()) n += p.param->value.size();
  return n;
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto& p : named_parameters()) p.param->grad.fill(T{0});
}

template <typename T>
void Network<T>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  body_.initialize(rng);
  body_.set_input_grad(false);
  zero_grad();
}

template class Network<float>;
template class Network<double>;

}  // namespace lungpipe::nn
