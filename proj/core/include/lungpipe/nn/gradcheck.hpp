// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lungpipe/nn/layers.hpp"

namespace lungpipe::nn {

/// Relative error between analytic and central-difference gradients,
/// max|a - n| / max(max|a|, max|n|, floor) over the probed coordinates, where
/// floor is 1e5 x the rounding noise of the difference. Steps that straddle a
/// kink are retried at eps / 10.
double finite_difference_error(const std::function<double()>& loss, std::span<double> values,
                               std::span<const double> analytic, double eps = 1e-5, std::size_t max_coords = 256);

struct GradCheckReport {
  /// one entry per checked tensor: "input" or a parameter name
  std::vector<std::pair<std::string, double>> errors;
  double max_error() const;
};

/// Checks d(sum(out * weights)) / d(input, params) for a layer in train mode.
/// Dropout layers should have their mask frozen by the caller.
GradCheckReport check_layer_gradients(Layer<double>& layer, const Tensor<double>& input,
                                      const Tensor<double>& weights, double eps = 1e-5,
                                      std::size_t max_coords = 256);

}  // namespace lungpipe::nn
