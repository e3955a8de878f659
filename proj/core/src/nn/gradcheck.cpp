// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace lungpipe::nn {

double finite_difference_error(const std::function<double()>& loss, std::span<double> values,
                               std::span<const double> analytic, double eps, std::size_t max_coords) {
  if (values.size() != analytic.size()) throw ValidationError("gradient check: analytic size mismatch");
  if (values.empty()) return 0.0;
  const std::size_t step = std::max<std::size_t>(1, (values.size() + max_coords - 1) / max_coords);
  const auto central = [&](std::size_t i, double h) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = loss();
    values[i] = saved - h;
    const double down = loss();
    values[i] = saved;
    return (up - down) / (2.0 * h);
  };
  // Gradients below ~1e5 x the rounding noise of a central difference,
  // eps_machine * |L| / eps, cannot be resolved and are not a meaningful scale.
  const double noise = std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(loss())) / eps;
  double diff = 0.0, scale = 1e5 * noise;
  for (std::size_t i = 0; i < values.size(); i += step) {
    double numeric = central(i, eps);
    // a step straddling a kink (relu, max) disagrees with a 10x smaller step;
    // smooth coordinates agree to O(eps^2)
    const double fine = central(i, eps / 10.0);
    if (std::abs(numeric - fine) > 1e-3 * std::max({std::abs(numeric), std::abs(fine), 1e5 * noise})) numeric = fine;
    diff = std::max(diff, std::abs(numeric - analytic[i]));
    scale = std::max({scale, std::abs(numeric), std::abs(analytic[i])});
  }
  return diff / scale;
}

double GradCheckReport::max_error() const {
  double m = 0.0;
  for (const auto& [name, e] : errors) m = std::max(m, e);
  return m;
}

GradCheckReport check_layer_gradients(Layer<double>& layer, const Tensor<double>& input, const Tensor<double>& weights,
                                      double eps, std::size_t max_coords) {
  std::vector<NamedParameter<double>> params;
  layer.parameters("", params);
  for (auto& p : params) p.param->grad.fill(0.0);

  Tensor<double> x = input;
  const Tensor<double> out = layer.forward(x, Mode::kTrain);
  require_shape(weights.shape(), out.shape(), "gradient check weights");
  const Tensor<double> dx = layer.backward(weights);

  auto loss = [&] {
    const Tensor<double> y = layer.forward(x, Mode::kTrain);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * weights[i];
    return s;
  };

  GradCheckReport report;
  report.errors.emplace_back("input", finite_difference_error(loss, x.values(), dx.values(), eps, max_coords));
  for (auto& p : params) {
    if (!p.param->trainable) continue;
    const Tensor<double> analytic = p.param->grad;
    report.errors.emplace_back(p.name,
                               finite_difference_error(loss, p.param->value.values(), analytic.values(), eps, max_coords));
  }
  return report;
}

}  // namespace lungpipe::nn
