// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "lungpipe/nn/tensor.hpp"

namespace lungpipe::nn {

enum class Mode { kTrain, kEval };

enum class LayerKind {
  kConv3d,
  kMaxPool3d,
  kGlobalAvgPool3d,
  kFullyConnected,
  kBatchNorm,
  kLeakyRelu,
  kDropout,
  kSoftmax,
  kResidualBlock,
  kSequential,
};

const char* to_string(LayerKind kind);

/// Declarative description of one layer. Only the fields relevant to `kind`
/// are read.
struct LayerSpec {
  LayerKind kind = LayerKind::kConv3d;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  bool bias = false;
  double alpha = 0.1;  // leaky_relu slope
  double rate = 0.5;   // dropout probability
  int mid_channels = 0;      // residual bottleneck width; 0 = basic block
  std::uint64_t seed = 0;    // dropout mask stream

  void validate() const;
};

/// Trainable parameter or (trainable = false) persistent buffer.
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
  /// fan-in for He initialisation; 0 = not a weight
  int fan_in = 0;
};

template <typename T>
struct NamedParameter {
  std::string name;
  Parameter<T>* param = nullptr;
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  /// Throws ValidationError naming the offending dimension.
  virtual Shape5 output_shape(const Shape5& input) const = 0;
  /// Train mode caches what backward needs; eval mode leaves the layer untouched.
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
  /// Accumulates parameter gradients, returns d loss / d input.
  virtual Tensor<T> backward(const Tensor<T>& grad_output) = 0;
  virtual void parameters(const std::string& prefix, std::vector<NamedParameter<T>>& out) {}
  /// He-normal weights, zero biases, unit BN scale.
  virtual void initialize(std::mt19937_64& rng) {}

  /// The first layer of a network can skip its input gradient.
  virtual void set_input_grad(bool needed) { input_grad_ = needed; }

 protected:
  void require_cached(bool cached) const;
  bool input_grad_ = true;
};

template <typename T>
class Conv3d final : public Layer<T> {
 public:
  Conv3d(int in_channels, int out_channels, int kernel, int stride, bool bias);

  LayerKind kind() const override { return LayerKind::kConv3d; }
  Shape5 output_shape(const Shape5& input) const override;
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_output) override;
  void parameters(const std::string& prefix, std::vector<NamedParameter<T>>& out) override;
  void initialize(std::mt19937_64& rng) override;

  Parameter<T>& weight() { return weight_; }
  Parameter<T>* bias() { return has_bias_ ? &bias_ : nullptr; }

 private:
  int in_, out_, kernel_, stride_, pad_;
  bool has_bias_;
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> input_;
  bool cached_ = false;
};

template <typename T>
class MaxPool3d final : public Layer<T> {
 public:
  MaxPool3d(int kernel, int stride);

  LayerKind kind() const override { return LayerKind::kMaxPool3d; }
  Shape5 output_shape(const Shape5& input) const override;
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_output) override;

 private:
  int kernel_, stride_, pad_;
  Shape5 in_shape_{};
  std::vector<std::size_t> argmax_;
  bool cached_ = false;
};

template <typename T>
class GlobalAvgPool3d final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::kGlobalAvgPool3d; }
  Shape5 output_shape(const Shape5& input) const override;
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_output) override;

 private:
  Shape5 in_shape_{};
  bool cached_ = false;
};

template <typename T>
class FullyConnected final : public Layer<T> {
 public:
  FullyConnected(int in_features, int out_features);

  LayerKind kind() const override { return LayerKind::kFullyConnected; }
  Shape5 output_shape(const Shape5& input) const override;
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_output) override;
  void parameters(const std::string& prefix, std::vector<NamedParameter<T>>& out) override;
  void initialize(std::mt19937_64& rng) override;

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

 private:
  int in_, out_;
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> input_;
  bool cached_ = false;
};

/// Per-channel batch normalisation over (N, D, H, W). Running statistics are
/// updated with momentum 0.9 in train mode and used in eval mode.
template <typename T>
class BatchNorm final : public Layer<T> {
 public:
  explicit BatchNorm(int channels, double momentum = 0.9, double eps = 1e-5);

  LayerKind kind() const override { return LayerKind::kBatchNorm; }
  Shape5 output_shape(const Shape5& input) const override;
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_output) override;
  void parameters(const std::string& prefix, std::vector<NamedParameter<T>>& out) override;
  void initialize(std::mt19937_64& rng) override;

  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }
  Parameter<T>& running_mean() { return running_mean_; }
  Parameter<T>& running_var() { return running_var_; }

 private:
  int channels_;
  double momentum_, eps_;
  Parameter<T> gamma_, beta_, running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
  bool cached_ = false;
};

template <typename T>
class LeakyRelu final : public Layer<T> {
 public:
  explicit LeakyRelu(double alpha = 0.1) : alpha_(alpha) {}

  LayerKind kind() const override { return LayerKind::kLeakyRelu; }
  Shape5 output_shape(const Shape5& input) const override { return input; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_output) override;

  double alpha() const { return alpha_; }

 private:
  double alpha_;
  Tensor<T> input_;
  bool cached_ = false;
};

/// Inverted dropout; identity in eval mode.
template <typename T>
class Dropout final : public Layer<T> {
 public:
  Dropout(double rate, std::uint64_t seed);

  LayerKind kind() const override { return LayerKind::kDropout; }
  Shape5 output_shape(const Shape5& input) const override { return input; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_output) override;

  /// Reuse the last mask for subsequent train-mode passes (gradient checks).
  void freeze_mask(bool frozen) { frozen_ = frozen; }
  void reseed(std::uint64_t seed) { rng_.seed(seed); }

 private:
  double rate_;
  std::mt19937_64 rng_;
  std::vector<T> mask_;
  Shape5 mask_shape_{};
  bool frozen_ = false;
  bool cached_ = false;
};

/// Softmax over the channel axis at every (n, d, h, w) site.
template <typename T>
class Softmax final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::kSoftmax; }
  Shape5 output_shape(const Shape5& input) const override { return input; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_output) override;

 private:
  Tensor<T> output_;
  bool cached_ = false;
};

/// Named chain of layers.
template <typename T>
class Sequential : public Layer<T> {
 public:
  using ProbeFn = std::function<void(const std::string& name, const Shape5& shape)>;

  LayerKind kind() const override { return LayerKind::kSequential; }
  Shape5 output_shape(const Shape5& input) const override;
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_output) override;
  void parameters(const std::string& prefix, std::vector<NamedParameter<T>>& out) override;
  void initialize(std::mt19937_64& rng) override;
  void set_input_grad(bool needed) override;

  /// Forward that reports each child's output shape.
  Tensor<T> forward(const Tensor<T>& x, Mode mode, const ProbeFn& probe);

  Layer<T>& add(std::string name, std::unique_ptr<Layer<T>> layer);
  template <typename L, typename... Args>
  L& emplace(std::string name, Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    add(std::move(name), std::move(layer));
    return ref;
  }

  std::size_t layer_count() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_[i].second; }
  const std::string& layer_name(std::size_t i) const { return layers_[i].first; }
  Layer<T>* find(const std::string& name);

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Layer<T>>>> layers_;
};

/// Pre-activation residual block: BN -> act -> conv (...), added to an
/// identity shortcut or a strided 1^3 projection when the shape changes.
/// mid_channels > 0 selects the 1-3-1 bottleneck, otherwise two 3^3 convs.
template <typename T>
class ResidualBlock final : public Layer<T> {
 public:
  ResidualBlock(int in_channels, int mid_channels, int out_channels, int stride, double alpha);

  LayerKind kind() const override { return LayerKind::kResidualBlock; }
  Shape5 output_shape(const Shape5& input) const override;
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_output) override;
  void parameters(const std::string& prefix, std::vector<NamedParameter<T>>& out) override;
  void initialize(std::mt19937_64& rng) override;

  Sequential<T>& preactivation() { return pre_; }
  Sequential<T>& branch() { return branch_; }
  Conv3d<T>* projection() { return projection_.get(); }

 private:
  int in_, out_, stride_;
  Sequential<T> pre_;
  Sequential<T> branch_;
  std::unique_ptr<Conv3d<T>> projection_;
  bool cached_ = false;
};

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec);

/// Draws N(0, sqrt(2 / fan_in)) into `t`.
template <typename T>
void he_normal(Tensor<T>& t, int fan_in, std::mt19937_64& rng);

}  // namespace lungpipe::nn
