// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/nn/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace lungpipe::nn {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

int pooled_extent(int in, int kernel, int stride, int pad) { return (in + 2 * pad - kernel) / stride + 1; }

Shape5 strided_shape(const Shape5& in, int channels, int kernel, int stride, int pad, const char* what) {
  Shape5 out{in.n, channels, pooled_extent(in.d, kernel, stride, pad), pooled_extent(in.h, kernel, stride, pad),
             pooled_extent(in.w, kernel, stride, pad)};
  if (in.d < 1 || in.h < 1 || in.w < 1 || out.d < 1 || out.h < 1 || out.w < 1) {
    throw ValidationError(std::string(what) + ": spatial input " + in.to_string() + " too small for kernel " +
                          std::to_string(kernel));
  }
  return out;
}

template <typename T>
Parameter<T> make_param(Shape5 shape, bool trainable, int fan_in = 0) {
  Parameter<T> p;
  p.value = Tensor<T>(shape);
  p.grad = Tensor<T>(shape);
  p.trainable = trainable;
  p.fan_in = fan_in;
  return p;
}

// Unfolds one sample (C, D, H, W) into rows (c, kd, kh, kw) of a K x row_stride
// matrix, writing columns [col_offset, col_offset + Do*Ho*Wo).
template <typename T>
void im2col(const T* x, const Shape5& in, const Shape5& out, int k, int s, int p, T* cols, std::size_t row_stride,
            std::size_t col_offset) {
  const std::size_t plane = static_cast<std::size_t>(out.h) * out.w;
  for (int c = 0; c < in.c; ++c) {
    for (int kd = 0; kd < k; ++kd) {
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw) {
          const std::size_t row = ((static_cast<std::size_t>(c) * k + kd) * k + kh) * k + kw;
          T* dst = cols + row * row_stride + col_offset;
          // output columns [lo, hi) read inside the input row
          const int lo = std::min(out.w, std::max(0, -floor_div(kw - p, s)));
          const int hi = std::max(lo, std::min(out.w, floor_div(in.w - 1 + p - kw, s) + 1));
          for (int od = 0; od < out.d; ++od) {
            const int id = od * s - p + kd;
            if (id < 0 || id >= in.d) {
              std::fill(dst, dst + plane, T{0});
              dst += plane;
              continue;
            }
            for (int oh = 0; oh < out.h; ++oh) {
              const int ih = oh * s - p + kh;
              if (ih < 0 || ih >= in.h) {
                std::fill(dst, dst + out.w, T{0});
                dst += out.w;
                continue;
              }
              const T* src = x + ((static_cast<std::size_t>(c) * in.d + id) * in.h + ih) * in.w + (kw - p);
              std::fill(dst, dst + lo, T{0});
              if (s == 1) {
                std::copy(src + lo, src + hi, dst + lo);
              } else {
                for (int ow = lo; ow < hi; ++ow) dst[ow] = src[ow * s];
              }
              std::fill(dst + hi, dst + out.w, T{0});
              dst += out.w;
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t row_stride, std::size_t col_offset, const Shape5& in, const Shape5& out, int k,
            int s, int p, T* dx) {
  for (int c = 0; c < in.c; ++c) {
    for (int kd = 0; kd < k; ++kd) {
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw) {
          const std::size_t row = ((static_cast<std::size_t>(c) * k + kd) * k + kh) * k + kw;
          const T* src = cols + row * row_stride + col_offset;
          for (int od = 0; od < out.d; ++od) {
            const int id = od * s - p + kd;
            if (id < 0 || id >= in.d) {
              src += static_cast<std::size_t>(out.h) * out.w;
              continue;
            }
            for (int oh = 0; oh < out.h; ++oh) {
              const int ih = oh * s - p + kh;
              if (ih < 0 || ih >= in.h) {
                src += out.w;
                continue;
              }
              T* dst = dx + ((static_cast<std::size_t>(c) * in.d + id) * in.h + ih) * in.w;
              for (int ow = 0; ow < out.w; ++ow) {
                const int iw = ow * s - p + kw;
                if (iw >= 0 && iw < in.w) dst[iw] += src[ow];
              }
              src += out.w;
            }
          }
        }
      }
    }
  }
}

}  // namespace

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv3d: return "conv3d";
    case LayerKind::kMaxPool3d: return "maxpool3d";
    case LayerKind::kGlobalAvgPool3d: return "global_avgpool3d";
    case LayerKind::kFullyConnected: return "fully_connected";
    case LayerKind::kBatchNorm: return "batch_norm";
    case LayerKind::kLeakyRelu: return "leaky_relu";
    case LayerKind::kDropout: return "dropout";
    case LayerKind::kSoftmax: return "softmax";
    case LayerKind::kResidualBlock: return "residual_block";
    case LayerKind::kSequential: return "sequential";
  }
  return "unknown";
}

void LayerSpec::validate() const {
  const std::string name = to_string(kind);
  switch (kind) {
    case LayerKind::kConv3d:
    case LayerKind::kMaxPool3d:
      if (kernel < 1 || kernel % 2 == 0) throw ValidationError(name + ": kernel must be odd, got " + std::to_string(kernel));
      if (stride < 1) throw ValidationError(name + ": stride must be >= 1");
      if (kind == LayerKind::kConv3d && (in_channels < 1 || out_channels < 1)) {
        throw ValidationError(name + ": channel counts must be >= 1");
      }
      break;
    case LayerKind::kFullyConnected:
    case LayerKind::kBatchNorm:
      if (in_channels < 1 || (kind == LayerKind::kFullyConnected && out_channels < 1)) {
        throw ValidationError(name + ": feature counts must be >= 1");
      }
      break;
    case LayerKind::kDropout:
      if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("dropout rate must lie in [0, 1)");
      break;
    case LayerKind::kLeakyRelu:
      if (!(alpha >= 0.0)) throw ValidationError("leaky_relu alpha must be >= 0");
      break;
    case LayerKind::kResidualBlock:
      if (in_channels < 1 || out_channels < 1 || mid_channels < 0 || stride < 1) {
        throw ValidationError("residual_block: invalid channels or stride");
      }
      break;
    default:
      break;
  }
}

template <typename T>
void Layer<T>::require_cached(bool cached) const {
  if (!cached) {
    throw ValidationError(std::string(to_string(kind())) + ": backward called without a train-mode forward");
  }
}

template <typename T>
void he_normal(Tensor<T>& t, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (T& v : t.values()) v = static_cast<T>(dist(rng));
}

// ---------------------------------------------------------------- Conv3d

template <typename T>
Conv3d<T>::Conv3d(int in_channels, int out_channels, int kernel, int stride, bool bias)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(kernel / 2), has_bias_(bias) {
  LayerSpec{LayerKind::kConv3d, in_channels, out_channels, kernel, stride}.validate();
  weight_ = make_param<T>({out_, in_, kernel_, kernel_, kernel_}, true, in_ * kernel_ * kernel_ * kernel_);
  if (has_bias_) bias_ = make_param<T>({1, out_, 1, 1, 1}, true);
}

template <typename T>
Shape5 Conv3d<T>::output_shape(const Shape5& input) const {
  if (input.c != in_) {
    throw ValidationError("conv3d: channel dimension is " + std::to_string(input.c) + ", expected " +
                          std::to_string(in_));
  }
  return strided_shape(input, out_, kernel_, stride_, pad_, "conv3d");
}

namespace {

// Samples per im2col chunk, keeping the column buffer near 4 MB.
int chunk_samples(std::size_t K, std::size_t P, int n, std::size_t elem) {
  const std::size_t per = std::max<std::size_t>(1, K * P * elem);
  return static_cast<int>(std::clamp<std::size_t>((std::size_t{4} << 20) / per, 1, static_cast<std::size_t>(n)));
}

template <typename T>
std::vector<T>& conv_scratch() {
  // per-thread, so concurrent eval passes never share a buffer
  thread_local std::vector<T> buf;
  return buf;
}

}  // namespace

template <typename T>
Tensor<T> Conv3d<T>::forward(const Tensor<T>& x, Mode mode) {
  const Shape5 in = x.shape();
  const Shape5 os = output_shape(in);
  const std::size_t P = os.spatial();
  const std::size_t K = static_cast<std::size_t>(in_) * kernel_ * kernel_ * kernel_;
  const int chunk = chunk_samples(K, P, in.n, sizeof(T));

  CMapR<T> w(weight_.value.data(), out_, K);
  Tensor<T> out(os);
  std::vector<T>& cols = conv_scratch<T>();
  MatR<T> y;
  for (int n0 = 0; n0 < in.n; n0 += chunk) {
    const int cn = std::min(chunk, in.n - n0);
    const std::size_t NP = P * cn;
    cols.resize(K * NP);
    for (int j = 0; j < cn; ++j) im2col(x.sample(n0 + j).data(), in, os, kernel_, stride_, pad_, cols.data(), NP, j * P);
    CMapR<T> c(cols.data(), K, NP);
    if (cn == 1) {
      MapR<T>(out.sample(n0).data(), out_, P).noalias() = w * c;
    } else {
      y.noalias() = w * c;
      for (int j = 0; j < cn; ++j) {
        T* dst = out.sample(n0 + j).data();
        for (int o = 0; o < out_; ++o) std::copy_n(y.data() + o * NP + j * P, P, dst + o * P);
      }
    }
  }
  if (has_bias_) {
    for (int n = 0; n < in.n; ++n) {
      T* dst = out.sample(n).data();
      for (int o = 0; o < out_; ++o) {
        const T b = bias_.value[o];
        for (std::size_t i = 0; i < P; ++i) dst[o * P + i] += b;
      }
    }
  }
  if (mode == Mode::kTrain) {
    input_ = x;
    cached_ = true;
  }
  return out;
}

template <typename T>
Tensor<T> Conv3d<T>::backward(const Tensor<T>& grad_output) {
  this->require_cached(cached_);
  const Shape5 in = input_.shape();
  const Shape5 os = output_shape(in);
  require_shape(grad_output.shape(), os, "conv3d backward");
  const std::size_t P = os.spatial();
  const std::size_t K = static_cast<std::size_t>(in_) * kernel_ * kernel_ * kernel_;
  const int chunk = chunk_samples(K, P, in.n, sizeof(T));

  if (has_bias_) {
    for (int o = 0; o < out_; ++o) {
      double acc = 0.0;
      for (int n = 0; n < in.n; ++n) {
        const T* g = grad_output.sample(n).data() + o * P;
        for (std::size_t i = 0; i < P; ++i) acc += g[i];
      }
      bias_.grad[o] += static_cast<T>(acc);
    }
  }

  Tensor<T> dx(in);
  CMapR<T> w(weight_.value.data(), out_, K);
  MapR<T> dw(weight_.grad.data(), out_, K);
  std::vector<T>& cols = conv_scratch<T>();
  MatR<T> dy, dcols;
  for (int n0 = 0; n0 < in.n; n0 += chunk) {
    const int cn = std::min(chunk, in.n - n0);
    const std::size_t NP = P * cn;
    cols.resize(K * NP);
    for (int j = 0; j < cn; ++j) {
      im2col(input_.sample(n0 + j).data(), in, os, kernel_, stride_, pad_, cols.data(), NP, j * P);
    }
    dy.resize(out_, static_cast<Eigen::Index>(NP));
    for (int j = 0; j < cn; ++j) {
      const T* src = grad_output.sample(n0 + j).data();
      for (int o = 0; o < out_; ++o) std::copy_n(src + o * P, P, dy.data() + o * NP + j * P);
    }
    CMapR<T> c(cols.data(), K, NP);
    dw.noalias() += dy * c.transpose();
    if (!this->input_grad_) continue;
    dcols.noalias() = w.transpose() * dy;
    for (int j = 0; j < cn; ++j) {
      col2im(dcols.data(), NP, j * P, in, os, kernel_, stride_, pad_, dx.sample(n0 + j).data());
    }
  }
  return dx;
}

template <typename T>
void Conv3d<T>::parameters(const std::string& prefix, std::vector<NamedParameter<T>>& out) {
  out.push_back({prefix + "weight", &weight_});
  if (has_bias_) out.push_back({prefix + "bias", &bias_});
}

template <typename T>
void Conv3d<T>::initialize(std::mt19937_64& rng) {
  he_normal(weight_.value, weight_.fan_in, rng);
  if (has_bias_) bias_.value.fill(T{0});
}

// ---------------------------------------------------------------- MaxPool3d

template <typename T>
MaxPool3d<T>::MaxPool3d(int kernel, int stride) : kernel_(kernel), stride_(stride), pad_(kernel / 2) {
  LayerSpec spec{LayerKind::kMaxPool3d};
  spec.kernel = kernel;
  spec.stride = stride;
  spec.validate();
}

template <typename T>
Shape5 MaxPool3d<T>::output_shape(const Shape5& input) const {
  return strided_shape(input, input.c, kernel_, stride_, pad_, "maxpool3d");
}

template <typename T>
Tensor<T> MaxPool3d<T>::forward(const Tensor<T>& x, Mode mode) {
  const Shape5 in = x.shape();
  const Shape5 os = output_shape(in);
  Tensor<T> out(os);
  std::vector<std::size_t> local;
  std::vector<std::size_t>& arg = mode == Mode::kTrain ? argmax_ : local;
  arg.assign(out.size(), 0);
  std::size_t o = 0;
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      for (int od = 0; od < os.d; ++od) {
        for (int oh = 0; oh < os.h; ++oh) {
          for (int ow = 0; ow < os.w; ++ow, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t best_i = 0;
            for (int kd = 0; kd < kernel_; ++kd) {
              const int id = od * stride_ - pad_ + kd;
              if (id < 0 || id >= in.d) continue;
              for (int kh = 0; kh < kernel_; ++kh) {
                const int ih = oh * stride_ - pad_ + kh;
                if (ih < 0 || ih >= in.h) continue;
                for (int kw = 0; kw < kernel_; ++kw) {
                  const int iw = ow * stride_ - pad_ + kw;
                  if (iw < 0 || iw >= in.w) continue;
                  const std::size_t i = x.offset(n, c, id, ih, iw);
                  if (x[i] > best) {
                    best = x[i];
                    best_i = i;
                  }
                }
              }
            }
            out[o] = best;
            arg[o] = best_i;
          }
        }
      }
    }
  }
  if (mode == Mode::kTrain) {
    in_shape_ = in;
    cached_ = true;
  }
  return out;
}

template <typename T>
Tensor<T> MaxPool3d<T>::backward(const Tensor<T>& grad_output) {
  this->require_cached(cached_);
  require_shape(grad_output.shape(), output_shape(in_shape_), "maxpool3d backward");
  Tensor<T> dx(in_shape_);
  for (std::size_t o = 0; o < grad_output.size(); ++o) dx[argmax_[o]] += grad_output[o];
  return dx;
}

// ---------------------------------------------------------------- GlobalAvgPool3d

template <typename T>
Shape5 GlobalAvgPool3d<T>::output_shape(const Shape5& input) const {
  if (input.spatial() == 0) throw ValidationError("global_avgpool3d: empty spatial input");
  return {input.n, input.c, 1, 1, 1};
}

template <typename T>
Tensor<T> GlobalAvgPool3d<T>::forward(const Tensor<T>& x, Mode mode) {
  const Shape5 os = output_shape(x.shape());
  const std::size_t S = x.shape().spatial();
  Tensor<T> out(os);
  for (std::size_t nc = 0; nc < out.size(); ++nc) {
    double acc = 0.0;
    const T* src = x.data() + nc * S;
    for (std::size_t i = 0; i < S; ++i) acc += src[i];
    out[nc] = static_cast<T>(acc / static_cast<double>(S));
  }
  if (mode == Mode::kTrain) {
    in_shape_ = x.shape();
    cached_ = true;
  }
  return out;
}

template <typename T>
Tensor<T> GlobalAvgPool3d<T>::backward(const Tensor<T>& grad_output) {
  this->require_cached(cached_);
  require_shape(grad_output.shape(), output_shape(in_shape_), "global_avgpool3d backward");
  const std::size_t S = in_shape_.spatial();
  Tensor<T> dx(in_shape_);
  for (std::size_t nc = 0; nc < grad_output.size(); ++nc) {
    const T g = static_cast<T>(grad_output[nc] / static_cast<double>(S));
    std::fill(dx.data() + nc * S, dx.data() + (nc + 1) * S, g);
  }
  return dx;
}

// ---------------------------------------------------------------- FullyConnected

template <typename T>
FullyConnected<T>::FullyConnected(int in_features, int out_features) : in_(in_features), out_(out_features) {
  LayerSpec spec{LayerKind::kFullyConnected, in_features, out_features};
  spec.validate();
  weight_ = make_param<T>({out_, in_, 1, 1, 1}, true, in_);
  bias_ = make_param<T>({1, out_, 1, 1, 1}, true);
}

template <typename T>
Shape5 FullyConnected<T>::output_shape(const Shape5& input) const {
  if (static_cast<int>(input.per_sample()) != in_) {
    throw ValidationError("fully_connected: per-sample feature dimension is " + std::to_string(input.per_sample()) +
                          ", expected " + std::to_string(in_));
  }
  return {input.n, out_, 1, 1, 1};
}

template <typename T>
Tensor<T> FullyConnected<T>::forward(const Tensor<T>& x, Mode mode) {
  const Shape5 os = output_shape(x.shape());
  Tensor<T> out(os);
  CMapR<T> xm(x.data(), x.shape().n, in_);
  CMapR<T> w(weight_.value.data(), out_, in_);
  MapR<T> y(out.data(), os.n, out_);
  y.noalias() = xm * w.transpose();
  for (int n = 0; n < os.n; ++n)
    for (int o = 0; o < out_; ++o) y(n, o) += bias_.value[o];
  if (mode == Mode::kTrain) {
    input_ = x;
    cached_ = true;
  }
  return out;
}

template <typename T>
Tensor<T> FullyConnected<T>::backward(const Tensor<T>& grad_output) {
  this->require_cached(cached_);
  const int N = input_.shape().n;
  require_shape(grad_output.shape(), {N, out_, 1, 1, 1}, "fully_connected backward");
  CMapR<T> dy(grad_output.data(), N, out_);
  CMapR<T> xm(input_.data(), N, in_);
  MapR<T>(weight_.grad.data(), out_, in_).noalias() += dy.transpose() * xm;
  for (int o = 0; o < out_; ++o) {
    double acc = 0.0;
    for (int n = 0; n < N; ++n) acc += dy(n, o);
    bias_.grad[o] += static_cast<T>(acc);
  }
  Tensor<T> dx(input_.shape());
  if (!this->input_grad_) return dx;
  CMapR<T> w(weight_.value.data(), out_, in_);
  MapR<T>(dx.data(), N, in_).noalias() = dy * w;
  return dx;
}

template <typename T>
void FullyConnected<T>::parameters(const std::string& prefix, std::vector<NamedParameter<T>>& out) {
  out.push_back({prefix + "weight", &weight_});
  out.push_back({prefix + "bias", &bias_});
}

template <typename T>
void FullyConnected<T>::initialize(std::mt19937_64& rng) {
  he_normal(weight_.value, in_, rng);
  bias_.value.fill(T{0});
}

// ---------------------------------------------------------------- BatchNorm

template <typename T>
BatchNorm<T>::BatchNorm(int channels, double momentum, double eps) : channels_(channels), momentum_(momentum), eps_(eps) {
  LayerSpec spec{LayerKind::kBatchNorm, channels};
  spec.validate();
  gamma_ = make_param<T>({1, channels, 1, 1, 1}, true);
  beta_ = make_param<T>({1, channels, 1, 1, 1}, true);
  running_mean_ = make_param<T>({1, channels, 1, 1, 1}, false);
  running_var_ = make_param<T>({1, channels, 1, 1, 1}, false);
  gamma_.value.fill(T{1});
  running_var_.value.fill(T{1});
}

template <typename T>
Shape5 BatchNorm<T>::output_shape(const Shape5& input) const {
  if (input.c != channels_) {
    throw ValidationError("batch_norm: channel dimension is " + std::to_string(input.c) + ", expected " +
                          std::to_string(channels_));
  }
  return input;
}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, Mode mode) {
  const Shape5 s = output_shape(x.shape());
  const std::size_t S = s.spatial();
  Tensor<T> out(s);
  if (mode == Mode::kEval) {
    for (int c = 0; c < channels_; ++c) {
      const double inv = 1.0 / std::sqrt(static_cast<double>(running_var_.value[c]) + eps_);
      const double scale = gamma_.value[c] * inv;
      const double shift = beta_.value[c] - running_mean_.value[c] * scale;
      for (int n = 0; n < s.n; ++n) {
        const std::size_t base = (static_cast<std::size_t>(n) * channels_ + c) * S;
        for (std::size_t i = 0; i < S; ++i) out[base + i] = static_cast<T>(x[base + i] * scale + shift);
      }
    }
    return out;
  }

  const double count = static_cast<double>(s.n) * static_cast<double>(S);
  xhat_ = Tensor<T>(s);
  inv_std_.assign(channels_, 0.0);
  for (int c = 0; c < channels_; ++c) {
    double sum = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels_ + c) * S;
      for (std::size_t i = 0; i < S; ++i) sum += x[base + i];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels_ + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const double d = x[base + i] - mean;
        sq += d * d;
      }
    }
    const double var = sq / count;
    const double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[c] = inv;
    for (int n = 0; n < s.n; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels_ + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const double xh = (x[base + i] - mean) * inv;
        xhat_[base + i] = static_cast<T>(xh);
        out[base + i] = static_cast<T>(gamma_.value[c] * xh + beta_.value[c]);
      }
    }
    running_mean_.value[c] = static_cast<T>(momentum_ * running_mean_.value[c] + (1.0 - momentum_) * mean);
    running_var_.value[c] = static_cast<T>(momentum_ * running_var_.value[c] + (1.0 - momentum_) * var);
  }
  cached_ = true;
  return out;
}

template <typename T>
Tensor<T> BatchNorm<T>::backward(const Tensor<T>& grad_output) {
  this->require_cached(cached_);
  const Shape5 s = xhat_.shape();
  require_shape(grad_output.shape(), s, "batch_norm backward");
  const std::size_t S = s.spatial();
  const double count = static_cast<double>(s.n) * static_cast<double>(S);
  Tensor<T> dx(s);
  for (int c = 0; c < channels_; ++c) {
    double dgamma = 0.0, dbeta = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels_ + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        dgamma += static_cast<double>(grad_output[base + i]) * xhat_[base + i];
        dbeta += grad_output[base + i];
      }
    }
    gamma_.grad[c] += static_cast<T>(dgamma);
    beta_.grad[c] += static_cast<T>(dbeta);
    if (!this->input_grad_) continue;
    const double k = gamma_.value[c] * inv_std_[c] / count;
    for (int n = 0; n < s.n; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels_ + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        dx[base + i] = static_cast<T>(k * (count * grad_output[base + i] - dbeta - xhat_[base + i] * dgamma));
      }
    }
  }
  return dx;
}

template <typename T>
void BatchNorm<T>::parameters(const std::string& prefix, std::vector<NamedParameter<T>>& out) {
  out.push_back({prefix + "gamma", &gamma_});
  out.push_back({prefix + "beta", &beta_});
  out.push_back({prefix + "running_mean", &running_mean_});
  out.push_back({prefix + "running_var", &running_var_});
}

template <typename T>
void BatchNorm<T>::initialize(std::mt19937_64&) {
  gamma_.value.fill(T{1});
  beta_.value.fill(T{0});
  running_mean_.value.fill(T{0});
  running_var_.value.fill(T{1});
}

// ---------------------------------------------------------------- LeakyRelu

template <typename T>
Tensor<T> LeakyRelu<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> out(x.shape());
  const T a = static_cast<T>(alpha_);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= T{0} ? x[i] : a * x[i];
  if (mode == Mode::kTrain) {
    input_ = x;
    cached_ = true;
  }
  return out;
}

template <typename T>
Tensor<T> LeakyRelu<T>::backward(const Tensor<T>& grad_output) {
  this->require_cached(cached_);
  require_shape(grad_output.shape(), input_.shape(), "leaky_relu backward");
  Tensor<T> dx(input_.shape());
  const T a = static_cast<T>(alpha_);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = input_[i] >= T{0} ? grad_output[i] : a * grad_output[i];
  return dx;
}

// ---------------------------------------------------------------- Dropout

template <typename T>
Dropout<T>::Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {
  LayerSpec spec{LayerKind::kDropout};
  spec.rate = rate;
  spec.validate();
}

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x, Mode mode) {
  if (mode == Mode::kEval) return x;
  if (!frozen_ || mask_shape_ != x.shape()) {
    mask_.resize(x.size());
    std::bernoulli_distribution keep(1.0 - rate_);
    const T scale = static_cast<T>(1.0 / (1.0 - rate_));
    for (T& m : mask_) m = keep(rng_) ? scale : T{0};
    mask_shape_ = x.shape();
  }
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mask_[i];
  cached_ = true;
  return out;
}

template <typename T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& grad_output) {
  this->require_cached(cached_);
  require_shape(grad_output.shape(), mask_shape_, "dropout backward");
  Tensor<T> dx(grad_output.shape());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = grad_output[i] * mask_[i];
  return dx;
}

// ---------------------------------------------------------------- Softmax

template <typename T>
Tensor<T> Softmax<T>::forward(const Tensor<T>& x, Mode mode) {
  const Shape5 s = x.shape();
  const std::size_t S = s.spatial();
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * S;
    for (std::size_t i = 0; i < S; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < s.c; ++c) mx = std::max(mx, static_cast<double>(x[base + c * S + i]));
      double sum = 0.0;
      for (int c = 0; c < s.c; ++c) sum += std::exp(x[base + c * S + i] - mx);
      for (int c = 0; c < s.c; ++c) out[base + c * S + i] = static_cast<T>(std::exp(x[base + c * S + i] - mx) / sum);
    }
  }
  if (mode == Mode::kTrain) {
    output_ = out;
    cached_ = true;
  }
  return out;
}

template <typename T>
Tensor<T> Softmax<T>::backward(const Tensor<T>& grad_output) {
  this->require_cached(cached_);
  const Shape5 s = output_.shape();
  require_shape(grad_output.shape(), s, "softmax backward");
  const std::size_t S = s.spatial();
  Tensor<T> dx(s);
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * S;
    for (std::size_t i = 0; i < S; ++i) {
      double dot = 0.0;
      for (int c = 0; c < s.c; ++c) dot += static_cast<double>(output_[base + c * S + i]) * grad_output[base + c * S + i];
      for (int c = 0; c < s.c; ++c) {
        const std::size_t k = base + c * S + i;
        dx[k] = static_cast<T>(output_[k] * (grad_output[k] - dot));
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- Sequential

template <typename T>
Layer<T>& Sequential<T>::add(std::string name, std::unique_ptr<Layer<T>> layer) {
  layers_.emplace_back(std::move(name), std::move(layer));
  return *layers_.back().second;
}

template <typename T>
Layer<T>* Sequential<T>::find(const std::string& name) {
  for (auto& [n, l] : layers_) {
    if (n == name) return l.get();
  }
  return nullptr;
}

template <typename T>
Shape5 Sequential<T>::output_shape(const Shape5& input) const {
  Shape5 s = input;
  for (const auto& [name, layer] : layers_) {
    try {
      s = layer->output_shape(s);
    } catch (const ValidationError& e) {
      throw ValidationError(name + ": " + e.what());
    }
  }
  return s;
}

template <typename T>
Tensor<T> Sequential<T>::forward(const Tensor<T>& x, Mode mode) {
  return forward(x, mode, ProbeFn{});
}

template <typename T>
Tensor<T> Sequential<T>::forward(const Tensor<T>& x, Mode mode, const ProbeFn& probe) {
  if (layers_.empty()) return x;
  Tensor<T> h;
  const Tensor<T>* cur = &x;
  for (auto& [name, layer] : layers_) {
    try {
      h = layer->forward(*cur, mode);
    } catch (const ValidationError& e) {
      throw ValidationError(name + ": " + e.what());
    }
    cur = &h;
    if (probe) probe(name, h.shape());
  }
  return h;
}

template <typename T>
Tensor<T> Sequential<T>::backward(const Tensor<T>& grad_output) {
  if (layers_.empty()) return grad_output;
  Tensor<T> g = grad_output;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = it->second->backward(g);
  return g;
}

template <typename T>
void Sequential<T>::parameters(const std::string& prefix, std::vector<NamedParameter<T>>& out) {
  for (auto& [name, layer] : layers_) layer->parameters(prefix + name + ".", out);
}

template <typename T>
void Sequential<T>::initialize(std::mt19937_64& rng) {
  for (auto& [name, layer] : layers_) layer->initialize(rng);
}

template <typename T>
void Sequential<T>::set_input_grad(bool needed) {
  this->input_grad_ = needed;
  if (!layers_.empty()) layers_.front().second->set_input_grad(needed);
}

// ---------------------------------------------------------------- ResidualBlock

template <typename T>
ResidualBlock<T>::ResidualBlock(int in_channels, int mid_channels, int out_channels, int stride, double alpha)
    : in_(in_channels), out_(out_channels), stride_(stride) {
  LayerSpec spec{LayerKind::kResidualBlock, in_channels, out_channels, 3, stride};
  spec.mid_channels = mid_channels;
  spec.validate();
  pre_.template emplace<BatchNorm<T>>("bn1", in_channels);
  pre_.template emplace<LeakyRelu<T>>("act1", alpha);
  if (mid_channels > 0) {
    branch_.template emplace<Conv3d<T>>("conv1", in_channels, mid_channels, 1, 1, false);
    branch_.template emplace<BatchNorm<T>>("bn2", mid_channels);
    branch_.template emplace<LeakyRelu<T>>("act2", alpha);
    branch_.template emplace<Conv3d<T>>("conv2", mid_channels, mid_channels, 3, stride, false);
    branch_.template emplace<BatchNorm<T>>("bn3", mid_channels);
    branch_.template emplace<LeakyRelu<T>>("act3", alpha);
    branch_.template emplace<Conv3d<T>>("conv3", mid_channels, out_channels, 1, 1, false);
  } else {
    branch_.template emplace<Conv3d<T>>("conv1", in_channels, out_channels, 3, stride, false);
    branch_.template emplace<BatchNorm<T>>("bn2", out_channels);
    branch_.template emplace<LeakyRelu<T>>("act2", alpha);
    branch_.template emplace<Conv3d<T>>("conv2", out_channels, out_channels, 3, 1, false);
  }
  if (in_channels != out_channels || stride != 1) {
    projection_ = std::make_unique<Conv3d<T>>(in_channels, out_channels, 1, stride, false);
  }
}

template <typename T>
Shape5 ResidualBlock<T>::output_shape(const Shape5& input) const {
  const Shape5 branch = branch_.output_shape(pre_.output_shape(input));
  const Shape5 shortcut = projection_ ? projection_->output_shape(input) : input;
  require_shape(branch, shortcut, "residual_block shortcut");
  return branch;
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  output_shape(x.shape());
  Tensor<T> y = branch_.forward(pre_.forward(x, mode), mode);
  if (projection_) {
    const Tensor<T> sc = projection_->forward(x, mode);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += sc[i];
  } else {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
  }
  if (mode == Mode::kTrain) cached_ = true;
  return y;
}

template <typename T>
Tensor<T> ResidualBlock<T>::backward(const Tensor<T>& grad_output) {
  this->require_cached(cached_);
  Tensor<T> dx = pre_.backward(branch_.backward(grad_output));
  if (projection_) {
    const Tensor<T> dsc = projection_->backward(grad_output);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dsc[i];
  } else {
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += grad_output[i];
  }
  return dx;
}

template <typename T>
void ResidualBlock<T>::parameters(const std::string& prefix, std::vector<NamedParameter<T>>& out) {
  pre_.parameters(prefix, out);
  branch_.parameters(prefix, out);
  if (projection_) projection_->parameters(prefix + "shortcut.", out);
}

template <typename T>
void ResidualBlock<T>::initialize(std::mt19937_64& rng) {
  pre_.initialize(rng);
  branch_.initialize(rng);
  if (projection_) projection_->initialize(rng);
}

// ---------------------------------------------------------------- factory

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case LayerKind::kConv3d:
      return std::make_unique<Conv3d<T>>(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.bias);
    case LayerKind::kMaxPool3d:
      return std::make_unique<MaxPool3d<T>>(spec.kernel, spec.stride);
    case LayerKind::kGlobalAvgPool3d:
      return std::make_unique<GlobalAvgPool3d<T>>();
    case LayerKind::kFullyConnected:
      return std::make_unique<FullyConnected<T>>(spec.in_channels, spec.out_channels);
    case LayerKind::kBatchNorm:
      return std::make_unique<BatchNorm<T>>(spec.in_channels);
    case LayerKind::kLeakyRelu:
      return std::make_unique<LeakyRelu<T>>(spec.alpha);
    case LayerKind::kDropout:
      return std::make_unique<Dropout<T>>(spec.rate, spec.seed);
    case LayerKind::kSoftmax:
      return std::make_unique<Softmax<T>>();
    case LayerKind::kResidualBlock:
      return std::make_unique<ResidualBlock<T>>(spec.in_channels, spec.mid_channels, spec.out_channels, spec.stride,
                                                spec.alpha);
    case LayerKind::kSequential:
      return std::make_unique<Sequential<T>>();
  }
  throw ValidationError("unknown layer kind");
}

#define LUNGPIPE_INSTANTIATE(T)                                                   \
  template class Layer<T>;                                                        \
  template class Conv3d<T>;                                                       \
  template class MaxPool3d<T>;                                                    \
  template class GlobalAvgPool3d<T>;                                              \
  template class FullyConnected<T>;                                               \
  template class BatchNorm<T>;                                                    \
  template class LeakyRelu<T>;                                                    \
  template class Dropout<T>;                                                      \
  template class Softmax<T>;                                                      \
  template class Sequential<T>;                                                   \
  template class ResidualBlock<T>;                                                \
  template std::unique_ptr<Layer<T>> make_layer<T>(const LayerSpec&);             \
  template void he_normal<T>(Tensor<T>&, int, std::mt19937_64&);

LUNGPIPE_INSTANTIATE(float)
LUNGPIPE_INSTANTIATE(double)

#undef LUNGPIPE_INSTANTIATE

}  // namespace lungpipe::nn
