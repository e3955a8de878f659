// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/detector.hpp"

#include <cmath>

namespace lungpipe {

using nn::Tensor;

const char* to_string(DepthVariant v) { return v == DepthVariant::kPaper101 ? "paper-101" : "desk"; }

DepthVariant parse_depth_variant(const std::string& s) {
  if (s == "paper-101") return DepthVariant::kPaper101;
  if (s == "desk") return DepthVariant::kDesk;
  throw ValidationError("unknown depth variant '" + s + "' (expected paper-101 or desk)");
}

void DetectorConfig::validate() const {
  if (class_count != 2 && class_count != 3) throw ValidationError("detector class_count must be 2 or 3");
  if (crop_size < kCellSize || crop_size % kCellSize != 0) {
    throw ValidationError("detector crop_size " + std::to_string(crop_size) + " is not a positive multiple of 16");
  }
  if (width_divisor < 1 || 64 % width_divisor != 0) throw ValidationError("detector width_divisor must divide 64");
  if (!(alpha >= 0.0)) throw ValidationError("detector alpha must be >= 0");
}

std::array<int, 4> DetectorConfig::repeats() const {
  return depth == DepthVariant::kPaper101 ? std::array<int, 4>{3, 4, 23, 3} : std::array<int, 4>{1, 1, 2, 1};
}

std::string DetectorConfig::architecture_id() const {
  return std::string("detector/") + to_string(depth) + "/c" + std::to_string(class_count) + "/w" +
         std::to_string(width_divisor);
}

namespace {

template <typename T>
nn::Network<T> build_detector_impl(const DetectorConfig& cfg) {
  cfg.validate();
  nn::Network<T> net(cfg.architecture_id());
  auto& b = net.body();
  const int stem = 64 / cfg.width_divisor;
  b.template emplace<nn::Conv3d<T>>("stem.conv", 1, stem, 7, 2, false);
  b.template emplace<nn::BatchNorm<T>>("stem.bn", stem);
  b.template emplace<nn::LeakyRelu<T>>("stem.act", cfg.alpha);
  b.template emplace<nn::MaxPool3d<T>>("stem.pool", 3, 2);

  const std::array<int, 4> mids{64, 128, 256, 512};
  const std::array<int, 4> strides{2, 2, 1, 1};
  const auto repeats = cfg.repeats();
  int in = stem;
  for (int s = 0; s < 4; ++s) {
    const int mid = mids[s] / cfg.width_divisor;
    const int out = 4 * mid;
    for (int r = 0; r < repeats[s]; ++r) {
      b.template emplace<nn::ResidualBlock<T>>("stage" + std::to_string(s + 1) + ".block" + std::to_string(r + 1),
                                               in, mid, out, r == 0 ? strides[s] : 1, cfg.alpha);
      in = out;
    }
  }
  b.template emplace<nn::BatchNorm<T>>("post.bn", in);
  b.template emplace<nn::LeakyRelu<T>>("post.act", cfg.alpha);
  b.template emplace<nn::Conv3d<T>>("head.conv", in, cfg.class_count, 1, 1, true);
  b.template emplace<nn::Softmax<T>>("softmax");
  return net;
}

template <typename T>
void check_prediction(const Tensor<T>& pred, std::span<const std::uint8_t> truth) {
  const auto& s = pred.shape();
  if (truth.size() != static_cast<std::size_t>(s.n) * s.spatial()) {
    throw ValidationError("loss: " + std::to_string(truth.size()) + " labels for " + s.to_string() + " prediction");
  }
  for (T p : pred.values()) {
    if (p < T{0} || std::isnan(static_cast<double>(p))) throw ValidationError("loss: negative or NaN probability");
  }
}

template <typename T>
LossResult<T> weighted_cross_entropy(const Tensor<T>& pred, std::span<const std::uint8_t> truth,
                                     const std::vector<double>& weights) {
  check_prediction(pred, truth);
  const auto& s = pred.shape();
  const std::size_t S = s.spatial();
  const double norm = static_cast<double>(truth.size()) * s.c;
  LossResult<T> r{0.0, Tensor<T>(s)};
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < S; ++i) {
      const int t = truth[n * S + i];
      if (t >= s.c) throw ValidationError("loss: label " + std::to_string(t) + " outside the class range");
      const double w = weights[t];
      if (w == 0.0) continue;
      const std::size_t k = (static_cast<std::size_t>(n) * s.c + t) * S + i;
      const double p = std::max(static_cast<double>(pred[k]), 1e-12);
      r.loss -= w * std::log(p);
      r.grad[k] = static_cast<T>(-w / p / norm);
    }
  }
  r.loss /= norm;
  return r;
}

Tensor<double> map_to_tensor(const ClassProbMap& m) {
  Tensor<double> t({1, m.classes, m.side, m.side, m.side});
  const std::size_t S = m.cell_count();
  for (std::size_t i = 0; i < S; ++i)
    for (int k = 0; k < m.classes; ++k) t[k * S + i] = m.at(i, k);
  return t;
}

}  // namespace

nn::Network<float> build_detector(const DetectorConfig& cfg) { return build_detector_impl<float>(cfg); }
nn::Network<double> build_detector_f64(const DetectorConfig& cfg) { return build_detector_impl<double>(cfg); }

double ClassProbMap::nodule_probability(std::size_t cell) const {
  if (classes == 2) return probs[cell * 2 + binary_class::kHasNodule];
  return 1.0 - probs[cell * 3 + ternary_class::kNoNodule];
}

ClassProbMap to_prob_map(const Tensor<float>& output, int n) {
  const auto& s = output.shape();
  if (s.d != s.h || s.h != s.w) throw ValidationError("detector output is not cubic: " + s.to_string());
  ClassProbMap m{s.d, s.c, std::vector<float>(s.per_sample())};
  const std::size_t S = s.spatial();
  const float* src = output.sample(n).data();
  for (std::size_t i = 0; i < S; ++i)
    for (int k = 0; k < s.c; ++k) m.probs[i * s.c + k] = src[k * S + i];
  return m;
}

double BatchClassFreqs::total() const {
  double t = 0.0;
  for (double c : counts) t += c;
  return t;
}

BatchClassFreqs count_classes(std::span<const std::uint8_t> truth, int class_count) {
  BatchClassFreqs f{std::vector<double>(class_count, 0.0)};
  for (std::uint8_t t : truth) {
    if (t >= class_count) throw ValidationError("label " + std::to_string(t) + " outside the class range");
    f.counts[t] += 1.0;
  }
  return f;
}

template <typename T>
LossResult<T> loss_balanced_binary(const Tensor<T>& pred, std::span<const std::uint8_t> truth,
                                   const BatchClassFreqs& freqs) {
  if (pred.shape().c != 2 || freqs.counts.size() != 2) throw ValidationError("balanced binary loss needs 2 classes");
  const double f_no = freqs.counts[binary_class::kNoNodule];
  const double f_nod = freqs.counts[binary_class::kHasNodule];
  std::vector<double> w(2, 1.0);
  w[binary_class::kHasNodule] = f_nod > 0.0 ? f_no / f_nod : 1.0;
  return weighted_cross_entropy(pred, truth, w);
}

template <typename T>
LossResult<T> loss_inverse_freq(const Tensor<T>& pred, std::span<const std::uint8_t> truth,
                                const BatchClassFreqs& freqs) {
  const int c = pred.shape().c;
  if (static_cast<int>(freqs.counts.size()) != c) throw ValidationError("class frequency count mismatch");
  std::vector<double> w(c, 0.0);
  for (int k = 0; k < c; ++k) {
    if (freqs.counts[k] < 0.0) throw ValidationError("class frequencies must be >= 0");
    if (freqs.counts[k] > 0.0) w[k] = 1.0 / freqs.counts[k];
  }
  for (std::uint8_t t : truth) {
    if (t < c && w[t] == 0.0) {
      throw ValidationError("class " + std::to_string(t) + " occurs in the batch but has zero frequency");
    }
  }
  return weighted_cross_entropy(pred, truth, w);
}

double loss_balanced_binary(const ClassProbMap& pred, const CellLabelGrid& truth, const BatchClassFreqs& freqs) {
  return loss_balanced_binary(map_to_tensor(pred), truth.cells.values(), freqs).loss;
}

double loss_inverse_freq(const ClassProbMap& pred, const CellLabelGrid& truth, const BatchClassFreqs& freqs) {
  return loss_inverse_freq(map_to_tensor(pred), truth.cells.values(), freqs).loss;
}

template LossResult<float> loss_balanced_binary<float>(const Tensor<float>&, std::span<const std::uint8_t>,
                                                       const BatchClassFreqs&);
template LossResult<double> loss_balanced_binary<double>(const Tensor<double>&, std::span<const std::uint8_t>,
                                                         const BatchClassFreqs&);
template LossResult<float> loss_inverse_freq<float>(const Tensor<float>&, std::span<const std::uint8_t>,
                                                    const BatchClassFreqs&);
template LossResult<double> loss_inverse_freq<double>(const Tensor<double>&, std::span<const std::uint8_t>,
                                                      const BatchClassFreqs&);

}  // namespace lungpipe
