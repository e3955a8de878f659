// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lungpipe/grid_labels.hpp"
#include "lungpipe/nn/network.hpp"
#include "lungpipe/preprocess.hpp"

namespace lungpipe {

enum class DepthVariant { kPaper101, kDesk };

const char* to_string(DepthVariant v);
DepthVariant parse_depth_variant(const std::string& s);

struct DetectorConfig {
  /// 2 = nodule detector, 3 = malignancy detector
  int class_count = 2;
  DepthVariant depth = DepthVariant::kDesk;
  int crop_size = 32;
  /// channel widths are the ResNet-101 widths divided by this
  int width_divisor = 4;
  double alpha = 0.1;

  void validate() const;
  std::array<int, 4> repeats() const;
  std::string architecture_id() const;
};

/// Stem conv 7^3 stride 2, maxpool 3^3 stride 2, four bottleneck stages with
/// strides (2, 2, 1, 1), then a 1^3 conv to `class_count` channels and a
/// channel softmax. Maps (N, 1, s, s, s) to (N, c, s/16, s/16, s/16).
nn::Network<float> build_detector(const DetectorConfig& cfg);
nn::Network<double> build_detector_f64(const DetectorConfig& cfg);

/// Per-cell class distribution of one crop. Cells are x fastest, classes
/// innermost: probs[cell_index * classes + k].
struct ClassProbMap {
  int side = 0;
  int classes = 0;
  std::vector<float> probs;

  std::size_t cell_count() const { return static_cast<std::size_t>(side) * side * side; }
  std::size_t cell_index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) + static_cast<std::size_t>(side) * (y + static_cast<std::size_t>(side) * z);
  }
  float at(std::size_t cell, int k) const { return probs[cell * classes + k]; }
  /// P(has-nodule) for binary maps, 1 - P(no-nodule) for ternary maps.
  double nodule_probability(std::size_t cell) const;
};

/// Sample n of a detector output tensor (N, c, g, g, g).
ClassProbMap to_prob_map(const nn::Tensor<float>& output, int n);

/// Cell counts per class within a mini-batch.
struct BatchClassFreqs {
  std::vector<double> counts;

  double total() const;
};

BatchClassFreqs count_classes(std::span<const std::uint8_t> truth, int class_count);

template <typename T>
struct LossResult {
  double loss = 0.0;
  /// d loss / d probabilities, same shape as the prediction
  nn::Tensor<T> grad;
};

/// Class-weighted cross-entropy on the probability of the true class:
/// w(nodule) = f_no / f_nodule (1 when there are no nodule cells),
/// w(no-nodule) = 1; mean over cells divided by the class count.
/// `truth` holds one label per cell in tensor order (n, d, h, w).
template <typename T>
LossResult<T> loss_balanced_binary(const nn::Tensor<T>& pred, std::span<const std::uint8_t> truth,
                                   const BatchClassFreqs& freqs);

/// Cross-entropy weighted by 1 / f(true class); classes absent from the
/// batch never contribute.
template <typename T>
LossResult<T> loss_inverse_freq(const nn::Tensor<T>& pred, std::span<const std::uint8_t> truth,
                                const BatchClassFreqs& freqs);

/// Convenience overloads over a single crop.
double loss_balanced_binary(const ClassProbMap& pred, const CellLabelGrid& truth, const BatchClassFreqs& freqs);
double loss_inverse_freq(const ClassProbMap& pred, const CellLabelGrid& truth, const BatchClassFreqs& freqs);

enum class DetectorLoss { kBalancedBinary, kInverseFrequency };

/// One training patient: canonical volume plus annotations.
struct TrainingPatient {
  std::string patient_id;
  Grid3<float> volume;
  std::vector<NoduleAnnotation> nodules;
  bool cancer = false;
};

struct CropRecord {
  std::size_t patient = 0;
  Index3 origin;
  bool positive = false;
};

/// Up to `crops_per_patient` random crop origins per patient; crops with a
/// nodule cell are then resampled with replacement until they are at least
/// as many as the crops without one. Order is shuffled.
std::vector<CropRecord> sample_detector_crops(std::span<const TrainingPatient> patients, int crop_size,
                                              int crops_per_patient, std::uint64_t seed);

struct TrainingLogRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

void write_training_log(const std::filesystem::path& path, std::span<const TrainingLogRow> rows);

struct DetectorHyper {
  int iterations = 2000;
  int batch_size = 8;
  double learning_rate = 0.01;
  double weight_decay = 1e-4;
  int crops_per_patient = 32;
  DetectorLoss loss = DetectorLoss::kBalancedBinary;
  std::uint64_t seed = 1;
  int log_every = 10;
  /// written every `checkpoint_every` steps and at the end; empty = never
  std::filesystem::path checkpoint_path;
  int checkpoint_every = 500;
  /// stored in checkpoint metadata
  std::string config_json = "{}";
  /// flip augmentation of crops and labels
  bool flip_augment = true;
};

struct TrainedNetwork {
  nn::Network<float> net;
  std::vector<TrainingLogRow> log;
  std::int64_t steps = 0;
};

/// Trains the 2-class detector on random crops with binary cell labels.
TrainedNetwork train_nodule_detector(std::span<const TrainingPatient> patients, const DetectorConfig& cfg,
                                     const DetectorHyper& hyper);

struct FinetuneHyper {
  /// (iterations, learning rate) per phase
  std::vector<std::pair<int, double>> phases{{400, 0.01}, {600, 0.001}};
  int batch_size = 8;
  double weight_decay = 1e-4;
  int crops_per_patient = 32;
  std::uint64_t seed = 2;
  int log_every = 10;
  std::filesystem::path checkpoint_path;
  int checkpoint_every = 500;
  std::string config_json = "{}";
  bool flip_augment = true;
};

/// New 3-class network whose shared layers are copied from `base`; the final
/// 1^3 conv is freshly initialised. Throws if anything else differs.
nn::Network<float> init_malignancy_from(nn::Network<float>& base, const DetectorConfig& base_cfg, std::uint64_t seed);

/// Fine-tunes on nodule-bearing crops only, with ternary labels from the
/// patient's cancer flag. When `cell_source` is given, has-nodule cells come
/// from thresholding its predictions instead of the annotations.
TrainedNetwork finetune_malignancy(nn::Network<float>& base, const DetectorConfig& base_cfg,
                                   std::span<const TrainingPatient> patients, const FinetuneHyper& hyper,
                                   nn::Network<float>* cell_source = nullptr);

/// Eval-mode predictions for every crop of a set, in batches.
std::vector<ClassProbMap> predict_crops(nn::Network<float>& net, std::span<const Grid3<float>> crops,
                                        int batch_size = 8);

/// Copies crops into a (N, 1, s, s, s) tensor; axes map x -> w, y -> h, z -> d.
nn::Tensor<float> crops_to_tensor(std::span<const Grid3<float>* const> crops);

}  // namespace lungpipe
