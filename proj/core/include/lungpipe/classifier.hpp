// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lungpipe/detector.hpp"
#include "lungpipe/extract.hpp"
#include "lungpipe/nn/network.hpp"

namespace lungpipe {

/// Malignancy classifier output channels.
namespace nodule_class {
inline constexpr int kBenign = 0;
inline constexpr int kMalignant = 1;
}  // namespace nodule_class

struct ClassifierConfig {
  std::array<int, 4> repeats{2, 2, 2, 2};
  /// first-block stride of each stage
  std::array<int, 4> strides{1, 2, 1, 1};
  /// widths are (64, 128, 256, 512) divided by this
  int width_divisor = 4;
  int input_side = kNoduleSide;
  double alpha = 0.1;

  /// Stage strides (2, 2, 2, 2) of the unmodified ResNet-18.
  static ClassifierConfig original_strides();

  void validate() const;
  std::string architecture_id() const;
};

/// Stem conv 7^3 stride 2, maxpool 3^3 stride 2, four stages of basic residual
/// blocks, global average pool, fully connected 2, softmax.
nn::Network<float> build_classifier(const ClassifierConfig& cfg);
nn::Network<double> build_classifier_f64(const ClassifierConfig& cfg);

/// Names of the layers whose output sizes make up the shape ledger.
std::vector<std::string> classifier_probe_layers(const ClassifierConfig& cfg);

struct LabelledNodule {
  NoduleVolume32 volume;
  NoduleLabel label = NoduleLabel::kBenign;
};

struct ClassifierLogRow {
  std::int64_t step = 0;
  double train_loss = 0.0;
  /// NaN when there is no validation split
  double validation_loss = 0.0;
};

struct ClassifierHyper {
  int iterations = 1000;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double validation_fraction = 0.1;
  /// orientation copies of malignant nodules up to a 1:1 ratio
  bool rebalance = true;
  /// random orientation of every example at every step
  bool random_orientation = true;
  std::uint64_t seed = 3;
  int log_every = 100;
  std::filesystem::path checkpoint_path;
  std::string config_json = "{}";
};

struct PatientSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
};

/// Patient-disjoint split: ceil(fraction * patients) go to validation
/// (none when there is a single patient).
PatientSplit split_patients(std::span<const LabelledNodule> data, double validation_fraction, std::uint64_t seed);

/// Training list after rebalancing: malignant nodules are replicated through
/// distinct orientations until they match the benign count (at most 48 each).
std::vector<LabelledNodule> rebalance_malignant(std::span<const LabelledNodule> data, std::uint64_t seed);

struct ClassifierTrainResult {
  nn::Network<float> net;
  std::vector<ClassifierLogRow> log;
  /// decision threshold maximising validation F1 on a 0.05 grid
  double threshold = 0.5;
  PatientSplit split;
};

ClassifierTrainResult train_classifier(std::span<const LabelledNodule> data, const ClassifierConfig& cfg,
                                       const ClassifierHyper& hyper);

/// P(malignant) per nodule, eval mode.
std::vector<double> classify_nodules(nn::Network<float>& net, std::span<const NoduleVolume32> nodules,
                                     int batch_size = 16);

/// Threshold on {0.05, 0.10, ..., 0.95} maximising F1; 0.5 when no positives.
double best_f1_threshold(std::span<const double> probs, std::span<const int> labels);

std::string prediction_to_json_line(const std::string& patient_id, int candidate_index, double p_malignant);

}  // namespace lungpipe
