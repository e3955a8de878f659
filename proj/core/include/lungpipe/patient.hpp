// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lungpipe/extract.hpp"
#include "lungpipe/nn/network.hpp"

namespace lungpipe {

inline constexpr int kMalignancyBins = 32;
inline constexpr int kClassifierBins = 10;
/// 3 classes x 32 bins + crop nodule count
inline constexpr int kMalignancyFeatures = 3 * kMalignancyBins + 1;
/// count, min, max, mean, std, sum + 10 bins
inline constexpr int kClassifierFeatures = 6 + kClassifierBins;
inline constexpr int kPatientFeatures = kMalignancyFeatures + kClassifierFeatures;
/// count, mean, std, sum only
inline constexpr int kCompetitionClassifierFeatures = 4;

/// Patient classifier output channels.
namespace patient_class {
inline constexpr int kNoCancer = 0;
inline constexpr int kCancer = 1;
}  // namespace patient_class

/// Count-normalised histogram of values in [0, 1]; bin = min(floor(v * bins), bins - 1).
/// All zeros for an empty input.
std::vector<double> density_histogram(std::span<const double> values, int bins);

struct MalignancyFeatures {
  /// hist[class * 32 + bin] for classes (malignant, benign, no-nodule), then the crop count
  std::array<double, kMalignancyFeatures> values{};
};

/// Histograms of each class's per-cell probability over a fused ternary map.
MalignancyFeatures pool_malignancy(const DetectionVolume& dv, int crop_nodule_count);
/// Fuses ternary crop maps first; crop_nodule_count = crops holding a cell with
/// nodule probability > threshold. No maps gives all zeros.
MalignancyFeatures pool_malignancy(std::span<const PlacedMap> maps, int volume_side, double threshold = 0.5);

enum class ClassifierFeatureSet { kFull, kCompetition };

struct ClassifierFeatures {
  std::vector<double> values;
};

/// Statistics of per-nodule malignancy probabilities (population std) plus a
/// 10-bin histogram; all zeros without nodules. The competition set keeps
/// only count, mean, std and sum.
ClassifierFeatures pool_classifier(std::span<const double> probs,
                                   ClassifierFeatureSet set = ClassifierFeatureSet::kFull);

struct FeatureWeights {
  double malignancy = 1.0;
  double classifier = 1.0;
};

struct PatientFeatureVector {
  std::vector<double> values;
};

PatientFeatureVector assemble_features(const MalignancyFeatures& m, const ClassifierFeatures& c,
                                       FeatureWeights weights = {});

struct PatientNetConfig {
  int input_features = kPatientFeatures;
  int hidden = 256;
  double dropout = 0.5;

  void validate() const;
  std::string architecture_id() const;
};

/// FC(hidden) -> ReLU -> dropout -> FC(hidden) -> ReLU -> dropout -> FC(2) -> softmax.
nn::Network<float> build_patient_net(const PatientNetConfig& cfg, std::uint64_t dropout_seed = 0);
nn::Network<double> build_patient_net_f64(const PatientNetConfig& cfg, std::uint64_t dropout_seed = 0);

struct PatientHyper {
  int iterations = 2000;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 4;
  int log_every = 100;
};

struct PatientTrainResult {
  nn::Network<float> net;
  /// (step, full-batch loss)
  std::vector<std::pair<std::int64_t, double>> log;
};

/// Full-batch training: one optimizer step per iteration over all rows.
/// labels are 1 for cancer.
PatientTrainResult train_patient(std::span<const PatientFeatureVector> features, std::span<const int> labels,
                                 const PatientNetConfig& cfg, const PatientHyper& hyper);

inline constexpr double kClipLow = 0.1;
inline constexpr double kClipHigh = 0.9;

/// Cancer probability clipped to [0.1, 0.9].
double predict_patient(nn::Network<float>& net, const PatientFeatureVector& fv);
std::vector<double> predict_patients(nn::Network<float>& net, std::span<const PatientFeatureVector> fvs);
double clip_probability(double p);

struct FeatureRow {
  std::string patient_id;
  std::optional<int> label;
  PatientFeatureVector features;
};

/// CSV: patient_id,label,f0..f{n-1}; an unknown label is an empty field.
void write_feature_table(const std::filesystem::path& path, std::span<const FeatureRow> rows);
std::vector<FeatureRow> read_feature_table(const std::filesystem::path& path);

}  // namespace lungpipe
