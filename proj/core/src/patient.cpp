// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/patient.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lungpipe/nn/adam.hpp"
#include "lungpipe/volume_io.hpp"

namespace lungpipe {

using nn::Tensor;

std::vector<double> density_histogram(std::span<const double> values, int bins) {
  std::vector<double> h(bins, 0.0);
  if (values.empty()) return h;
  for (double v : values) {
    const int b = std::min(static_cast<int>(std::floor(std::clamp(v, 0.0, 1.0) * bins)), bins - 1);
    h[b] += 1.0;
  }
  for (double& x : h) x /= static_cast<double>(values.size());
  return h;
}

MalignancyFeatures pool_malignancy(const DetectionVolume& dv, int crop_nodule_count) {
  MalignancyFeatures f;
  if (dv.cell_count() == 0) return f;
  if (dv.classes != 3) throw ValidationError("pool_malignancy expects a 3-class detection volume");
  std::vector<double> column(dv.cell_count());
  for (int k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < column.size(); ++i) column[i] = dv.at(i, k);
    const auto h = density_histogram(column, kMalignancyBins);
    std::copy(h.begin(), h.end(), f.values.begin() + k * kMalignancyBins);
  }
  f.values[3 * kMalignancyBins] = crop_nodule_count;
  return f;
}

MalignancyFeatures pool_malignancy(std::span<const PlacedMap> maps, int volume_side, double threshold) {
  if (maps.empty()) return {};
  int crops = 0;
  for (const PlacedMap& m : maps) {
    for (std::size_t i = 0; i < m.map.cell_count(); ++i) {
      if (m.map.nodule_probability(i) > threshold) {
        ++crops;
        break;
      }
    }
  }
  return pool_malignancy(fuse_overlapping(maps, volume_side), crops);
}

ClassifierFeatures pool_classifier(std::span<const double> probs, ClassifierFeatureSet set) {
  const bool full = set == ClassifierFeatureSet::kFull;
  ClassifierFeatures f{std::vector<double>(full ? kClassifierFeatures : kCompetitionClassifierFeatures, 0.0)};
  if (probs.empty()) return f;
  const double n = static_cast<double>(probs.size());
  double sum = 0.0, lo = 1.0, hi = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("pool_classifier: probability outside [0, 1]");
    sum += p;
    lo = std::min(lo, p);
    hi = std::max(hi, p);
  }
  const double mean = sum / n;
  double sq = 0.0;
  for (double p : probs) sq += (p - mean) * (p - mean);
  const double sd = probs.size() == 1 ? 0.0 : std::sqrt(sq / n);
  if (!full) {
    f.values = {n, mean, sd, sum};
    return f;
  }
  f.values[0] = n;
  f.values[1] = lo;
  f.values[2] = hi;
  f.values[3] = mean;
  f.values[4] = sd;
  f.values[5] = sum;
  const auto h = density_histogram(probs, kClassifierBins);
  std::copy(h.begin(), h.end(), f.values.begin() + 6);
  return f;
}

PatientFeatureVector assemble_features(const MalignancyFeatures& m, const ClassifierFeatures& c, FeatureWeights weights) {
  PatientFeatureVector v;
  v.values.reserve(m.values.size() + c.values.size());
  for (double x : m.values) v.values.push_back(weights.malignancy * x);
  for (double x : c.values) v.values.push_back(weights.classifier * x);
  return v;
}

void PatientNetConfig::validate() const {
  if (input_features < 1 || hidden < 1) throw ValidationError("patient net sizes must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("patient net dropout must lie in [0, 1)");
}

std::string PatientNetConfig::architecture_id() const {
  return "patient/in" + std::to_string(input_features) + "/h" + std::to_string(hidden);
}

namespace {

template <typename T>
nn::Network<T> build_patient_impl(const PatientNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  nn::Network<T> net(cfg.architecture_id());
  auto& b = net.body();
  b.template emplace<nn::FullyConnected<T>>("fc1", cfg.input_features, cfg.hidden);
  b.template emplace<nn::LeakyRelu<T>>("relu1", 0.0);
  b.template emplace<nn::Dropout<T>>("drop1", cfg.dropout, seed * 2 + 1);
  b.template emplace<nn::FullyConnected<T>>("fc2", cfg.hidden, cfg.hidden);
  b.template emplace<nn::LeakyRelu<T>>("relu2", 0.0);
  b.template emplace<nn::Dropout<T>>("drop2", cfg.dropout, seed * 2 + 2);
  b.template emplace<nn::FullyConnected<T>>("fc3", cfg.hidden, 2);
  b.template emplace<nn::Softmax<T>>("softmax");
  return net;
}

Tensor<float> rows_to_tensor(std::span<const PatientFeatureVector> rows, int features) {
  Tensor<float> x({static_cast<int>(rows.size()), features, 1, 1, 1});
  for (std::size_t n = 0; n < rows.size(); ++n) {
    if (static_cast<int>(rows[n].values.size()) != features) {
      throw ValidationError("patient feature vector has length " + std::to_string(rows[n].values.size()) +
                            ", expected " + std::to_string(features));
    }
    for (int k = 0; k < features; ++k) x[n * features + k] = static_cast<float>(rows[n].values[k]);
  }
  return x;
}

}  // namespace

nn::Network<float> build_patient_net(const PatientNetConfig& cfg, std::uint64_t seed) {
  return build_patient_impl<float>(cfg, seed);
}
nn::Network<double> build_patient_net_f64(const PatientNetConfig& cfg, std::uint64_t seed) {
  return build_patient_impl<double>(cfg, seed);
}

PatientTrainResult train_patient(std::span<const PatientFeatureVector> features, std::span<const int> labels,
                                 const PatientNetConfig& cfg, const PatientHyper& hyper) {
  if (features.size() != labels.size()) throw ValidationError("train_patient: feature and label counts differ");
  const bool has_pos = std::count(labels.begin(), labels.end(), 1) > 0;
  const bool has_neg = std::count(labels.begin(), labels.end(), 0) > 0;
  if (!has_pos || !has_neg) throw ValidationError("train_patient: need at least one cancer and one non-cancer patient");

  PatientTrainResult result{build_patient_net(cfg, hyper.seed), {}};
  nn::Network<float>& net = result.net;
  net.initialize(hyper.seed);
  const Tensor<float> x = rows_to_tensor(features, cfg.input_features);
  const int n = static_cast<int>(features.size());
  nn::Adam<float> adam({hyper.learning_rate, 0.9, 0.999, 1e-8, hyper.weight_decay});
  for (int step = 1; step <= hyper.iterations; ++step) {
    net.zero_grad();
    const Tensor<float> p = net.forward(x, nn::Mode::kTrain);
    Tensor<float> grad(p.shape());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
      const std::size_t k = static_cast<std::size_t>(i) * 2 + (labels[i] == 1 ? patient_class::kCancer : patient_class::kNoCancer);
      const double q = std::max(static_cast<double>(p[k]), 1e-12);
      loss -= std::log(q);
      grad[k] = static_cast<float>(-1.0 / q / n);
    }
    loss /= n;
    if (!std::isfinite(loss)) throw NumericalError("train_patient: non-finite loss at step " + std::to_string(step));
    net.backward(grad);
    adam.step(net.trainable_parameters());
    if (step % std::max(1, hyper.log_every) == 0 || step == 1) result.log.emplace_back(step, loss);
  }
  return result;
}

double clip_probability(double p) { return std::clamp(p, kClipLow, kClipHigh); }

std::vector<double> predict_patients(nn::Network<float>& net, std::span<const PatientFeatureVector> fvs) {
  if (fvs.empty()) return {};
  const int features = static_cast<int>(fvs.front().values.size());
  const Tensor<float> p = net.forward(rows_to_tensor(fvs, features), nn::Mode::kEval);
  std::vector<double> out;
  for (std::size_t i = 0; i < fvs.size(); ++i) out.push_back(clip_probability(p[i * 2 + patient_class::kCancer]));
  return out;
}

double predict_patient(nn::Network<float>& net, const PatientFeatureVector& fv) {
  return predict_patients(net, std::span<const PatientFeatureVector>(&fv, 1)).front();
}

void write_feature_table(const std::filesystem::path& path, std::span<const FeatureRow> rows) {
  std::ostringstream os;
  const std::size_t width = rows.empty() ? kPatientFeatures : rows.front().features.values.size();
  os << "patient_id,label";
  for (std::size_t k = 0; k < width; ++k) os << ",f" << k;
  os << '\n';
  char buf[40];
  for (const FeatureRow& r : rows) {
    if (r.features.values.size() != width) throw ValidationError("feature table rows differ in width");
    os << r.patient_id << ',';
    if (r.label) os << *r.label;
    for (double v : r.features.values) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      os << buf;
    }
    os << '\n';
  }
  write_text_file(path, os.str());
}

std::vector<FeatureRow> read_feature_table(const std::filesystem::path& path) {
  std::istringstream is(read_text_file(path));
  std::string line;
  if (!std::getline(is, line) || line.rfind("patient_id,label", 0) != 0) {
    throw ValidationError("feature table " + path.string() + " has no header");
  }
  std::vector<FeatureRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    FeatureRow r;
    std::getline(ls, r.patient_id, ',');
    std::getline(ls, field, ',');
    if (!field.empty()) r.label = std::stoi(field);
    while (std::getline(ls, field, ',')) {
      try {
        r.features.values.push_back(std::stod(field));
      } catch (const std::exception&) {
        throw ValidationError("feature table: bad number '" + field + "'");
      }
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace lungpipe
