// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "lungpipe/metrics.hpp"
#include "lungpipe/nn/adam.hpp"
#include "lungpipe/nn/checkpoint.hpp"
#include "lungpipe/phantom.hpp"

namespace lungpipe {

using nn::Tensor;

ClassifierConfig ClassifierConfig::original_strides() {
  ClassifierConfig c;
  c.strides = {2, 2, 2, 2};
  return c;
}

void ClassifierConfig::validate() const {
  if (input_side != kNoduleSide) {
    throw ValidationError("classifier input side must be " + std::to_string(kNoduleSide) + ", got " +
                          std::to_string(input_side));
  }
  if (width_divisor < 1 || 64 % width_divisor != 0) throw ValidationError("classifier width_divisor must divide 64");
  for (int i = 0; i < 4; ++i) {
    if (repeats[i] < 1) throw ValidationError("classifier block repeats must be >= 1");
    if (strides[i] < 1) throw ValidationError("classifier strides must be >= 1");
  }
}

std::string ClassifierConfig::architecture_id() const {
  std::string id = "classifier/r";
  for (int r : repeats) id += std::to_string(r);
  id += "/s";
  for (int s : strides) id += std::to_string(s);
  return id + "/w" + std::to_string(width_divisor);
}

namespace {

template <typename T>
nn::Network<T> build_classifier_impl(const ClassifierConfig& cfg) {
  cfg.validate();
  nn::Network<T> net(cfg.architecture_id());
  auto& b = net.body();
  const int stem = 64 / cfg.width_divisor;
  b.template emplace<nn::Conv3d<T>>("stem.conv", 1, stem, 7, 2, false);
  b.template emplace<nn::BatchNorm<T>>("stem.bn", stem);
  b.template emplace<nn::LeakyRelu<T>>("stem.act", cfg.alpha);
  b.template emplace<nn::MaxPool3d<T>>("stem.pool", 3, 2);
  int in = stem;
  for (int s = 0; s < 4; ++s) {
    const int out = (64 << s) / cfg.width_divisor;
    for (int r = 0; r < cfg.repeats[s]; ++r) {
      b.template emplace<nn::ResidualBlock<T>>("stage" + std::to_string(s + 1) + ".block" + std::to_string(r + 1), in,
                                               0, out, r == 0 ? cfg.strides[s] : 1, cfg.alpha);
      in = out;
    }
  }
  b.template emplace<nn::BatchNorm<T>>("post.bn", in);
  b.template emplace<nn::LeakyRelu<T>>("post.act", cfg.alpha);
  b.template emplace<nn::GlobalAvgPool3d<T>>("pool");
  b.template emplace<nn::FullyConnected<T>>("fc", in, 2);
  b.template emplace<nn::Softmax<T>>("softmax");
  return net;
}

Tensor<float> nodules_to_tensor(const std::vector<const Grid3<float>*>& cubes) { return crops_to_tensor(cubes); }

// Mean cross-entropy over a batch of 2-way softmax rows, and its gradient.
LossResult<float> batch_cross_entropy(const Tensor<float>& probs, std::span<const int> labels) {
  const int n = probs.shape().n;
  LossResult<float> r{0.0, Tensor<float>(probs.shape())};
  for (int i = 0; i < n; ++i) {
    const std::size_t k = static_cast<std::size_t>(i) * 2 + labels[i];
    const double p = std::max(static_cast<double>(probs[k]), 1e-12);
    r.loss -= std::log(p);
    r.grad[k] = static_cast<float>(-1.0 / p / n);
  }
  r.loss /= n;
  return r;
}

int label_index(NoduleLabel l) { return l == NoduleLabel::kMalignant ? nodule_class::kMalignant : nodule_class::kBenign; }

double mean_loss(nn::Network<float>& net, std::span<const LabelledNodule> data) {
  if (data.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<NoduleVolume32> vols;
  for (const auto& d : data) vols.push_back(d.volume);
  const auto p = classify_nodules(net, vols);
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = data[i].label == NoduleLabel::kMalignant ? p[i] : 1.0 - p[i];
    s -= std::log(std::max(q, 1e-12));
  }
  return s / static_cast<double>(p.size());
}

}  // namespace

nn::Network<float> build_classifier(const ClassifierConfig& cfg) { return build_classifier_impl<float>(cfg); }
nn::Network<double> build_classifier_f64(const ClassifierConfig& cfg) { return build_classifier_impl<double>(cfg); }

std::vector<std::string> classifier_probe_layers(const ClassifierConfig& cfg) {
  std::vector<std::string> names{"stem.conv", "stem.pool"};
  for (int s = 0; s < 4; ++s) names.push_back("stage" + std::to_string(s + 1) + ".block" + std::to_string(cfg.repeats[s]));
  names.push_back("pool");
  return names;
}

PatientSplit split_patients(std::span<const LabelledNodule> data, double validation_fraction, std::uint64_t seed) {
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ValidationError("validation fraction must lie in [0, 1)");
  }
  std::set<std::string> ids;
  for (const auto& d : data) ids.insert(d.volume.patient_id);
  std::vector<std::string> all(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  std::size_t nval = static_cast<std::size_t>(std::ceil(validation_fraction * static_cast<double>(all.size())));
  if (all.size() < 2) nval = 0;
  PatientSplit split;
  split.validation.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(nval));
  split.train.assign(all.begin() + static_cast<std::ptrdiff_t>(nval), all.end());
  std::sort(split.validation.begin(), split.validation.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

std::vector<LabelledNodule> rebalance_malignant(std::span<const LabelledNodule> data, std::uint64_t seed) {
  std::vector<std::size_t> malignant;
  std::size_t benign = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].label == NoduleLabel::kMalignant) {
      malignant.push_back(i);
    } else {
      ++benign;
    }
  }
  std::vector<LabelledNodule> out(data.begin(), data.end());
  if (malignant.empty() || benign <= malignant.size()) return out;
  // copies per malignant nodule, identity included; the remainder goes to a seeded subset
  std::vector<int> copies(malignant.size(), static_cast<int>(benign / malignant.size()));
  std::vector<std::size_t> order(malignant.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t k = 0; k < benign % malignant.size(); ++k) ++copies[order[k]];
  for (std::size_t m = 0; m < malignant.size(); ++m) {
    const int count = std::min(copies[m], 48);
    const auto views = augment_orientations(data[malignant[m]].volume, count, derive_seed(seed, m + 1));
    for (std::size_t v = 1; v < views.size(); ++v) out.push_back({views[v], NoduleLabel::kMalignant});
  }
  return out;
}

double best_f1_threshold(std::span<const double> probs, std::span<const int> labels) {
  if (probs.empty() || std::find(labels.begin(), labels.end(), 1) == labels.end()) return 0.5;
  double best = 0.5, best_f1 = -1.0;
  for (int k = 1; k <= 19; ++k) {
    const double t = 0.05 * k;
    const auto f1 = sensitivity_specificity_f1(confusion(probs, labels, t)).f1.value_or(0.0);
    if (f1 > best_f1 + 1e-12) {
      best_f1 = f1;
      best = t;
    }
  }
  return best;
}

ClassifierTrainResult train_classifier(std::span<const LabelledNodule> data, const ClassifierConfig& cfg,
                                       const ClassifierHyper& hyper) {
  if (data.empty()) throw ValidationError("nodule classifier: empty training data");
  bool has_m = false, has_b = false;
  for (const auto& d : data) (d.label == NoduleLabel::kMalignant ? has_m : has_b) = true;
  if (!has_m) throw ValidationError("nodule classifier: training data has no malignant nodules");
  if (!has_b) throw ValidationError("nodule classifier: training data has no benign nodules");
  if (hyper.batch_size < 1) throw ValidationError("nodule classifier: batch size must be >= 1");

  ClassifierTrainResult result{build_classifier(cfg), {}, 0.5, split_patients(data, hyper.validation_fraction, hyper.seed)};
  nn::Network<float>& net = result.net;
  net.initialize(hyper.seed);

  const std::set<std::string> val_ids(result.split.validation.begin(), result.split.validation.end());
  std::vector<LabelledNodule> train, val;
  for (const auto& d : data) (val_ids.count(d.volume.patient_id) ? val : train).push_back(d);
  bool train_m = false, train_b = false;
  for (const auto& d : train) (d.label == NoduleLabel::kMalignant ? train_m : train_b) = true;
  if (!train_m || !train_b) {
    // the split removed a class; fall back to training on everything
    train.assign(data.begin(), data.end());
    val.clear();
    result.split.train.insert(result.split.train.end(), result.split.validation.begin(), result.split.validation.end());
    std::sort(result.split.train.begin(), result.split.train.end());
    result.split.validation.clear();
  }
  if (hyper.rebalance) train = rebalance_malignant(train, derive_seed(hyper.seed, 11));

  nn::Adam<float> adam({hyper.learning_rate, 0.9, 0.999, 1e-8, hyper.weight_decay});
  std::mt19937_64 rng(derive_seed(hyper.seed, 12));
  std::uniform_int_distribution<int> pick_orientation(0, 47);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  double interval = 0.0;
  int interval_n = 0;

  for (int step = 1; step <= hyper.iterations; ++step) {
    std::vector<Grid3<float>> cubes;
    std::vector<int> labels;
    for (int b = 0; b < hyper.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const LabelledNodule& ex = train[order[cursor++]];
      if (hyper.random_orientation) {
        cubes.push_back(apply_orientation(ex.volume.voxels, all_orientations()[pick_orientation(rng)]));
      } else {
        cubes.push_back(ex.volume.voxels);
      }
      labels.push_back(label_index(ex.label));
    }
    std::vector<const Grid3<float>*> ptrs;
    for (const auto& c : cubes) ptrs.push_back(&c);
    net.zero_grad();
    const Tensor<float> probs = net.forward(nodules_to_tensor(ptrs), nn::Mode::kTrain);
    const LossResult<float> loss = batch_cross_entropy(probs, labels);
    if (!std::isfinite(loss.loss)) throw NumericalError("nodule classifier: non-finite loss at step " + std::to_string(step));
    net.backward(loss.grad);
    adam.step(net.trainable_parameters());
    interval += loss.loss;
    ++interval_n;
    if (step % std::max(1, hyper.log_every) == 0 || step == hyper.iterations) {
      result.log.push_back({step, interval / interval_n, mean_loss(net, val)});
      interval = 0.0;
      interval_n = 0;
    }
  }

  if (!val.empty()) {
    std::vector<NoduleVolume32> vols;
    std::vector<int> labels;
    for (const auto& d : val) {
      vols.push_back(d.volume);
      labels.push_back(label_index(d.label));
    }
    result.threshold = best_f1_threshold(classify_nodules(net, vols), labels);
  }
  if (!hyper.checkpoint_path.empty()) {
    nn::write_checkpoint(hyper.checkpoint_path,
                         nn::make_checkpoint(net, {net.architecture_id(), hyper.iterations, hyper.seed, hyper.config_json}));
  }
  return result;
}

std::vector<double> classify_nodules(nn::Network<float>& net, std::span<const NoduleVolume32> nodules, int batch_size) {
  std::vector<double> out;
  out.reserve(nodules.size());
  for (std::size_t start = 0; start < nodules.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(nodules.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const Grid3<float>*> ptrs;
    for (std::size_t i = start; i < end; ++i) {
      const Dims3 d = nodules[i].voxels.dims();
      if (d.x != kNoduleSide || d.y != kNoduleSide || d.z != kNoduleSide) {
        throw ValidationError("classify_nodules: nodule volume is not 32^3");
      }
      ptrs.push_back(&nodules[i].voxels);
    }
    const Tensor<float> p = net.forward(nodules_to_tensor(ptrs), nn::Mode::kEval);
    for (int n = 0; n < p.shape().n; ++n) out.push_back(p[static_cast<std::size_t>(n) * 2 + nodule_class::kMalignant]);
  }
  return out;
}

std::string prediction_to_json_line(const std::string& patient_id, int candidate_index, double p_malignant) {
  return nlohmann::json{{"patient_id", patient_id}, {"candidate_index", candidate_index}, {"p_malignant", p_malignant}}
      .dump();
}

}  // namespace lungpipe
