// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "lungpipe/detector.hpp"
#include "lungpipe/nn/adam.hpp"
#include "lungpipe/nn/checkpoint.hpp"
#include "lungpipe/phantom.hpp"

namespace lungpipe {

using nn::Tensor;

namespace {

struct LabelledCrop {
  std::size_t patient = 0;
  Index3 origin;
  CellLabelGrid labels;
};

Index3 random_origin(std::mt19937_64& rng, const Dims3& dims, int crop) {
  Index3 o;
  for (int a = 0; a < 3; ++a) {
    std::uniform_int_distribution<int> d(0, std::max(0, dims[a] - crop));
    o[a] = d(rng);
  }
  return o;
}

bool any_nodule(const CellLabelGrid& g) {
  for (std::uint8_t v : g.cells.values()) {
    if (v == binary_class::kHasNodule) return true;
  }
  return false;
}

template <typename V>
void flip_grid(Grid3<V>& g, int axis) {
  const Dims3 d = g.dims();
  Grid3<V> out(d);
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        Index3 src{x, y, z};
        src[axis] = d[axis] - 1 - src[axis];
        out(x, y, z) = g(src);
      }
  g = std::move(out);
}

struct LoopSettings {
  std::vector<std::pair<int, double>> phases;
  int batch_size = 8;
  double weight_decay = 1e-4;
  int log_every = 10;
  std::filesystem::path checkpoint_path;
  int checkpoint_every = 500;
  std::string config_json;
  std::uint64_t seed = 0;
  bool flip_augment = true;
  DetectorLoss loss = DetectorLoss::kBalancedBinary;
};

void save(nn::Network<float>& net, const LoopSettings& s, std::int64_t step) {
  if (s.checkpoint_path.empty()) return;
  nn::write_checkpoint(s.checkpoint_path, nn::make_checkpoint(net, {net.architecture_id(), step, s.seed, s.config_json}));
}

// Shared mini-batch loop. `next_epoch(k)` returns the k-th shuffled crop list.
TrainedNetwork run_loop(nn::Network<float> net, std::span<const TrainingPatient> patients, int crop_size,
                        const LoopSettings& s, const std::function<std::vector<LabelledCrop>(std::uint64_t)>& next_epoch) {
  if (patients.empty()) throw ValidationError("detector training: empty dataset");
  if (s.batch_size < 1) throw ValidationError("detector training: batch size must be >= 1");
  TrainedNetwork result{std::move(net), {}, 0};
  nn::Network<float>& model = result.net;
  nn::Adam<float> adam({s.phases.empty() ? 0.0 : s.phases.front().second, 0.9, 0.999, 1e-8, s.weight_decay});
  std::mt19937_64 aug(derive_seed(s.seed, 0xA5));

  std::uint64_t epoch = 0;
  std::vector<LabelledCrop> crops = next_epoch(epoch);
  if (crops.empty()) throw ValidationError("detector training: no usable crops");
  std::size_t cursor = 0;
  double interval_loss = 0.0;
  int interval_n = 0;
  std::int64_t step = 0;

  for (const auto& [iterations, lr] : s.phases) {
    adam.set_learning_rate(lr);
    for (int it = 0; it < iterations; ++it) {
      ++step;
      std::vector<Grid3<float>> batch;
      std::vector<std::uint8_t> truth;
      for (int b = 0; b < s.batch_size; ++b) {
        if (cursor == crops.size()) {
          crops = next_epoch(++epoch);
          cursor = 0;
        }
        const LabelledCrop& c = crops[cursor++];
        Grid3<float> cube = extract_cube(patients[c.patient].volume, c.origin, crop_size);
        Grid3<std::uint8_t> lab = c.labels.cells;
        if (s.flip_augment) {
          const unsigned mask = static_cast<unsigned>(aug() & 7u);
          for (int a = 0; a < 3; ++a) {
            if (mask & (1u << a)) {
              flip_grid(cube, a);
              flip_grid(lab, a);
            }
          }
        }
        truth.insert(truth.end(), lab.values().begin(), lab.values().end());
        batch.push_back(std::move(cube));
      }
      std::vector<const Grid3<float>*> ptrs;
      for (const auto& g : batch) ptrs.push_back(&g);
      const Tensor<float> x = crops_to_tensor(ptrs);

      model.zero_grad();
      const Tensor<float> out = model.forward(x, nn::Mode::kTrain);
      const int classes = out.shape().c;
      const BatchClassFreqs freqs = count_classes(truth, classes);
      const LossResult<float> loss = s.loss == DetectorLoss::kBalancedBinary
                                         ? loss_balanced_binary(out, truth, freqs)
                                         : loss_inverse_freq(out, truth, freqs);
      if (!std::isfinite(loss.loss)) {
        throw NumericalError("detector training: non-finite loss at step " + std::to_string(step));
      }
      model.backward(loss.grad);
      adam.step(model.trainable_parameters());

      interval_loss += loss.loss;
      ++interval_n;
      if (step % s.log_every == 0) {
        result.log.push_back({step, interval_loss / interval_n, lr});
        interval_loss = 0.0;
        interval_n = 0;
      }
      if (s.checkpoint_every > 0 && step % s.checkpoint_every == 0) save(model, s, step);
    }
  }
  if (interval_n > 0) result.log.push_back({step, interval_loss / interval_n, adam.config().learning_rate});
  result.steps = step;
  save(model, s, step);
  return result;
}

}  // namespace

Tensor<float> crops_to_tensor(std::span<const Grid3<float>* const> crops) {
  if (crops.empty()) throw ValidationError("crops_to_tensor: empty batch");
  const Dims3 d = crops.front()->dims();
  Tensor<float> x({static_cast<int>(crops.size()), 1, d.z, d.y, d.x});
  for (std::size_t n = 0; n < crops.size(); ++n) {
    if (crops[n]->dims() != d) throw ValidationError("crops_to_tensor: crops differ in size");
    std::copy(crops[n]->values().begin(), crops[n]->values().end(), x.sample(static_cast<int>(n)).begin());
  }
  return x;
}

std::vector<CropRecord> sample_detector_crops(std::span<const TrainingPatient> patients, int crop_size,
                                              int crops_per_patient, std::uint64_t seed) {
  if (crops_per_patient < 1) throw ValidationError("crops_per_patient must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<CropRecord> pos, neg;
  for (std::size_t p = 0; p < patients.size(); ++p) {
    for (int k = 0; k < crops_per_patient; ++k) {
      const Index3 o = random_origin(rng, patients[p].volume.dims(), crop_size);
      const bool hit = any_nodule(label_cells(o, crop_size, patients[p].nodules));
      (hit ? pos : neg).push_back({p, o, hit});
    }
  }
  if (!pos.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, pos.size() - 1);
    const std::size_t unique = pos.size();
    while (pos.size() < neg.size()) pos.push_back(pos[pick(rng) % unique]);
  }
  std::vector<CropRecord> all = std::move(pos);
  all.insert(all.end(), neg.begin(), neg.end());
  std::shuffle(all.begin(), all.end(), rng);
  return all;
}

void write_training_log(const std::filesystem::path& path, std::span<const TrainingLogRow> rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ValidationError("cannot write training log " + path.string());
  os << "step,loss,lr\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g\n", static_cast<long long>(r.step), r.loss, r.lr);
    os << buf;
  }
}

TrainedNetwork train_nodule_detector(std::span<const TrainingPatient> patients, const DetectorConfig& cfg,
                                     const DetectorHyper& hyper) {
  cfg.validate();
  if (cfg.class_count != 2) throw ValidationError("nodule detector needs class_count 2");
  nn::Network<float> net = build_detector(cfg);
  net.initialize(hyper.seed);

  LoopSettings s;
  s.phases = {{hyper.iterations, hyper.learning_rate}};
  s.batch_size = hyper.batch_size;
  s.weight_decay = hyper.weight_decay;
  s.log_every = std::max(1, hyper.log_every);
  s.checkpoint_path = hyper.checkpoint_path;
  s.checkpoint_every = hyper.checkpoint_every;
  s.config_json = hyper.config_json;
  s.seed = hyper.seed;
  s.flip_augment = hyper.flip_augment;
  s.loss = hyper.loss;

  auto epoch = [&](std::uint64_t k) {
    std::vector<LabelledCrop> out;
    for (const CropRecord& r :
         sample_detector_crops(patients, cfg.crop_size, hyper.crops_per_patient, derive_seed(hyper.seed, k))) {
      out.push_back({r.patient, r.origin, label_cells(r.origin, cfg.crop_size, patients[r.patient].nodules)});
    }
    return out;
  };
  return run_loop(std::move(net), patients, cfg.crop_size, s, epoch);
}

nn::Network<float> init_malignancy_from(nn::Network<float>& base, const DetectorConfig& base_cfg, std::uint64_t seed) {
  DetectorConfig cfg = base_cfg;
  cfg.class_count = 3;
  nn::Network<float> net = build_detector(cfg);
  net.initialize(seed);
  auto src = base.named_parameters();
  for (auto& p : net.named_parameters()) {
    if (p.name.rfind("head.conv.", 0) == 0) continue;
    auto it = std::find_if(src.begin(), src.end(), [&](const auto& s) { return s.name == p.name; });
    if (it == src.end()) throw ValidationError("malignancy init: base network lacks parameter " + p.name);
    nn::require_shape(it->param->value.shape(), p.param->value.shape(), "malignancy init parameter " + p.name);
    p.param->value = it->param->value;
  }
  if (src.size() != net.named_parameters().size()) {
    throw ValidationError("malignancy init: base network has a different layer inventory");
  }
  return net;
}

TrainedNetwork finetune_malignancy(nn::Network<float>& base, const DetectorConfig& base_cfg,
                                   std::span<const TrainingPatient> patients, const FinetuneHyper& hyper,
                                   nn::Network<float>* cell_source) {
  nn::Network<float> net = init_malignancy_from(base, base_cfg, hyper.seed);
  const int crop = base_cfg.crop_size;

  LoopSettings s;
  s.phases = hyper.phases;
  s.batch_size = hyper.batch_size;
  s.weight_decay = hyper.weight_decay;
  s.log_every = std::max(1, hyper.log_every);
  s.checkpoint_path = hyper.checkpoint_path;
  s.checkpoint_every = hyper.checkpoint_every;
  s.config_json = hyper.config_json;
  s.seed = hyper.seed;
  s.flip_augment = hyper.flip_augment;
  s.loss = DetectorLoss::kInverseFrequency;

  // Nodule-bearing crops are fixed once; each epoch reshuffles them.
  std::vector<LabelledCrop> pool;
  std::mt19937_64 rng(derive_seed(hyper.seed, 0));
  for (std::size_t p = 0; p < patients.size(); ++p) {
    int found = 0;
    for (int attempt = 0; attempt < 8 * hyper.crops_per_patient && found < hyper.crops_per_patient; ++attempt) {
      const Index3 o = random_origin(rng, patients[p].volume.dims(), crop);
      CellLabelGrid binary;
      if (cell_source != nullptr) {
        const Grid3<float> cube = extract_cube(patients[p].volume, o, crop);
        const ClassProbMap m = predict_crops(*cell_source, std::span<const Grid3<float>>(&cube, 1), 1).front();
        const int g = crop / kCellSize;
        binary = {LabelAlphabet::kBinary, Grid3<std::uint8_t>({g, g, g}, binary_class::kNoNodule)};
        for (std::size_t i = 0; i < m.cell_count(); ++i) {
          if (m.nodule_probability(i) > 0.5) binary.cells.values()[i] = binary_class::kHasNodule;
        }
      } else {
        binary = label_cells(o, crop, patients[p].nodules);
      }
      if (!any_nodule(binary)) continue;
      pool.push_back({p, o, malignancy_cell_labels(binary, patients[p].cancer)});
      ++found;
    }
  }
  auto epoch = [&](std::uint64_t k) {
    std::vector<LabelledCrop> out = pool;
    std::mt19937_64 shuffle_rng(derive_seed(hyper.seed, k + 1));
    std::shuffle(out.begin(), out.end(), shuffle_rng);
    return out;
  };
  return run_loop(std::move(net), patients, crop, s, epoch);
}

std::vector<ClassProbMap> predict_crops(nn::Network<float>& net, std::span<const Grid3<float>> crops, int batch_size) {
  std::vector<ClassProbMap> out;
  out.reserve(crops.size());
  for (std::size_t start = 0; start < crops.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(crops.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const Grid3<float>*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&crops[i]);
    const Tensor<float> y = net.forward(crops_to_tensor(ptrs), nn::Mode::kEval);
    for (int n = 0; n < y.shape().n; ++n) out.push_back(to_prob_map(y, n));
  }
  return out;
}

}  // namespace lungpipe
