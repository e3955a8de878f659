// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "lungpipe/classifier.hpp"
#include "lungpipe/error.hpp"
#include "lungpipe/metrics.hpp"

using namespace lungpipe;

namespace {

std::vector<int> probe_sides(const ClassifierConfig& cfg) {
  auto net = build_classifier(cfg);
  net.initialize(1);
  std::map<std::string, int> side;
  nn::Tensor<float> x({1, 1, 32, 32, 32});
  net.forward(x, nn::Mode::kEval, [&](const std::string& name, const nn::Shape5& s) {
    EXPECT_EQ(s.d, s.h);
    EXPECT_EQ(s.h, s.w);
    side[name] = s.d;
  });
  std::vector<int> out{32};
  for (const auto& n : classifier_probe_layers(cfg)) out.push_back(side.at(n));
  return out;
}

LabelledNodule cube(const std::string& pid, float level, NoduleLabel label, int half = 6) {
  LabelledNodule n;
  n.volume.voxels = Grid3<float>({32, 32, 32}, 0.0f);
  for (int z = 16 - half; z < 16 + half; ++z)
    for (int y = 16 - half; y < 16 + half; ++y)
      for (int x = 16 - half; x < 16 + half; ++x) n.volume.voxels(x, y, z) = level;
  n.volume.patient_id = pid;
  n.label = label;
  return n;
}

}  // namespace

TEST(ClassifierShape, ModifiedStridesLedger) {
  ClassifierConfig cfg;
  EXPECT_EQ(probe_sides(cfg), (std::vector<int>{32, 16, 8, 8, 4, 4, 4, 1}));
  auto net = build_classifier(cfg);
  EXPECT_EQ(net.output_shape({5, 1, 32, 32, 32}), (nn::Shape5{5, 2, 1, 1, 1}));
}

TEST(ClassifierShape, OriginalStridesCollapseEarlier) {
  EXPECT_EQ(probe_sides(ClassifierConfig::original_strides()), (std::vector<int>{32, 16, 8, 4, 2, 1, 1, 1}));
}

TEST(ClassifierShape, FullWidthChannels) {
  ClassifierConfig cfg;
  cfg.width_divisor = 1;
  auto net = build_classifier(cfg);
  std::map<std::string, int> ch;
  // shape arithmetic without running the full-width forward
  nn::Shape5 s{1, 1, 32, 32, 32};
  for (std::size_t i = 0; i < net.body().layer_count(); ++i) {
    s = net.body().layer(i).output_shape(s);
    ch[net.body().layer_name(i)] = s.c;
  }
  EXPECT_EQ(ch.at("stem.conv"), 64);
  EXPECT_EQ(ch.at("stage1.block2"), 64);
  EXPECT_EQ(ch.at("stage2.block2"), 128);
  EXPECT_EQ(ch.at("stage3.block2"), 256);
  EXPECT_EQ(ch.at("stage4.block2"), 512);
  EXPECT_EQ(ch.at("fc"), 2);
}

TEST(ClassifierShape, InvalidConfigs) {
  ClassifierConfig cfg;
  cfg.input_side = 64;
  EXPECT_THROW(build_classifier(cfg), ValidationError);
  cfg = {};
  cfg.width_divisor = 3;
  EXPECT_THROW(build_classifier(cfg), ValidationError);
  cfg = {};
  cfg.repeats[2] = 0;
  EXPECT_THROW(build_classifier(cfg), ValidationError);
}

TEST(ClassifierSplit, PatientDisjointAndSized) {
  std::vector<LabelledNodule> data;
  for (int p = 0; p < 40; ++p)
    for (int k = 0; k < 1 + p % 3; ++k) data.push_back(cube("p" + std::to_string(p), 0.5f, NoduleLabel::kBenign, 1));
  const PatientSplit s = split_patients(data, 0.1, 7);
  EXPECT_EQ(s.validation.size(), 4u);
  EXPECT_EQ(s.train.size(), 36u);
  std::set<std::string> a(s.train.begin(), s.train.end());
  for (const auto& v : s.validation) EXPECT_EQ(a.count(v), 0u);
  EXPECT_EQ(split_patients(data, 0.1, 7).validation, s.validation);
  EXPECT_THROW(split_patients(data, 1.0, 7), ValidationError);
  const std::vector<LabelledNodule> one(data.begin(), data.begin() + 1);
  EXPECT_TRUE(split_patients(one, 0.5, 1).validation.empty());
}

TEST(ClassifierRebalance, RatioNearOne) {
  for (int malignant : {1, 3, 7, 20}) {
    std::vector<LabelledNodule> data;
    for (int i = 0; i < 60; ++i) data.push_back(cube("b", 0.3f, NoduleLabel::kBenign, 2));
    for (int i = 0; i < malignant; ++i) {
      auto n = cube("m", 0.9f, NoduleLabel::kMalignant, 3);
      n.volume.voxels(10 + i % 5, 9, 8) = 0.1f;  // break symmetry so orientations differ
      data.push_back(n);
    }
    const auto out = rebalance_malignant(data, 5);
    std::size_t m = 0, b = 0;
    for (const auto& d : out) (d.label == NoduleLabel::kMalignant ? m : b) += 1;
    EXPECT_EQ(b, 60u);
    const double ratio = static_cast<double>(m) / static_cast<double>(b);
    if (60 / malignant <= 48) {
      EXPECT_GE(ratio, 0.8) << malignant;
      EXPECT_LE(ratio, 1.25) << malignant;
    } else {
      EXPECT_EQ(m, static_cast<std::size_t>(48 * malignant));
    }
  }
}

TEST(ClassifierRebalance, NoOpWhenMalignantDominatesOrAbsent) {
  std::vector<LabelledNodule> data{cube("a", 0.2f, NoduleLabel::kBenign, 2), cube("a", 0.9f, NoduleLabel::kMalignant, 2),
                                   cube("b", 0.9f, NoduleLabel::kMalignant, 2)};
  EXPECT_EQ(rebalance_malignant(data, 1).size(), 3u);
  data = {cube("a", 0.2f, NoduleLabel::kBenign, 2)};
  EXPECT_EQ(rebalance_malignant(data, 1).size(), 1u);
}

TEST(ClassifierInference, EmptyIdenticalAndBatchInvariant) {
  ClassifierConfig cfg;
  cfg.width_divisor = 16;
  auto net = build_classifier(cfg);
  net.initialize(3);
  EXPECT_TRUE(classify_nodules(net, std::vector<NoduleVolume32>{}).empty());
  std::vector<NoduleVolume32> vols;
  for (int i = 0; i < 5; ++i) vols.push_back(cube("p", 0.1f * (i + 1), NoduleLabel::kBenign, 2 + i).volume);
  vols.push_back(vols[0]);
  const auto p = classify_nodules(net, vols, 4);
  ASSERT_EQ(p.size(), 6u);
  EXPECT_DOUBLE_EQ(p[0], p[5]);
  for (double v : p) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  const auto q = classify_nodules(net, vols, 1);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-6);
  // matches the malignant softmax channel of a direct forward
  nn::Tensor<float> x({1, 1, 32, 32, 32});
  std::copy(vols[2].voxels.values().begin(), vols[2].voxels.values().end(), x.data());
  const auto y = net.forward(x, nn::Mode::kEval);
  EXPECT_NEAR(p[2], y[nodule_class::kMalignant], 1e-6);
  NoduleVolume32 bad;
  bad.voxels = Grid3<float>({16, 16, 16}, 0.0f);
  EXPECT_THROW(classify_nodules(net, std::vector<NoduleVolume32>{bad}), ValidationError);
}

TEST(ClassifierTrain, SingleClassRejected) {
  std::vector<LabelledNodule> data{cube("a", 0.2f, NoduleLabel::kBenign), cube("b", 0.3f, NoduleLabel::kBenign)};
  ClassifierConfig cfg;
  cfg.width_divisor = 16;
  ClassifierHyper h;
  h.iterations = 1;
  EXPECT_THROW(train_classifier(data, cfg, h), ValidationError);
  EXPECT_THROW(train_classifier(std::vector<LabelledNodule>{}, cfg, h), ValidationError);
}

TEST(ClassifierTrain, LearnsSeparableCubesAndIsDeterministic) {
  std::vector<LabelledNodule> data;
  for (int p = 0; p < 12; ++p) {
    const std::string id = "p" + std::to_string(p);
    data.push_back(cube(id, 0.9f, NoduleLabel::kMalignant, 9));
    data.push_back(cube(id, 0.3f, NoduleLabel::kBenign, 3));
    data.push_back(cube(id, 0.4f, NoduleLabel::kBenign, 4));
  }
  ClassifierConfig cfg;
  cfg.width_divisor = 16;
  ClassifierHyper h;
  h.iterations = 60;
  h.batch_size = 8;
  h.learning_rate = 3e-3;
  h.validation_fraction = 0.25;
  h.log_every = 20;
  h.seed = 9;
  auto r = train_classifier(data, cfg, h);
  ASSERT_EQ(r.log.size(), 3u);
  EXPECT_EQ(r.split.validation.size(), 3u);
  for (const auto& row : r.log) {
    EXPECT_TRUE(std::isfinite(row.train_loss));
    EXPECT_TRUE(std::isfinite(row.validation_loss));
  }
  EXPECT_LT(r.log.back().validation_loss, std::log(2.0));
  std::vector<NoduleVolume32> vols;
  std::vector<int> labels;
  for (const auto& d : data) {
    vols.push_back(d.volume);
    labels.push_back(d.label == NoduleLabel::kMalignant);
  }
  const auto p = classify_nodules(r.net, vols);
  const auto rates = sensitivity_specificity_f1(confusion(p, labels, r.threshold));
  EXPECT_GE(rates.f1.value_or(0.0), 0.9);
  auto again = train_classifier(data, cfg, h);
  EXPECT_EQ(classify_nodules(again.net, vols), p);
  EXPECT_DOUBLE_EQ(again.threshold, r.threshold);
}

TEST(ClassifierThreshold, GridSearch) {
  const std::vector<double> p{0.1, 0.2, 0.62, 0.7, 0.9};
  const std::vector<int> y{0, 0, 1, 1, 1};
  const double t = best_f1_threshold(p, y);
  EXPECT_NEAR(t, 0.2, 1e-9);  // strict '>' so 0.2 already separates
  EXPECT_DOUBLE_EQ(best_f1_threshold(p, std::vector<int>(5, 0)), 0.5);
  EXPECT_DOUBLE_EQ(best_f1_threshold(std::vector<double>{}, std::vector<int>{}), 0.5);
}

TEST(ClassifierOutput, PredictionLine) {
  EXPECT_EQ(prediction_to_json_line("p1", 3, 0.25), R"({"candidate_index":3,"p_malignant":0.25,"patient_id":"p1"})");
}
