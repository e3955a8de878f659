// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>

#include "lungpipe/classifier.hpp"
#include "lungpipe/detector.hpp"
#include "lungpipe/extract.hpp"
#include "lungpipe/grid_labels.hpp"
#include "lungpipe/patient.hpp"
#include "lungpipe/preprocess.hpp"

using namespace lungpipe;

namespace {

nn::Tensor<float> random_input(nn::Shape5 s, std::uint64_t seed) {
  nn::Tensor<float> t(s);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

void BM_Conv3dForward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  nn::Conv3d<float> conv(c, c, 3, 1, false);
  std::mt19937_64 rng(1);
  conv.initialize(rng);
  const auto x = random_input({2, c, 16, 16, 16}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(conv.forward(x, nn::Mode::kEval));
  state.SetItemsProcessed(state.iterations() * 2 * c * c * 27 * 4096);
}
BENCHMARK(BM_Conv3dForward)->Arg(8)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Conv3dBackward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  nn::Conv3d<float> conv(c, c, 3, 1, false);
  std::mt19937_64 rng(1);
  conv.initialize(rng);
  const auto x = random_input({2, c, 16, 16, 16}, 2);
  const auto g = random_input({2, c, 16, 16, 16}, 3);
  for (auto _ : state) {
    conv.forward(x, nn::Mode::kTrain);
    benchmark::DoNotOptimize(conv.backward(g));
  }
}
BENCHMARK(BM_Conv3dBackward)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_DeskDetectorForward(benchmark::State& state) {
  auto net = build_detector(DetectorConfig{});
  net.initialize(4);
  const auto x = random_input({static_cast<int>(state.range(0)), 1, 32, 32, 32}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, nn::Mode::kEval));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DeskDetectorForward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_ClassifierForward(benchmark::State& state) {
  auto net = build_classifier(ClassifierConfig{});
  net.initialize(6);
  const auto x = random_input({16, 1, 32, 32, 32}, 7);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, nn::Mode::kEval));
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_ClassifierForward)->Unit(benchmark::kMillisecond);

void BM_LabelCells(benchmark::State& state) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> pos(0.0, 512.0), rad(8.0, 38.0);
  std::vector<NoduleAnnotation> n;
  for (int i = 0; i < state.range(0); ++i) n.push_back({{pos(rng), pos(rng), pos(rng)}, rad(rng), std::nullopt});
  const auto origins = crop_lattice(512, 128, 64).origins;
  for (auto _ : state)
    for (const auto& o : origins) benchmark::DoNotOptimize(label_cells(o, 128, n));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(origins.size()));
}
BENCHMARK(BM_LabelCells)->Arg(1)->Arg(16);

void BM_FuseAndStitch(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<PlacedMap> maps;
  const int crop = side >= 256 ? 128 : 32, stride = crop / 2;
  for (const auto& o : crop_lattice(side, crop, stride).origins) {
    const int g = crop / kCellSize;
    ClassProbMap m{g, 2, std::vector<float>(static_cast<std::size_t>(g) * g * g * 2)};
    for (std::size_t i = 0; i < m.cell_count(); ++i) {
      const float p = u(rng) < 0.05f ? 0.9f : 0.1f;
      m.probs[i * 2] = 1.0f - p;
      m.probs[i * 2 + 1] = p;
    }
    maps.push_back({o, std::move(m)});
  }
  for (auto _ : state) {
    const auto dv = fuse_overlapping(maps, side);
    benchmark::DoNotOptimize(find_candidates(dv));
  }
}
BENCHMARK(BM_FuseAndStitch)->Arg(64)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_ExtractResize(benchmark::State& state) {
  Grid3<float> vol({128, 128, 128}, 0.3f);
  NoduleCandidate c{{{2, 2, 2}, {3, 2, 2}, {3, 3, 2}}, {32, 32, 32}, {64, 64, 48}, 0.9};
  for (auto _ : state) benchmark::DoNotOptimize(extract_resize(vol, c));
}
BENCHMARK(BM_ExtractResize)->Unit(benchmark::kMicrosecond);

void BM_PoolClassifier(benchmark::State& state) {
  std::vector<double> p(static_cast<std::size_t>(state.range(0)));
  std::mt19937_64 rng(10);
  for (auto& v : p) v = std::uniform_real_distribution<double>(0, 1)(rng);
  for (auto _ : state) benchmark::DoNotOptimize(pool_classifier(p));
}
BENCHMARK(BM_PoolClassifier)->Arg(8)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
