// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "lungpipe/error.hpp"
#include "lungpipe/extract.hpp"
#include "lungpipe/preprocess.hpp"
#include "oracles.hpp"

using namespace lungpipe;

namespace {

ClassProbMap random_map(int side, int classes, std::mt19937_64& rng) {
  ClassProbMap m{side, classes, std::vector<float>(static_cast<std::size_t>(side) * side * side * classes)};
  std::uniform_real_distribution<float> u(0.01f, 1.0f);
  for (std::size_t i = 0; i < m.cell_count(); ++i) {
    float s = 0.0f;
    for (int k = 0; k < classes; ++k) s += (m.probs[i * classes + k] = u(rng));
    for (int k = 0; k < classes; ++k) m.probs[i * classes + k] /= s;
  }
  return m;
}

DetectionVolume hot_volume(int g, const std::vector<char>& hot) {
  DetectionVolume dv{g, 2, std::vector<double>(static_cast<std::size_t>(g) * g * g * 2), std::vector<int>(g * g * g, 1)};
  for (std::size_t i = 0; i < hot.size(); ++i) {
    dv.cell_probs[i * 2 + 1] = hot[i] ? 0.9 : 0.1;
    dv.cell_probs[i * 2] = 1.0 - dv.cell_probs[i * 2 + 1];
  }
  return dv;
}

}  // namespace

TEST(Fuse, SingleCropIsIdentity) {
  std::mt19937_64 rng(1);
  const ClassProbMap m = random_map(2, 2, rng);
  const std::vector<PlacedMap> maps{{{0, 0, 0}, m}};
  const DetectionVolume dv = fuse_overlapping(maps, 32);
  for (std::size_t i = 0; i < m.probs.size(); ++i) EXPECT_NEAR(dv.cell_probs[i], m.probs[i], 1e-7);
}

TEST(Fuse, OverlapAverages) {
  ClassProbMap a{2, 2, std::vector<float>(16, 0.5f)}, b = a;
  // cell (1,0,0) of crop a and cell (0,0,0) of crop b are the same volume cell
  a.probs[a.cell_index(1, 0, 0) * 2 + 1] = 0.2f;
  a.probs[a.cell_index(1, 0, 0) * 2] = 0.8f;
  b.probs[b.cell_index(0, 0, 0) * 2 + 1] = 0.8f;
  b.probs[b.cell_index(0, 0, 0) * 2] = 0.2f;
  const std::vector<PlacedMap> maps{{{0, 0, 0}, a}, {{16, 0, 0}, b}};
  ClassProbMap fill{2, 2, std::vector<float>(16, 0.5f)};
  std::vector<PlacedMap> all = maps;
  all.push_back({{0, 16, 0}, fill});
  all.push_back({{16, 16, 0}, fill});
  for (int z : {16}) {
    for (int y : {0, 16})
      for (int x : {0, 16}) all.push_back({{x, y, z}, fill});
  }
  const DetectionVolume dv = fuse_overlapping(all, 48);
  EXPECT_NEAR(dv.nodule_probability(dv.cell_index(1, 0, 0)), 0.5, 1e-7);
  EXPECT_EQ(dv.coverage[dv.cell_index(1, 0, 0)], 2);
}

TEST(Fuse, DeskTilingMatchesAccumulationOracle) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<PlacedMap> maps;
    for (const Index3& o : oracle::tiling(64, 32, 16)) maps.push_back({o, random_map(2, 3, rng)});
    const DetectionVolume dv = fuse_overlapping(maps, 64);
    std::vector<double> sum(64 * 3, 0.0);
    std::vector<int> cnt(64, 0);
    for (const auto& m : maps)
      for (int z = 0; z < 2; ++z)
        for (int y = 0; y < 2; ++y)
          for (int x = 0; x < 2; ++x) {
            const int cell = (m.origin.x / 16 + x) + 4 * ((m.origin.y / 16 + y) + 4 * (m.origin.z / 16 + z));
            ++cnt[cell];
            for (int k = 0; k < 3; ++k) sum[cell * 3 + k] += m.map.probs[m.map.cell_index(x, y, z) * 3 + k];
          }
    for (int c = 0; c < 64; ++c) {
      ASSERT_EQ(dv.coverage[c], cnt[c]);
      double s = 0.0;
      for (int k = 0; k < 3; ++k) {
        EXPECT_NEAR(dv.cell_probs[c * 3 + k], sum[c * 3 + k] / cnt[c], 1e-9);
        s += dv.cell_probs[c * 3 + k];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    // permutation invariance
    std::shuffle(maps.begin(), maps.end(), rng);
    const DetectionVolume dv2 = fuse_overlapping(maps, 64);
    for (std::size_t i = 0; i < dv.cell_probs.size(); ++i) EXPECT_NEAR(dv.cell_probs[i], dv2.cell_probs[i], 1e-12);
  }
}

TEST(Fuse, UncoveredCellAndBadOriginRejected) {
  std::mt19937_64 rng(3);
  const std::vector<PlacedMap> one{{{0, 0, 0}, random_map(2, 2, rng)}};
  EXPECT_THROW(fuse_overlapping(one, 64), ValidationError);
  const std::vector<PlacedMap> off{{{8, 0, 0}, random_map(2, 2, rng)}};
  EXPECT_THROW(fuse_overlapping(off, 32), ValidationError);
}

TEST(Candidates, EmptyAndAdjacency) {
  EXPECT_TRUE(find_candidates(hot_volume(3, std::vector<char>(27, 0))).empty());
  std::vector<char> hot(27, 0);
  hot[0] = hot[1] = 1;  // face-adjacent along x
  auto c = find_candidates(hot_volume(3, hot));
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].cells.size(), 2u);
  EXPECT_EQ(c[0].bbox_lo, (Index3{0, 0, 0}));
  EXPECT_EQ(c[0].bbox_hi, (Index3{32, 16, 16}));
  EXPECT_DOUBLE_EQ(c[0].size(), 32.0 * 16 * 16);
  std::vector<char> diag(27, 0);
  diag[0] = diag[1 + 3] = 1;  // (0,0,0) and (1,1,0)
  EXPECT_EQ(find_candidates(hot_volume(3, diag)).size(), 2u);
}

TEST(Candidates, ThresholdIsStrict) {
  DetectionVolume dv = hot_volume(1, {0});
  dv.cell_probs = {0.5, 0.5};
  EXPECT_TRUE(find_candidates(dv, 0.5).empty());
}

TEST(Candidates, RandomMatchFloodFillOracle) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 150; ++trial) {
    const int g = 2 + static_cast<int>(rng() % 5);
    std::vector<char> hot(static_cast<std::size_t>(g) * g * g);
    const double density = 0.1 + 0.4 * (trial % 5) / 4.0;
    for (auto& h : hot) h = std::uniform_real_distribution<double>(0, 1)(rng) < density;
    DetectionVolume dv = hot_volume(g, hot);
    std::uniform_real_distribution<double> conf(0.51, 0.99);
    for (std::size_t i = 0; i < hot.size(); ++i)
      if (hot[i]) {
        dv.cell_probs[i * 2 + 1] = conf(rng);
        dv.cell_probs[i * 2] = 1 - dv.cell_probs[i * 2 + 1];
      }
    const auto cands = find_candidates(dv);
    const auto ids = oracle::components(hot, g);
    std::map<int, std::set<int>> expect;
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] >= 0) expect[ids[i]].insert(static_cast<int>(i));
    ASSERT_EQ(cands.size(), expect.size());
    std::set<std::set<int>> got_sets, expect_sets;
    for (const auto& [k, s] : expect) expect_sets.insert(s);
    std::set<int> seen;
    for (std::size_t k = 0; k < cands.size(); ++k) {
      std::set<int> s;
      double best = 0.0;
      for (const Index3& c : cands[k].cells) {
        const int i = c.x + g * (c.y + g * c.z);
        EXPECT_TRUE(seen.insert(i).second) << "cell in two candidates";
        s.insert(i);
        best = std::max(best, dv.cell_probs[i * 2 + 1]);
      }
      EXPECT_DOUBLE_EQ(cands[k].confidence, best);
      if (k > 0) EXPECT_GE(cands[k - 1].confidence, cands[k].confidence);
      got_sets.insert(s);
    }
    EXPECT_EQ(got_sets, expect_sets);
  }
}

TEST(Candidates, TernaryUsesOneMinusNoNodule) {
  DetectionVolume dv{1, 3, {0.3, 0.3, 0.4}, {1}};
  ASSERT_EQ(find_candidates(dv).size(), 1u);
  EXPECT_NEAR(find_candidates(dv)[0].confidence, 0.6, 1e-12);
}

TEST(Candidates, JsonRoundTrip) {
  std::vector<char> hot(27, 0);
  hot[4] = hot[13] = 1;
  const auto c = find_candidates(hot_volume(3, hot));
  ASSERT_EQ(c.size(), 1u);
  std::string pid;
  const NoduleCandidate back = candidate_from_json_line(candidate_to_json_line("p7", c[0]), &pid);
  EXPECT_EQ(pid, "p7");
  EXPECT_EQ(back.cells, c[0].cells);
  EXPECT_EQ(back.bbox_lo, c[0].bbox_lo);
  EXPECT_EQ(back.bbox_hi, c[0].bbox_hi);
  EXPECT_DOUBLE_EQ(back.confidence, c[0].confidence);
}

TEST(ExtractResize, SingleCellUpscalesByTwo) {
  Grid3<float> vol({48, 48, 48}, 0.0f);
  for (int z = 16; z < 32; ++z)
    for (int y = 16; y < 32; ++y)
      for (int x = 16; x < 32; ++x) vol(x, y, z) = 0.5f;
  NoduleCandidate c{{{1, 1, 1}}, {16, 16, 16}, {32, 32, 32}, 0.9};
  const NoduleVolume32 nv = extract_resize(vol, c);
  EXPECT_DOUBLE_EQ(nv.scale_factor, 2.0);
  EXPECT_EQ(nv.voxels.dims(), (Dims3{32, 32, 32}));
  // interior samples never leave the block
  EXPECT_FLOAT_EQ(nv.voxels(16, 16, 16), 0.5f);
  EXPECT_FLOAT_EQ(nv.voxels(2, 2, 2), 0.5f);
}

TEST(ExtractResize, ElongatedCandidateIsCenteredWithPadding) {
  Grid3<float> vol({64, 64, 64}, 0.7f);
  NoduleCandidate c{{{0, 0, 0}, {1, 0, 0}}, {0, 0, 0}, {32, 16, 16}, 0.9};
  const NoduleVolume32 nv = extract_resize(vol, c);
  EXPECT_DOUBLE_EQ(nv.scale_factor, 1.0);
  for (int x = 0; x < 32; ++x) {
    EXPECT_FLOAT_EQ(nv.voxels(x, 7, 7), 0.0f);
    EXPECT_FLOAT_EQ(nv.voxels(x, 8, 8), 0.7f);
    EXPECT_FLOAT_EQ(nv.voxels(x, 23, 23), 0.7f);
    EXPECT_FLOAT_EQ(nv.voxels(x, 24, 24), 0.0f);
  }
}

TEST(ExtractResize, BrightestVoxelMapsToScaledPosition) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Grid3<float> vol({32, 32, 32}, 0.0f);
    const Index3 b{static_cast<int>(rng() % 16) + 16, static_cast<int>(rng() % 16), static_cast<int>(rng() % 16)};
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (vol.contains(b.x + dx, b.y + dy, b.z + dz))
            vol(b.x + dx, b.y + dy, b.z + dz) = (dx || dy || dz) ? 0.4f : 1.0f;
    NoduleCandidate c{{{1, 0, 0}}, {16, 0, 0}, {32, 16, 16}, 0.9};
    const NoduleVolume32 nv = extract_resize(vol, c);
    const auto it = std::max_element(nv.voxels.values().begin(), nv.voxels.values().end());
    const auto idx = static_cast<int>(it - nv.voxels.values().begin());
    const int x = idx % 32, y = (idx / 32) % 32, z = idx / 1024;
    EXPECT_NEAR(x, (b.x - 16 + 0.5) * 2 - 0.5, 1.0);
    EXPECT_NEAR(y, (b.y + 0.5) * 2 - 0.5, 1.0);
    EXPECT_NEAR(z, (b.z + 0.5) * 2 - 0.5, 1.0);
    for (float v : nv.voxels.values()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(ExtractResize, EmptyBoxRejected) {
  Grid3<float> vol({32, 32, 32}, 0.0f);
  NoduleCandidate c{{{3, 0, 0}}, {48, 0, 0}, {64, 16, 16}, 0.9};
  EXPECT_THROW(extract_resize(vol, c), ValidationError);
}

TEST(Orientations, CountOneIsIdentityAndLimits) {
  const auto one = sample_orientations(1, 3);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].index(), 0);
  EXPECT_THROW(sample_orientations(49, 3), ValidationError);
  const auto all = sample_orientations(48, 9);
  std::set<int> idx;
  for (const auto& o : all) idx.insert(o.index());
  EXPECT_EQ(idx.size(), 48u);
  EXPECT_EQ(all[0].index(), 0);
  EXPECT_EQ(sample_orientations(10, 4).size(), 10u);
  EXPECT_EQ(sample_orientations(10, 4)[5], sample_orientations(10, 4)[5]);
}

TEST(Orientations, GroupPropertiesOnAsymmetricVolume) {
  Grid3<float> cube({5, 5, 5});
  for (std::size_t i = 0; i < cube.size(); ++i) cube.values()[i] = static_cast<float>(i);
  std::set<std::vector<float>> distinct;
  const auto sorted = [](const Grid3<float>& g) {
    std::vector<float> v(g.values().begin(), g.values().end());
    std::sort(v.begin(), v.end());
    return v;
  };
  for (const Orientation& o : all_orientations()) {
    const Grid3<float> t = apply_orientation(cube, o);
    EXPECT_EQ(apply_orientation(t, o.inverse()), cube) << o.index();
    EXPECT_EQ(sorted(t), sorted(cube));
    distinct.insert(t.storage());
  }
  EXPECT_EQ(distinct.size(), 48u);
}

TEST(Orientations, AugmentKeepsIdentityFirst) {
  NoduleVolume32 nv;
  nv.voxels = Grid3<float>({32, 32, 32}, 0.0f);
  nv.voxels(1, 2, 3) = 1.0f;
  const auto aug = augment_orientations(nv, 6, 11);
  ASSERT_EQ(aug.size(), 6u);
  EXPECT_EQ(aug[0].voxels, nv.voxels);
  for (std::size_t i = 1; i < aug.size(); ++i) EXPECT_NE(aug[i].voxels, nv.voxels);
}

TEST(Intersects, UsesAnnotationBoundingBox) {
  NoduleCandidate c{{{1, 0, 0}}, {16, 0, 0}, {32, 16, 16}, 0.9};
  EXPECT_TRUE(candidate_intersects(c, {{20.0, 5.0, 5.0}, 2.0, std::nullopt}));
  EXPECT_TRUE(candidate_intersects(c, {{14.0, 5.0, 5.0}, 2.0, std::nullopt}));
  EXPECT_FALSE(candidate_intersects(c, {{12.0, 5.0, 5.0}, 2.0, std::nullopt}));
}
