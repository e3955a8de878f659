// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "lungpipe/error.hpp"
#include "lungpipe/phantom.hpp"
#include "lungpipe/preprocess.hpp"
#include "lungpipe/volume_io.hpp"
#include "oracles.hpp"

using namespace lungpipe;

TEST(NormalizeHu, RangeEndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(normalize_hu(-1024.0), 0.0);
  EXPECT_DOUBLE_EQ(normalize_hu(3071.0), 1.0);
  EXPECT_NEAR(normalize_hu(1023.5), 0.5, 1e-12);
}

TEST(NormalizeHu, ClampsOutOfRange) {
  EXPECT_DOUBLE_EQ(normalize_hu(-2000.0), 0.0);
  EXPECT_DOUBLE_EQ(normalize_hu(5000.0), 1.0);
}

TEST(NormalizeHu, MonotoneAndRoundTrips) {
  double prev = -1.0;
  for (double hu = -1500; hu <= 3500; hu += 7.3) {
    const double v = normalize_hu(hu);
    EXPECT_GE(v, prev);
    prev = v;
  }
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double x = u(rng);
    EXPECT_NEAR(normalize_hu(denormalize_hu(x)), x, 1e-6);
  }
}

TEST(Canonicalize, CubicIsotropicIsIdentity) {
  HUVolume v{Grid3<std::int16_t>({20, 20, 20}), {1.0, 1.0, 1.0}, "p"};
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> d(-1024, 3071);
  for (auto& x : v.voxels.values()) x = static_cast<std::int16_t>(d(rng));
  const NormVolume n = canonicalize(v, 20);
  EXPECT_EQ(n.side, 20);
  EXPECT_DOUBLE_EQ(n.scale_factor, 1.0);
  EXPECT_EQ(n.pad_offset, (Vec3{0, 0, 0}));
  const Grid3<float> expect = normalize_hu(v.voxels);
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(n.voxels.values()[i], expect.values()[i], 1e-6);
}

TEST(Canonicalize, AnisotropicSpacingFillsCube) {
  HUVolume v{Grid3<std::int16_t>({100, 100, 50}, 0), {1.0, 1.0, 2.0}, "p"};
  const NormVolume n = canonicalize(v, 64);
  // physical extents are 100 mm on every axis
  EXPECT_NEAR(n.scale_factor, 0.64, 1e-12);
  EXPECT_EQ(n.voxels.dims(), (Dims3{64, 64, 64}));
  EXPECT_NEAR(n.pad_offset.x, 0.0, 1e-9);
  EXPECT_NEAR(n.pad_offset.y, 0.0, 1e-9);
  EXPECT_NEAR(n.pad_offset.z, 0.0, 1e-9);
  // HU 0 everywhere maps to 1024/4095 with no zero padding left
  for (float x : n.voxels.values()) EXPECT_NEAR(x, 1024.0 / 4095.0, 1e-5);
}

TEST(Canonicalize, PadsShortAxisWithAir) {
  HUVolume v{Grid3<std::int16_t>({32, 32, 16}, 0), {1.0, 1.0, 1.0}, "p"};
  const NormVolume n = canonicalize(v, 32);
  EXPECT_NEAR(n.pad_offset.z, 8.0, 1e-9);
  EXPECT_FLOAT_EQ(n.voxels(5, 5, 0), 0.0f);
  EXPECT_FLOAT_EQ(n.voxels(5, 5, 31), 0.0f);
  EXPECT_NEAR(n.voxels(5, 5, 16), 1024.0 / 4095.0, 1e-5);
}

TEST(Canonicalize, RejectsDegenerateSpacing) {
  HUVolume v{Grid3<std::int16_t>({4, 4, 4}), {1.0, 0.0, 1.0}, "p"};
  EXPECT_THROW(canonicalize(v, 16), ValidationError);
  v.spacing_mm = {1.0, -2.0, 1.0};
  EXPECT_THROW(canonicalize(v, 16), ValidationError);
  v.spacing_mm = {1.0, 1.0, 1.0};
  EXPECT_THROW(canonicalize(v, 8), ValidationError);
}

TEST(Canonicalize, AnnotationMappingRoundTrips) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 40.0), s(0.5, 3.0);
  for (int i = 0; i < 200; ++i) {
    const std::array<double, 3> sp{s(rng), s(rng), s(rng)};
    const Vec3 pad{u(rng), u(rng), u(rng)};
    const double scale = s(rng);
    const Vec3 p{u(rng), u(rng), u(rng)};
    const Vec3 back = from_canonical(to_canonical(p, sp, scale, pad), sp, scale, pad);
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(back[a], p[a], 0.5);
  }
}

TEST(TileCrops, PaperLatticeHas343Crops) {
  const CropLattice l = crop_lattice(512, 128, 64);
  EXPECT_EQ(l.positions, 7);
  EXPECT_EQ(l.origins.size(), 343u);
  EXPECT_EQ(l.origins, oracle::tiling(512, 128, 64));
}

TEST(TileCrops, DeskLatticeHas27Crops) {
  NormVolume v{Grid3<float>({64, 64, 64}, 0.25f), 64, 1.0, {}, "p"};
  const CropSet cs = tile_crops(v, 32, 16);
  EXPECT_EQ(cs.crops.size(), 27u);
  EXPECT_EQ(cs.origins, oracle::tiling(64, 32, 16));
}

TEST(TileCrops, SideEqualsCropGivesOneCrop) {
  NormVolume v{Grid3<float>({32, 32, 32}, 0.5f), 32, 1.0, {}, "p"};
  const CropSet cs = tile_crops(v, 32, 16);
  ASSERT_EQ(cs.crops.size(), 1u);
  EXPECT_EQ(cs.origins[0], (Index3{0, 0, 0}));
  EXPECT_EQ(cs.crops[0], v.voxels);
}

TEST(TileCrops, CropLargerThanSideRejected) {
  EXPECT_THROW(crop_lattice(32, 48, 16), ValidationError);
}

TEST(TileCrops, RandomLatticesMatchEnumerationAndCover) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 120; ++trial) {
    const int crop = 16 * std::uniform_int_distribution<int>(1, 3)(rng);
    const int stride = std::uniform_int_distribution<int>(1, crop)(rng);
    const int side = std::uniform_int_distribution<int>(crop, crop + 40)(rng);
    const CropLattice l = crop_lattice(side, crop, stride);
    ASSERT_EQ(l.origins, oracle::tiling(side, crop, stride)) << side << "/" << crop << "/" << stride;
    // coverage of the unpadded volume along one axis is enough, the lattice is separable
    for (int v = 0; v < side; ++v) {
      bool covered = false;
      for (int p = 0; p < l.positions; ++p) covered |= (p * stride <= v && v < p * stride + crop);
      ASSERT_TRUE(covered) << "voxel " << v;
    }
  }
}

TEST(TileCrops, CopyBackReconstructsVolume) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  NormVolume v{Grid3<float>({48, 48, 48}), 48, 1.0, {}, "p"};
  for (auto& x : v.voxels.values()) x = u(rng);
  const CropSet cs = tile_crops(v, 32, 16);
  Grid3<float> back({48, 48, 48}, -1.0f);
  for (std::size_t k = 0; k < cs.crops.size(); ++k)
    for (int z = 0; z < 32; ++z)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          const Index3 o = cs.origins[k];
          if (back.contains(o.x + x, o.y + y, o.z + z)) back(o.x + x, o.y + y, o.z + z) = cs.crops[k](x, y, z);
        }
  EXPECT_EQ(back, v.voxels);
}

TEST(Phantom, ZeroNodulesMeansNoCancer) {
  PhantomConfig c;
  c.nodule_count_range = {0, 0};
  c.seed = 4;
  const PhantomCase p = generate_phantom(c);
  EXPECT_TRUE(p.nodules.empty());
  EXPECT_FALSE(p.cancer);
}

TEST(Phantom, SameSeedIsBitIdentical) {
  PhantomConfig c;
  c.seed = 1234;
  const PhantomCase a = generate_phantom(c), b = generate_phantom(c);
  EXPECT_EQ(a.volume.voxels, b.volume.voxels);
  ASSERT_EQ(a.nodules.size(), b.nodules.size());
  c.seed = 1235;
  EXPECT_NE(generate_phantom(c).volume.voxels, a.volume.voxels);
}

TEST(Phantom, MalignancyIsSizeCoded) {
  PhantomConfig c;
  c.volume_side = 32;
  c.distractor_density = 0.0;
  c.seed = 42;
  const double rule = c.resolved_rule();
  std::int64_t malignant = 0, large = 0, total = 0;
  for (const PhantomCase& p : generate_dataset(c, 1000)) {
    bool any = false;
    for (const auto& n : p.nodules) {
      ++total;
      malignant += n.label == NoduleLabel::kMalignant;
      large += n.radius >= rule;
      any |= n.label == NoduleLabel::kMalignant;
    }
    EXPECT_EQ(p.cancer, any);
  }
  EXPECT_GT(total, 1000);
  EXPECT_EQ(malignant, large);
}

TEST(Phantom, DefaultPrevalenceIsAboutOneInEight) {
  PhantomConfig c;
  c.volume_side = 32;
  c.distractor_density = 0.0;
  c.seed = 7;
  std::int64_t malignant = 0, total = 0;
  for (const PhantomCase& p : generate_dataset(c, 600)) {
    for (const auto& n : p.nodules) {
      ++total;
      malignant += n.label == NoduleLabel::kMalignant;
    }
  }
  EXPECT_NEAR(static_cast<double>(malignant) / total, 0.125, 0.04);
}

TEST(Phantom, RejectsInvalidConfig) {
  PhantomConfig c;
  c.radius_range = {1.0, 40.0};
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.nodule_count_range = {3, 1};
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(VolumeIo, RoundTripsVolumesAndManifest) {
  const auto dir = std::filesystem::temp_directory_path() / "lungpipe_volume_io_test";
  std::filesystem::remove_all(dir);
  PhantomConfig c;
  c.seed = 11;
  PhantomCase p = generate_phantom(c);
  p.volume.patient_id = "x1";
  write_volume(dir / "x1.i16", p.volume);
  const HUVolume back = read_hu_volume(dir / "x1.i16");
  EXPECT_EQ(back.voxels, p.volume.voxels);
  EXPECT_EQ(back.patient_id, "x1");

  Grid3<float> f({3, 4, 5}, 0.25f);
  f(2, 3, 4) = 0.75f;
  write_volume(dir / "f.f32", f, {1.0, 2.0, 3.0}, "f");
  VolumeHeader h;
  EXPECT_EQ(read_f32_volume(dir / "f.f32", &h), f);
  EXPECT_EQ(h.dtype, "f32");
  EXPECT_EQ(h.spacing_mm[2], 3.0);
  EXPECT_THROW(read_hu_volume(dir / "f.f32"), ValidationError);

  std::vector<ManifestRecord> recs{{"x1", "x1.i16", true, p.nodules}, {"x2", "x2.i16", std::nullopt, {}}};
  write_manifest(dir / "m.jsonl", recs);
  const auto rb = read_manifest(dir / "m.jsonl");
  ASSERT_EQ(rb.size(), 2u);
  EXPECT_EQ(rb[0].cancer, std::optional<bool>(true));
  EXPECT_FALSE(rb[1].cancer.has_value());
  ASSERT_EQ(rb[0].nodules.size(), p.nodules.size());
  for (std::size_t i = 0; i < p.nodules.size(); ++i) {
    EXPECT_DOUBLE_EQ(rb[0].nodules[i].radius, p.nodules[i].radius);
    EXPECT_EQ(rb[0].nodules[i].label, p.nodules[i].label);
  }
  std::filesystem::remove_all(dir);
}
