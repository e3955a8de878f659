// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "lungpipe/preprocess.hpp"

namespace lungpipe {
namespace {

// LUNA16 nodule radii after preprocessing to 512^3: (bin start, count).
constexpr std::pair<double, int> kLunaRadiusHistogram[] = {
    {4.6314519246419268, 53},  {5.751041535408266, 151},  {6.8706311461746044, 197},
    {7.9902207569409436, 174}, {9.1098103677072828, 118}, {10.229399978473623, 83},
    {11.348989589239959, 63},  {12.4685792000063, 51},    {13.58816881077264, 35},
    {14.707758421538976, 37},  {15.827348032305316, 21},  {16.946937643071657, 20},
    {18.066527253837993, 26},  {19.186116864604333, 18},  {20.305706475370673, 22},
    {21.42529608613701, 11},   {22.54488569690335, 15},   {23.66447530766969, 13},
    {24.784064918436027, 13},  {25.903654529202367, 13},  {27.023244139968707, 5},
    {28.142833750735043, 13},  {29.262423361501384, 8},   {30.382012972267724, 5},
    {31.50160258303406, 9},    {32.621192193800404, 4},   {33.740781804566744, 2},
    {34.860371415333084, 3},   {35.979961026099417, 0},   {37.099550636865757, 0},
    {38.219140247632097, 3},
};
constexpr double kHistogramEnd = 38.219140247632097 + (38.219140247632097 - 37.099550636865757);
constexpr double kHistogramSide = 512.0;

struct Tube {
  Vec3 a, b;
  double radius;
};

double segment_distance(const Vec3& p, const Tube& t) {
  const double dx = t.b.x - t.a.x, dy = t.b.y - t.a.y, dz = t.b.z - t.a.z;
  const double len2 = dx * dx + dy * dy + dz * dz;
  double s = ((p.x - t.a.x) * dx + (p.y - t.a.y) * dy + (p.z - t.a.z) * dz) / len2;
  s = std::clamp(s, 0.0, 1.0);
  const double qx = t.a.x + s * dx - p.x, qy = t.a.y + s * dy - p.y, qz = t.a.z + s * dz - p.z;
  return std::sqrt(qx * qx + qy * qy + qz * qz);
}

// Fraction of voxel (x,y,z) covered by {p : dist(p) <= radius}, 4^3 supersampling
// near the boundary.
template <typename Dist>
double coverage(int x, int y, int z, double radius, Dist&& dist) {
  constexpr double kHalfDiagonal = 0.8660254037844386;
  const double d = dist(Vec3{double(x), double(y), double(z)});
  if (d <= radius - kHalfDiagonal) return 1.0;
  if (d >= radius + kHalfDiagonal) return 0.0;
  int inside = 0;
  for (int k = 0; k < 4; ++k) {
    for (int j = 0; j < 4; ++j) {
      for (int i = 0; i < 4; ++i) {
        const Vec3 p{x - 0.375 + 0.25 * i, y - 0.375 + 0.25 * j, z - 0.375 + 0.25 * k};
        if (dist(p) <= radius) ++inside;
      }
    }
  }
  return inside / 64.0;
}

}  // namespace

std::pair<double, double> luna_radius_support(int volume_side) {
  const double s = volume_side / kHistogramSide;
  return {kLunaRadiusHistogram[0].first * s, kHistogramEnd * s};
}

RadiusSampler::RadiusSampler(int volume_side, double lo, double hi) : lo_(lo), hi_(hi) {
  const double s = volume_side / kHistogramSide;
  constexpr std::size_t n = std::size(kLunaRadiusHistogram);
  for (std::size_t i = 0; i < n; ++i) {
    const double b0 = kLunaRadiusHistogram[i].first * s;
    const double b1 = (i + 1 < n ? kLunaRadiusHistogram[i + 1].first : kHistogramEnd) * s;
    const double c0 = std::max(b0, lo), c1 = std::min(b1, hi);
    if (c1 <= c0 || kLunaRadiusHistogram[i].second == 0) continue;
    const double w = kLunaRadiusHistogram[i].second * (c1 - c0) / (b1 - b0);
    bins_.push_back({c0, c1, w});
    total_ += w;
  }
  if (bins_.empty()) {
    throw ValidationError("radius range does not overlap the nodule radius distribution");
  }
}

double RadiusSampler::sample(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double pick = u(rng) * total_;
  for (const Bin& b : bins_) {
    if (pick < b.weight) return b.lo + (b.hi - b.lo) * (pick / b.weight);
    pick -= b.weight;
  }
  return bins_.back().hi;
}

double RadiusSampler::tail_probability(double r) const {
  double mass = 0.0;
  for (const Bin& b : bins_) {
    if (r <= b.lo) {
      mass += b.weight;
    } else if (r < b.hi) {
      mass += b.weight * (b.hi - r) / (b.hi - b.lo);
    }
  }
  return mass / total_;
}

double RadiusSampler::upper_quantile(double fraction) const {
  double lo = lo_, hi = hi_;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (tail_probability(mid) > fraction ? lo : hi) = mid;
  }
  return hi;
}

void PhantomConfig::validate() const {
  if (volume_side < 16) throw ValidationError("phantom volume_side must be >= 16");
  if (nodule_count_range.first < 0 || nodule_count_range.second < nodule_count_range.first) {
    throw ValidationError("invalid nodule_count_range");
  }
  if (!(radius_range.first > 0.0) || radius_range.second < radius_range.first ||
      !(radius_range.second < volume_side / 2.0)) {
    throw ValidationError("radius_range must lie within (0, volume_side/2)");
  }
  if (malignancy_rule < 0.0 && !(malignant_fraction > 0.0 && malignant_fraction < 1.0)) {
    throw ValidationError("malignant_fraction must lie in (0, 1)");
  }
  if (distractor_density < 0.0 || noise_sigma < 0.0) {
    throw ValidationError("distractor_density and noise_sigma must be >= 0");
  }
}

double PhantomConfig::resolved_rule() const {
  if (malignancy_rule >= 0.0) return malignancy_rule;
  return RadiusSampler(volume_side, radius_range.first, radius_range.second).upper_quantile(malignant_fraction);
}

PhantomCase generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const int side = cfg.volume_side;
  const RadiusSampler radii(side, cfg.radius_range.first, cfg.radius_range.second);
  const double rule = cfg.resolved_rule();

  PhantomCase out;
  std::uniform_int_distribution<int> count_dist(cfg.nodule_count_range.first, cfg.nodule_count_range.second);
  out.requested_nodules = count_dist(rng);

  constexpr int kPlacementRetries = 100;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int n = 0; n < out.requested_nodules; ++n) {
    const double r = radii.sample(rng);
    for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
      const double margin = r + 1.0;
      Vec3 c;
      for (int a = 0; a < 3; ++a) c[a] = margin + unit(rng) * (side - 1 - 2 * margin);
      bool clear = true;
      for (const NoduleAnnotation& other : out.nodules) {
        const double dx = c.x - other.center.x, dy = c.y - other.center.y, dz = c.z - other.center.z;
        if (std::sqrt(dx * dx + dy * dy + dz * dz) < r + other.radius + 2.0) {
          clear = false;
          break;
        }
      }
      if (clear) {
        out.nodules.push_back({c, r, r >= rule ? NoduleLabel::kMalignant : NoduleLabel::kBenign});
        break;
      }
    }
  }
  out.cancer = std::any_of(out.nodules.begin(), out.nodules.end(),
                           [](const NoduleAnnotation& a) { return a.label == NoduleLabel::kMalignant; });

  const double blocks = std::pow(side / 64.0, 3);
  std::poisson_distribution<int> tube_count(cfg.distractor_density * blocks);
  std::vector<Tube> tubes(static_cast<std::size_t>(cfg.distractor_density > 0 ? tube_count(rng) : 0));
  for (Tube& t : tubes) {
    do {
      for (int a = 0; a < 3; ++a) {
        t.a[a] = unit(rng) * (side - 1);
        t.b[a] = unit(rng) * (side - 1);
      }
    } while (segment_distance(t.a, Tube{t.b, t.b, 0}) < side / 2.0);
    t.radius = 0.6 + 0.6 * unit(rng);
  }

  Grid3<float> tissue({side, side, side}, 0.0f);
  for (const NoduleAnnotation& nod : out.nodules) {
    auto dist = [&](const Vec3& p) {
      const double dx = p.x - nod.center.x, dy = p.y - nod.center.y, dz = p.z - nod.center.z;
      return std::sqrt(dx * dx + dy * dy + dz * dz);
    };
    const int x0 = std::max(0, int(std::floor(nod.center.x - nod.radius - 1)));
    const int x1 = std::min(side - 1, int(std::ceil(nod.center.x + nod.radius + 1)));
    const int y0 = std::max(0, int(std::floor(nod.center.y - nod.radius - 1)));
    const int y1 = std::min(side - 1, int(std::ceil(nod.center.y + nod.radius + 1)));
    const int z0 = std::max(0, int(std::floor(nod.center.z - nod.radius - 1)));
    const int z1 = std::min(side - 1, int(std::ceil(nod.center.z + nod.radius + 1)));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
          tissue(x, y, z) = std::max(tissue(x, y, z), float(coverage(x, y, z, nod.radius, dist)));
  }
  for (const Tube& t : tubes) {
    auto dist = [&](const Vec3& p) { return segment_distance(p, t); };
    const int x0 = std::max(0, int(std::floor(std::min(t.a.x, t.b.x) - t.radius - 1)));
    const int x1 = std::min(side - 1, int(std::ceil(std::max(t.a.x, t.b.x) + t.radius + 1)));
    const int y0 = std::max(0, int(std::floor(std::min(t.a.y, t.b.y) - t.radius - 1)));
    const int y1 = std::min(side - 1, int(std::ceil(std::max(t.a.y, t.b.y) + t.radius + 1)));
    const int z0 = std::max(0, int(std::floor(std::min(t.a.z, t.b.z) - t.radius - 1)));
    const int z1 = std::min(side - 1, int(std::ceil(std::max(t.a.z, t.b.z) + t.radius + 1)));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
          tissue(x, y, z) = std::max(tissue(x, y, z), float(coverage(x, y, z, t.radius, dist)));
  }

  out.volume.voxels = Grid3<std::int16_t>({side, side, side}, 0);
  out.volume.spacing_mm = {1.0, 1.0, 1.0};
  std::normal_distribution<double> noise(0.0, 1.0);
  auto dst = out.volume.voxels.values();
  auto src = tissue.values();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const double hu = cfg.air_hu + src[i] * (cfg.tissue_hu - cfg.air_hu) + cfg.noise_sigma * noise(rng);
    dst[i] = static_cast<std::int16_t>(std::clamp(std::lround(hu), long(kHuMin), long(kHuMax)));
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + (index + 1) * 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<PhantomCase> generate_dataset(const PhantomConfig& cfg, int patients) {
  std::vector<PhantomCase> out;
  out.reserve(static_cast<std::size_t>(std::max(patients, 0)));
  for (int i = 0; i < patients; ++i) {
    PhantomConfig c = cfg;
    c.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
    PhantomCase p = generate_phantom(c);
    char id[32];
    std::snprintf(id, sizeof(id), "phantom_%04d", i);
    p.volume.patient_id = id;
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace lungpipe
