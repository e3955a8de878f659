// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/extract.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <json.hpp>
#include <numeric>
#include <random>

#include "lungpipe/preprocess.hpp"

namespace lungpipe {

double DetectionVolume::nodule_probability(std::size_t cell) const {
  if (classes == 2) return cell_probs[cell * 2 + binary_class::kHasNodule];
  return 1.0 - cell_probs[cell * 3 + ternary_class::kNoNodule];
}

DetectionVolume fuse_overlapping(std::span<const PlacedMap> maps, int volume_side) {
  if (volume_side < kCellSize || volume_side % kCellSize != 0) {
    throw ValidationError("fuse_overlapping: volume side " + std::to_string(volume_side) + " is not a multiple of 16");
  }
  if (maps.empty()) throw ValidationError("fuse_overlapping: no maps");
  DetectionVolume dv;
  dv.side = volume_side / kCellSize;
  dv.classes = maps.front().map.classes;
  dv.cell_probs.assign(dv.cell_count() * dv.classes, 0.0);
  dv.coverage.assign(dv.cell_count(), 0);
  for (const PlacedMap& pm : maps) {
    if (pm.map.classes != dv.classes) throw ValidationError("fuse_overlapping: maps differ in class count");
    Index3 base;
    for (int a = 0; a < 3; ++a) {
      if (pm.origin[a] % kCellSize != 0) throw ValidationError("fuse_overlapping: origin off the 16-voxel lattice");
      base[a] = pm.origin[a] / kCellSize;
      if (base[a] < 0 || base[a] + pm.map.side > dv.side) {
        throw ValidationError("fuse_overlapping: crop map extends outside the volume");
      }
    }
    const int g = pm.map.side;
    for (int z = 0; z < g; ++z)
      for (int y = 0; y < g; ++y)
        for (int x = 0; x < g; ++x) {
          const std::size_t src = pm.map.cell_index(x, y, z);
          const std::size_t dst = dv.cell_index(base.x + x, base.y + y, base.z + z);
          for (int k = 0; k < dv.classes; ++k) dv.cell_probs[dst * dv.classes + k] += pm.map.at(src, k);
          ++dv.coverage[dst];
        }
  }
  for (std::size_t i = 0; i < dv.cell_count(); ++i) {
    if (dv.coverage[i] == 0) throw ValidationError("fuse_overlapping: cell " + std::to_string(i) + " is not covered");
    for (int k = 0; k < dv.classes; ++k) dv.cell_probs[i * dv.classes + k] /= dv.coverage[i];
  }
  return dv;
}

double NoduleCandidate::size() const {
  double v = 1.0;
  for (int a = 0; a < 3; ++a) v *= bbox_hi[a] - bbox_lo[a];
  return v;
}

std::vector<NoduleCandidate> find_candidates(const DetectionVolume& dv, double threshold) {
  const int g = dv.side;
  std::vector<char> hot(dv.cell_count(), 0), seen(dv.cell_count(), 0);
  for (std::size_t i = 0; i < hot.size(); ++i) hot[i] = dv.nodule_probability(i) > threshold;

  std::vector<NoduleCandidate> out;
  for (int z = 0; z < g; ++z)
    for (int y = 0; y < g; ++y)
      for (int x = 0; x < g; ++x) {
        const std::size_t start = dv.cell_index(x, y, z);
        if (!hot[start] || seen[start]) continue;
        NoduleCandidate cand;
        std::deque<Index3> queue{{x, y, z}};
        seen[start] = 1;
        while (!queue.empty()) {
          const Index3 c = queue.front();
          queue.pop_front();
          cand.cells.push_back(c);
          cand.confidence = std::max(cand.confidence, dv.nodule_probability(dv.cell_index(c.x, c.y, c.z)));
          for (int a = 0; a < 3; ++a) {
            for (int step : {-1, 1}) {
              Index3 n = c;
              n[a] += step;
              if (n[a] < 0 || n[a] >= g) continue;
              const std::size_t ni = dv.cell_index(n.x, n.y, n.z);
              if (hot[ni] && !seen[ni]) {
                seen[ni] = 1;
                queue.push_back(n);
              }
            }
          }
        }
        std::sort(cand.cells.begin(), cand.cells.end());
        for (int a = 0; a < 3; ++a) {
          int lo = g, hi = -1;
          for (const Index3& c : cand.cells) {
            lo = std::min(lo, c[a]);
            hi = std::max(hi, c[a]);
          }
          cand.bbox_lo[a] = lo * kCellSize;
          cand.bbox_hi[a] = (hi + 1) * kCellSize;
        }
        out.push_back(std::move(cand));
      }
  std::stable_sort(out.begin(), out.end(),
                   [](const NoduleCandidate& a, const NoduleCandidate& b) { return a.confidence > b.confidence; });
  return out;
}

bool candidate_intersects(const NoduleCandidate& cand, const NoduleAnnotation& nodule) {
  for (int a = 0; a < 3; ++a) {
    // nodule box in the shifted frame where voxel v covers [v, v + 1)
    const double lo = nodule.center[a] - nodule.radius + 0.5;
    const double hi = nodule.center[a] + nodule.radius + 0.5;
    if (hi < cand.bbox_lo[a] || lo >= cand.bbox_hi[a]) return false;
  }
  return true;
}

NoduleVolume32 extract_resize(const Grid3<float>& volume, const NoduleCandidate& cand) {
  std::array<int, 3> lo{}, ext{};
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::clamp(cand.bbox_lo[a], 0, volume.dims()[a]);
    const int hi = std::clamp(cand.bbox_hi[a], 0, volume.dims()[a]);
    ext[a] = hi - lo[a];
    if (ext[a] <= 0) throw ValidationError("extract_resize: empty bounding box after clamping");
  }
  const double scale = static_cast<double>(kNoduleSide) / *std::max_element(ext.begin(), ext.end());
  std::array<int, 3> occupied{}, pad{};
  for (int a = 0; a < 3; ++a) {
    occupied[a] = std::clamp(static_cast<int>(std::lround(ext[a] * scale)), 1, kNoduleSide);
    pad[a] = (kNoduleSide - occupied[a]) / 2;
  }
  NoduleVolume32 nv;
  nv.voxels = Grid3<float>({kNoduleSide, kNoduleSide, kNoduleSide}, 0.0f);
  nv.scale_factor = scale;
  auto src = [&](int a, int j) { return lo[a] + (j - pad[a] + 0.5) / scale - 0.5; };
  for (int z = pad[2]; z < pad[2] + occupied[2]; ++z)
    for (int y = pad[1]; y < pad[1] + occupied[1]; ++y)
      for (int x = pad[0]; x < pad[0] + occupied[0]; ++x) {
        const float v = sample_trilinear(volume, src(0, x), src(1, y), src(2, z));
        nv.voxels(x, y, z) = std::clamp(v, 0.0f, 1.0f);
      }
  return nv;
}

namespace {

constexpr std::array<std::array<int, 3>, 6> kPerms{{{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};

}  // namespace

int Orientation::index() const {
  for (int p = 0; p < 6; ++p) {
    if (kPerms[p] == perm) return p * 8 + static_cast<int>(flips & 7u);
  }
  throw ValidationError("orientation: invalid axis permutation");
}

Orientation Orientation::inverse() const {
  Orientation inv;
  inv.flips = 0;
  for (int a = 0; a < 3; ++a) {
    inv.perm[perm[a]] = a;
    if (flips & (1u << a)) inv.flips |= 1u << perm[a];
  }
  return inv;
}

const std::vector<Orientation>& all_orientations() {
  static const std::vector<Orientation> all = [] {
    std::vector<Orientation> v;
    for (const auto& p : kPerms)
      for (unsigned f = 0; f < 8; ++f) v.push_back({p, f});
    return v;
  }();
  return all;
}

template <typename V>
Grid3<V> apply_orientation(const Grid3<V>& cube, const Orientation& o) {
  const Dims3 d = cube.dims();
  if (d.x != d.y || d.y != d.z) throw ValidationError("apply_orientation: volume is not a cube");
  const int n = d.x;
  Grid3<V> out(d);
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const std::array<int, 3> oc{x, y, z};
        Index3 s;
        for (int a = 0; a < 3; ++a) s[o.perm[a]] = (o.flips & (1u << a)) ? n - 1 - oc[a] : oc[a];
        out(x, y, z) = cube(s);
      }
  return out;
}

template Grid3<float> apply_orientation<float>(const Grid3<float>&, const Orientation&);
template Grid3<std::int16_t> apply_orientation<std::int16_t>(const Grid3<std::int16_t>&, const Orientation&);

std::vector<Orientation> sample_orientations(int count, std::uint64_t seed) {
  if (count < 0 || count > 48) throw ValidationError("orientation count must lie in [0, 48], got " + std::to_string(count));
  if (count == 0) return {};
  std::vector<int> rest(47);
  std::iota(rest.begin(), rest.end(), 1);
  std::mt19937_64 rng(seed);
  std::shuffle(rest.begin(), rest.end(), rng);
  std::vector<Orientation> out{all_orientations()[0]};
  for (int i = 0; i + 1 < count; ++i) out.push_back(all_orientations()[rest[i]]);
  return out;
}

std::vector<NoduleVolume32> augment_orientations(const NoduleVolume32& nv, int count, std::uint64_t seed) {
  std::vector<NoduleVolume32> out;
  for (const Orientation& o : sample_orientations(count, seed)) {
    NoduleVolume32 v = nv;
    if (o.index() != 0) v.voxels = apply_orientation(nv.voxels, o);
    out.push_back(std::move(v));
  }
  return out;
}

std::string candidate_to_json_line(const std::string& patient_id, const NoduleCandidate& cand) {
  nlohmann::json cells = nlohmann::json::array();
  for (const Index3& c : cand.cells) cells.push_back({c.x, c.y, c.z});
  nlohmann::json j = {{"patient_id", patient_id},
                      {"cells", cells},
                      {"bbox", {{cand.bbox_lo.x, cand.bbox_lo.y, cand.bbox_lo.z},
                                {cand.bbox_hi.x, cand.bbox_hi.y, cand.bbox_hi.z}}},
                      {"confidence", cand.confidence},
                      {"size", cand.size()}};
  return j.dump();
}

NoduleCandidate candidate_from_json_line(const std::string& line, std::string* patient_id) {
  try {
    const auto j = nlohmann::json::parse(line);
    NoduleCandidate c;
    for (const auto& cell : j.at("cells")) c.cells.push_back({cell.at(0).get<int>(), cell.at(1).get<int>(), cell.at(2).get<int>()});
    const auto& b = j.at("bbox");
    for (int a = 0; a < 3; ++a) {
      c.bbox_lo[a] = b.at(0).at(a).get<int>();
      c.bbox_hi[a] = b.at(1).at(a).get<int>();
    }
    c.confidence = j.at("confidence").get<double>();
    if (patient_id != nullptr) *patient_id = j.at("patient_id").get<std::string>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad candidate record: ") + e.what());
  }
}

}  // namespace lungpipe
