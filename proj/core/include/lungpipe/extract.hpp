// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lungpipe/detector.hpp"
#include "lungpipe/volume.hpp"

namespace lungpipe {

inline constexpr int kNoduleSide = 32;

/// Per-cell class probabilities over a whole canonical volume.
struct DetectionVolume {
  /// cells per axis
  int side = 0;
  int classes = 0;
  /// cell_index * classes + k, cells x fastest
  std::vector<double> cell_probs;
  std::vector<int> coverage;

  std::size_t cell_count() const { return static_cast<std::size_t>(side) * side * side; }
  std::size_t cell_index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) + static_cast<std::size_t>(side) * (y + static_cast<std::size_t>(side) * z);
  }
  double at(std::size_t cell, int k) const { return cell_probs[cell * classes + k]; }
  double nodule_probability(std::size_t cell) const;
};

/// A detector map placed at a voxel origin on the 16-voxel lattice.
struct PlacedMap {
  Index3 origin;
  ClassProbMap map;
};

/// Averages overlapping crop maps cell by cell. `volume_side` is the
/// (lattice-padded) canonical side in voxels. Throws when a cell is covered
/// by no crop.
DetectionVolume fuse_overlapping(std::span<const PlacedMap> maps, int volume_side);

struct NoduleCandidate {
  /// lattice cells, sorted
  std::vector<Index3> cells;
  /// voxel box [lo, hi) spanned by the member cells
  Index3 bbox_lo;
  Index3 bbox_hi;
  /// max member-cell nodule probability
  double confidence = 0.0;

  /// bounding-box volume in voxels
  double size() const;
};

/// 6-connected components of cells with nodule probability > threshold,
/// sorted by descending confidence.
std::vector<NoduleCandidate> find_candidates(const DetectionVolume& dv, double threshold = 0.5);

/// True when the candidate box meets the nodule's bounding box
/// (voxel v covers [v - 0.5, v + 0.5)).
bool candidate_intersects(const NoduleCandidate& cand, const NoduleAnnotation& nodule);

struct NoduleVolume32 {
  Grid3<float> voxels;
  std::string patient_id;
  int candidate_index = 0;
  /// output voxels per source voxel
  double scale_factor = 1.0;
};

/// Resamples the candidate box (clamped to the volume) into 32^3: the largest
/// axis is scaled to 32, the others keep the aspect ratio and are centered
/// with zero padding. Trilinear.
NoduleVolume32 extract_resize(const Grid3<float>& volume, const NoduleCandidate& cand);

/// One element of the 48-element cube symmetry group: an axis permutation
/// followed by per-axis flips. Output voxel o reads source voxel s with
/// s[perm[a]] = flip_a ? n - 1 - o[a] : o[a].
struct Orientation {
  std::array<int, 3> perm{0, 1, 2};
  unsigned flips = 0;

  /// perm_index * 8 + flips; 0 is the identity
  int index() const;
  Orientation inverse() const;
  friend bool operator==(const Orientation&, const Orientation&) = default;
};

/// All 48 orientations ordered by index.
const std::vector<Orientation>& all_orientations();

/// Applies an orientation to a cube.
template <typename V>
Grid3<V> apply_orientation(const Grid3<V>& cube, const Orientation& o);

/// `count` distinct orientations: identity first, the rest drawn without
/// replacement under `seed`.
std::vector<Orientation> sample_orientations(int count, std::uint64_t seed);
std::vector<NoduleVolume32> augment_orientations(const NoduleVolume32& nv, int count, std::uint64_t seed);

/// Candidate dump line {patient_id, cells, bbox, confidence, size}.
std::string candidate_to_json_line(const std::string& patient_id, const NoduleCandidate& cand);
NoduleCandidate candidate_from_json_line(const std::string& line, std::string* patient_id = nullptr);

}  // namespace lungpipe
