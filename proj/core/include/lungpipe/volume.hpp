// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lungpipe/error.hpp"

namespace lungpipe {

/// Grid extents in voxels. x is the fastest-varying axis in memory.
struct Dims3 {
  int x = 0;
  int y = 0;
  int z = 0;

  int operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  std::size_t count() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

/// Continuous voxel-space coordinate; voxel centers sit on integers.
struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }
  double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

/// Integer lattice coordinate (voxel index, crop origin, or cell index).
struct Index3 {
  int x = 0;
  int y = 0;
  int z = 0;

  int& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }
  int operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  friend auto operator<=>(const Index3& a, const Index3& b) {
    // lexicographic with z slowest, matching memory order
    if (auto c = a.z <=> b.z; c != 0) return c;
    if (auto c = a.y <=> b.y; c != 0) return c;
    return a.x <=> b.x;
  }
  friend bool operator==(const Index3&, const Index3&) = default;
};

/// Dense 3D array, x fastest.
template <typename T>
class Grid3 {
 public:
  Grid3() = default;
  Grid3(Dims3 dims, T fill) : dims_(dims) {
    if (dims.x < 1 || dims.y < 1 || dims.z < 1) {
      throw ValidationError("grid dimensions must be >= 1");
    }
    values_.assign(dims.count(), fill);
  }
  explicit Grid3(Dims3 dims) : Grid3(dims, T{}) {}

  const Dims3& dims() const { return dims_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims_.x) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims_.y) * static_cast<std::size_t>(z));
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims_.x && y < dims_.y && z < dims_.z;
  }

  T& operator()(int x, int y, int z) { return values_[index(x, y, z)]; }
  const T& operator()(int x, int y, int z) const { return values_[index(x, y, z)]; }
  T& operator()(const Index3& i) { return (*this)(i.x, i.y, i.z); }
  const T& operator()(const Index3& i) const { return (*this)(i.x, i.y, i.z); }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  std::vector<T>& storage() { return values_; }
  const std::vector<T>& storage() const { return values_; }

  friend bool operator==(const Grid3&, const Grid3&) = default;

 private:
  Dims3 dims_{};
  std::vector<T> values_;
};

/// Raw scan in Hounsfield units with physical voxel spacing.
struct HUVolume {
  Grid3<std::int16_t> voxels;
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  std::string patient_id;
};

/// Canonical cubic volume with values in [0, 1].
struct NormVolume {
  Grid3<float> voxels;
  int side = 0;
  /// canonical voxels per millimetre, identical for all axes
  double scale_factor = 1.0;
  /// offset of the resampled scan inside the padded cube
  Vec3 pad_offset{};
  std::string patient_id;
};

/// Nodule annotation in canonical voxel coordinates.
enum class NoduleLabel { kBenign, kMalignant };

struct NoduleAnnotation {
  Vec3 center{};
  double radius = 0.0;
  std::optional<NoduleLabel> label;
};

const char* to_string(NoduleLabel label);

}  // namespace lungpipe
