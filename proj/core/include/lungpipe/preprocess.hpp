// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "lungpipe/volume.hpp"

namespace lungpipe {

inline constexpr double kHuMin = -1024.0;
inline constexpr double kHuMax = 3071.0;
/// Edge length of one detector grid cell in canonical voxels.
inline constexpr int kCellSize = 16;

/// Maps a Hounsfield value to [0, 1]: (hu + 1024) / 4095, clamped.
double normalize_hu(double hu);
Grid3<float> normalize_hu(const Grid3<std::int16_t>& voxels);

/// Inverse of the affine part of normalize_hu (no clamping).
double denormalize_hu(double value);

/// Rescales a scan into a side^3 cube, keeping the physical aspect ratio.
///
/// The largest physical extent is mapped onto `side` voxels; the other axes
/// are resampled with the same scale and centered with zero padding (0.0 is
/// air after normalization). Resampling is trilinear with border clamping.
NormVolume canonicalize(const HUVolume& volume, int side);

/// Source voxel index -> canonical voxel coordinate.
Vec3 to_canonical(const Vec3& source_index, const std::array<double, 3>& spacing_mm,
                  double scale_factor, const Vec3& pad_offset);
/// Canonical voxel coordinate -> source voxel index.
Vec3 from_canonical(const Vec3& canonical, const std::array<double, 3>& spacing_mm,
                    double scale_factor, const Vec3& pad_offset);

/// Trilinear sample of a grid at a continuous voxel coordinate; coordinates
/// outside the grid are clamped to the border.
float sample_trilinear(const Grid3<float>& grid, double x, double y, double z);

/// Crop lattice over a cube. Positions per axis = (side - crop) / stride + 1.
struct CropLattice {
  int side = 0;         // side after lattice padding
  int crop_size = 0;
  int stride = 0;
  int positions = 0;    // per axis
  std::vector<Index3> origins;  // lexicographic, z slowest
};

/// Computes the lattice; pads `side` up to the next lattice-compatible size
/// when (side - crop_size) is not a multiple of `stride`.
CropLattice crop_lattice(int side, int crop_size, int stride);

struct CropSet {
  int crop_size = 0;
  int stride = 0;
  std::vector<Index3> origins;
  std::vector<Grid3<float>> crops;
};

/// Cuts overlapping crop_size^3 crops on the stride lattice.
CropSet tile_crops(const NormVolume& volume, int crop_size, int stride);

/// Copies a cube of `size` voxels starting at `origin`; voxels outside the
/// source read as 0.
Grid3<float> extract_cube(const Grid3<float>& source, const Index3& origin, int size);

}  // namespace lungpipe
