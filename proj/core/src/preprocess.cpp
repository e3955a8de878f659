// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace lungpipe {

double normalize_hu(double hu) {
  return std::clamp((hu - kHuMin) / (kHuMax - kHuMin), 0.0, 1.0);
}

double denormalize_hu(double value) { return value * (kHuMax - kHuMin) + kHuMin; }

Grid3<float> normalize_hu(const Grid3<std::int16_t>& voxels) {
  Grid3<float> out(voxels.dims(), 0.0f);
  auto src = voxels.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = static_cast<float>(normalize_hu(static_cast<double>(src[i])));
  }
  return out;
}

float sample_trilinear(const Grid3<float>& grid, double x, double y, double z) {
  const Dims3& d = grid.dims();
  auto split = [](double c, int n, int& i0, int& i1, double& t) {
    c = std::clamp(c, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<int>(std::floor(c));
    i1 = std::min(i0 + 1, n - 1);
    t = c - i0;
  };
  int x0, x1, y0, y1, z0, z1;
  double tx, ty, tz;
  split(x, d.x, x0, x1, tx);
  split(y, d.y, y0, y1, ty);
  split(z, d.z, z0, z1, tz);

  const double c00 = grid(x0, y0, z0) * (1 - tx) + grid(x1, y0, z0) * tx;
  const double c10 = grid(x0, y1, z0) * (1 - tx) + grid(x1, y1, z0) * tx;
  const double c01 = grid(x0, y0, z1) * (1 - tx) + grid(x1, y0, z1) * tx;
  const double c11 = grid(x0, y1, z1) * (1 - tx) + grid(x1, y1, z1) * tx;
  const double c0 = c00 * (1 - ty) + c10 * ty;
  const double c1 = c01 * (1 - ty) + c11 * ty;
  return static_cast<float>(c0 * (1 - tz) + c1 * tz);
}

NormVolume canonicalize(const HUVolume& volume, int side) {
  if (side < kCellSize) {
    throw ValidationError("canonical side must be >= 16, got " + std::to_string(side));
  }
  const Dims3& dims = volume.voxels.dims();
  if (dims.x < 1 || dims.y < 1 || dims.z < 1) {
    throw ValidationError("volume " + volume.patient_id + " has an empty dimension");
  }
  for (int a = 0; a < 3; ++a) {
    if (!(volume.spacing_mm[a] > 0.0) || !std::isfinite(volume.spacing_mm[a])) {
      throw ValidationError("volume " + volume.patient_id + ": spacing along axis " +
                            std::to_string(a) + " must be > 0");
    }
  }

  std::array<double, 3> extent{};
  double largest = 0.0;
  for (int a = 0; a < 3; ++a) {
    extent[a] = dims[a] * volume.spacing_mm[a];
    largest = std::max(largest, extent[a]);
  }
  const double scale = side / largest;

  std::array<int, 3> occupied{};
  Vec3 pad{};
  for (int a = 0; a < 3; ++a) {
    occupied[a] = std::clamp(static_cast<int>(std::lround(extent[a] * scale)), 1, side);
    pad[a] = static_cast<double>((side - occupied[a]) / 2);
  }

  const Grid3<float> normalized = normalize_hu(volume.voxels);
  NormVolume out;
  out.voxels = Grid3<float>({side, side, side}, 0.0f);
  out.side = side;
  out.scale_factor = scale;
  out.pad_offset = pad;
  out.patient_id = volume.patient_id;

  // Source coordinate of each occupied output index along every axis.
  std::array<std::vector<double>, 3> src;
  for (int a = 0; a < 3; ++a) {
    src[a].resize(occupied[a]);
    for (int j = 0; j < occupied[a]; ++j) {
      src[a][j] = (j + 0.5) / (scale * volume.spacing_mm[a]) - 0.5;
    }
  }
  const int px = static_cast<int>(pad.x), py = static_cast<int>(pad.y), pz = static_cast<int>(pad.z);
  for (int k = 0; k < occupied[2]; ++k) {
    for (int j = 0; j < occupied[1]; ++j) {
      for (int i = 0; i < occupied[0]; ++i) {
        out.voxels(px + i, py + j, pz + k) = sample_trilinear(normalized, src[0][i], src[1][j], src[2][k]);
      }
    }
  }
  return out;
}

Vec3 to_canonical(const Vec3& source_index, const std::array<double, 3>& spacing_mm,
                  double scale_factor, const Vec3& pad_offset) {
  Vec3 out;
  for (int a = 0; a < 3; ++a) {
    out[a] = pad_offset[a] + (source_index[a] + 0.5) * spacing_mm[a] * scale_factor - 0.5;
  }
  return out;
}

Vec3 from_canonical(const Vec3& canonical, const std::array<double, 3>& spacing_mm,
                    double scale_factor, const Vec3& pad_offset) {
  Vec3 out;
  for (int a = 0; a < 3; ++a) {
    out[a] = (canonical[a] - pad_offset[a] + 0.5) / (spacing_mm[a] * scale_factor) - 0.5;
  }
  return out;
}

CropLattice crop_lattice(int side, int crop_size, int stride) {
  if (crop_size <= 0 || crop_size % kCellSize != 0) {
    throw ValidationError("crop size must be a positive multiple of 16, got " + std::to_string(crop_size));
  }
  if (stride < 1 || stride > crop_size) {
    throw ValidationError("stride must lie in [1, crop_size], got " + std::to_string(stride));
  }
  if (crop_size > side) {
    throw ValidationError("crop size " + std::to_string(crop_size) + " exceeds volume side " +
                          std::to_string(side));
  }
  CropLattice lattice;
  lattice.crop_size = crop_size;
  lattice.stride = stride;
  const int steps = (side - crop_size + stride - 1) / stride;
  lattice.side = crop_size + steps * stride;
  lattice.positions = steps + 1;
  lattice.origins.reserve(static_cast<std::size_t>(lattice.positions) * lattice.positions * lattice.positions);
  for (int z = 0; z < lattice.positions; ++z) {
    for (int y = 0; y < lattice.positions; ++y) {
      for (int x = 0; x < lattice.positions; ++x) {
        lattice.origins.push_back({x * stride, y * stride, z * stride});
      }
    }
  }
  return lattice;
}

Grid3<float> extract_cube(const Grid3<float>& source, const Index3& origin, int size) {
  Grid3<float> out({size, size, size}, 0.0f);
  const Dims3& d = source.dims();
  for (int z = 0; z < size; ++z) {
    const int sz = origin.z + z;
    if (sz < 0 || sz >= d.z) continue;
    for (int y = 0; y < size; ++y) {
      const int sy = origin.y + y;
      if (sy < 0 || sy >= d.y) continue;
      for (int x = 0; x < size; ++x) {
        const int sx = origin.x + x;
        if (sx < 0 || sx >= d.x) continue;
        out(x, y, z) = source(sx, sy, sz);
      }
    }
  }
  return out;
}

CropSet tile_crops(const NormVolume& volume, int crop_size, int stride) {
  const CropLattice lattice = crop_lattice(volume.side, crop_size, stride);
  CropSet set;
  set.crop_size = crop_size;
  set.stride = stride;
  set.origins = lattice.origins;
  set.crops.reserve(lattice.origins.size());
  for (const Index3& origin : lattice.origins) {
    set.crops.push_back(extract_cube(volume.voxels, origin, crop_size));
  }
  return set;
}

}  // namespace lungpipe
