// SPDX-License-Identifier: Apache-2.0
#pragma once
// Independent brute-force reference implementations used by the tests.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "lungpipe/volume.hpp"

namespace oracle {

// Cells (16^3 boxes) touched by any voxel inside a nodule's closed bounding box,
// enumerated voxel by voxel. Voxel v covers [v - 0.5, v + 0.5).
inline std::vector<std::uint8_t> label_cells(const lungpipe::Index3& origin, int crop,
                                             const std::vector<lungpipe::NoduleAnnotation>& nodules) {
  const int g = crop / 16;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(g) * g * g, 0);
  for (const auto& n : nodules) {
    std::array<int, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      // voxels whose extent meets [c - r, c + r]
      lo[a] = static_cast<int>(std::floor(n.center[a] - n.radius + 0.5));
      hi[a] = static_cast<int>(std::floor(n.center[a] + n.radius + 0.5));
    }
    for (int z = lo[2]; z <= hi[2]; ++z)
      for (int y = lo[1]; y <= hi[1]; ++y)
        for (int x = lo[0]; x <= hi[0]; ++x) {
          const int lx = x - origin.x, ly = y - origin.y, lz = z - origin.z;
          if (lx < 0 || ly < 0 || lz < 0 || lx >= crop || ly >= crop || lz >= crop) continue;
          out[static_cast<std::size_t>(lx / 16 + g * (ly / 16 + g * (lz / 16)))] = 1;
        }
  }
  return out;
}

// Recursive flood fill with 6-neighbourhood; returns a component id per cell (-1 = cold).
inline std::vector<int> components(const std::vector<char>& hot, int g) {
  std::vector<int> id(hot.size(), -1);
  int next = 0;
  std::vector<std::array<int, 3>> stack;
  for (int z = 0; z < g; ++z)
    for (int y = 0; y < g; ++y)
      for (int x = 0; x < g; ++x) {
        const int i = x + g * (y + g * z);
        if (!hot[i] || id[i] >= 0) continue;
        stack.push_back({x, y, z});
        id[i] = next;
        while (!stack.empty()) {
          auto [cx, cy, cz] = stack.back();
          stack.pop_back();
          const int d[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
          for (const auto& s : d) {
            const int nx = cx + s[0], ny = cy + s[1], nz = cz + s[2];
            if (nx < 0 || ny < 0 || nz < 0 || nx >= g || ny >= g || nz >= g) continue;
            const int j = nx + g * (ny + g * nz);
            if (hot[j] && id[j] < 0) {
              id[j] = next;
              stack.push_back({nx, ny, nz});
            }
          }
        }
        ++next;
      }
  return id;
}

// Bin counts with the top bin closed, normalised by the number of values.
inline std::vector<double> histogram(const std::vector<double>& v, int bins) {
  std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
  if (v.empty()) return h;
  for (double x : v) {
    int b = 0;
    while (b + 1 < bins && x >= static_cast<double>(b + 1) / bins) ++b;
    h[static_cast<std::size_t>(b)] += 1.0;
  }
  for (double& x : h) x /= static_cast<double>(v.size());
  return h;
}

// Every origin of a crop tiling, enumerated independently of the library.
inline std::vector<lungpipe::Index3> tiling(int side, int crop, int stride) {
  int padded = side;
  while ((padded - crop) % stride != 0) ++padded;
  std::vector<lungpipe::Index3> out;
  for (int z = 0; z + crop <= padded; z += stride)
    for (int y = 0; y + crop <= padded; y += stride)
      for (int x = 0; x + crop <= padded; x += stride) out.push_back({x, y, z});
  return out;
}

}  // namespace oracle
