// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/grid_labels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lungpipe/preprocess.hpp"

namespace lungpipe {

std::optional<CellBox> nodule_cells(const NoduleAnnotation& nodule, const Index3& origin, int grid_side) {
  CellBox box;
  for (int a = 0; a < 3; ++a) {
    // Shift so voxel v covers [v, v + 1); cell i then covers [16 i, 16 i + 16).
    const double lo = nodule.center[a] - nodule.radius + 0.5 - origin[a];
    const double hi = nodule.center[a] + nodule.radius + 0.5 - origin[a];
    const int first = std::max(0, static_cast<int>(std::floor(lo / kCellSize)));
    // Closed box [lo, hi] meets [16 i, 16 i + 16) iff 16 i <= hi and lo < 16 i + 16.
    const int last = std::min(grid_side - 1, static_cast<int>(std::floor(hi / kCellSize)));
    if (hi < 0.0 || first > last) return std::nullopt;
    box.lo[a] = first;
    box.hi[a] = last;
  }
  return box;
}

CellLabelGrid label_cells(const Index3& crop_origin, int crop_size, std::span<const NoduleAnnotation> annotations) {
  if (crop_size <= 0 || crop_size % kCellSize != 0) {
    throw ValidationError("label_cells: crop size " + std::to_string(crop_size) + " is not a multiple of 16");
  }
  const int n = crop_size / kCellSize;
  CellLabelGrid grid{LabelAlphabet::kBinary, Grid3<std::uint8_t>({n, n, n}, binary_class::kNoNodule)};
  for (const NoduleAnnotation& nodule : annotations) {
    const auto box = nodule_cells(nodule, crop_origin, n);
    if (!box) continue;
    for (int z = box->lo.z; z <= box->hi.z; ++z)
      for (int y = box->lo.y; y <= box->hi.y; ++y)
        for (int x = box->lo.x; x <= box->hi.x; ++x) grid.cells(x, y, z) = binary_class::kHasNodule;
  }
  return grid;
}

void LabellingStrategy::validate() const {
  if (kind == Kind::kLargestNodule) {
    if (!w || !(*w > 0.0 && *w <= 1.0)) {
      throw ValidationError("largest-nodule strategy needs w in (0, 1]");
    }
  } else if (w) {
    throw ValidationError("patient-label strategy takes no w");
  }
}

std::vector<NoduleLabel> assign_nodule_labels(const LabellingStrategy& strategy, bool patient_cancer,
                                              std::span<const double> sizes) {
  strategy.validate();
  for (double s : sizes) {
    if (!(s > 0.0)) throw ValidationError("nodule sizes must be > 0");
  }
  std::vector<NoduleLabel> labels(sizes.size(), NoduleLabel::kBenign);
  if (!patient_cancer || sizes.empty()) return labels;
  if (strategy.kind == LabellingStrategy::Kind::kPatientLabel) {
    std::fill(labels.begin(), labels.end(), NoduleLabel::kMalignant);
    return labels;
  }
  const double threshold = *strategy.w * *std::max_element(sizes.begin(), sizes.end());
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] >= threshold) labels[i] = NoduleLabel::kMalignant;
  }
  return labels;
}

CellLabelGrid malignancy_cell_labels(const CellLabelGrid& binary_grid, bool patient_cancer) {
  if (binary_grid.alphabet != LabelAlphabet::kBinary) {
    throw ValidationError("malignancy_cell_labels expects a binary grid");
  }
  CellLabelGrid out{LabelAlphabet::kTernary, Grid3<std::uint8_t>(binary_grid.cells.dims(), ternary_class::kNoNodule)};
  const std::uint8_t hit = patient_cancer ? ternary_class::kMalignant : ternary_class::kBenign;
  auto src = binary_grid.cells.values();
  auto dst = out.cells.values();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] == binary_class::kHasNodule) dst[i] = hit;
  }
  return out;
}

}  // namespace lungpipe
