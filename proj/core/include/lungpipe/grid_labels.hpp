// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "lungpipe/volume.hpp"

namespace lungpipe {

/// Channel indices of the two-class nodule detector.
namespace binary_class {
inline constexpr std::uint8_t kNoNodule = 0;
inline constexpr std::uint8_t kHasNodule = 1;
}  // namespace binary_class

/// Channel indices of the three-class malignancy detector.
namespace ternary_class {
inline constexpr std::uint8_t kMalignant = 0;
inline constexpr std::uint8_t kBenign = 1;
inline constexpr std::uint8_t kNoNodule = 2;
}  // namespace ternary_class

enum class LabelAlphabet { kBinary, kTernary };

/// Per-cell ground truth over a (crop_size / 16)^3 lattice.
struct CellLabelGrid {
  LabelAlphabet alphabet = LabelAlphabet::kBinary;
  Grid3<std::uint8_t> cells;

  int class_count() const { return alphabet == LabelAlphabet::kBinary ? 2 : 3; }
  int side() const { return cells.dims().x; }
};

/// Inclusive range of lattice cells touched by a nodule's bounding box.
struct CellBox {
  Index3 lo;
  Index3 hi;
};

/// Cells (relative to `origin`, 16^3 each, `grid_side` per axis) whose
/// half-open voxel boxes intersect the nodule's bounding box
/// center +/- radius. Voxel v covers [v - 0.5, v + 0.5).
std::optional<CellBox> nodule_cells(const NoduleAnnotation& nodule, const Index3& origin, int grid_side);

/// Binary labels: has-nodule iff the cell intersects any nodule bounding box.
CellLabelGrid label_cells(const Index3& crop_origin, int crop_size, std::span<const NoduleAnnotation> annotations);

struct LabellingStrategy {
  enum class Kind { kPatientLabel, kLargestNodule };
  Kind kind = Kind::kLargestNodule;
  /// proportion of the largest nodule size; only for kLargestNodule
  std::optional<double> w = 0.7;

  static LabellingStrategy patient_label() { return {Kind::kPatientLabel, std::nullopt}; }
  static LabellingStrategy largest_nodule(double w) { return {Kind::kLargestNodule, w}; }
  void validate() const;
};

/// Benign/malignant labels for the nodules of one patient. Patients without
/// cancer get all-benign; for cancer patients, patient-label marks every
/// nodule malignant and largest-nodule marks size >= w * max(size).
std::vector<NoduleLabel> assign_nodule_labels(const LabellingStrategy& strategy, bool patient_cancer,
                                              std::span<const double> sizes);

/// Ternary cell labels from a binary grid and the patient's cancer status.
CellLabelGrid malignancy_cell_labels(const CellLabelGrid& binary_grid, bool patient_cancer);

}  // namespace lungpipe
