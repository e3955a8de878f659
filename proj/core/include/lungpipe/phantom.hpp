// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "lungpipe/volume.hpp"

namespace lungpipe {

/// Nodule radius distribution: the LUNA16 radius histogram (measured on a
/// 512^3 canonical grid) rescaled to `volume_side` and truncated to
/// [lo, hi]. Piecewise uniform inside each histogram bin.
class RadiusSampler {
 public:
  RadiusSampler(int volume_side, double lo, double hi);

  double sample(std::mt19937_64& rng) const;
  /// P(radius >= r) under the truncated distribution.
  double tail_probability(double r) const;
  /// Smallest r with P(radius >= r) <= fraction.
  double upper_quantile(double fraction) const;

  double lo() const { return lo_; }
  double hi() const { return hi_; }

 private:
  struct Bin {
    double lo, hi, weight;
  };
  std::vector<Bin> bins_;
  double total_ = 0.0;
  double lo_, hi_;
};

/// Full LUNA16 radius support scaled to a canonical side.
std::pair<double, double> luna_radius_support(int volume_side);

struct PhantomConfig {
  int volume_side = 64;
  /// inclusive
  std::pair<int, int> nodule_count_range{1, 6};
  /// canonical voxels; must lie in (0, volume_side / 2)
  std::pair<double, double> radius_range{1.0, 4.75};
  /// radius >= rule  <=>  malignant; negative means "derive from target prevalence"
  double malignancy_rule = -1.0;
  /// fraction of malignant nodules used when malignancy_rule < 0 (1 in 8 = 1:7)
  double malignant_fraction = 0.125;
  /// expected tube distractors per 64^3 block
  double distractor_density = 3.0;
  double noise_sigma = 20.0;
  double air_hu = -1000.0;
  double tissue_hu = 40.0;
  std::uint64_t seed = 0;

  void validate() const;
  /// Effective radius threshold (resolves the prevalence target).
  double resolved_rule() const;
};

struct PhantomCase {
  HUVolume volume;
  std::vector<NoduleAnnotation> nodules;
  bool cancer = false;
  int requested_nodules = 0;
};

/// Air background with Gaussian noise, soft-tissue spheres at the annotated
/// centers and tube-like vessel distractors. Nodules that cannot be placed
/// without overlap after bounded retries are dropped.
PhantomCase generate_phantom(const PhantomConfig& cfg);

/// Per-patient seed derived from a dataset seed (splitmix64).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

std::vector<PhantomCase> generate_dataset(const PhantomConfig& cfg, int patients);

}  // namespace lungpipe
