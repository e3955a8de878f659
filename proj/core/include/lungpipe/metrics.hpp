// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

namespace lungpipe {

/// Default decision threshold for patient-level cancer probabilities.
inline constexpr double kPatientThreshold = 0.25;
/// Default threshold for cell-level detector outputs.
inline constexpr double kCellThreshold = 0.5;

struct Confusion {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;

  std::int64_t n() const { return tp + fp + tn + fn; }
  Confusion& operator+=(const Confusion& o);
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

/// Positive iff probability > threshold. Labels are 0 or 1.
Confusion confusion(std::span<const double> probs, std::span<const int> labels, double threshold);

struct ClassRates {
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  std::optional<double> f1;
};

/// Ratios with a zero denominator are absent.
ClassRates sensitivity_specificity_f1(const Confusion& c);

/// Mean binary cross-entropy with probabilities clamped to [1e-15, 1 - 1e-15].
double log_loss(std::span<const double> probs, std::span<const int> labels);
double log_loss_term(double prob, int label);

/// Area under the ROC curve (ties count one half); absent for a single class.
std::optional<double> auc(std::span<const double> probs, std::span<const int> labels);

struct MetricReport {
  ClassRates rates;
  double log_loss = 0.0;
  double threshold = kPatientThreshold;
  std::int64_t n = 0;
  Confusion counts;
};

MetricReport evaluate_scores(std::span<const double> probs, std::span<const int> labels,
                             double threshold = kPatientThreshold);

/// {sensitivity, specificity, f1, log_loss, threshold, n}; absent rates are null.
std::string report_to_json(const MetricReport& r);

}  // namespace lungpipe
