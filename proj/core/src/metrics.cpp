// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <vector>

#include "lungpipe/error.hpp"

namespace lungpipe {
namespace {

void check_scores(std::span<const double> probs, std::span<const int> labels) {
  if (probs.empty()) throw ValidationError("metrics: empty scored set");
  if (probs.size() != labels.size()) throw ValidationError("metrics: probability and label counts differ");
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] >= 0.0 && probs[i] <= 1.0)) throw ValidationError("metrics: probability outside [0, 1]");
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("metrics: labels must be 0 or 1");
  }
}

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

Confusion& Confusion::operator+=(const Confusion& o) {
  tp += o.tp;
  fp += o.fp;
  tn += o.tn;
  fn += o.fn;
  return *this;
}

Confusion confusion(std::span<const double> probs, std::span<const int> labels, double threshold) {
  check_scores(probs, labels);
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("metrics: threshold must lie in (0, 1)");
  Confusion c;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool pred = probs[i] > threshold;
    if (labels[i] == 1) {
      (pred ? c.tp : c.fn) += 1;
    } else {
      (pred ? c.fp : c.tn) += 1;
    }
  }
  return c;
}

ClassRates sensitivity_specificity_f1(const Confusion& c) {
  ClassRates r;
  if (c.tp + c.fn > 0) r.sensitivity = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (c.tn + c.fp > 0) r.specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  if (2 * c.tp + c.fp + c.fn > 0) r.f1 = 2.0 * c.tp / static_cast<double>(2 * c.tp + c.fp + c.fn);
  return r;
}

double log_loss_term(double prob, int label) {
  const double p = std::clamp(prob, 1e-15, 1.0 - 1e-15);
  return label == 1 ? -std::log(p) : -std::log1p(-p);
}

double log_loss(std::span<const double> probs, std::span<const int> labels) {
  check_scores(probs, labels);
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) s += log_loss_term(probs[i], labels[i]);
  return s / static_cast<double>(probs.size());
}

std::optional<double> auc(std::span<const double> probs, std::span<const int> labels) {
  check_scores(probs, labels);
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] < probs[b]; });
  // Mann-Whitney U with mid-ranks for ties
  double rank_sum = 0.0;
  std::int64_t pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && probs[order[j]] == probs[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        rank_sum += mid;
        ++pos;
      }
    }
    i = j;
  }
  const std::int64_t neg = static_cast<std::int64_t>(probs.size()) - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  return (rank_sum - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1)) /
         (static_cast<double>(pos) * static_cast<double>(neg));
}

MetricReport evaluate_scores(std::span<const double> probs, std::span<const int> labels, double threshold) {
  MetricReport r;
  r.counts = confusion(probs, labels, threshold);
  r.rates = sensitivity_specificity_f1(r.counts);
  r.log_loss = log_loss(probs, labels);
  r.threshold = threshold;
  r.n = static_cast<std::int64_t>(probs.size());
  return r;
}

std::string report_to_json(const MetricReport& r) {
  nlohmann::json j = {{"sensitivity", opt(r.rates.sensitivity)},
                      {"specificity", opt(r.rates.specificity)},
                      {"f1", opt(r.rates.f1)},
                      {"log_loss", r.log_loss},
                      {"threshold", r.threshold},
                      {"n", r.n},
                      {"tp", r.counts.tp},
                      {"fp", r.counts.fp},
                      {"tn", r.counts.tn},
                      {"fn", r.counts.fn}};
  return j.dump(2);
}

}  // namespace lungpipe
