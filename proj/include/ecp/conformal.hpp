#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <vector>

#include "ecp/core.hpp"
#include "ecp/scores.hpp"

namespace ecp {

/// Split-conformal threshold. q_hat is +inf exactly when the conformal rank exceeds n.
struct Calibration {
  double q_hat = std::numeric_limits<double>::infinity();
  std::size_t n = 0;
  double alpha = 0.1;

  bool is_infinite() const { return std::isinf(q_hat); }
  /// alpha - 1/(n+1): the coverage upper-bound offset.
  double alpha_n() const { return alpha - 1.0 / static_cast<double>(n + 1); }
  bool operator==(const Calibration&) const = default;
};

/// Exact order statistic r = ceil((n+1)(1-alpha)) of the calibration scores.
Calibration calibrate(std::span<const double> cal_scores, double alpha);

/// Members are labels with score <= q_hat.
PredictionSet predict_set(const Calibration& cal, const ScoreSpec& spec, std::span<const double> p,
                          std::optional<RngSeed> seed = std::nullopt);

/// Same rule applied to precomputed label scores.
PredictionSet threshold_set(double q_hat, std::span<const double> label_scores);

struct GroupCalibration {
  std::map<int, Calibration> per_group;
  std::optional<Calibration> fallback;

  bool has_group(int group) const { return per_group.count(group) != 0; }
  /// Threshold for `group`; unknown groups use the fallback or throw.
  const Calibration& lookup(int group) const;
};

GroupCalibration mondrian_calibrate(const std::map<int, std::vector<double>>& cal_scores_by_group,
                                    double alpha,
                                    std::optional<Calibration> fallback = std::nullopt);

PredictionSet mondrian_predict(const GroupCalibration& gc, int group, const ScoreSpec& spec,
                               std::span<const double> p,
                               std::optional<RngSeed> seed = std::nullopt);

}  // namespace ecp
