#include "ecp/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ecp {

Calibration calibrate(std::span<const double> cal_scores, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  for (double s : cal_scores) {
    if (!std::isfinite(s)) throw std::invalid_argument("calibration scores must be finite");
  }
  Calibration cal;
  cal.alpha = alpha;
  cal.n = cal_scores.size();
  const std::size_t r = conformal_rank(cal.n, alpha);
  if (r == 0 || r > cal.n) {
    // r == 0 cannot occur for alpha < 1; r > n means too little calibration data.
    cal.q_hat = std::numeric_limits<double>::infinity();
    return cal;
  }
  std::vector<double> sorted(cal_scores.begin(), cal_scores.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(r - 1), sorted.end());
  cal.q_hat = sorted[r - 1];
  return cal;
}

PredictionSet threshold_set(double q_hat, std::span<const double> label_scores) {
  PredictionSet set(label_scores.size());
  for (std::size_t y = 0; y < label_scores.size(); ++y) set.member[y] = label_scores[y] <= q_hat;
  return set;
}

PredictionSet predict_set(const Calibration& cal, const ScoreSpec& spec, std::span<const double> p,
                          std::optional<RngSeed> seed) {
  if (cal.is_infinite()) return PredictionSet(p.size(), true);
  return threshold_set(cal.q_hat, score_all(spec, p, seed));
}

const Calibration& GroupCalibration::lookup(int group) const {
  auto it = per_group.find(group);
  if (it != per_group.end()) return it->second;
  if (fallback) return *fallback;
  throw std::out_of_range("no calibration for group " + std::to_string(group) +
                          " and no fallback supplied");
}

GroupCalibration mondrian_calibrate(const std::map<int, std::vector<double>>& cal_scores_by_group,
                                    double alpha, std::optional<Calibration> fallback) {
  GroupCalibration gc;
  for (const auto& [group, scores] : cal_scores_by_group) {
    if (scores.empty()) continue;
    gc.per_group.emplace(group, calibrate(scores, alpha));
  }
  gc.fallback = std::move(fallback);
  return gc;
}

PredictionSet mondrian_predict(const GroupCalibration& gc, int group, const ScoreSpec& spec,
                               std::span<const double> p, std::optional<RngSeed> seed) {
  return predict_set(gc.lookup(group), spec, p, seed);
}

}  // namespace ecp
