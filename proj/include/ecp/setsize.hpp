#pragma once

#include <vector>

#include "ecp/bounds.hpp"
#include "ecp/core.hpp"
#include "ecp/scores.hpp"

namespace ecp {

/// Vector quantizer: k centroids of dimension d.
struct QuantizerModel {
  Matrix centroids;

  int k() const { return static_cast<int>(centroids.rows()); }
  bool operator==(const QuantizerModel&) const = default;
};

struct EntropyEstimate {
  double h_mle = 0.0;
  double h_mm = 0.0;  // h_mle + (observed_bins - 1) / (2 n)
  std::size_t observed_bins = 0;
  std::size_t n = 0;
};

/// Lloyd iterations from a seeded k-means++ start. Empty clusters are re-seeded with the point
/// farthest from its current centroid. Stops early once assignments are stable.
QuantizerModel kmeans(const Matrix& points, int k, int iters, RngSeed seed);

/// Sum of squared distances from each point to its nearest centroid.
double kmeans_objective(const QuantizerModel& qm, const Matrix& points);

/// Nearest centroid per row; the lowest index wins ties.
std::vector<int> quantize(const QuantizerModel& qm, const Matrix& points);

EntropyEstimate entropy_mle(std::span<const std::size_t> counts);

/// Miller-Madow joint entropy of (Y, Yq) minus ln k: a lower bound on H(Y | Yq).
/// joint_counts[y][c] counts examples with label y in cell c.
double cond_entropy_lb(const std::vector<std::vector<std::size_t>>& joint_counts, int k);

/// Lower bound on sup ln|C|; may be negative.
double max_setsize_lb(double h_lb, double alpha, std::size_t n, int num_labels);

/// Lower bound on E[ln|C|]^+ from list-decoding Fano: h_lb - h_b(alpha) - alpha ln K.
double expected_logsize_lb_simple(double h_lb, double alpha, int num_labels);

/// Model-based lower bound on E[ln|C|]^+. The batch supplies the conditional means over the
/// uncovered and covered events, with uniform-mean masses taken as set mass / set size.
double expected_logsize_lb_mb(double h_lb, double alpha, std::size_t n, int num_labels,
                              const EvalBatch& batch);

/// A possibly negative lower bound with its clamp at 0.
struct ClampedBound {
  double raw = 0.0;
  double clamped = 0.0;
  bool informative = false;  // raw > 0
};
ClampedBound clamp_bound(double raw);

struct QuantizedStudyConfig {
  int clusters = 32;
  int kmeans_iters = 50;
  std::vector<double> alphas{0.01, 0.02, 0.05, 0.1, 0.2};
  ScoreSpec score;
  RngSeed seed{0};
};

struct QuantizedStudyRow {
  double alpha = 0.0;
  ClampedBound simple;
  ClampedBound model_based;
  ClampedBound max_logsize;
  double empirical_logsize = 0.0;  // mean [ln|C|]^+ on the test points
  double coverage = 0.0;
};

struct QuantizedStudy {
  QuantizerModel quantizer;
  EntropyEstimate joint;
  double h_lb = 0.0;
  std::vector<QuantizedStudyRow> rows;
};

/// Set-size study on vector-quantized logits (one column per label). Centroids and the entropy
/// estimate come from the whole calibration set; the calibration set is then split in two
/// halves, the first fixing the threshold and the second evaluating the model-based terms.
/// Each cell predicts softmax(centroid).
QuantizedStudy quantized_setsize_study(const Matrix& cal_logits, std::span<const int> cal_labels,
                                       const Matrix& test_logits, std::span<const int> test_labels,
                                       const QuantizedStudyConfig& cfg);

}  // namespace ecp
