#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ecp/core.hpp"

namespace ecp {

/// Floor applied before every logarithm in bound evaluation.
inline constexpr double kProbFloor = 1e-12;

/// Evaluation sample for the entropy bounds: model probabilities, true labels and hard sets
/// built from a calibration that did not see these examples.
struct EvalBatch {
  std::vector<ProbVector> probs;
  std::vector<int> labels;
  std::vector<PredictionSet> sets;
  // Calibration sample size behind the sets; enters through alpha_n = alpha - 1/(n_cal+1).
  std::size_t n_cal = 0;
  // Optional nonnegative example weights (population evaluation). Empty means uniform.
  std::vector<double> weights;

  std::size_t size() const { return labels.size(); }
  int num_labels() const { return probs.empty() ? 0 : static_cast<int>(probs.front().size()); }
  bool weighted() const { return !weights.empty(); }
  double weight(std::size_t i) const { return weights.empty() ? 1.0 : weights[i]; }
  void validate() const;
};

struct BoundReport {
  std::string method;
  double value = 0.0;
  // Additive components in evaluation order; their sum equals value.
  std::vector<std::pair<std::string, double>> terms;
  double alpha = 0.0;
  std::size_t n = 0;
  std::optional<double> delta;
  std::size_t clip_events = 0;

  double term(const std::string& name) const;
};

/// Neumaier-compensated accumulator.
class CompensatedSum {
 public:
  void add(double v);
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

/// Empirical-Bernstein deviation for values in [0, 1]:
/// sqrt(2 V ln(2/delta) / n) + 7 ln(2/delta) / (3 (n - 1)), V the unbiased sample variance.
double bernstein_delta(std::span<const double> z, double delta);

/// Binary KL divergence d(p || q) in nats, arguments clamped to [floor, 1 - floor] inside logs.
double binary_kl(double p, double q);

/// Mean of -ln Q(y_i | x_i).
double cross_entropy(const EvalBatch& batch);

/// Model mass on each prediction set, Z_i = sum_{y in C(x_i)} Q(y | x_i).
std::vector<double> set_masses(const EvalBatch& batch);

BoundReport dpi_bound(const EvalBatch& batch, double alpha, double delta);

/// DPI bound with plug-in masses (no Bernstein term). Accepts weighted batches, so it evaluates
/// the population form when given an exact weighted batch.
BoundReport dpi_plugin_bound(const EvalBatch& batch, double alpha);

/// CE - d_KL(P_hat(E) || Q_hat(E)); never exceeds the cross-entropy.
double dpi_exact(const EvalBatch& batch);

BoundReport mb_fano_bound(const EvalBatch& batch, double alpha);

BoundReport simple_fano_bound(std::span<const PredictionSet> sets, std::span<const int> labels,
                              double alpha, std::size_t n, int num_labels);
BoundReport simple_fano_bound(const EvalBatch& batch, double alpha);

/// lambda_alpha + (1 - alpha_n) ln(mean set size).
double conftr_bound(double mean_set_size, double alpha, std::size_t n, int num_labels);

/// h_b(alpha) + alpha ln K + E[ [ln|C|]^+ ].
double list_fano_bound(std::span<const PredictionSet> sets, double alpha, int num_labels);
double list_fano_bound(const EvalBatch& batch, double alpha);

/// Throws std::invalid_argument unless alpha lies in (0, 0.5).
void require_bound_alpha(double alpha);

}  // namespace ecp
