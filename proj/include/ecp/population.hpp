#pragma once

#include <vector>

#include "ecp/bounds.hpp"
#include "ecp/datagen.hpp"
#include "ecp/scores.hpp"

namespace ecp {

/// Split-conformal setup evaluated against a discrete task. The score must carry jitter > 0 so
/// that scores are almost surely distinct.
struct PopulationSetup {
  ScoreSpec score;
  double alpha = 0.1;
  std::size_t n_cal = 100;
};

/// Exact joint law of (calibration sample, x, y, C(x)) as a weighted EvalBatch.
///
/// Each entry is one (x, y, set) triple with weight p(x) p(y|x) P(set | x). The set probability
/// integrates over the conformal threshold, whose law is that of the r-th order statistic of
/// n_cal jittered calibration scores, and over the test example's own jitter draw. Rows of
/// `model` are the Q(.|x) used both for scoring and as the batch probabilities.
EvalBatch population_batch(const DiscreteTaskSpec& task, const std::vector<ProbVector>& model,
                           const PopulationSetup& setup);

/// Finite-sample counterpart: one calibration draw of n_cal examples, then n_eval test examples.
EvalBatch sample_eval_batch(const DiscreteTaskSpec& task, const std::vector<ProbVector>& model,
                            const PopulationSetup& setup, std::size_t n_eval, RngSeed seed);

/// Weighted empirical coverage of a batch.
double batch_coverage(const EvalBatch& batch);

/// Weighted mean of [ln |C|]^+ over a batch.
double batch_mean_log_size(const EvalBatch& batch);

}  // namespace ecp
