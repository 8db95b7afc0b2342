#pragma once

#include <optional>
#include <vector>

#include "ecp/core.hpp"
#include "ecp/datagen.hpp"
#include "ecp/scores.hpp"

namespace ecp {

/// Auxiliary model Q(z | x, y).
struct SideModel {
  enum class Kind { Table, Linear };
  Kind kind = Kind::Linear;
  int num_labels = 0;
  int num_groups = 0;
  // Table: table[x][y] over groups; x is the hot index of a one-hot feature row.
  std::vector<std::vector<ProbVector>> table;
  // Linear: logits = [x, onehot(y)] * weights + bias; weights is (dim + K) x G.
  Matrix weights;
  std::vector<double> bias;

  ProbVector group_probs(std::span<const double> x, int y) const;
  /// Q(z | x, y) for every label y.
  std::vector<double> likelihood(std::span<const double> x, int z) const;
  void validate() const;
};

/// Exact side model of a discrete task with a group table.
SideModel table_side_model(const DiscreteTaskSpec& spec);

ProbVector posterior_with_si(std::span<const double> p, std::span<const double> lik);

/// Posterior given z, or p itself when z is kMissingGroup.
ProbVector effective_probs(std::span<const double> p, const SideModel& side, std::span<const double> x, int z);

struct SideTrainConfig {
  int epochs = 50;
  double lr = 0.5;
  std::size_t batch_size = 100;
  RngSeed seed{0};
};

/// Softmax regression of z on [x, onehot(y)] by minibatch gradient ascent on the log-likelihood.
SideModel train_side_model(const LabeledDataset& ds, const SideTrainConfig& cfg);

/// Mean ln Q(z_i | x_i, y_i) over examples with observed side information.
double side_log_likelihood(const SideModel& side, const LabeledDataset& ds);

struct SiEvalConfig {
  ScoreSpec score;
  double alpha = 0.1;
  double availability = 1.0;
  bool mondrian = false;
  RngSeed seed{0};
};

struct SiReport {
  double coverage = 0.0;
  double inefficiency = 0.0;
  double accuracy = 0.0;
  double availability = 0.0;
  bool mondrian = false;
};

/// Hides side information independently per example with probability 1 - availability.
std::vector<int> mask_side_info(std::span<const int> side_info, double availability, RngSeed seed);

/// SCP on effective probabilities; the same availability rule is applied to calibration and test.
/// The Mondrian arm calibrates each observed group and the SI-missing examples separately; groups
/// without calibration examples use the pooled threshold.
SiReport evaluate_si(const LabeledDataset& cal, const LabeledDataset& test,
                     const std::vector<ProbVector>& cal_probs, const std::vector<ProbVector>& test_probs,
                     const SideModel& side, const SiEvalConfig& cfg);

}  // namespace ecp
