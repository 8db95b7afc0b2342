#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "ecp/autodiff.hpp"
#include "ecp/core.hpp"
#include "ecp/diffsort.hpp"

namespace ecp {

enum class Activation { Relu, Tanh };
enum class LossKind { Ce, Conftr, ConftrClass, Fano, MbFano, Dpi };

std::string to_string(Activation a);
std::string to_string(LossKind k);
Activation activation_from_string(const std::string& name);
LossKind loss_kind_from_string(const std::string& name);

/// Layer widths from input to K; no hidden entries means a linear model.
struct ModelSpec {
  std::vector<int> layer_sizes;
  Activation activation = Activation::Relu;

  void validate() const;
  int input_dim() const { return layer_sizes.front(); }
  int num_labels() const { return layer_sizes.back(); }
  std::size_t num_params() const;
  bool operator==(const ModelSpec&) const = default;
};

/// Parameters are flat: for each layer the (in x out) weight matrix row-major, then its bias.
struct Model {
  ModelSpec spec;
  std::vector<double> params;

  bool operator==(const Model&) const = default;
};

/// Weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Model init_model(const ModelSpec& spec, RngSeed seed);

/// Model parameters as tape leaves.
struct BoundModel {
  std::vector<ad::Var> weights;
  std::vector<ad::Var> biases;
};
BoundModel bind(ad::Tape& tape, const Model& model, bool requires_grad = true);
/// Flattened gradient in the parameter layout.
std::vector<double> gather_grad(const BoundModel& bound);

ad::Var forward_logits(const BoundModel& bound, const Model& model, ad::Var x);

/// Tape-free evaluation.
Matrix predict_logits(const Model& model, const Matrix& x);
std::vector<ProbVector> predict_probs(const Model& model, const Matrix& x);

ad::Tensor to_tensor(const Matrix& m);

/// Soft split-conformal pass over one batch: the first floor(B/2) rows calibrate, the rest are
/// test rows. Scores are -log Q(y|x).
struct ConformalStep {
  ad::Var q_hat;
  ad::Var soft_sets;       // (B_test, K)
  ad::Var test_log_probs;  // (B_test, K)
  std::vector<int> test_labels;
  std::size_t n_cal = 0;
};
ConformalStep conformal_step(ad::Var log_probs, const std::vector<int>& labels, double alpha,
                             const RelaxConfig& relax);

inline constexpr double kSoftWeightFloor = 1e-6;

ad::Var loss_ce(ad::Var log_probs, const std::vector<int>& labels);
ad::Var loss_conftr(ad::Var soft_sets);
ad::Var loss_conftr_class(ad::Var soft_sets, const std::vector<int>& labels, double class_weight);
ad::Var loss_fano(ad::Var soft_sets, const std::vector<int>& labels, double alpha, std::size_t n_cal);
ad::Var loss_mb_fano(ad::Var soft_sets, ad::Var log_probs, const std::vector<int>& labels, double alpha,
                     std::size_t n_cal);
ad::Var loss_dpi(ad::Var soft_sets, ad::Var log_probs, const std::vector<int>& labels, double alpha,
                 std::size_t n_cal, double delta);

struct TrainConfig {
  LossKind loss = LossKind::Ce;
  double alpha_train = 0.01;
  std::size_t batch_size = 100;
  double lr = 0.01;
  double momentum = 0.9;
  int epochs = 10;
  RelaxConfig relax;
  double class_weight = 1.0;
  double delta = 0.05;
  double eval_alpha = 0.1;  // miscoverage of the per-epoch holdout evaluation
  RngSeed seed{0};

  void validate() const;
};

/// Configured objective on per-row log-probabilities; non-CE losses split the rows in halves.
ad::Var loss_from_log_probs(ad::Var log_probs, const std::vector<int>& labels, const TrainConfig& cfg);

/// Loss of one batch on `tape` under the configured objective.
ad::Var batch_loss(ad::Tape& tape, const BoundModel& bound, const Model& model, const Matrix& x,
                   const std::vector<int>& labels, const TrainConfig& cfg);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
  // Hard THR split conformal on the holdout (halves for calibration and test); NaN without one.
  double holdout_inefficiency = 0.0;
  double holdout_coverage = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochMetrics> history;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Learning rate at an epoch: lr scaled by 0.1 at 2/5, 3/5 and 4/5 of the run.
double scheduled_lr(double lr, int epoch, int epochs);

TrainResult train(Model model, const LabeledDataset& train_set, const TrainConfig& cfg,
                  const LabeledDataset* holdout = nullptr);

}  // namespace ecp
