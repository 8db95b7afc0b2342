#pragma once

#include <vector>

#include "ecp/population.hpp"
#include "ecp/training.hpp"

namespace ecp {

struct FederatedConfig {
  int devices = 10;
  double dirichlet_conc = 1.0;
  int rounds = 20;
  int local_epochs = 1;
  TrainConfig base;
  int personalize_epochs = 5;
  double personalize_lr_scale = 0.1;
  RngSeed seed{0};

  void validate() const;
};

/// Label-imbalanced split: per label, device shares ~ Dir(conc 1_m), counts by largest remainder.
std::vector<LabeledDataset> dirichlet_partition(const LabeledDataset& ds, int m, double conc, RngSeed seed);

/// Trunk Q(y|x) plus two device heads: Q(z|x) on the input and Q(z|x,y) on
/// [detached trunk logits, onehot(y)].
struct GlobalModel {
  Model trunk;
  Model head_z_x;
  Model head_z_xy;

  int num_devices() const { return head_z_x.spec.num_labels(); }
  bool operator==(const GlobalModel&) const = default;
};

/// Linear heads over m devices on top of `trunk`.
GlobalModel init_global_model(const Model& trunk, int m, RngSeed seed);

struct LocalLoss {
  ad::Var total;
  ad::Var base;         // bound or CE loss of the trunk
  ad::Var device_term;  // mean -ln Q(z = device | x)
  ad::Var side_term;    // mean -ln Q(z = device | x, y); reaches only head_z_xy
};

struct BoundGlobal {
  BoundModel trunk;
  BoundModel head_z_x;
  BoundModel head_z_xy;
};

BoundGlobal bind(ad::Tape& tape, const GlobalModel& g, bool requires_grad = true);

LocalLoss local_loss(ad::Tape& tape, const BoundGlobal& bound, const GlobalModel& g, const Matrix& x,
                     const std::vector<int>& labels, int device_id, const TrainConfig& cfg);

/// Value of the local objective (base loss plus device term) over a whole device dataset taken as
/// one batch. Throws when the device is too small for the conformal split.
double local_objective(const GlobalModel& g, const LabeledDataset& device_ds, int device_id,
                       const TrainConfig& cfg);

/// Local SGD epochs on one device, starting from g.
GlobalModel local_update(const GlobalModel& g, const LabeledDataset& device_ds, int device_id,
                         const TrainConfig& cfg, int epochs, double lr, RngSeed seed);

/// One round: every nonempty device trains from g, results are averaged weighted by example count.
GlobalModel fedavg_round(const GlobalModel& g, const std::vector<LabeledDataset>& devices,
                         const FederatedConfig& cfg, int round);

/// CE fine-tune of the trunk on local data.
Model personalize(const GlobalModel& g, const LabeledDataset& device_ds, int epochs, double lr, RngSeed seed);

/// Q(z | x, y) for every label, from the side head.
std::vector<double> device_likelihood(const GlobalModel& g, std::span<const double> x, int device_id);

/// Effective probabilities with the device id as side information.
ProbVector device_posterior(const GlobalModel& g, std::span<const double> x, int device_id);

struct FedRoundMetrics {
  int round = 0;
  double lr = 0.0;
  double objective = 0.0;
  double coverage = 0.0;
  double inefficiency = 0.0;
  double coverage_si = 0.0;
  double inefficiency_si = 0.0;
};

struct FedEvalData {
  LabeledDataset cal;   // side_info holds the device id
  LabeledDataset test;
};

/// Hard SCP of the global model on server-side calibration/test data, with and without the
/// device id as side information.
FedRoundMetrics evaluate_global(const GlobalModel& g, const FedEvalData& eval, const ScoreSpec& score,
                                double alpha, RngSeed seed);

struct FedResult {
  GlobalModel model;
  std::vector<FedRoundMetrics> history;
};

/// Runs cfg.rounds rounds. The logged objective is the count-weighted local objective over devices
/// large enough for the conformal split.
FedResult federated_train(const GlobalModel& init, const std::vector<LabeledDataset>& devices,
                          const FederatedConfig& cfg, const FedEvalData* eval = nullptr);

/// p(x, y, z) as joint[x][y][z].
using JointTable = std::vector<std::vector<std::vector<double>>>;

struct EntropyDecomposition {
  double h_y_given_x = 0.0;
  double avg_local = 0.0;  // H(Y | X, Z)
  double mi = 0.0;         // I(Y; Z | X)
};

EntropyDecomposition entropy_decomposition(const JointTable& joint);

/// The task seen by device z: p(x | z) and p(y | x, z); rows with p(x, z) = 0 are uniform.
DiscreteTaskSpec local_task(const JointTable& joint, int z);

struct FederatedBoundCheck {
  double h_y_given_x = 0.0;
  double device_term = 0.0;  // E[-ln Q(z | x)] with Q the exact p(z | x)
  double simple_fano = 0.0;
  double mb_fano = 0.0;
  double list_fano = 0.0;
};

/// Device-weighted local bounds, each evaluated exactly by population_batch on the local task
/// with model rows q_model[x], plus the device term.
FederatedBoundCheck federated_bound_check(const JointTable& joint, const std::vector<ProbVector>& q_model,
                                          const PopulationSetup& setup);

}  // namespace ecp
