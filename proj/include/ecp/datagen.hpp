#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ecp/core.hpp"

namespace ecp {

/// Diagonal-covariance Gaussian class-conditional mixture.
struct GaussianMixtureSpec {
  int num_labels = 0;
  int dim = 0;
  Matrix means;      // num_labels x dim
  Matrix diag_vars;  // num_labels x dim, strictly positive
  std::vector<double> priors;
  // Optional deterministic group of each label; when set, generated datasets carry it as side_info.
  std::vector<int> label_groups;

  void validate() const;
  int num_groups() const;
};

/// Finite-support task with an explicit conditional table; features are one-hot of x.
struct DiscreteTaskSpec {
  std::vector<double> marginal;       // p(x), size |X|
  std::vector<ProbVector> conditional;  // p(y|x), |X| rows of length K
  // Optional p(z|x,y): group_table[x][y] is a distribution over groups.
  std::vector<std::vector<ProbVector>> group_table;

  std::size_t support_size() const { return marginal.size(); }
  int num_labels() const;
  int num_groups() const;
  bool has_groups() const { return !group_table.empty(); }
  void validate() const;
};

LabeledDataset gen_gaussian_mixture(const GaussianMixtureSpec& spec, std::size_t n, RngSeed seed);

/// Bayes posterior P(y|x), evaluated in log space.
ProbVector gmm_posterior(const GaussianMixtureSpec& spec, std::span<const double> x);

struct MonteCarloEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

/// H(Y|X) = E[H(P(.|X))] by Monte Carlo over x drawn from the mixture.
MonteCarloEstimate gmm_cond_entropy_mc(const GaussianMixtureSpec& spec, std::size_t n_mc,
                                       RngSeed seed);

LabeledDataset gen_discrete_task(const DiscreteTaskSpec& spec, std::size_t n, RngSeed seed);

/// Exact H(Y|X) = sum_x p(x) H(p(.|x)).
double discrete_exact_entropy(const DiscreteTaskSpec& spec);

/// Exact H(Y|X,Z); requires a group table.
double discrete_exact_entropy_given_z(const DiscreteTaskSpec& spec);

/// Index of the hot coordinate of a one-hot feature row.
std::size_t one_hot_index(std::span<const double> row);

/// 4-position, 3-group style task: label y sits at position y % positions and belongs to group
/// y / positions, so labels sharing a position are separable only through the group.
GaussianMixtureSpec make_grouped_mixture(int positions, int groups, double radius, double variance);

/// Symmetric mixture with labels on a circle in `dim` dimensions (first two coordinates used).
GaussianMixtureSpec make_ring_mixture(int num_labels, int dim, double radius, double variance);

// --- file formats -------------------------------------------------------------------------

/// Classic IDX pair (images 0x00000803, labels 0x00000801); pixels scaled to [0, 1].
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path);

struct CsvSchema {
  std::string label_column = "label";
  std::optional<std::string> side_info_column;
};

/// Every column other than the label / side-info columns is a feature. Non-integer labels are
/// mapped to dense ids in sorted order.
LabeledDataset load_csv(const std::string& path, const CsvSchema& schema = {});

/// Columnar binary: "ECD1", u64 n, dim, K, G, then f64 features, i32 labels, i32 side_info (G>0).
void save_dataset(const LabeledDataset& ds, const std::string& path);
LabeledDataset load_dataset(const std::string& path);

}  // namespace ecp
