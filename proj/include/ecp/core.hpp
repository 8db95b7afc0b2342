#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace ecp {

/// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  static Matrix from_rows(const std::vector<std::vector<double>>& rows);

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Marker for an example whose side information was not observed.
inline constexpr int kMissingGroup = -1;

struct LabeledDataset {
  Matrix features;
  std::vector<int> labels;
  // Empty, or one entry per example; kMissingGroup marks an unobserved value.
  std::vector<int> side_info;
  int num_labels = 0;
  int num_groups = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
  bool has_side_info() const { return !side_info.empty(); }

  /// Throws std::invalid_argument when any invariant is broken.
  void validate() const;

  LabeledDataset subset(std::span<const std::size_t> indices) const;

  bool operator==(const LabeledDataset&) const = default;
};

using ProbVector = std::vector<double>;

/// Throws unless p is nonnegative and sums to 1 within 1e-9.
void validate_prob_vector(std::span<const double> p);

/// Numerically stable softmax of a logit vector.
ProbVector softmax(std::span<const double> logits);

struct PredictionSet {
  std::vector<bool> member;

  PredictionSet() = default;
  explicit PredictionSet(std::size_t num_labels, bool fill = false) : member(num_labels, fill) {}

  std::size_t num_labels() const { return member.size(); }
  std::size_t size() const;
  bool contains(int label) const { return member.at(static_cast<std::size_t>(label)); }

  bool operator==(const PredictionSet&) const = default;
};

struct RngSeed {
  std::uint64_t value = 0;
  bool operator==(const RngSeed&) const = default;
};

/// SplitMix64 finalizer; used for counter-based per-example seeds.
std::uint64_t mix64(std::uint64_t x);

/// Seed for the index-th item of a stream rooted at `seed`.
RngSeed derive_seed(RngSeed seed, std::uint64_t index);

/// Explicit-state generator. Never shared between threads.
class Rng {
 public:
  explicit Rng(RngSeed seed) : engine_(mix64(seed.value)) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  double gamma(double shape) { return std::gamma_distribution<double>(shape, 1.0)(engine_); }
  std::size_t uniform_index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::vector<std::size_t> permutation(std::size_t n);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Random (calibration, test) partition; the calibration part has floor(n * cal_fraction) rows.
std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double cal_fraction,
                                                RngSeed seed);

/// Index form of `split`: (calibration indices, test indices).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n,
                                                                            double cal_fraction,
                                                                            RngSeed seed);

double coverage(std::span<const PredictionSet> sets, std::span<const int> labels);
double inefficiency(std::span<const PredictionSet> sets);

/// Binary entropy in nats with 0 ln 0 = 0.
double binary_entropy(double p);

/// -sum p ln p in nats with 0 ln 0 = 0.
double entropy(std::span<const double> p);

/// Smallest rank r = ceil((n+1)(1-alpha)); guards against ulp-level overshoot.
std::size_t conformal_rank(std::size_t n, double alpha);

/// Worker cap: ECP_THREADS when set to a positive integer, else the hardware concurrency.
std::size_t thread_limit();

/// Runs fn(0..n-1) on up to thread_limit() threads. Rethrows the first exception by index.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace ecp
