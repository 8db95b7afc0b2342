#include "ecp/core.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <thread>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace ecp {

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols()) throw std::invalid_argument("ragged rows");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

void LabeledDataset::validate() const {
  if (features.rows() != labels.size()) {
    throw std::invalid_argument("feature rows (" + std::to_string(features.rows()) +
                                ") != label count (" + std::to_string(labels.size()) + ")");
  }
  if (num_labels < 1) throw std::invalid_argument("num_labels must be >= 1");
  for (int y : labels) {
    if (y < 0 || y >= num_labels) {
      throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(num_labels) + ")");
    }
  }
  if (!side_info.empty()) {
    if (side_info.size() != labels.size()) {
      throw std::invalid_argument("side_info length differs from label count");
    }
    bool any = std::any_of(side_info.begin(), side_info.end(),
                           [](int z) { return z != kMissingGroup; });
    if (any && num_groups < 1) throw std::invalid_argument("side_info present but num_groups < 1");
    for (int z : side_info) {
      if (z != kMissingGroup && (z < 0 || z >= num_groups)) {
        throw std::invalid_argument("side_info value " + std::to_string(z) + " out of range");
      }
    }
  }
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.num_labels = num_labels;
  out.num_groups = num_groups;
  out.features = Matrix(indices.size(), dim());
  out.labels.reserve(indices.size());
  if (has_side_info()) out.side_info.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::size_t src = indices[i];
    if (src >= size()) throw std::out_of_range("subset index out of range");
    auto from = features.row(src);
    std::copy(from.begin(), from.end(), out.features.row(i).begin());
    out.labels.push_back(labels[src]);
    if (has_side_info()) out.side_info.push_back(side_info[src]);
  }
  return out;
}

void validate_prob_vector(std::span<const double> p) {
  if (p.empty()) throw std::invalid_argument("empty probability vector");
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument("probability entries must be finite and nonnegative");
    }
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("probability vector sums to " + std::to_string(total));
  }
}

ProbVector softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax of an empty vector");
  const double top = *std::max_element(logits.begin(), logits.end());
  ProbVector p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - top);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

std::size_t PredictionSet::size() const {
  return static_cast<std::size_t>(std::count(member.begin(), member.end(), true));
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

RngSeed derive_seed(RngSeed seed, std::uint64_t index) {
  return RngSeed{mix64(seed.value ^ mix64(index + 0x632be59bd9b4e019ULL))};
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Fisher-Yates with our own index draws so the result does not depend on std::shuffle.
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = uniform_index(i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n,
                                                                            double cal_fraction,
                                                                            RngSeed seed) {
  if (n == 0) throw std::invalid_argument("cannot split an empty dataset");
  if (!(cal_fraction > 0.0 && cal_fraction < 1.0)) {
    throw std::invalid_argument("cal_fraction must lie in (0, 1)");
  }
  auto n_cal = static_cast<std::size_t>(std::floor(static_cast<double>(n) * cal_fraction));
  if (n_cal == 0) throw std::invalid_argument("calibration part would be empty");
  if (n_cal == n) throw std::invalid_argument("test part would be empty");
  Rng rng(seed);
  auto perm = rng.permutation(n);
  std::vector<std::size_t> cal(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_cal));
  std::vector<std::size_t> test(perm.begin() + static_cast<std::ptrdiff_t>(n_cal), perm.end());
  return {std::move(cal), std::move(test)};
}

std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double cal_fraction,
                                                RngSeed seed) {
  auto [cal, test] = split_indices(ds.size(), cal_fraction, seed);
  return {ds.subset(cal), ds.subset(test)};
}

double coverage(std::span<const PredictionSet> sets, std::span<const int> labels) {
  if (sets.size() != labels.size()) throw std::invalid_argument("sets/labels length mismatch");
  if (sets.empty()) throw std::invalid_argument("coverage of an empty collection");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    if (sets[i].contains(labels[i])) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(sets.size());
}

double inefficiency(std::span<const PredictionSet> sets) {
  if (sets.empty()) throw std::invalid_argument("inefficiency of an empty collection");
  std::size_t total = 0;
  for (const auto& s : sets) total += s.size();
  return static_cast<double>(total) / static_cast<double>(sets.size());
}

double binary_entropy(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("binary_entropy: p outside [0, 1]");
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (p < 1.0) h -= (1.0 - p) * std::log1p(-p);
  return h;
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

std::size_t conformal_rank(std::size_t n, double alpha) {
  double v = static_cast<double>(n + 1) * (1.0 - alpha);
  return static_cast<std::size_t>(std::ceil(v - 1e-9));
}

std::size_t thread_limit() {
  if (const char* env = std::getenv("ECP_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(thread_limit(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace ecp
