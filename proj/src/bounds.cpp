#include "ecp/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ecp {

namespace {

double alpha_n(double alpha, std::size_t n) { return alpha - 1.0 / static_cast<double>(n + 1); }

// ln of a probability after clamping into [kProbFloor, 1]; counts clamps.
double clamped_log(double p, std::size_t& clips) {
  if (p < kProbFloor) {
    ++clips;
    p = kProbFloor;
  } else if (p > 1.0) {
    ++clips;
    p = 1.0;
  }
  return std::log(p);
}

// Weighted conditional mean accumulator; an empty partition has mean 0.
struct PartitionMean {
  CompensatedSum num;
  CompensatedSum den;
  void add(double w, double v) {
    if (w == 0.0) return;
    num.add(w * v);
    den.add(w);
  }
  double mean() const { return den.value() > 0.0 ? num.value() / den.value() : 0.0; }
};

double finish_report(BoundReport& r) {
  CompensatedSum s;
  for (const auto& [name, v] : r.terms) s.add(v);
  r.value = s.value();
  return r.value;
}

}  // namespace

void require_bound_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 0.5)) {
    throw std::invalid_argument(
        "alpha must lie in (0, 0.5): the bounds replace h_b(P(E)) by h_b(alpha), which needs "
        "alpha on the increasing branch of the binary entropy");
  }
}

void EvalBatch::validate() const {
  if (probs.size() != labels.size() || sets.size() != labels.size()) {
    throw std::invalid_argument("EvalBatch fields have different lengths");
  }
  if (labels.empty()) throw std::invalid_argument("EvalBatch is empty");
  if (!weights.empty() && weights.size() != labels.size()) {
    throw std::invalid_argument("EvalBatch weights length mismatch");
  }
  const auto k = probs.front().size();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (probs[i].size() != k || sets[i].num_labels() != k) {
      throw std::invalid_argument("EvalBatch rows disagree on the label count");
    }
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw std::invalid_argument("EvalBatch label out of range");
    }
    if (!weights.empty() && !(weights[i] >= 0.0)) {
      throw std::invalid_argument("EvalBatch weights must be nonnegative");
    }
  }
}

double BoundReport::term(const std::string& name) const {
  for (const auto& [k, v] : terms) {
    if (k == name) return v;
  }
  throw std::out_of_range("no term '" + name + "' in " + method + " report");
}

void CompensatedSum::add(double v) {
  double t = sum_ + v;
  if (std::abs(sum_) >= std::abs(v)) {
    comp_ += (sum_ - t) + v;
  } else {
    comp_ += (v - t) + sum_;
  }
  sum_ = t;
}

double bernstein_delta(std::span<const double> z, double delta) {
  if (z.size() < 2) throw std::invalid_argument("bernstein_delta needs n >= 2");
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("delta must lie in (0, 1)");
  CompensatedSum sum;
  for (double v : z) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("bernstein_delta entries must be in [0, 1]");
    sum.add(v);
  }
  const double n = static_cast<double>(z.size());
  const double mean = sum.value() / n;
  CompensatedSum sq;
  for (double v : z) sq.add((v - mean) * (v - mean));
  const double var = sq.value() / (n - 1.0);
  const double log_term = std::log(2.0 / delta);
  return std::sqrt(2.0 * var * log_term / n) + 7.0 * log_term / (3.0 * (n - 1.0));
}

double binary_kl(double p, double q) {
  auto term = [](double a, double b) {
    if (a <= 0.0) return 0.0;
    return a * (std::log(a) - std::log(std::max(b, kProbFloor)));
  };
  return term(p, q) + term(1.0 - p, 1.0 - q);
}

double cross_entropy(const EvalBatch& batch) {
  batch.validate();
  PartitionMean ce;
  std::size_t clips = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto y = static_cast<std::size_t>(batch.labels[i]);
    ce.add(batch.weight(i), -clamped_log(batch.probs[i][y], clips));
  }
  return ce.mean();
}

std::vector<double> set_masses(const EvalBatch& batch) {
  std::vector<double> z(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    double m = 0.0;
    for (std::size_t y = 0; y < batch.probs[i].size(); ++y) {
      if (batch.sets[i].member[y]) m += batch.probs[i][y];
    }
    z[i] = std::clamp(m, 0.0, 1.0);
  }
  return z;
}

BoundReport dpi_bound(const EvalBatch& batch, double alpha, double delta) {
  require_bound_alpha(alpha);
  batch.validate();
  if (batch.weighted()) throw std::invalid_argument("dpi_bound needs an unweighted sample");
  if (batch.size() < 2) throw std::invalid_argument("dpi_bound needs n >= 2");

  BoundReport r;
  r.method = "dpi";
  r.alpha = alpha;
  r.n = batch.n_cal;
  r.delta = delta;

  const auto z = set_masses(batch);
  const double dev = bernstein_delta(z, delta);
  CompensatedSum in_mass;
  for (double v : z) in_mass.add(v);
  const double n = static_cast<double>(z.size());
  const double q_in_hat = in_mass.value() / n;
  const double q_in = std::min(1.0, q_in_hat + dev);
  const double q_out = std::min(1.0, (1.0 - q_in_hat) + dev);

  std::size_t clips = 0;
  CompensatedSum ce;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ce.add(-clamped_log(batch.probs[i][static_cast<std::size_t>(batch.labels[i])], clips));
  }
  const double an = alpha_n(alpha, batch.n_cal);
  r.terms = {
      {"binary_entropy", binary_entropy(alpha)},
      {"covered", (1.0 - alpha) * clamped_log(q_in, clips)},
      {"uncovered", an * clamped_log(q_out, clips)},
      {"cross_entropy", ce.value() / n},
  };
  r.clip_events = clips;
  finish_report(r);
  return r;
}

BoundReport dpi_plugin_bound(const EvalBatch& batch, double alpha) {
  require_bound_alpha(alpha);
  batch.validate();
  BoundReport r;
  r.method = "dpi_plugin";
  r.alpha = alpha;
  r.n = batch.n_cal;
  const auto z = set_masses(batch);
  PartitionMean mass;
  PartitionMean ce;
  std::size_t clips = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    mass.add(batch.weight(i), z[i]);
    ce.add(batch.weight(i), -clamped_log(batch.probs[i][static_cast<std::size_t>(batch.labels[i])], clips));
  }
  const double q_in = std::clamp(mass.mean(), 0.0, 1.0);
  r.terms = {
      {"binary_entropy", binary_entropy(alpha)},
      {"covered", (1.0 - alpha) * clamped_log(q_in, clips)},
      {"uncovered", alpha_n(alpha, batch.n_cal) * clamped_log(1.0 - q_in, clips)},
      {"cross_entropy", ce.mean()},
  };
  r.clip_events = clips;
  finish_report(r);
  return r;
}

double dpi_exact(const EvalBatch& batch) {
  batch.validate();
  const auto z = set_masses(batch);
  PartitionMean cover;
  PartitionMean mass;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    double w = batch.weight(i);
    cover.add(w, batch.sets[i].contains(batch.labels[i]) ? 1.0 : 0.0);
    mass.add(w, z[i]);
  }
  return cross_entropy(batch) - binary_kl(cover.mean(), mass.mean());
}

BoundReport mb_fano_bound(const EvalBatch& batch, double alpha) {
  require_bound_alpha(alpha);
  batch.validate();
  BoundReport r;
  r.method = "mb_fano";
  r.alpha = alpha;
  r.n = batch.n_cal;
  std::size_t clips = 0;
  PartitionMean covered;
  PartitionMean uncovered;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& q = batch.probs[i];
    const auto& set = batch.sets[i];
    const auto y = static_cast<std::size_t>(batch.labels[i]);
    const bool in = set.member[y];
    double mass = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) {
      if (set.member[k] == in) mass += q[k];
    }
    const double ratio = mass > 0.0 ? q[y] / mass : 0.0;
    (in ? covered : uncovered).add(batch.weight(i), -clamped_log(ratio, clips));
  }
  const double an = alpha_n(alpha, batch.n_cal);
  r.terms = {
      {"binary_entropy", binary_entropy(alpha)},
      {"uncovered", alpha * uncovered.mean()},
      {"covered", (1.0 - an) * covered.mean()},
  };
  r.clip_events = clips;
  finish_report(r);
  return r;
}

namespace {

BoundReport simple_fano_impl(std::span<const PredictionSet> sets, std::span<const int> labels,
                             const std::vector<double>* weights, double alpha, std::size_t n,
                             int num_labels) {
  require_bound_alpha(alpha);
  if (sets.size() != labels.size()) throw std::invalid_argument("sets/labels length mismatch");
  if (sets.empty()) throw std::invalid_argument("simple_fano_bound on an empty sample");
  BoundReport r;
  r.method = "simple_fano";
  r.alpha = alpha;
  r.n = n;
  std::size_t clips = 0;
  PartitionMean covered;
  PartitionMean uncovered;
  const auto k = static_cast<double>(num_labels);
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const double w = weights && !weights->empty() ? (*weights)[i] : 1.0;
    const auto size = static_cast<double>(sets[i].size());
    if (sets[i].contains(labels[i])) {
      covered.add(w, std::log(size));
    } else {
      uncovered.add(w, std::log(k - size));
    }
  }
  r.terms = {
      {"binary_entropy", binary_entropy(alpha)},
      {"uncovered", alpha * uncovered.mean()},
      {"covered", (1.0 - alpha_n(alpha, n)) * covered.mean()},
  };
  r.clip_events = clips;
  finish_report(r);
  return r;
}

}  // namespace

BoundReport simple_fano_bound(std::span<const PredictionSet> sets, std::span<const int> labels,
                              double alpha, std::size_t n, int num_labels) {
  return simple_fano_impl(sets, labels, nullptr, alpha, n, num_labels);
}

BoundReport simple_fano_bound(const EvalBatch& batch, double alpha) {
  batch.validate();
  return simple_fano_impl(batch.sets, batch.labels, &batch.weights, alpha, batch.n_cal,
                          batch.num_labels());
}

double conftr_bound(double mean_set_size, double alpha, std::size_t n, int num_labels) {
  if (!(mean_set_size > 0.0)) throw std::invalid_argument("mean set size must be positive");
  const double an = alpha_n(alpha, n);
  const double lambda = binary_entropy(alpha) + alpha * std::log(static_cast<double>(num_labels)) -
                        (1.0 - an) * std::log1p(-alpha);
  return lambda + (1.0 - an) * std::log(mean_set_size);
}

double list_fano_bound(std::span<const PredictionSet> sets, double alpha, int num_labels) {
  require_bound_alpha(alpha);
  if (sets.empty()) throw std::invalid_argument("list_fano_bound on an empty sample");
  CompensatedSum s;
  for (const auto& set : sets) {
    auto size = set.size();
    if (size > 1) s.add(std::log(static_cast<double>(size)));
  }
  return binary_entropy(alpha) + alpha * std::log(static_cast<double>(num_labels)) +
         s.value() / static_cast<double>(sets.size());
}

double list_fano_bound(const EvalBatch& batch, double alpha) {
  require_bound_alpha(alpha);
  batch.validate();
  PartitionMean m;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto size = batch.sets[i].size();
    m.add(batch.weight(i), size > 1 ? std::log(static_cast<double>(size)) : 0.0);
  }
  return binary_entropy(alpha) + alpha * std::log(static_cast<double>(batch.num_labels())) +
         m.mean();
}

}  // namespace ecp
