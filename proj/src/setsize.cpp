#include "ecp/setsize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "ecp/conformal.hpp"

namespace ecp {

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double t = a[j] - b[j];
    d += t * t;
  }
  return d;
}

std::pair<int, double> nearest(const Matrix& centroids, std::span<const double> x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    const double d = sq_dist(centroids.row(c), x);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return {best, best_d};
}

Matrix kmeanspp_init(const Matrix& points, int k, Rng& rng) {
  const std::size_t n = points.rows();
  Matrix centroids(static_cast<std::size_t>(k), points.cols());
  auto copy_row = [&](std::size_t c, std::size_t i) {
    auto src = points.row(i);
    std::copy(src.begin(), src.end(), centroids.row(c).begin());
  };
  copy_row(0, rng.uniform_index(n));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(points.row(i), centroids.row(0));
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.uniform_index(n);
    } else {
      double u = rng.uniform() * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        u -= d2[i];
        if (u < 0.0) {
          pick = i;
          break;
        }
      }
    }
    copy_row(static_cast<std::size_t>(c), pick);
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(points.row(i), centroids.row(static_cast<std::size_t>(c))));
    }
  }
  return centroids;
}

}  // namespace

QuantizerModel kmeans(const Matrix& points, int k, int iters, RngSeed seed) {
  if (k < 1) throw std::invalid_argument("kmeans needs k >= 1");
  if (points.rows() < static_cast<std::size_t>(k)) throw std::invalid_argument("kmeans needs n >= k");
  if (iters < 0) throw std::invalid_argument("kmeans iters must be nonnegative");
  Rng rng(seed);
  QuantizerModel qm{kmeanspp_init(points, k, rng)};
  const std::size_t n = points.rows();
  const std::size_t d = points.cols();
  std::vector<int> assign(n, -1);
  std::vector<double> dist(n);

  for (int it = 0; it < iters; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      auto [c, dd] = nearest(qm.centroids, points.row(i));
      changed = changed || c != assign[i];
      assign[i] = c;
      dist[i] = dd;
    }
    if (!changed) break;

    Matrix sums(static_cast<std::size_t>(k), d);
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto c = static_cast<std::size_t>(assign[i]);
      ++counts[c];
      auto x = points.row(i);
      for (std::size_t j = 0; j < d; ++j) sums(c, j) += x[j];
    }
    std::vector<bool> taken(n, false);
    for (std::size_t c = 0; c < counts.size(); ++c) {
      if (counts[c] > 0) {
        for (std::size_t j = 0; j < d; ++j) qm.centroids(c, j) = sums(c, j) / static_cast<double>(counts[c]);
        continue;
      }
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!taken[i] && dist[i] > far_d) {
          far_d = dist[i];
          far = i;
        }
      }
      taken[far] = true;
      dist[far] = 0.0;
      auto x = points.row(far);
      std::copy(x.begin(), x.end(), qm.centroids.row(c).begin());
    }
  }
  return qm;
}

double kmeans_objective(const QuantizerModel& qm, const Matrix& points) {
  CompensatedSum s;
  for (std::size_t i = 0; i < points.rows(); ++i) s.add(nearest(qm.centroids, points.row(i)).second);
  return s.value();
}

std::vector<int> quantize(const QuantizerModel& qm, const Matrix& points) {
  if (qm.k() < 1) throw std::invalid_argument("quantizer has no centroids");
  if (points.cols() != qm.centroids.cols()) throw std::invalid_argument("point dimension mismatch");
  std::vector<int> ids(points.rows());
  for (std::size_t i = 0; i < points.rows(); ++i) ids[i] = nearest(qm.centroids, points.row(i)).first;
  return ids;
}

EntropyEstimate entropy_mle(std::span<const std::size_t> counts) {
  EntropyEstimate e;
  for (auto c : counts) {
    e.n += c;
    if (c > 0) ++e.observed_bins;
  }
  if (e.n == 0) throw std::invalid_argument("entropy_mle needs a positive total count");
  const double n = static_cast<double>(e.n);
  CompensatedSum h;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h.add(-p * std::log(p));
  }
  e.h_mle = std::max(0.0, h.value());
  e.h_mm = e.h_mle + static_cast<double>(e.observed_bins - 1) / (2.0 * n);
  return e;
}

double cond_entropy_lb(const std::vector<std::vector<std::size_t>>& joint_counts, int k) {
  if (k < 1) throw std::invalid_argument("cond_entropy_lb needs k >= 1");
  std::vector<std::size_t> flat;
  for (const auto& row : joint_counts) flat.insert(flat.end(), row.begin(), row.end());
  if (flat.empty()) throw std::invalid_argument("cond_entropy_lb on an empty joint table");
  return entropy_mle(flat).h_mm - std::log(static_cast<double>(k));
}

double max_setsize_lb(double h_lb, double alpha, std::size_t n, int num_labels) {
  require_bound_alpha(alpha);
  const double num = h_lb - binary_entropy(alpha) - alpha * std::log(static_cast<double>(num_labels));
  return num / (1.0 - alpha + 1.0 / static_cast<double>(n + 1));
}

double expected_logsize_lb_simple(double h_lb, double alpha, int num_labels) {
  require_bound_alpha(alpha);
  return h_lb - binary_entropy(alpha) - alpha * std::log(static_cast<double>(num_labels));
}

double expected_logsize_lb_mb(double h_lb, double alpha, std::size_t n, int num_labels,
                              const EvalBatch& batch) {
  require_bound_alpha(alpha);
  batch.validate();
  const auto m = static_cast<std::size_t>(num_labels);
  if (static_cast<std::size_t>(batch.num_labels()) != m) throw std::invalid_argument("K mismatch");
  CompensatedSum a0_num, a0_den, a1_num, a1_den;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& q = batch.probs[i];
    const auto& set = batch.sets[i];
    const auto y = static_cast<std::size_t>(batch.labels[i]);
    const bool in = set.member[y];
    double mass = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (set.member[j] == in) mass += q[j];
    }
    const double cell = in ? static_cast<double>(set.size()) : static_cast<double>(m - set.size());
    const double v = -std::log(std::max(q[y], kProbFloor)) + std::log(std::max(mass / cell, kProbFloor));
    const double w = batch.weight(i);
    if (w == 0.0) continue;
    if (in) {
      a1_num.add(w * v);
      a1_den.add(w);
    } else {
      a0_num.add(w * v);
      a0_den.add(w);
    }
  }
  const double a0 = a0_den.value() > 0.0 ? a0_num.value() / a0_den.value() : 0.0;
  const double a1 = a1_den.value() > 0.0 ? a1_num.value() / a1_den.value() : 0.0;
  const double simple = expected_logsize_lb_simple(h_lb, alpha, num_labels);
  const double cover_hi = 1.0 - alpha + 1.0 / static_cast<double>(n + 1);
  return (1.0 - alpha) * (simple - alpha * a0) / cover_hi - (1.0 - alpha) * a1;
}

ClampedBound clamp_bound(double raw) { return {raw, std::max(0.0, raw), raw > 0.0}; }

QuantizedStudy quantized_setsize_study(const Matrix& cal_logits, std::span<const int> cal_labels,
                                       const Matrix& test_logits, std::span<const int> test_labels,
                                       const QuantizedStudyConfig& cfg) {
  if (cal_logits.rows() != cal_labels.size() || test_logits.rows() != test_labels.size()) {
    throw std::invalid_argument("logit rows and labels differ in length");
  }
  if (cal_logits.rows() < 4) throw std::invalid_argument("need at least 4 calibration points");
  if (test_logits.empty()) throw std::invalid_argument("empty test set");
  const int num_labels = static_cast<int>(cal_logits.cols());
  const auto k_labels = static_cast<std::size_t>(num_labels);

  QuantizedStudy out;
  out.quantizer = kmeans(cal_logits, cfg.clusters, cfg.kmeans_iters, derive_seed(cfg.seed, 0));
  const auto cal_cells = quantize(out.quantizer, cal_logits);
  const auto test_cells = quantize(out.quantizer, test_logits);

  std::vector<std::vector<std::size_t>> joint(k_labels, std::vector<std::size_t>(static_cast<std::size_t>(cfg.clusters), 0));
  for (std::size_t i = 0; i < cal_labels.size(); ++i) {
    const int y = cal_labels[i];
    if (y < 0 || y >= num_labels) throw std::invalid_argument("calibration label out of range");
    ++joint[static_cast<std::size_t>(y)][static_cast<std::size_t>(cal_cells[i])];
  }
  std::vector<std::size_t> flat;
  for (const auto& row : joint) flat.insert(flat.end(), row.begin(), row.end());
  out.joint = entropy_mle(flat);
  out.h_lb = cond_entropy_lb(joint, cfg.clusters);

  std::vector<ProbVector> cell_probs;
  for (int c = 0; c < cfg.clusters; ++c) cell_probs.push_back(softmax(out.quantizer.centroids.row(static_cast<std::size_t>(c))));

  auto [first, second] = split_indices(cal_labels.size(), 0.5, derive_seed(cfg.seed, 1));
  const RngSeed jitter_seed = derive_seed(cfg.seed, 2);
  auto jitter_for = [&](std::size_t stream, std::size_t i) { return derive_seed(derive_seed(jitter_seed, stream), i); };

  std::vector<double> first_scores;
  for (auto i : first) {
    first_scores.push_back(score(cfg.score, cell_probs[static_cast<std::size_t>(cal_cells[i])], cal_labels[i], jitter_for(0, i)));
  }

  for (double alpha : cfg.alphas) {
    auto cal = calibrate(first_scores, alpha);
    EvalBatch batch;
    batch.n_cal = first.size();
    for (auto i : second) {
      const auto& p = cell_probs[static_cast<std::size_t>(cal_cells[i])];
      batch.probs.push_back(p);
      batch.labels.push_back(cal_labels[i]);
      batch.sets.push_back(predict_set(cal, cfg.score, p, jitter_for(1, i)));
    }
    QuantizedStudyRow row;
    row.alpha = alpha;
    row.simple = clamp_bound(expected_logsize_lb_simple(out.h_lb, alpha, num_labels));
    row.model_based = clamp_bound(expected_logsize_lb_mb(out.h_lb, alpha, first.size(), num_labels, batch));
    row.max_logsize = clamp_bound(max_setsize_lb(out.h_lb, alpha, first.size(), num_labels));

    CompensatedSum logsize;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test_labels.size(); ++i) {
      const auto& p = cell_probs[static_cast<std::size_t>(test_cells[i])];
      auto set = predict_set(cal, cfg.score, p, jitter_for(2, i));
      if (set.size() > 1) logsize.add(std::log(static_cast<double>(set.size())));
      if (set.contains(test_labels[i])) ++hits;
    }
    row.empirical_logsize = logsize.value() / static_cast<double>(test_labels.size());
    row.coverage = static_cast<double>(hits) / static_cast<double>(test_labels.size());
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace ecp
