#include "ecp/sideinfo.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "ecp/conformal.hpp"

namespace ecp {

namespace {

void check_label(int y, int k) {
  if (y < 0 || y >= k) throw std::out_of_range("label out of range");
}

}  // namespace

void SideModel::validate() const {
  if (num_labels < 1 || num_groups < 1) throw std::invalid_argument("side model needs labels and groups");
  if (kind == Kind::Table) {
    for (const auto& row : table) {
      if (row.size() != static_cast<std::size_t>(num_labels)) throw std::invalid_argument("side table row size");
      for (const auto& q : row) {
        if (q.size() != static_cast<std::size_t>(num_groups)) throw std::invalid_argument("side table width");
        validate_prob_vector(q);
      }
    }
  } else if (weights.cols() != static_cast<std::size_t>(num_groups) ||
             bias.size() != static_cast<std::size_t>(num_groups) ||
             weights.rows() < static_cast<std::size_t>(num_labels)) {
    throw std::invalid_argument("side head shape mismatch");
  }
}

ProbVector SideModel::group_probs(std::span<const double> x, int y) const {
  check_label(y, num_labels);
  if (kind == Kind::Table) {
    auto xi = one_hot_index(x);
    if (xi >= table.size()) throw std::out_of_range("feature index outside the side table");
    return table[xi][static_cast<std::size_t>(y)];
  }
  const std::size_t dim = weights.rows() - static_cast<std::size_t>(num_labels);
  if (x.size() != dim) throw std::invalid_argument("feature dimension does not match the side head");
  std::vector<double> logits(bias);
  for (std::size_t p = 0; p < dim; ++p) {
    if (x[p] == 0.0) continue;
    for (std::size_t g = 0; g < logits.size(); ++g) logits[g] += x[p] * weights(p, g);
  }
  for (std::size_t g = 0; g < logits.size(); ++g) logits[g] += weights(dim + static_cast<std::size_t>(y), g);
  return softmax(logits);
}

std::vector<double> SideModel::likelihood(std::span<const double> x, int z) const {
  if (z < 0 || z >= num_groups) throw std::out_of_range("group out of range");
  std::vector<double> lik(static_cast<std::size_t>(num_labels));
  for (int y = 0; y < num_labels; ++y) lik[static_cast<std::size_t>(y)] = group_probs(x, y)[static_cast<std::size_t>(z)];
  return lik;
}

SideModel table_side_model(const DiscreteTaskSpec& spec) {
  spec.validate();
  if (!spec.has_groups()) throw std::invalid_argument("task has no group table");
  SideModel m;
  m.kind = SideModel::Kind::Table;
  m.num_labels = spec.num_labels();
  m.num_groups = spec.num_groups();
  m.table = spec.group_table;
  return m;
}

ProbVector posterior_with_si(std::span<const double> p, std::span<const double> lik) {
  if (p.size() != lik.size()) throw std::invalid_argument("likelihood length must match the label count");
  if (!lik.empty() && lik[0] > 0.0 && std::all_of(lik.begin(), lik.end(), [&](double v) { return v == lik[0]; })) {
    return ProbVector(p.begin(), p.end());
  }
  ProbVector out(p.size());
  double norm = 0.0;
  for (std::size_t y = 0; y < p.size(); ++y) {
    if (lik[y] < 0.0) throw std::invalid_argument("likelihood entries must be nonnegative");
    out[y] = p[y] * lik[y];
    norm += out[y];
  }
  if (!(norm > 0.0)) throw std::domain_error("side-information posterior has zero normalizer");
  for (auto& v : out) v /= norm;
  return out;
}

ProbVector effective_probs(std::span<const double> p, const SideModel& side, std::span<const double> x, int z) {
  if (z == kMissingGroup) return ProbVector(p.begin(), p.end());
  return posterior_with_si(p, side.likelihood(x, z));
}

SideModel train_side_model(const LabeledDataset& ds, const SideTrainConfig& cfg) {
  ds.validate();
  if (!ds.has_side_info() || ds.num_groups < 1) throw std::invalid_argument("dataset carries no side information");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.side_info[i] != kMissingGroup) rows.push_back(i);
  }
  if (rows.empty()) throw std::invalid_argument("no examples with observed side information");
  if (cfg.batch_size < 1 || cfg.epochs < 0 || !(cfg.lr >= 0.0)) throw std::invalid_argument("bad side training config");

  const std::size_t dim = ds.dim();
  const auto k = static_cast<std::size_t>(ds.num_labels);
  const auto g = static_cast<std::size_t>(ds.num_groups);
  SideModel m;
  m.kind = SideModel::Kind::Linear;
  m.num_labels = ds.num_labels;
  m.num_groups = ds.num_groups;
  m.weights = Matrix(dim + k, g);
  m.bias.assign(g, 0.0);

  Matrix grad_w(dim + k, g);
  std::vector<double> grad_b(g);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    auto order = rng.permutation(rows.size());
    for (std::size_t start = 0; start < rows.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(rows.size(), start + cfg.batch_size);
      std::fill(grad_w.data().begin(), grad_w.data().end(), 0.0);
      std::fill(grad_b.begin(), grad_b.end(), 0.0);
      for (std::size_t t = start; t < end; ++t) {
        const std::size_t i = rows[order[t]];
        auto x = ds.features.row(i);
        const int y = ds.labels[i];
        auto q = m.group_probs(x, y);
        q[static_cast<std::size_t>(ds.side_info[i])] -= 1.0;
        for (std::size_t c = 0; c < g; ++c) {
          grad_b[c] += q[c];
          grad_w(dim + static_cast<std::size_t>(y), c) += q[c];
        }
        for (std::size_t p = 0; p < dim; ++p) {
          if (x[p] == 0.0) continue;
          for (std::size_t c = 0; c < g; ++c) grad_w(p, c) += x[p] * q[c];
        }
      }
      const double step = cfg.lr / static_cast<double>(end - start);
      for (std::size_t j = 0; j < grad_w.data().size(); ++j) m.weights.data()[j] -= step * grad_w.data()[j];
      for (std::size_t c = 0; c < g; ++c) m.bias[c] -= step * grad_b[c];
    }
  }
  return m;
}

double side_log_likelihood(const SideModel& side, const LabeledDataset& ds) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!ds.has_side_info() || ds.side_info[i] == kMissingGroup) continue;
    auto q = side.group_probs(ds.features.row(i), ds.labels[i]);
    total += std::log(std::max(q[static_cast<std::size_t>(ds.side_info[i])], kLogFloor));
    ++n;
  }
  if (n == 0) throw std::invalid_argument("no examples with observed side information");
  return total / static_cast<double>(n);
}

std::vector<int> mask_side_info(std::span<const int> side_info, double availability, RngSeed seed) {
  if (!(availability >= 0.0 && availability <= 1.0)) throw std::invalid_argument("availability must lie in [0, 1]");
  Rng rng(seed);
  std::vector<int> out(side_info.begin(), side_info.end());
  for (auto& z : out) {
    const bool keep = rng.uniform() < availability;
    if (!keep) z = kMissingGroup;
  }
  return out;
}

SiReport evaluate_si(const LabeledDataset& cal, const LabeledDataset& test,
                     const std::vector<ProbVector>& cal_probs, const std::vector<ProbVector>& test_probs,
                     const SideModel& side, const SiEvalConfig& cfg) {
  cfg.score.validate();
  if (!(cfg.availability >= 0.0 && cfg.availability <= 1.0)) {
    throw std::invalid_argument("availability must lie in [0, 1]");
  }
  if (cal_probs.size() != cal.size() || test_probs.size() != test.size()) {
    throw std::invalid_argument("probability rows must match the datasets");
  }
  if (cal.size() == 0 || test.size() == 0) throw std::invalid_argument("empty calibration or test set");
  auto observed = [&](const LabeledDataset& ds, std::uint64_t stream) {
    if (!ds.has_side_info()) return std::vector<int>(ds.size(), kMissingGroup);
    return mask_side_info(ds.side_info, cfg.availability, derive_seed(cfg.seed, stream));
  };
  const auto cal_z = observed(cal, 0);
  const auto test_z = observed(test, 1);
  const RngSeed cal_jitter = derive_seed(cfg.seed, 2);
  const RngSeed test_jitter = derive_seed(cfg.seed, 3);

  std::vector<double> cal_scores(cal.size());
  std::map<int, std::vector<double>> by_group;
  std::vector<double> missing_scores;
  for (std::size_t i = 0; i < cal.size(); ++i) {
    auto p = effective_probs(cal_probs[i], side, cal.features.row(i), cal_z[i]);
    cal_scores[i] = score(cfg.score, p, cal.labels[i], derive_seed(cal_jitter, i));
    (cal_z[i] == kMissingGroup ? missing_scores : by_group[cal_z[i]]).push_back(cal_scores[i]);
  }
  const auto global = calibrate(cal_scores, cfg.alpha);
  std::optional<GroupCalibration> groups;
  if (cfg.mondrian) {
    if (!missing_scores.empty()) by_group[kMissingGroup] = missing_scores;
    groups = mondrian_calibrate(by_group, cfg.alpha, global);
  }

  std::vector<PredictionSet> sets;
  sets.reserve(test.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto p = effective_probs(test_probs[i], side, test.features.row(i), test_z[i]);
    const auto seed = derive_seed(test_jitter, i);
    const Calibration& c = groups ? groups->lookup(test_z[i]) : global;
    sets.push_back(predict_set(c, cfg.score, p, seed));
    auto best = std::max_element(p.begin(), p.end()) - p.begin();
    if (best == test.labels[i]) ++hits;
  }
  SiReport r;
  r.coverage = coverage(sets, test.labels);
  r.inefficiency = inefficiency(sets);
  r.accuracy = static_cast<double>(hits) / static_cast<double>(test.size());
  r.availability = cfg.availability;
  r.mondrian = cfg.mondrian;
  return r;
}

}  // namespace ecp
