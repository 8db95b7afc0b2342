#include "ecp/population.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <boost/math/special_functions/beta.hpp>

#include "ecp/conformal.hpp"

namespace ecp {

namespace {

struct ScoreAtom {
  double score;   // unjittered score
  double weight;  // p(x) p(y|x)
};

class ThresholdLaw {
 public:
  ThresholdLaw(std::vector<ScoreAtom> atoms, double jitter, std::size_t n, std::size_t rank)
      : atoms_(std::move(atoms)), jitter_(jitter), n_(n), rank_(rank) {
    for (const auto& a : atoms_) {
      kinks_.push_back(a.score);
      kinks_.push_back(a.score + jitter_);
    }
    std::sort(kinks_.begin(), kinks_.end());
    kinks_.erase(std::unique(kinks_.begin(), kinks_.end()), kinks_.end());
  }

  // CDF of one jittered calibration score.
  double score_cdf(double t) const {
    double f = 0.0;
    for (const auto& a : atoms_) f += a.weight * std::clamp((t - a.score) / jitter_, 0.0, 1.0);
    return std::clamp(f, 0.0, 1.0);
  }

  // P(q_hat <= t): at least `rank` of n scores fall at or below t.
  double antiderivative(double f) const {
    if (f <= 0.0) return 0.0;
    const double a = static_cast<double>(rank_);
    const double b = static_cast<double>(n_ - rank_ + 1);
    if (f >= 1.0) return 1.0 - a / (a + b);
    return f * boost::math::ibeta(a, b, f) - a / (a + b) * boost::math::ibeta(a + 1.0, b, f);
  }

  double quantile_cdf(double t) const {
    double f = score_cdf(t);
    if (f <= 0.0) return 0.0;
    if (f >= 1.0) return 1.0;
    return boost::math::ibeta(static_cast<double>(rank_), static_cast<double>(n_ - rank_ + 1), f);
  }

  // P(q_hat - u < t) with u ~ U(0, jitter): the mean of quantile_cdf over [t, t + jitter].
  // F is linear between kinks, so each piece integrates in closed form through
  // int_0^x I_u(a, b) du = x I_x(a, b) - a/(a+b) I_x(a+1, b).
  double threshold_cdf(double t) const {
    const double lo = t;
    const double hi = t + jitter_;
    std::vector<double> cuts{lo};
    for (double k : kinks_) {
      if (k > lo && k < hi) cuts.push_back(k);
    }
    cuts.push_back(hi);
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
      const double width = cuts[i + 1] - cuts[i];
      if (width <= 0.0) continue;
      const double f0 = score_cdf(cuts[i]);
      const double f1 = score_cdf(cuts[i + 1]);
      if (f1 - f0 < 1e-9) {
        total += width * quantile_cdf(0.5 * (cuts[i] + cuts[i + 1]));
      } else {
        total += width * (antiderivative(f1) - antiderivative(f0)) / (f1 - f0);
      }
    }
    return std::clamp(total / jitter_, 0.0, 1.0);
  }

 private:
  std::vector<ScoreAtom> atoms_;
  std::vector<double> kinks_;
  double jitter_;
  std::size_t n_;
  std::size_t rank_;
};

ScoreSpec without_jitter(ScoreSpec s) {
  s.jitter = 0.0;
  return s;
}

void check_inputs(const DiscreteTaskSpec& task, const std::vector<ProbVector>& model,
                  const PopulationSetup& setup) {
  task.validate();
  if (model.size() != task.support_size()) {
    throw std::invalid_argument("model needs one probability row per support point");
  }
  for (const auto& row : model) {
    if (row.size() != static_cast<std::size_t>(task.num_labels())) {
      throw std::invalid_argument("model row length differs from K");
    }
    validate_prob_vector(row);
  }
  if (!(setup.score.jitter > 0.0)) {
    throw std::invalid_argument("population evaluation needs jittered scores");
  }
  if (!(setup.alpha > 0.0 && setup.alpha < 1.0)) throw std::invalid_argument("alpha outside (0, 1)");
}

}  // namespace

EvalBatch population_batch(const DiscreteTaskSpec& task, const std::vector<ProbVector>& model,
                           const PopulationSetup& setup) {
  check_inputs(task, model, setup);
  const auto k = static_cast<std::size_t>(task.num_labels());
  const auto base = without_jitter(setup.score);

  std::vector<std::vector<double>> scores(task.support_size());
  std::vector<ScoreAtom> atoms;
  for (std::size_t x = 0; x < task.support_size(); ++x) {
    scores[x] = score_all(base, model[x]);
    for (std::size_t y = 0; y < k; ++y) {
      double w = task.marginal[x] * task.conditional[x][y];
      if (w > 0.0) atoms.push_back({scores[x][y], w});
    }
  }

  const std::size_t rank = conformal_rank(setup.n_cal, setup.alpha);
  const bool infinite = rank > setup.n_cal;
  ThresholdLaw law(atoms, setup.score.jitter, setup.n_cal, std::min(rank, setup.n_cal));

  EvalBatch batch;
  batch.n_cal = setup.n_cal;
  for (std::size_t x = 0; x < task.support_size(); ++x) {
    if (task.marginal[x] <= 0.0) continue;
    // Distinct score levels of this row, ascending.
    std::vector<double> levels = scores[x];
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());

    // Set "all labels with score <= levels[m-1]" (m = 0: empty) has probability
    // P(levels[m-1] <= T < levels[m]).
    std::vector<double> cdf_at(levels.size());
    for (std::size_t m = 0; m < levels.size(); ++m) {
      cdf_at[m] = infinite ? 0.0 : law.threshold_cdf(levels[m]);
    }
    for (std::size_t m = 0; m <= levels.size(); ++m) {
      double lower = m == 0 ? 0.0 : cdf_at[m - 1];
      double upper = m == levels.size() ? 1.0 : cdf_at[m];
      double p_set = upper - lower;
      if (p_set <= 0.0) continue;
      PredictionSet set(k);
      for (std::size_t y = 0; y < k; ++y) set.member[y] = m > 0 && scores[x][y] <= levels[m - 1];
      for (std::size_t y = 0; y < k; ++y) {
        double w = task.marginal[x] * task.conditional[x][y] * p_set;
        if (w <= 0.0) continue;
        batch.probs.push_back(model[x]);
        batch.labels.push_back(static_cast<int>(y));
        batch.sets.push_back(set);
        batch.weights.push_back(w);
      }
    }
  }
  return batch;
}

EvalBatch sample_eval_batch(const DiscreteTaskSpec& task, const std::vector<ProbVector>& model,
                            const PopulationSetup& setup, std::size_t n_eval, RngSeed seed) {
  check_inputs(task, model, setup);
  auto cal_ds = gen_discrete_task(task, setup.n_cal, derive_seed(seed, 0));
  auto test_ds = gen_discrete_task(task, n_eval, derive_seed(seed, 1));
  const RngSeed cal_jitter = derive_seed(seed, 2);
  const RngSeed test_jitter = derive_seed(seed, 3);

  std::vector<double> cal_scores(cal_ds.size());
  for (std::size_t i = 0; i < cal_ds.size(); ++i) {
    auto x = one_hot_index(cal_ds.features.row(i));
    cal_scores[i] = score(setup.score, model[x], cal_ds.labels[i], derive_seed(cal_jitter, i));
  }
  auto cal = calibrate(cal_scores, setup.alpha);

  EvalBatch batch;
  batch.n_cal = setup.n_cal;
  for (std::size_t i = 0; i < test_ds.size(); ++i) {
    auto x = one_hot_index(test_ds.features.row(i));
    batch.probs.push_back(model[x]);
    batch.labels.push_back(test_ds.labels[i]);
    batch.sets.push_back(predict_set(cal, setup.score, model[x], derive_seed(test_jitter, i)));
  }
  return batch;
}

double batch_coverage(const EvalBatch& batch) {
  batch.validate();
  CompensatedSum hit;
  CompensatedSum total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    double w = batch.weight(i);
    total.add(w);
    if (batch.sets[i].contains(batch.labels[i])) hit.add(w);
  }
  return hit.value() / total.value();
}

double batch_mean_log_size(const EvalBatch& batch) {
  batch.validate();
  CompensatedSum s;
  CompensatedSum total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    double w = batch.weight(i);
    total.add(w);
    auto size = batch.sets[i].size();
    if (size > 1) s.add(w * std::log(static_cast<double>(size)));
  }
  return s.value() / total.value();
}

}  // namespace ecp
