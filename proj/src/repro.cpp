#include "ecp/repro.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "ecp/population.hpp"

namespace ecp {

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::Pass: return "PASS";
    case Verdict::Fail: return "FAIL";
    case Verdict::Skip: return "SKIP";
  }
  return "?";
}

ReproOptions repro_options_from_env() {
  ReproOptions o;
  if (const char* dir = std::getenv("ECP_MNIST_DIR"); dir != nullptr && *dir != '\0') o.mnist_dir = dir;
  return o;
}

const std::vector<CriterionInfo>& criteria() {
  static const std::vector<CriterionInfo> all{
      {1, "coverage-sandwich", "mean SCP coverage inside [1-a, 1-a+1/(n+1)] +- 3 SE"},
      {2, "bound-validity", "population Fano bounds >= H(Y|X); DPI valid in >= 95% of resamples"},
      {3, "ordering-chain", "simple Fano <= ConfTr bound; MB Fano with uniform Q = simple Fano"},
      {4, "dpi-dominance", "exact DPI <= empirical cross-entropy"},
      {5, "gradient-check", "conformal step + six losses pass finite differences"},
      {6, "training-direction", "DPI and MB-Fano training no worse than CE + 5%; loss decreases"},
      {7, "mnist-ce", "linear MNIST model, THR at a=0.01 inefficiency in [1.8, 2.8]"},
      {8, "side-information", "side information shrinks sets; monotone in availability"},
      {9, "federated-decomposition", "entropy decomposition identity; federated bound >= H(Y|X)"},
      {10, "federated-training", "global SCP coverage valid; device-id side information helps"},
      {11, "setsize-bounds", "expected log-size lower bounds below the empirical value; MB >= simple"},
      {12, "soft-hard-consistency", "saturated soft sets match hard SCP on >= 99% of pairs"},
  };
  return all;
}

const CriterionInfo& find_criterion(const std::string& key) {
  for (const auto& c : criteria()) {
    if (c.slug == key || std::to_string(c.id) == key) return c;
  }
  throw std::invalid_argument("unknown criterion '" + key + "'");
}

namespace {

using Clock = std::chrono::steady_clock;

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

ProbVector random_prob(Rng& rng, std::size_t k, double shape = 0.7) {
  ProbVector p(k);
  double s = 0.0;
  for (auto& v : p) s += (v = rng.gamma(shape));
  for (auto& v : p) v /= s;
  return p;
}

// At most floor(alpha n) uncovered examples, no empty sets.
EvalBatch random_batch(Rng& rng, std::size_t n, std::size_t k, double alpha, bool uniform_q) {
  EvalBatch b;
  b.n_cal = 10 + rng.uniform_index(200);
  const auto max_uncovered = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(n)));
  for (std::size_t i = 0; i < n; ++i) {
    b.probs.push_back(uniform_q ? ProbVector(k, 1.0 / static_cast<double>(k)) : random_prob(rng, k));
    const auto y = rng.uniform_index(k);
    b.labels.push_back(static_cast<int>(y));
    PredictionSet s(k);
    for (std::size_t j = 0; j < k; ++j) s.member[j] = rng.uniform() < 0.4;
    const bool cover = i >= max_uncovered || rng.uniform() < 0.5;
    s.member[y] = cover;
    if (!cover && s.size() == 0) s.member[(y + 1) % k] = true;
    b.sets.push_back(s);
  }
  return b;
}

struct CoverageTally {
  std::size_t hits = 0;
  std::size_t total = 0;
  std::vector<double> per_split;

  void add(double cov, std::size_t n) {
    hits += static_cast<std::size_t>(std::llround(cov * static_cast<double>(n)));
    total += n;
    per_split.push_back(cov);
  }
  double mean() const { return static_cast<double>(hits) / static_cast<double>(total); }
  double binomial_se() const {
    const double c = mean();
    return std::sqrt(c * (1.0 - c) / static_cast<double>(total));
  }
  double split_se() const {
    const double m = std::accumulate(per_split.begin(), per_split.end(), 0.0) / per_split.size();
    double v = 0.0;
    for (double c : per_split) v += (c - m) * (c - m);
    return std::sqrt(v / static_cast<double>(per_split.size() - 1) / static_cast<double>(per_split.size()));
  }
};

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

// ---------------------------------------------------------------------------------------------

CriterionResult coverage_sandwich() {
  GaussianMixtureSpec spec;
  spec.num_labels = 4;
  spec.dim = 2;
  spec.means = Matrix::from_rows({{1.5, 0.0}, {0.0, 1.5}, {-1.5, 0.0}, {0.0, -1.5}});
  spec.diag_vars = Matrix(4, 2, 1.0);
  spec.priors = {0.4, 0.3, 0.2, 0.1};
  const ScoreSpec thr{ScoreKind::ThrProb, 0, 0.0, 1e-6};
  const std::size_t n = 200, n_test = 200;
  const int reps = 1000;

  CriterionResult r;
  bool ok = true;
  std::ostringstream detail;
  for (double alpha : {0.05, 0.1}) {
    CoverageTally tally;
    for (int rep = 0; rep < reps; ++rep) {
      const RngSeed seed = derive_seed(RngSeed{101}, static_cast<std::uint64_t>(rep));
      auto ds = gen_gaussian_mixture(spec, n + n_test, seed);
      const RngSeed jitter = derive_seed(seed, 1);
      std::vector<double> cal;
      for (std::size_t i = 0; i < n; ++i) {
        cal.push_back(score(thr, gmm_posterior(spec, ds.features.row(i)), ds.labels[i], derive_seed(jitter, i)));
      }
      const auto c = calibrate(cal, alpha);
      std::size_t hit = 0;
      for (std::size_t i = n; i < n + n_test; ++i) {
        auto set = predict_set(c, thr, gmm_posterior(spec, ds.features.row(i)), derive_seed(jitter, i));
        hit += set.contains(ds.labels[i]) ? 1 : 0;
      }
      tally.add(static_cast<double>(hit) / n_test, n_test);
    }
    const double lo = 1.0 - alpha, hi = 1.0 - alpha + 1.0 / (n + 1.0), se = tally.binomial_se();
    const bool inside = tally.mean() >= lo - 3.0 * se && tally.mean() <= hi + 3.0 * se;
    ok = ok && inside;
    r.measured.push_back(Json{{"alpha", alpha}, {"mean_coverage", tally.mean()}, {"lower", lo}, {"upper", hi},
                              {"binomial_se", se}, {"inside", inside}});
    detail << "a=" << alpha << ": " << fmt(tally.mean(), 6) << " in [" << fmt(lo, 4) << ", " << fmt(hi, 6)
           << "] +- " << fmt(3 * se, 2) << "; ";
  }
  r.verdict = ok ? Verdict::Pass : Verdict::Fail;
  r.detail = detail.str();
  return r;
}

struct NamedTask {
  std::string name;
  DiscreteTaskSpec task;
};

std::vector<NamedTask> validity_tasks() {
  const double third = 1.0 / 3.0;
  return {
      {"deterministic", {{third, third, third}, {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}}, {}}},
      {"uniform", {{0.5, 0.5}, {{third, third, third}, {third, third, third}}, {}}},
      {"mixed",
       {{0.3, 0.2, 0.25, 0.25}, {{0.7, 0.2, 0.1}, {0.5, 0.5, 0.0}, {1.0, 0.0, 0.0}, {0.4, 0.35, 0.25}}, {}}},
  };
}

std::vector<ProbVector> smoothed(const DiscreteTaskSpec& task, double keep) {
  std::vector<ProbVector> q;
  for (const auto& row : task.conditional) {
    ProbVector p(row.size());
    for (std::size_t y = 0; y < row.size(); ++y) p[y] = keep * row[y] + (1.0 - keep) / static_cast<double>(row.size());
    q.push_back(p);
  }
  return q;
}

CriterionResult bound_validity() {
  CriterionResult r;
  bool ok = true;
  std::ostringstream detail;
  double worst_gap = std::numeric_limits<double>::infinity();
  for (const auto& [name, task] : validity_tasks()) {
    const double h = discrete_exact_entropy(task);
    const auto q = smoothed(task, 0.8);
    Json per_task{{"task", name}, {"entropy", h}, {"population", Json::array()}};
    for (double alpha : {0.05, 0.1, 0.2}) {
      PopulationSetup setup{ScoreSpec{ScoreKind::ThrProb, 0, 0.0, 1e-3}, alpha, 100};
      const auto b = population_batch(task, q, setup);
      const double simple = simple_fano_bound(b, alpha).value;
      const double mb = mb_fano_bound(b, alpha).value;
      const double list = list_fano_bound(b, alpha);
      const bool valid = simple >= h - 1e-9 && mb >= h - 1e-9 && list >= h - 1e-9;
      worst_gap = std::min({worst_gap, simple - h, mb - h, list - h});
      ok = ok && valid;
      per_task["population"].push_back(
          Json{{"alpha", alpha}, {"simple_fano", simple}, {"mb_fano", mb}, {"list_fano", list}, {"valid", valid}});
    }
    const double alpha = 0.1, delta = 0.05;
    PopulationSetup setup{ScoreSpec{ScoreKind::ThrProb, 0, 0.0, 1e-3}, alpha, 100};
    const int resamples = 2000;
    int valid = 0;
    for (int s = 0; s < resamples; ++s) {
      auto b = sample_eval_batch(task, q, setup, 200, derive_seed(RngSeed{202}, static_cast<std::uint64_t>(s)));
      if (dpi_bound(b, alpha, delta).value >= h) ++valid;
    }
    const double frac = static_cast<double>(valid) / resamples;
    ok = ok && frac >= 0.95;
    per_task["dpi_valid_fraction"] = frac;
    r.measured.push_back(per_task);
    detail << name << ": dpi " << fmt(frac, 4) << "; ";
  }
  detail << "min population gap " << fmt(worst_gap, 4);
  r.verdict = ok ? Verdict::Pass : Verdict::Fail;
  r.detail = detail.str();
  return r;
}

CriterionResult ordering_chain() {
  Rng rng(RngSeed{303});
  const double alpha = 0.1;
  int dominated = 0, reduced = 0;
  double worst_dom = -std::numeric_limits<double>::infinity(), worst_red = 0.0;
  for (int t = 0; t < 100; ++t) {
    auto b = random_batch(rng, 200, 6, alpha, false);
    double mean_size = 0.0;
    for (const auto& s : b.sets) mean_size += static_cast<double>(s.size()) / b.size();
    const double simple = simple_fano_bound(b, alpha).value;
    const double gap = simple - conftr_bound(mean_size, alpha, b.n_cal, 6);
    worst_dom = std::max(worst_dom, gap);
    if (gap <= 1e-9) ++dominated;

    auto u = random_batch(rng, 200, 6, alpha, true);
    const double diff = std::abs(mb_fano_bound(u, alpha).value - simple_fano_bound(u, alpha).value);
    worst_red = std::max(worst_red, diff);
    if (diff <= 1e-9) ++reduced;
  }
  CriterionResult r;
  r.verdict = dominated == 100 && reduced == 100 ? Verdict::Pass : Verdict::Fail;
  r.measured = Json{{"dominated", dominated}, {"max_simple_minus_conftr", worst_dom},
                    {"reduced", reduced},     {"max_uniform_mb_gap", worst_red}};
  r.detail = "simple<=conftr " + std::to_string(dominated) + "/100 (max gap " + fmt(worst_dom) +
             "), uniform MB=simple " + std::to_string(reduced) + "/100 (max diff " + fmt(worst_red, 2) + ")";
  return r;
}

CriterionResult dpi_dominance() {
  Rng rng(RngSeed{404});
  int ok = 0;
  double worst = -std::numeric_limits<double>::infinity();
  for (int t = 0; t < 100; ++t) {
    auto b = random_batch(rng, 150, 5, 0.1, false);
    const double gap = dpi_exact(b) - cross_entropy(b);
    worst = std::max(worst, gap);
    if (gap <= 1e-9) ++ok;
  }
  CriterionResult r;
  r.verdict = ok == 100 ? Verdict::Pass : Verdict::Fail;
  r.measured = Json{{"dominated", ok}, {"max_dpi_minus_ce", worst}};
  r.detail = std::to_string(ok) + "/100 batches, max(dpi_exact - CE) = " + fmt(worst);
  return r;
}

CriterionResult gradient_check() {
  const std::vector<int> labels{0, 1, 2, 3, 1, 2, 0, 3};
  const double alpha = 0.25;
  CriterionResult r;
  bool ok = true;
  std::ostringstream detail;
  for (auto kind : {LossKind::Ce, LossKind::Conftr, LossKind::ConftrClass, LossKind::Fano, LossKind::MbFano,
                    LossKind::Dpi}) {
    double worst = 0.0;
    int passed = 0;
    for (int point = 0; point < 20; ++point) {
      const RelaxConfig relax{1.0, 0.5, point % 2 == 0 ? SwapKind::Logistic : SwapKind::Cauchy};
      ad::ScalarFn f = [&](ad::Tape&, const std::vector<ad::Var>& in) {
        auto lp = ad::log_softmax(in[0]);
        if (kind == LossKind::Ce) return loss_ce(lp, labels);
        auto step = conformal_step(lp, labels, alpha, relax);
        switch (kind) {
          case LossKind::Conftr: return loss_conftr(step.soft_sets);
          case LossKind::ConftrClass: return loss_conftr_class(step.soft_sets, step.test_labels, 0.5);
          case LossKind::Fano: return loss_fano(step.soft_sets, step.test_labels, alpha, step.n_cal);
          case LossKind::MbFano:
            return loss_mb_fano(step.soft_sets, step.test_log_probs, step.test_labels, alpha, step.n_cal);
          default:
            return loss_dpi(step.soft_sets, step.test_log_probs, step.test_labels, alpha, step.n_cal, 0.05);
        }
      };
      Rng rng(derive_seed(RngSeed{505}, static_cast<std::uint64_t>(point)));
      ad::Tensor logits(8, 4);
      for (auto& v : logits.data) v = 2.0 * rng.normal();
      const auto report = ad::grad_check(f, {logits}, 1e-5, 1e-4);
      worst = std::max(worst, report.max_rel_error);
      if (report.passed) ++passed;
    }
    ok = ok && passed == 20;
    r.measured.push_back(Json{{"loss", to_string(kind)}, {"passed", passed}, {"max_rel_error", worst}});
    detail << to_string(kind) << " " << passed << "/20; ";
  }
  r.verdict = ok ? Verdict::Pass : Verdict::Fail;
  r.detail = detail.str();
  return r;
}

// Mean THR inefficiency and coverage of `model` at alpha over one cal/test pair.
std::pair<double, double> thr_eval(const Model& model, const LabeledDataset& cal, const LabeledDataset& test,
                                   double alpha) {
  const ScoreSpec thr;
  auto cp = predict_probs(model, cal.features);
  auto tp = predict_probs(model, test.features);
  std::vector<double> scores;
  for (std::size_t i = 0; i < cal.size(); ++i) scores.push_back(score(thr, cp[i], cal.labels[i]));
  const auto c = calibrate(scores, alpha);
  std::vector<PredictionSet> sets;
  for (const auto& p : tp) sets.push_back(predict_set(c, thr, p));
  return {inefficiency(sets), coverage(sets, test.labels)};
}

CriterionResult training_direction() {
  const auto spec = make_ring_mixture(10, 5, 2.0, 1.0);
  const double alpha = 0.1;
  const int seeds = 5;
  const std::vector<LossKind> losses{LossKind::Ce, LossKind::Dpi, LossKind::MbFano};
  std::vector<std::vector<double>> ineff(losses.size());
  bool decreasing = true;
  Json runs = Json::array();
  for (int s = 0; s < seeds; ++s) {
    const RngSeed seed = derive_seed(RngSeed{606}, static_cast<std::uint64_t>(s));
    auto train_set = gen_gaussian_mixture(spec, 5000, derive_seed(seed, 0));
    auto cal = gen_gaussian_mixture(spec, 2000, derive_seed(seed, 1));
    auto test = gen_gaussian_mixture(spec, 2000, derive_seed(seed, 2));
    const auto init = init_model(ModelSpec{{spec.dim, spec.num_labels}, Activation::Relu}, derive_seed(seed, 3));
    for (std::size_t l = 0; l < losses.size(); ++l) {
      TrainConfig cfg;
      cfg.loss = losses[l];
      cfg.alpha_train = alpha;
      cfg.batch_size = 100;
      cfg.lr = 0.05;
      cfg.epochs = 20;
      cfg.relax = RelaxConfig{10.0, 0.1, SwapKind::Cauchy};
      cfg.seed = derive_seed(seed, 4);
      auto result = train(init, train_set, cfg);
      const auto [ie, cov] = thr_eval(result.model, cal, test, alpha);
      ineff[l].push_back(ie);
      const bool dec = result.history[4].mean_loss < result.history[0].mean_loss;
      decreasing = decreasing && dec;
      Json losses_first5 = Json::array();
      for (int e = 0; e < 5; ++e) losses_first5.push_back(result.history[static_cast<std::size_t>(e)].mean_loss);
      runs.push_back(Json{{"seed", s}, {"loss", to_string(losses[l])}, {"inefficiency", ie}, {"coverage", cov},
                          {"first_epoch_losses", losses_first5}, {"decreasing", dec}});
    }
  }
  const double ce = mean_of(ineff[0]), dpi = mean_of(ineff[1]), mb = mean_of(ineff[2]);
  const bool ok = dpi <= 1.05 * ce && mb <= 1.05 * ce && decreasing;
  CriterionResult r;
  r.verdict = ok ? Verdict::Pass : Verdict::Fail;
  r.measured = Json{{"ce", ce}, {"dpi", dpi}, {"mb_fano", mb}, {"tolerance", 1.05}, {"loss_decreasing", decreasing},
                    {"runs", runs}};
  r.detail = "inefficiency CE " + fmt(ce) + ", DPI " + fmt(dpi) + ", MB-Fano " + fmt(mb) + " (limit " +
             fmt(1.05 * ce) + "); first-5-epoch loss decreasing: " + (decreasing ? "yes" : "no");
  return r;
}

std::optional<std::string> find_file(const std::string& dir, std::initializer_list<const char*> names) {
  for (const char* n : names) {
    auto p = std::filesystem::path(dir) / n;
    if (std::filesystem::exists(p)) return p.string();
  }
  return std::nullopt;
}

CriterionResult mnist_ce(const ReproOptions& opts) {
  CriterionResult r;
  if (!opts.mnist_dir) {
    r.verdict = Verdict::Skip;
    r.detail = "ECP_MNIST_DIR not set";
    return r;
  }
  const auto& dir = *opts.mnist_dir;
  auto tr_x = find_file(dir, {"train-images-idx3-ubyte", "train-images.idx3-ubyte"});
  auto tr_y = find_file(dir, {"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"});
  auto te_x = find_file(dir, {"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"});
  auto te_y = find_file(dir, {"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"});
  if (!tr_x || !tr_y || !te_x || !te_y) {
    r.verdict = Verdict::Skip;
    r.detail = "uncompressed MNIST IDX files not found in " + dir;
    return r;
  }
  const auto train_set = load_idx(*tr_x, *tr_y);
  const auto test_set = load_idx(*te_x, *te_y);
  TrainConfig cfg;
  cfg.loss = LossKind::Ce;
  cfg.batch_size = 100;
  cfg.lr = 0.01;
  cfg.momentum = 0.9;
  cfg.epochs = 50;
  cfg.seed = RngSeed{707};
  const auto model = train(init_model(ModelSpec{{static_cast<int>(train_set.dim()), 10}, Activation::Relu},
                                      RngSeed{708}),
                           train_set, cfg)
                         .model;
  std::vector<double> ineff;
  for (int s = 0; s < 10; ++s) {
    auto [cal, test] = split(test_set, 0.5, derive_seed(RngSeed{709}, static_cast<std::uint64_t>(s)));
    ineff.push_back(thr_eval(model, cal, test, 0.01).first);
  }
  const double m = mean_of(ineff);
  double var = 0.0;
  for (double v : ineff) var += (v - m) * (v - m);
  const double sd = std::sqrt(var / (ineff.size() - 1));
  r.verdict = m >= 1.8 && m <= 2.8 ? Verdict::Pass : Verdict::Fail;
  r.measured = Json{{"mean_inefficiency", m}, {"std", sd}, {"splits", ineff}, {"reference", 2.29}};
  r.detail = "THR a=0.01 inefficiency " + fmt(m) + " +- " + fmt(sd, 2) + " (accepted [1.8, 2.8])";
  return r;
}

CriterionResult side_information() {
  const auto spec = make_grouped_mixture(4, 3, 2.0, 0.5);
  const auto side_data = gen_gaussian_mixture(spec, 2000, RngSeed{801});
  SideTrainConfig scfg;
  scfg.epochs = 30;
  scfg.lr = 1.0;
  scfg.seed = RngSeed{802};
  const auto side = train_side_model(side_data, scfg);
  const auto data = gen_gaussian_mixture(spec, 4000, RngSeed{803});
  const std::vector<double> levels{0.0, 0.3, 1.0};
  std::vector<std::vector<double>> ineff(levels.size());
  std::vector<double> coverage_full;
  int better = 0;
  for (int s = 0; s < 10; ++s) {
    const RngSeed seed = derive_seed(RngSeed{804}, static_cast<std::uint64_t>(s));
    auto [cal, test] = split(data, 0.5, seed);
    std::vector<ProbVector> cp, tp;
    for (std::size_t i = 0; i < cal.size(); ++i) cp.push_back(gmm_posterior(spec, cal.features.row(i)));
    for (std::size_t i = 0; i < test.size(); ++i) tp.push_back(gmm_posterior(spec, test.features.row(i)));
    for (std::size_t l = 0; l < levels.size(); ++l) {
      SiEvalConfig cfg;
      cfg.alpha = 0.1;
      cfg.availability = levels[l];
      cfg.seed = derive_seed(seed, 1);
      const auto rep = evaluate_si(cal, test, cp, tp, side, cfg);
      ineff[l].push_back(rep.inefficiency);
      if (l + 1 == levels.size()) coverage_full.push_back(rep.coverage);
    }
    if (ineff.back().back() <= ineff.front().back()) ++better;
  }
  const double m0 = mean_of(ineff[0]), m3 = mean_of(ineff[1]), m1 = mean_of(ineff[2]);
  const bool monotone = m0 >= m3 && m3 >= m1;
  CriterionResult r;
  r.verdict = better == 10 && monotone ? Verdict::Pass : Verdict::Fail;
  r.measured = Json{{"availability", levels},
                    {"mean_inefficiency", {m0, m3, m1}},
                    {"splits_full_si_no_worse", better},
                    {"mean_coverage_full_si", mean_of(coverage_full)},
                    {"side_log_likelihood", side_log_likelihood(side, side_data)}};
  r.detail = "inefficiency at availability 0/0.3/1: " + fmt(m0) + " / " + fmt(m3) + " / " + fmt(m1) +
             "; full SI no worse on " + std::to_string(better) + "/10 splits";
  return r;
}

CriterionResult federated_decomposition() {
  Rng rng(RngSeed{909});
  PopulationSetup setup{ScoreSpec{ScoreKind::ThrProb, 0, 0.0, 1e-3}, 0.1, 50};
  int identity = 0, bounded = 0;
  double worst_identity = 0.0, worst_gap = std::numeric_limits<double>::infinity();
  for (int t = 0; t < 100; ++t) {
    JointTable joint(4, std::vector<std::vector<double>>(3, std::vector<double>(2)));
    double total = 0.0;
    for (auto& a : joint) {
      for (auto& b : a) {
        for (auto& v : b) total += (v = rng.gamma(0.8));
      }
    }
    for (auto& a : joint) {
      for (auto& b : a) {
        for (auto& v : b) v /= total;
      }
    }
    const auto d = entropy_decomposition(joint);
    const double err = std::abs(d.h_y_given_x - d.avg_local - d.mi);
    worst_identity = std::max(worst_identity, err);
    if (err <= 1e-12) ++identity;
    std::vector<ProbVector> q;
    for (int x = 0; x < 4; ++x) q.push_back(random_prob(rng, 3, 1.0));
    const auto check = federated_bound_check(joint, q, setup);
    const double gap = std::min({check.simple_fano, check.mb_fano, check.list_fano}) - check.h_y_given_x;
    worst_gap = std::min(worst_gap, gap);
    if (gap >= -1e-9) ++bounded;
  }
  CriterionResult r;
  r.verdict = identity == 100 && bounded == 100 ? Verdict::Pass : Verdict::Fail;
  r.measured = Json{{"identity_ok", identity}, {"max_identity_error", worst_identity}, {"bound_ok", bounded},
                    {"min_bound_minus_entropy", worst_gap}};
  r.detail = "identity " + std::to_string(identity) + "/100 (max err " + fmt(worst_identity, 2) + "), bound " +
             std::to_string(bounded) + "/100 (min slack " + fmt(worst_gap) + ")";
  return r;
}

CriterionResult federated_training() {
  const auto spec = make_grouped_mixture(4, 3, 2.0, 0.5);
  const int m = 10;
  const auto data = gen_gaussian_mixture(spec, 6000, RngSeed{1001});
  auto parts = dirichlet_partition(data, m, 1.0, RngSeed{1002});
  std::vector<LabeledDataset> devices;
  FedEvalData pool;
  LabeledDataset eval_all;
  eval_all.num_labels = spec.num_labels;
  eval_all.num_groups = m;
  eval_all.features = Matrix(0, static_cast<std::size_t>(spec.dim));
  std::vector<std::vector<double>> eval_rows;
  for (int j = 0; j < m; ++j) {
    auto [train_part, eval_part] = split(parts[static_cast<std::size_t>(j)], 0.6,
                                         derive_seed(RngSeed{1003}, static_cast<std::uint64_t>(j)));
    train_part.side_info.clear();
    train_part.num_groups = 0;
    devices.push_back(train_part);
    for (std::size_t i = 0; i < eval_part.size(); ++i) {
      auto row = eval_part.features.row(i);
      eval_rows.emplace_back(row.begin(), row.end());
      eval_all.labels.push_back(eval_part.labels[i]);
      eval_all.side_info.push_back(j);
    }
  }
  eval_all.features = Matrix::from_rows(eval_rows);

  FederatedConfig cfg;
  cfg.devices = m;
  cfg.dirichlet_conc = 1.0;
  cfg.rounds = 40;
  cfg.base.loss = LossKind::MbFano;
  cfg.base.alpha_train = 0.1;
  cfg.base.batch_size = 50;
  cfg.base.lr = 0.05;
  cfg.base.relax = RelaxConfig{10.0, 0.1, SwapKind::Cauchy};
  cfg.seed = RngSeed{1004};
  const auto init = init_global_model(
      init_model(ModelSpec{{spec.dim, spec.num_labels}, Activation::Relu}, RngSeed{1005}), m, RngSeed{1006});
  const auto result = federated_train(init, devices, cfg);

  const double alpha = 0.1;
  const ScoreSpec thr{ScoreKind::ThrProb, 0, 0.0, 1e-6};
  CoverageTally plain, with_si;
  std::vector<double> ineff, ineff_si;
  std::size_t n_cal = 0;
  for (int s = 0; s < 10; ++s) {
    const RngSeed seed = derive_seed(RngSeed{1007}, static_cast<std::uint64_t>(s));
    auto [cal, test] = split(eval_all, 0.5, seed);
    n_cal = cal.size();
    const auto met = evaluate_global(result.model, FedEvalData{cal, test}, thr, alpha, derive_seed(seed, 1));
    plain.add(met.coverage, test.size());
    with_si.add(met.coverage_si, test.size());
    ineff.push_back(met.inefficiency);
    ineff_si.push_back(met.inefficiency_si);
  }
  const double lo = 1.0 - alpha, hi = 1.0 - alpha + 1.0 / (static_cast<double>(n_cal) + 1.0);
  auto inside = [&](const CoverageTally& t) {
    const double se = std::max(t.binomial_se(), t.split_se());
    return t.mean() >= lo - 3.0 * se && t.mean() <= hi + 3.0 * se;
  };
  const double mi = mean_of(ineff), ms = mean_of(ineff_si);
  const bool ok = inside(plain) && inside(with_si) && ms < mi;
  CriterionResult r;
  r.verdict = ok ? Verdict::Pass : Verdict::Fail;
  Json rounds = Json::array();
  for (const auto& h : result.history) rounds.push_back(h.objective);
  const double se = std::max(plain.binomial_se(), plain.split_se());
  const double se_si = std::max(with_si.binomial_se(), with_si.split_se());
  r.measured = Json{{"coverage", plain.mean()},  {"coverage_se", se},         {"coverage_si", with_si.mean()},
                    {"coverage_si_se", se_si},   {"sandwich", {lo, hi}},      {"inefficiency", mi},
                    {"inefficiency_si", ms},     {"round_objectives", rounds}};
  r.detail = "coverage " + fmt(plain.mean()) + " (se " + fmt(se) + ") / +SI " + fmt(with_si.mean()) + " (se " +
             fmt(se_si) + ") in [" + fmt(lo) + ", " + fmt(hi) + "] +- 3 se; inefficiency " + fmt(mi) + " -> +SI " +
             fmt(ms);
  return r;
}

CriterionResult setsize_bounds() {
  const DiscreteTaskSpec task{
      {0.25, 0.25, 0.25, 0.25},
      {{0.6, 0.25, 0.1, 0.05}, {0.4, 0.4, 0.15, 0.05}, {0.3, 0.3, 0.2, 0.2}, {0.85, 0.1, 0.05, 0.0}},
      {}};
  const double h = discrete_exact_entropy(task);
  const std::size_t n = 10000;
  bool ok = true;
  CriterionResult r;
  std::ostringstream detail;
  for (double alpha : {0.01, 0.02, 0.05, 0.1, 0.2}) {
    PopulationSetup setup{ScoreSpec{ScoreKind::ThrProb, 0, 0.0, 1e-3}, alpha, n};
    const auto b = population_batch(task, task.conditional, setup);
    const double empirical = batch_mean_log_size(b);
    const double simple = expected_logsize_lb_simple(h, alpha, 4);
    const double mb = expected_logsize_lb_mb(h, alpha, n, 4, b);
    const bool row_ok = simple <= empirical + 1e-6 && mb <= empirical + 1e-6 && mb >= simple - 1e-6;
    ok = ok && row_ok;
    r.measured.push_back(Json{{"alpha", alpha}, {"empirical", empirical}, {"simple", simple}, {"model_based", mb},
                              {"ok", row_ok}});
    detail << "a=" << alpha << ": " << fmt(simple, 3) << " <= " << fmt(mb, 3) << " <= " << fmt(empirical, 3) << "; ";
  }
  r.verdict = ok ? Verdict::Pass : Verdict::Fail;
  r.detail = detail.str();
  return r;
}

CriterionResult soft_hard_consistency() {
  const RelaxConfig relax{1e4, 1e-3, SwapKind::Logistic};
  const double alpha = 0.1;
  const std::size_t b = 64, k = 5;
  std::size_t agree = 0, total = 0;
  for (int t = 0; t < 100; ++t) {
    Rng rng(derive_seed(RngSeed{1201}, static_cast<std::uint64_t>(t)));
    ad::Tensor logits(b, k);
    for (auto& v : logits.data) v = 2.0 * rng.normal();
    std::vector<int> labels(b);
    for (auto& y : labels) y = static_cast<int>(rng.uniform_index(k));
    ad::Tape tape;
    auto lp = ad::log_softmax(tape.constant(logits));
    const auto step = conformal_step(lp, labels, alpha, relax);
    const auto& lpv = lp.value();
    std::vector<double> cal;
    for (std::size_t i = 0; i < step.n_cal; ++i) cal.push_back(-lpv(i, static_cast<std::size_t>(labels[i])));
    const auto c = calibrate(cal, alpha);
    const auto& soft = step.soft_sets.value();
    for (std::size_t i = 0; i < soft.rows; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const bool hard = -lpv(step.n_cal + i, j) <= c.q_hat;
        const bool rounded = soft(i, j) >= 0.5;
        agree += hard == rounded ? 1 : 0;
        ++total;
      }
    }
  }
  const double frac = static_cast<double>(agree) / static_cast<double>(total);
  CriterionResult r;
  r.verdict = frac >= 0.99 ? Verdict::Pass : Verdict::Fail;
  r.measured = Json{{"agreement", frac}, {"pairs", total}};
  r.detail = "agreement " + fmt(frac, 6) + " over " + std::to_string(total) + " pairs";
  return r;
}

double time_limit_seconds(int id) {
  switch (id) {
    case 1: return 60.0;
    case 2: return 120.0;
    case 7: return 900.0;
    default: return std::numeric_limits<double>::infinity();
  }
}

}  // namespace

CriterionResult run_criterion(int id, const ReproOptions& opts) {
  const auto& info = find_criterion(std::to_string(id));
  const auto start = Clock::now();
  CriterionResult r;
  switch (id) {
    case 1: r = coverage_sandwich(); break;
    case 2: r = bound_validity(); break;
    case 3: r = ordering_chain(); break;
    case 4: r = dpi_dominance(); break;
    case 5: r = gradient_check(); break;
    case 6: r = training_direction(); break;
    case 7: r = mnist_ce(opts); break;
    case 8: r = side_information(); break;
    case 9: r = federated_decomposition(); break;
    case 10: r = federated_training(); break;
    case 11: r = setsize_bounds(); break;
    case 12: r = soft_hard_consistency(); break;
    default: throw std::invalid_argument("unknown criterion id");
  }
  r.id = info.id;
  r.slug = info.slug;
  while (!r.detail.empty() && (r.detail.back() == ' ' || r.detail.back() == ';')) r.detail.pop_back();
  r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  if (r.verdict == Verdict::Pass && r.seconds > time_limit_seconds(id)) {
    r.verdict = Verdict::Fail;
    r.detail += "; runtime " + fmt(r.seconds, 3) + " s exceeds " + fmt(time_limit_seconds(id), 3) + " s";
  }
  return r;
}

std::string format_result(const CriterionResult& r) {
  std::ostringstream s;
  s << to_string(r.verdict) << "  " << std::setw(2) << r.id << " " << std::left << std::setw(24) << r.slug << " "
    << r.detail << "  (" << std::fixed << std::setprecision(1) << r.seconds << " s)";
  return s.str();
}

void to_json(Json& j, const CriterionResult& r) {
  j = Json{{"id", r.id},         {"slug", r.slug},         {"verdict", to_string(r.verdict)},
           {"detail", r.detail}, {"seconds", r.seconds},   {"measured", r.measured}};
}

}  // namespace ecp
