#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ecp/bounds.hpp"
#include "ecp/datagen.hpp"
#include "ecp/training.hpp"

using namespace ecp;

namespace {

ad::Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double scale) {
  ad::Tensor t(r, c);
  for (auto& v : t.data) v = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

struct HardFixture {
  EvalBatch batch;
  ad::Tensor sets;
  ad::Tensor log_probs;
};

HardFixture hard_fixture(std::size_t n, std::size_t k, RngSeed seed) {
  Rng rng(seed);
  HardFixture f;
  f.batch.n_cal = 40;
  f.sets = ad::Tensor(n, k);
  f.log_probs = ad::Tensor(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logits(k);
    for (auto& v : logits) v = 2.0 * rng.normal();
    auto p = softmax(logits);
    int y = static_cast<int>(rng.uniform_index(k));
    PredictionSet s(k);
    for (std::size_t j = 0; j < k; ++j) s.member[j] = rng.uniform() < 0.5;
    s.member[static_cast<std::size_t>(y)] = i % 5 != 0;
    if (s.size() == 0) s.member[(static_cast<std::size_t>(y) + 1) % k] = true;
    if (s.size() == k) s.member[(static_cast<std::size_t>(y) + 1) % k] = false;
    for (std::size_t j = 0; j < k; ++j) {
      f.sets(i, j) = s.member[j] ? 1.0 : 0.0;
      f.log_probs(i, j) = std::log(p[j]);
    }
    f.batch.probs.push_back(p);
    f.batch.labels.push_back(y);
    f.batch.sets.push_back(s);
  }
  return f;
}

LabeledDataset separable(std::size_t n, RngSeed seed) {
  Rng rng(seed);
  LabeledDataset ds;
  ds.num_labels = 3;
  ds.features = Matrix(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    int y = static_cast<int>(i % 3);
    double angle = 2.0 * M_PI * y / 3.0;
    ds.features(i, 0) = 3.0 * std::cos(angle) + 0.3 * rng.normal();
    ds.features(i, 1) = 3.0 * std::sin(angle) + 0.3 * rng.normal();
    ds.labels.push_back(y);
  }
  return ds;
}

}  // namespace

TEST_CASE("model shapes and init range") {
  ModelSpec spec{{4, 8, 3}, Activation::Relu};
  CHECK(spec.num_params() == 5 * 8 + 9 * 3);
  auto m = init_model(spec, RngSeed{7});
  for (std::size_t i = 0; i < 40; ++i) CHECK(std::abs(m.params[i]) <= 0.5);
  for (std::size_t i = 40; i < m.params.size(); ++i) CHECK(std::abs(m.params[i]) <= 1.0 / std::sqrt(8.0));
  CHECK(init_model(spec, RngSeed{7}) == m);
  CHECK_THROWS(ModelSpec{{4}, Activation::Relu}.validate());
}

TEST_CASE("zero weights predict uniform; tape and plain forward agree") {
  ModelSpec spec{{3, 5, 4}, Activation::Tanh};
  Model zero{spec, std::vector<double>(spec.num_params(), 0.0)};
  Matrix x(2, 3);
  const double xv[] = {1.0, -2.0, 0.5, 0.0, 3.0, 1.0};
  for (std::size_t i = 0; i < 6; ++i) x(i / 3, i % 3) = xv[i];
  for (const auto& p : predict_probs(zero, x)) {
    for (double v : p) CHECK(v == doctest::Approx(0.25));
  }
  auto m = init_model(spec, RngSeed{3});
  ad::Tape tape;
  auto bound = bind(tape, m, false);
  auto logits = forward_logits(bound, m, tape.constant(to_tensor(x)));
  auto plain = predict_logits(m, x);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 4; ++j) CHECK(logits.value()(i, j) == doctest::Approx(plain(i, j)).epsilon(1e-13));
  }
}

TEST_CASE("cross entropy and conftr fixtures") {
  ad::Tape tape;
  auto lp = ad::log_softmax(tape.constant(ad::Tensor(3, 10)));
  CHECK(loss_ce(lp, {0, 4, 9}).item() == doctest::Approx(std::log(10.0)).epsilon(1e-14));
  ad::Tensor half(6, 10);
  for (auto& v : half.data) v = 0.5;
  auto c = tape.constant(half);
  CHECK(loss_conftr(c).item() == doctest::Approx(std::log(5.0)).epsilon(1e-14));
  CHECK(loss_conftr_class(c, {0, 1, 2, 3, 4, 5}, 2.0).item() ==
        doctest::Approx(std::log(5.0) + 1.0).epsilon(1e-14));
}

TEST_CASE("model-based Fano equals Fano under a uniform model") {
  Rng rng(RngSeed{11});
  ad::Tape tape;
  auto c = tape.constant(ad::Tensor(20, 6));
  for (auto& v : const_cast<ad::Tensor&>(c.value()).data) v = 0.05 + 0.9 * rng.uniform();
  auto lp = ad::log_softmax(tape.constant(ad::Tensor(20, 6)));
  std::vector<int> y;
  for (int i = 0; i < 20; ++i) y.push_back(i % 6);
  double fano = loss_fano(c, y, 0.1, 30).item();
  double mb = loss_mb_fano(c, lp, y, 0.1, 30).item();
  CHECK(std::abs(fano - mb) < 1e-9);
}

TEST_CASE("hard memberships reproduce the evaluation bounds") {
  auto f = hard_fixture(60, 5, RngSeed{21});
  const double alpha = 0.2;
  ad::Tape tape;
  auto c = tape.constant(f.sets);
  auto lp = tape.constant(f.log_probs);
  CHECK(loss_fano(c, f.batch.labels, alpha, f.batch.n_cal).item() ==
        doctest::Approx(simple_fano_bound(f.batch, alpha).value).epsilon(1e-3));
  CHECK(loss_mb_fano(c, lp, f.batch.labels, alpha, f.batch.n_cal).item() ==
        doctest::Approx(mb_fano_bound(f.batch, alpha).value).epsilon(1e-3));
  CHECK(loss_dpi(c, lp, f.batch.labels, alpha, f.batch.n_cal, 0.05).item() ==
        doctest::Approx(dpi_bound(f.batch, alpha, 0.05).value).epsilon(1e-3));
}

TEST_CASE("every loss passes a gradient check through the soft conformal step") {
  RelaxConfig relax{1.0, 0.5, SwapKind::Logistic};
  std::vector<int> labels{0, 1, 2, 3, 1, 2, 0, 3};
  for (auto kind : {LossKind::Ce, LossKind::Conftr, LossKind::ConftrClass, LossKind::Fano, LossKind::MbFano,
                    LossKind::Dpi}) {
    CAPTURE(to_string(kind));
    ad::ScalarFn f = [&](ad::Tape&, const std::vector<ad::Var>& in) {
      auto lp = ad::log_softmax(in[0]);
      if (kind == LossKind::Ce) return loss_ce(lp, labels);
      auto step = conformal_step(lp, labels, 0.25, relax);
      switch (kind) {
        case LossKind::Conftr: return loss_conftr(step.soft_sets);
        case LossKind::ConftrClass: return loss_conftr_class(step.soft_sets, step.test_labels, 0.5);
        case LossKind::Fano: return loss_fano(step.soft_sets, step.test_labels, 0.25, step.n_cal);
        case LossKind::MbFano:
          return loss_mb_fano(step.soft_sets, step.test_log_probs, step.test_labels, 0.25, step.n_cal);
        default:
          return loss_dpi(step.soft_sets, step.test_log_probs, step.test_labels, 0.25, step.n_cal, 0.05);
      }
    };
    Rng rng(RngSeed{5});
    for (int rep = 0; rep < 5; ++rep) {
      auto report = ad::grad_check(f, {random_tensor(rng, 8, 4, 2.0)});
      CHECK(report.passed);
    }
  }
}

TEST_CASE("infeasible batch sizes are rejected") {
  ad::Tape tape;
  auto lp = ad::log_softmax(tape.constant(ad::Tensor(2, 3)));
  CHECK_THROWS_AS(conformal_step(lp, {0, 1}, 0.25, RelaxConfig{}), std::invalid_argument);
  TrainConfig cfg;
  cfg.loss = LossKind::Fano;
  cfg.batch_size = 2;
  cfg.alpha_train = 0.25;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.loss = LossKind::Ce;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("step schedule") {
  CHECK(scheduled_lr(1.0, 0, 50) == 1.0);
  CHECK(scheduled_lr(1.0, 19, 50) == 1.0);
  CHECK(scheduled_lr(1.0, 20, 50) == doctest::Approx(0.1));
  CHECK(scheduled_lr(1.0, 30, 50) == doctest::Approx(0.01));
  CHECK(scheduled_lr(1.0, 49, 50) == doctest::Approx(0.001));
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  auto ds = separable(60, RngSeed{1});
  ModelSpec spec{{2, 3}, Activation::Relu};
  auto m = init_model(spec, RngSeed{2});
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 2;
  cfg.batch_size = 20;
  auto r = train(m, ds, cfg);
  CHECK(r.model == m);
  CHECK(r.history.size() == 2);
}

TEST_CASE("separable task is learned by the label-aware losses") {
  auto ds = separable(300, RngSeed{3});
  auto holdout = separable(200, RngSeed{4});
  for (auto kind : {LossKind::Ce, LossKind::ConftrClass, LossKind::MbFano, LossKind::Dpi}) {
    CAPTURE(to_string(kind));
    TrainConfig cfg;
    cfg.loss = kind;
    cfg.alpha_train = 0.1;
    cfg.batch_size = 50;
    cfg.lr = 0.05;
    cfg.epochs = 10;
    cfg.relax = RelaxConfig{1.0, 0.1, SwapKind::Cauchy};
    auto r = train(init_model({{2, 3}, Activation::Relu}, RngSeed{9}), ds, cfg, &holdout);
    CHECK(r.history.back().train_accuracy == 1.0);
    CHECK(r.history.back().holdout_coverage >= 0.85);
    CHECK(std::isfinite(r.history.back().mean_loss));
  }
}

TEST_CASE("plain Fano objective settles on constant singletons") {
  auto ds = separable(300, RngSeed{3});
  TrainConfig cfg;
  cfg.loss = LossKind::Fano;
  cfg.alpha_train = 0.1;
  cfg.batch_size = 50;
  cfg.lr = 0.05;
  cfg.epochs = 10;
  cfg.relax = RelaxConfig{1.0, 0.1, SwapKind::Cauchy};
  auto r = train(init_model({{2, 3}, Activation::Relu}, RngSeed{9}), ds, cfg);
  CHECK(r.history.back().mean_loss < r.history.front().mean_loss);
  CHECK(r.history.back().mean_loss < binary_entropy(0.1) + 0.1 * std::log(3.0));
}

TEST_CASE("soft Fano stays below the ConfTr bound when soft coverage reaches 1 - alpha") {
  Rng rng(RngSeed{31});
  const double alpha = 0.1;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 30, k = 6;
    ad::Tensor c(n, k);
    std::vector<int> y(n);
    double mean_size = 0.0, covered = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng.uniform_index(k));
      for (std::size_t j = 0; j < k; ++j) c(i, j) = 0.01 + 0.98 * rng.uniform();
      c(i, static_cast<std::size_t>(y[i])) = 0.9 + 0.09 * rng.uniform();
      for (std::size_t j = 0; j < k; ++j) mean_size += c(i, j) / n;
      covered += c(i, static_cast<std::size_t>(y[i])) / n;
    }
    REQUIRE(covered >= 1.0 - alpha);
    ad::Tape tape;
    double fano = loss_fano(tape.constant(c), y, alpha, 50).item();
    CHECK(fano <= conftr_bound(mean_size, alpha, 50, static_cast<int>(k)) + 1e-6);
  }
}
