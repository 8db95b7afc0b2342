#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ecp/datagen.hpp"
#include "ecp/population.hpp"
#include "ecp/setsize.hpp"

using namespace ecp;

namespace {

Matrix blobs(std::size_t per_blob, double center, double var, RngSeed seed) {
  Rng rng(seed);
  Matrix m(2 * per_blob, 2);
  for (std::size_t i = 0; i < 2 * per_blob; ++i) {
    double c = i < per_blob ? center : -center;
    m(i, 0) = c + std::sqrt(var) * rng.normal();
    m(i, 1) = c + std::sqrt(var) * rng.normal();
  }
  return m;
}

DiscreteTaskSpec skewed_task() {
  return {{0.25, 0.25, 0.25, 0.25},
          {{0.6, 0.25, 0.1, 0.05}, {0.4, 0.4, 0.15, 0.05}, {0.3, 0.3, 0.2, 0.2}, {0.85, 0.1, 0.05, 0.0}},
          {}};
}

PopulationSetup setup(double alpha, std::size_t n) {
  PopulationSetup s;
  s.score.jitter = 1e-3;
  s.alpha = alpha;
  s.n_cal = n;
  return s;
}

}  // namespace

TEST_CASE("kmeans basics") {
  auto pts = blobs(200, 10.0, 0.01, RngSeed{1});
  auto one = kmeans(pts, 1, 10, RngSeed{2});
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < pts.rows(); ++i) {
    mx += pts(i, 0);
    my += pts(i, 1);
  }
  CHECK(one.centroids(0, 0) == doctest::Approx(mx / pts.rows()).epsilon(1e-12));
  CHECK(one.centroids(0, 1) == doctest::Approx(my / pts.rows()).epsilon(1e-12));

  auto two = kmeans(pts, 2, 50, RngSeed{3});
  bool first_pos = two.centroids(0, 0) > 0.0;
  double s0 = first_pos ? 10.0 : -10.0;
  CHECK(std::abs(two.centroids(0, 0) - s0) < 0.1);
  CHECK(std::abs(two.centroids(0, 1) - s0) < 0.1);
  CHECK(std::abs(two.centroids(1, 0) + s0) < 0.1);
  CHECK(std::abs(two.centroids(1, 1) + s0) < 0.1);

  CHECK(kmeans(pts, 2, 50, RngSeed{3}) == two);
  CHECK_THROWS(kmeans(blobs(1, 1.0, 1.0, RngSeed{1}), 3, 5, RngSeed{1}));
}

TEST_CASE("kmeans with zero iterations returns the seeding") {
  auto pts = blobs(30, 1.0, 1.0, RngSeed{5});
  auto init = kmeans(pts, 4, 0, RngSeed{6});
  for (std::size_t c = 0; c < 4; ++c) {
    bool is_point = false;
    for (std::size_t i = 0; i < pts.rows(); ++i) {
      if (pts(i, 0) == init.centroids(c, 0) && pts(i, 1) == init.centroids(c, 1)) is_point = true;
    }
    CHECK(is_point);
  }
}

TEST_CASE("kmeans objective is non-increasing") {
  auto pts = blobs(100, 0.5, 1.0, RngSeed{7});
  double prev = kmeans_objective(kmeans(pts, 6, 0, RngSeed{8}), pts);
  for (int it = 1; it <= 25; ++it) {
    double obj = kmeans_objective(kmeans(pts, 6, it, RngSeed{8}), pts);
    CHECK(obj <= prev + 1e-9);
    prev = obj;
  }
}

TEST_CASE("kmeans handles duplicate points") {
  Matrix pts(10, 1, 3.0);
  pts(9, 0) = 4.0;
  auto qm = kmeans(pts, 3, 20, RngSeed{1});
  CHECK(qm.k() == 3);
  CHECK(kmeans_objective(qm, pts) == 0.0);
}

TEST_CASE("quantize") {
  QuantizerModel qm{Matrix::from_rows({{0.0, 0.0}, {2.0, 0.0}, {0.0, 3.0}})};
  auto ids = quantize(qm, Matrix::from_rows({{2.0, 0.0}, {1.0, 0.0}, {0.0, 3.0}, {0.1, 2.0}}));
  CHECK(ids == std::vector<int>{1, 0, 2, 2});

  Rng rng(RngSeed{9});
  Matrix pts(1000, 2);
  for (auto& v : pts.data()) v = 4.0 * rng.uniform() - 1.0;
  auto got = quantize(qm, pts);
  for (std::size_t i = 0; i < pts.rows(); ++i) {
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < 3; ++c) {
      double dx = pts(i, 0) - qm.centroids(c, 0);
      double dy = pts(i, 1) - qm.centroids(c, 1);
      if (dx * dx + dy * dy < best_d) {
        best_d = dx * dx + dy * dy;
        best = c;
      }
    }
    CHECK(got[i] == best);
  }
}

TEST_CASE("entropy_mle") {
  std::vector<std::size_t> single{7};
  auto e = entropy_mle(single);
  CHECK(e.h_mle == 0.0);
  CHECK(e.h_mm == 0.0);
  CHECK(e.observed_bins == 1);

  std::vector<std::size_t> uniform{5, 5, 5, 5};
  e = entropy_mle(uniform);
  CHECK(e.h_mle == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK(e.h_mm == doctest::Approx(1.4612943611198905).epsilon(1e-14));

  std::vector<std::size_t> skew{3, 1, 0};
  e = entropy_mle(skew);
  // mpmath: -(3/4 ln 3/4 + 1/4 ln 1/4) = 0.562335144618808350...
  CHECK(std::abs(e.h_mle - 0.56233514461880835) < 1e-15);
  CHECK(e.observed_bins == 2);
  CHECK(e.h_mm == doctest::Approx(e.h_mle + 1.0 / 8.0));

  std::vector<std::size_t> zeros{0, 0};
  CHECK_THROWS(entropy_mle(zeros));

  Rng rng(RngSeed{10});
  for (int t = 0; t < 100; ++t) {
    std::vector<std::size_t> c(6);
    for (auto& v : c) v = rng.uniform_index(20);
    c[0] += 1;
    auto est = entropy_mle(c);
    CHECK(est.h_mm >= est.h_mle);
    CHECK(est.h_mle <= std::log(6.0) + 1e-12);
  }
}

TEST_CASE("conditional entropy lower bound") {
  std::vector<std::vector<std::size_t>> det(4, std::vector<std::size_t>(4, 0));
  for (int j = 0; j < 4; ++j) det[j][j] = 10000;
  double lb = cond_entropy_lb(det, 4);
  CHECK(lb >= 0.0);
  CHECK(lb < 1e-3);

  std::vector<std::vector<std::size_t>> ind(3, std::vector<std::size_t>(5, 4000));
  CHECK(cond_entropy_lb(ind, 5) == doctest::Approx(std::log(3.0)).epsilon(1e-4));

  std::vector<std::vector<std::size_t>> one(2, std::vector<std::size_t>(8, 0));
  one[1][3] = 50;
  CHECK(cond_entropy_lb(one, 8) == doctest::Approx(-std::log(8.0)).epsilon(1e-14));
  CHECK_THROWS(cond_entropy_lb({}, 3));
}

TEST_CASE("closed-form set-size bounds") {
  const double alpha = 0.1;
  const double h = binary_entropy(alpha) + alpha * std::log(6.0);
  CHECK(std::abs(max_setsize_lb(h, alpha, 100, 6)) < 1e-15);
  CHECK(std::abs(expected_logsize_lb_simple(h, alpha, 6)) < 1e-15);
  CHECK(max_setsize_lb(std::log(6.0), 1e-9, 100000000, 6) == doctest::Approx(std::log(6.0)).epsilon(1e-6));
  auto c = clamp_bound(-0.3);
  CHECK(c.raw == -0.3);
  CHECK(c.clamped == 0.0);
  CHECK(!c.informative);
  CHECK_THROWS(max_setsize_lb(1.0, 0.6, 10, 3));
}

TEST_CASE("set-size lower bounds hold on an exact discrete task") {
  auto task = skewed_task();
  const double h = discrete_exact_entropy(task);
  for (double alpha : {0.01, 0.02, 0.05, 0.1, 0.2, 0.3}) {
    for (std::size_t n : {50u, 1000u}) {
      auto b = population_batch(task, task.conditional, setup(alpha, n));
      const double empirical = batch_mean_log_size(b);
      CHECK(expected_logsize_lb_simple(h, alpha, 4) <= empirical + 1e-9);
      CHECK(expected_logsize_lb_mb(h, alpha, n, 4, b) <= empirical + 1e-9);
      double sup = 0.0;
      for (std::size_t i = 0; i < b.size(); ++i) {
        if (b.weights[i] > 0.0 && b.sets[i].size() > 0) sup = std::max(sup, std::log(double(b.sets[i].size())));
      }
      CHECK(max_setsize_lb(h, alpha, n, 4) <= sup + 1e-9);
    }
  }
}

TEST_CASE("model-based bound with uniform Q never exceeds the simple one") {
  DiscreteTaskSpec task{{0.5, 0.5}, {{0.3, 0.3, 0.2, 0.2}, {0.25, 0.25, 0.25, 0.25}}, {}};
  std::vector<ProbVector> uniform(2, ProbVector(4, 0.25));
  const double h = discrete_exact_entropy(task);
  for (double alpha : {0.01, 0.05, 0.1, 0.2}) {
    auto b = population_batch(task, uniform, setup(alpha, 10000));
    double simple = expected_logsize_lb_simple(h, alpha, 4);
    REQUIRE(simple > 0.0);
    CHECK(expected_logsize_lb_mb(h, alpha, 10000, 4, b) <= simple + 1e-9);
  }
}

TEST_CASE("quantized study on mixture logits") {
  auto spec = make_ring_mixture(4, 2, 1.5, 1.0);
  auto cal = gen_gaussian_mixture(spec, 2000, RngSeed{11});
  auto test = gen_gaussian_mixture(spec, 1000, RngSeed{12});
  auto to_logits = [&](const LabeledDataset& ds) {
    Matrix m(ds.size(), 4);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      auto p = gmm_posterior(spec, ds.features.row(i));
      for (int k = 0; k < 4; ++k) m(i, k) = std::log(std::max(p[k], 1e-300));
    }
    return m;
  };
  QuantizedStudyConfig cfg;
  cfg.clusters = 16;
  cfg.score.jitter = 1e-6;
  cfg.seed = RngSeed{13};
  auto study = quantized_setsize_study(to_logits(cal), cal.labels, to_logits(test), test.labels, cfg);
  CHECK(study.rows.size() == cfg.alphas.size());
  CHECK(study.h_lb <= gmm_cond_entropy_mc(spec, 20000, RngSeed{14}).mean + 0.05);
  for (const auto& row : study.rows) {
    CHECK(row.coverage >= 1.0 - row.alpha - 0.05);
    CHECK(row.simple.clamped >= 0.0);
    CHECK(row.simple.raw <= row.empirical_logsize + 0.05);
  }
  auto again = quantized_setsize_study(to_logits(cal), cal.labels, to_logits(test), test.labels, cfg);
  CHECK(again.rows[2].empirical_logsize == study.rows[2].empirical_logsize);
}
