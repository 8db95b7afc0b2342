#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ecp/conformal.hpp"
#include "ecp/population.hpp"

using namespace ecp;

namespace {

DiscreteTaskSpec mixed_task() {
  return {{0.3, 0.2, 0.25, 0.25},
          {{0.7, 0.2, 0.1}, {0.5, 0.5, 0.0}, {1.0, 0.0, 0.0}, {0.4, 0.35, 0.25}},
          {}};
}

PopulationSetup setup(ScoreKind kind, double alpha, std::size_t n) {
  PopulationSetup s;
  s.score.kind = kind;
  s.score.jitter = 1e-3;
  s.alpha = alpha;
  s.n_cal = n;
  return s;
}

}  // namespace

TEST_CASE("population batch coverage equals r/(n+1)") {
  auto task = mixed_task();
  for (auto kind : {ScoreKind::ThrProb, ScoreKind::Aps}) {
    for (std::size_t n : {19u, 50u, 200u}) {
      auto s = setup(kind, 0.1, n);
      auto b = population_batch(task, task.conditional, s);
      double total = 0.0;
      for (double w : b.weights) total += w;
      CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
      double r = static_cast<double>(conformal_rank(n, 0.1));
      CHECK(batch_coverage(b) == doctest::Approx(r / (n + 1.0)).epsilon(1e-8));
    }
  }
}

TEST_CASE("population bounds dominate the exact entropy") {
  auto task = mixed_task();
  const double h = discrete_exact_entropy(task);
  for (double alpha : {0.05, 0.1, 0.2, 0.3}) {
    auto b = population_batch(task, task.conditional, setup(ScoreKind::ThrProb, alpha, 100));
    CHECK(dpi_plugin_bound(b, alpha).value >= h - 1e-12);
    CHECK(mb_fano_bound(b, alpha).value >= h - 1e-12);
    CHECK(simple_fano_bound(b, alpha).value >= h - 1e-12);
    CHECK(list_fano_bound(b, alpha) >= h - 1e-12);
    CHECK(dpi_exact(b) == doctest::Approx(cross_entropy(b)).epsilon(1e-9));
    CHECK(cross_entropy(b) == doctest::Approx(h).epsilon(1e-9));
  }
}

TEST_CASE("population batch agrees with sampled evaluation") {
  auto task = mixed_task();
  auto s = setup(ScoreKind::ThrProb, 0.1, 30);
  double pop = batch_coverage(population_batch(task, task.conditional, s));
  double sum = 0.0;
  const int reps = 400;
  for (int r = 0; r < reps; ++r) {
    sum += batch_coverage(sample_eval_batch(task, task.conditional, s, 50, derive_seed(RngSeed{8}, r)));
  }
  // Per-replicate coverage has standard deviation below 0.07 here.
  CHECK(std::abs(sum / reps - pop) < 4.0 * 0.07 / std::sqrt(static_cast<double>(reps)));
}

TEST_CASE("population inputs are validated") {
  auto task = mixed_task();
  auto s = setup(ScoreKind::ThrProb, 0.1, 30);
  s.score.jitter = 0.0;
  CHECK_THROWS(population_batch(task, task.conditional, s));
  s.score.jitter = 1e-3;
  CHECK_THROWS(population_batch(task, {{0.5, 0.5, 0.0}}, s));
  auto same = sample_eval_batch(task, task.conditional, s, 20, RngSeed{4});
  auto again = sample_eval_batch(task, task.conditional, s, 20, RngSeed{4});
  CHECK(same.labels == again.labels);
}
