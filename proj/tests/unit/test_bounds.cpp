#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ecp/bounds.hpp"

using namespace ecp;

namespace {

// mpmath: h_b(0.25) = 0.562335144618808350...
constexpr double kHb025 = 0.56233514461880835;

std::vector<double> random_prob(Rng& rng, std::size_t k) {
  std::vector<double> p(k);
  double s = 0.0;
  for (auto& v : p) {
    v = rng.gamma(0.7);
    s += v;
  }
  for (auto& v : p) v /= s;
  return p;
}

// Random batch with at most floor(alpha * n) uncovered examples; no empty sets.
EvalBatch random_batch(Rng& rng, std::size_t n, std::size_t k, double alpha, bool uniform_q) {
  EvalBatch b;
  b.n_cal = 10 + rng.uniform_index(200);
  auto max_uncovered = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(n)));
  for (std::size_t i = 0; i < n; ++i) {
    b.probs.push_back(uniform_q ? std::vector<double>(k, 1.0 / k) : random_prob(rng, k));
    int y = static_cast<int>(rng.uniform_index(k));
    b.labels.push_back(y);
    PredictionSet s(k);
    for (std::size_t j = 0; j < k; ++j) s.member[j] = rng.uniform() < 0.4;
    bool cover = i >= max_uncovered || rng.uniform() < 0.5;
    s.member[static_cast<std::size_t>(y)] = cover;
    if (!cover && s.size() == 0) s.member[(static_cast<std::size_t>(y) + 1) % k] = true;
    b.sets.push_back(s);
  }
  return b;
}

double sum_terms(const BoundReport& r) {
  double s = 0.0;
  for (const auto& [name, v] : r.terms) s += v;
  return s;
}

}  // namespace

TEST_CASE("bernstein deviation") {
  std::vector<double> z(8, 0.3);
  double delta = 2.0 / std::exp(2.0);
  CHECK(bernstein_delta(z, delta) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  std::vector<double> zz{0.0, 1.0};
  // V = 0.5, n = 2, L = ln 2: sqrt(2*0.5*ln2/2) + 7 ln2 / 3
  double l = std::log(2.0 / 0.999999);
  CHECK(bernstein_delta(zz, 0.999999) == doctest::Approx(std::sqrt(l / 2.0) + 7.0 * l / 3.0));
  CHECK_THROWS(bernstein_delta(std::vector<double>{0.5}, 0.1));
  CHECK_THROWS(bernstein_delta(std::vector<double>{0.5, 1.5}, 0.1));
}

TEST_CASE("simple Fano worked values") {
  std::vector<PredictionSet> sets;
  std::vector<int> labels;
  for (int i = 0; i < 4; ++i) {
    PredictionSet s(3);
    s.member[i % 3] = true;
    sets.push_back(s);
    labels.push_back(i % 3);
  }
  auto r = simple_fano_bound(sets, labels, 0.25, 3, 3);
  CHECK(std::abs(r.value - kHb025) < 1e-15);

  std::vector<PredictionSet> full(4, PredictionSet(3, true));
  auto rf = simple_fano_bound(full, labels, 0.25, 10, 3);
  double an = 0.25 - 1.0 / 11.0;
  CHECK(rf.value == doctest::Approx(kHb025 + (1.0 - an) * std::log(3.0)).epsilon(1e-14));

  PredictionSet wrong(2);
  wrong.member[0] = true;
  std::vector<PredictionSet> one{wrong};
  std::vector<int> y{1};
  CHECK(simple_fano_bound(one, y, 0.25, 3, 2).term("uncovered") == 0.0);
  CHECK_THROWS(simple_fano_bound(one, y, 0.5, 3, 2));
  CHECK_THROWS(simple_fano_bound(one, y, 0.0, 3, 2));
}

TEST_CASE("conftr and list Fano closed forms") {
  const double alpha = 0.1;
  const std::size_t n = 50;
  const int k = 5;
  double an = alpha - 1.0 / 51.0;
  double lambda = binary_entropy(alpha) + alpha * std::log(5.0) - (1.0 - an) * std::log(0.9);
  CHECK(conftr_bound(1.0, alpha, n, k) == doctest::Approx(lambda).epsilon(1e-14));
  CHECK(conftr_bound(5.0, alpha, n, k) ==
        doctest::Approx(lambda + (1.0 - an) * std::log(5.0)).epsilon(1e-14));
  CHECK_THROWS(conftr_bound(0.0, alpha, n, k));

  std::vector<PredictionSet> singles(3, PredictionSet(5));
  for (auto& s : singles) s.member[2] = true;
  CHECK(list_fano_bound(singles, alpha, k) ==
        doctest::Approx(binary_entropy(alpha) + alpha * std::log(5.0)).epsilon(1e-14));
  std::vector<PredictionSet> fulls(3, PredictionSet(5, true));
  CHECK(list_fano_bound(fulls, alpha, k) ==
        doctest::Approx(binary_entropy(alpha) + 2.0 * alpha * 0 + alpha * std::log(5.0) + std::log(5.0))
            .epsilon(1e-14));
  std::vector<PredictionSet> empties(3, PredictionSet(5));
  CHECK(list_fano_bound(empties, alpha, k) ==
        doctest::Approx(binary_entropy(alpha) + alpha * std::log(5.0)).epsilon(1e-14));
}

TEST_CASE("DPI bound edge cases") {
  EvalBatch b;
  b.n_cal = 3;
  for (int i = 0; i < 6; ++i) {
    b.probs.push_back({0.7, 0.2, 0.1});
    b.labels.push_back(i % 2);
    b.sets.push_back(PredictionSet(3, true));
  }
  auto r = dpi_bound(b, 0.25, 0.05);
  CHECK(r.term("covered") == 0.0);
  CHECK(r.term("uncovered") >= 0.0);  // alpha_n = 0 here
  CHECK(r.delta.has_value());
  CHECK(std::abs(sum_terms(r) - r.value) <= 1e-9);
  CHECK(r.n == 3);
  b.weights.assign(6, 1.0);
  CHECK_THROWS(dpi_bound(b, 0.25, 0.05));
}

TEST_CASE("exact DPI form") {
  EvalBatch b;
  b.n_cal = 10;
  for (int i = 0; i < 4; ++i) {
    b.probs.push_back({0.5, 0.5});
    b.labels.push_back(0);
    PredictionSet s(2);
    s.member[0] = true;
    b.sets.push_back(s);
  }
  CHECK(dpi_exact(b) == doctest::Approx(cross_entropy(b) - std::log(2.0)).epsilon(1e-14));

  b.labels = {0, 0, 1, 1};
  CHECK(dpi_exact(b) == doctest::Approx(cross_entropy(b)).epsilon(1e-14));
}

TEST_CASE("MB Fano special cases") {
  EvalBatch b;
  b.n_cal = 3;
  Rng rng(RngSeed{2});
  for (int i = 0; i < 10; ++i) {
    b.probs.push_back(random_prob(rng, 4));
    int y = static_cast<int>(rng.uniform_index(4));
    b.labels.push_back(y);
    PredictionSet s(4);
    s.member[static_cast<std::size_t>(y)] = true;
    b.sets.push_back(s);
  }
  CHECK(mb_fano_bound(b, 0.25).value == doctest::Approx(kHb025).epsilon(1e-12));
}

TEST_CASE("random batch properties") {
  Rng rng(RngSeed{31});
  for (int t = 0; t < 100; ++t) {
    const double alpha = 0.05 + 0.4 * rng.uniform();
    auto b = random_batch(rng, 40, 6, alpha, false);
    auto simple = simple_fano_bound(b, alpha);
    double mean_size = 0.0;
    for (const auto& s : b.sets) mean_size += static_cast<double>(s.size());
    mean_size /= static_cast<double>(b.size());
    CHECK(simple.value <= conftr_bound(mean_size, alpha, b.n_cal, 6) + 1e-9);
    CHECK(dpi_exact(b) <= cross_entropy(b) + 1e-12);
    for (const auto& r : {simple, mb_fano_bound(b, alpha), dpi_bound(b, alpha, 0.1)}) {
      CHECK(std::abs(sum_terms(r) - r.value) <= 1e-9);
      CHECK(r.alpha == alpha);
    }

    auto u = random_batch(rng, 40, 6, alpha, true);
    CHECK(mb_fano_bound(u, alpha).value == doctest::Approx(simple_fano_bound(u, alpha).value).epsilon(1e-9));
  }
}

TEST_CASE("clamp events are counted") {
  EvalBatch b;
  b.n_cal = 20;
  b.probs = {{1.0, 0.0}, {0.5, 0.5}};
  b.labels = {1, 0};
  PredictionSet s(2);
  s.member[0] = true;
  b.sets = {s, s};
  auto r = dpi_bound(b, 0.1, 0.1);
  CHECK(r.clip_events >= 1);
  CHECK(std::isfinite(r.value));
}
