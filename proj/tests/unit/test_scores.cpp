#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ecp/scores.hpp"

using namespace ecp;

namespace {

std::vector<double> random_prob(Rng& rng, std::size_t k) {
  std::vector<double> p(k);
  double s = 0.0;
  for (auto& v : p) {
    v = rng.gamma(1.0);
    s += v;
  }
  for (auto& v : p) v /= s;
  return p;
}

ScoreSpec make(ScoreKind kind, int k_reg = 0, double lambda = 0.0, double jitter = 0.0) {
  ScoreSpec s;
  s.kind = kind;
  s.k_reg = k_reg;
  s.lambda_reg = lambda;
  s.jitter = jitter;
  return s;
}

}  // namespace

TEST_CASE("threshold scores") {
  std::vector<double> p{0.9, 0.1};
  CHECK(score(make(ScoreKind::ThrProb), p, 0) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(score(make(ScoreKind::ThrLogProb), p, 1) == doctest::Approx(-std::log(0.1)));
  std::vector<double> zero{1.0, 0.0};
  CHECK(score(make(ScoreKind::ThrLogProb), zero, 1) == doctest::Approx(-std::log(kLogFloor)));
  auto all = score_all(make(ScoreKind::ThrProb), std::vector<double>(4, 0.25));
  for (double v : all) CHECK(v == 0.75);
}

TEST_CASE("APS and RAPS worked values") {
  std::vector<double> p{0.5, 0.3, 0.2};
  auto aps = score_all(make(ScoreKind::Aps), p);
  CHECK(aps[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(aps[1] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(aps[2] == doctest::Approx(1.0).epsilon(1e-15));
  auto raps = score_all(make(ScoreKind::Raps, 1, 0.01), p);
  CHECK(raps[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(raps[1] == doctest::Approx(0.81).epsilon(1e-15));
  CHECK(raps[2] == doctest::Approx(1.02).epsilon(1e-15));
}

TEST_CASE("APS breaks ties by label index") {
  std::vector<double> p{0.25, 0.5, 0.25};
  auto s = score_all(make(ScoreKind::Aps), p);
  CHECK(s[1] == 0.5);
  CHECK(s[0] == 0.75);
  CHECK(s[2] == 1.0);
}

TEST_CASE("score_all agrees with score on random vectors") {
  Rng rng(RngSeed{17});
  for (auto kind : {ScoreKind::ThrProb, ScoreKind::ThrLogProb, ScoreKind::Aps, ScoreKind::Raps}) {
    auto spec = make(kind, 2, 0.05, 0.01);
    for (int t = 0; t < 100; ++t) {
      auto p = random_prob(rng, 6);
      RngSeed seed{static_cast<std::uint64_t>(t)};
      auto all = score_all(spec, p, seed);
      for (int y = 0; y < 6; ++y) CHECK(all[y] == score(spec, p, y, seed));
    }
  }
}

TEST_CASE("score properties") {
  Rng rng(RngSeed{23});
  for (int t = 0; t < 200; ++t) {
    auto p = random_prob(rng, 5);
    auto aps = score_all(make(ScoreKind::Aps), p);
    CHECK(std::abs(*std::max_element(aps.begin(), aps.end()) - 1.0) <= 1e-12);
    CHECK(score_all(make(ScoreKind::Raps, 2, 0.0), p) == aps);
    CHECK(score_all(make(ScoreKind::Raps, 5, 0.3), p) == aps);
    for (auto kind : {ScoreKind::ThrProb, ScoreKind::ThrLogProb, ScoreKind::Aps}) {
      auto s = score_all(make(kind), p);
      for (int a = 0; a < 5; ++a) {
        for (int b = 0; b < 5; ++b) {
          if (p[a] > p[b]) CHECK(s[a] < s[b]);
        }
      }
    }
  }
}

TEST_CASE("jitter is one shared seeded draw") {
  auto spec = make(ScoreKind::ThrProb, 0, 0.0, 1e-3);
  std::vector<double> p{0.5, 0.5};
  auto a = score_all(spec, p, RngSeed{5});
  CHECK(a[0] == a[1]);
  CHECK(a[0] > 0.5);
  CHECK(a[0] < 0.5 + 1e-3);
  CHECK(score_all(spec, p, RngSeed{5}) == a);
  CHECK(score_all(spec, p, RngSeed{6}) != a);
  CHECK_THROWS_AS(score(spec, p, 0), std::invalid_argument);
}

TEST_CASE("score errors and names") {
  std::vector<double> p{0.6, 0.4};
  CHECK_THROWS(score(make(ScoreKind::ThrProb), p, 2));
  CHECK_THROWS(score(make(ScoreKind::ThrProb), p, -1));
  CHECK(score_kind_from_string("APS") == ScoreKind::Aps);
  CHECK(score_kind_from_string(to_string(ScoreKind::ThrLogProb)) == ScoreKind::ThrLogProb);
  CHECK(score_kind_from_string("THR") == ScoreKind::ThrProb);
  CHECK_THROWS(score_kind_from_string("bogus"));
}
