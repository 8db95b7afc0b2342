#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ecp/conformal.hpp"
#include "ecp/diffsort.hpp"

using namespace ecp;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

RelaxConfig relax(double steepness, SwapKind kind = SwapKind::Logistic, double temperature = 0.1) {
  RelaxConfig c;
  c.steepness = steepness;
  c.temperature = temperature;
  c.swap_kind = kind;
  return c;
}

std::vector<double> sorted_values(const std::vector<double>& x, const RelaxConfig& cfg) {
  Tape tape;
  return soft_sort(tape.leaf(Tensor::row_vector(x)), cfg).value().data;
}

}  // namespace

TEST_CASE("hard-limit sorting") {
  std::vector<double> rev{8, 7, 6, 5, 4, 3, 2, 1};
  auto out = sorted_values(rev, relax(1e4));
  for (int i = 0; i < 8; ++i) CHECK(std::abs(out[i] - (i + 1)) < 1e-3);

  std::vector<double> asc{0.1, 0.5, 0.9, 1.3, 2.0};
  out = sorted_values(asc, relax(1e4));
  for (int i = 0; i < 5; ++i) CHECK(std::abs(out[i] - asc[i]) < 1e-3);

  out = sorted_values({0.4, 0.4}, relax(3.0));
  CHECK(out[0] == 0.4);
  CHECK(out[1] == 0.4);
}

TEST_CASE("soft sort matches the exact sort on random vectors") {
  Rng rng(RngSeed{5});
  for (auto kind : {SwapKind::Logistic, SwapKind::Cauchy}) {
    for (int t = 0; t < 100; ++t) {
      std::size_t m = 1 + rng.uniform_index(64);
      std::vector<double> x(m);
      for (auto& v : x) v = rng.normal();
      auto out = sorted_values(x, relax(1e4, kind));
      auto exact = x;
      std::sort(exact.begin(), exact.end());
      double err = 0.0;
      for (std::size_t i = 0; i < m; ++i) err = std::max(err, std::abs(out[i] - exact[i]));
      CHECK(err < 1e-3);
      const double alpha = 0.1;
      if (conformal_rank(m, alpha) <= m) {
        Tape tape;
        auto q = soft_quantile(tape.leaf(Tensor::row_vector(x)), alpha, relax(1e4, kind));
        CHECK(std::abs(q.item() - calibrate(x, alpha).q_hat) < 1e-3);
      }
    }
  }
}

TEST_CASE("soft sort preserves the total") {
  Rng rng(RngSeed{6});
  for (int t = 0; t < 50; ++t) {
    std::size_t m = 1 + rng.uniform_index(40);
    std::vector<double> x(m);
    for (auto& v : x) v = 3.0 * rng.normal();
    for (double s : {0.5, 10.0}) {
      auto out = sorted_values(x, relax(s, t % 2 ? SwapKind::Cauchy : SwapKind::Logistic));
      double a = std::accumulate(x.begin(), x.end(), 0.0);
      double b = std::accumulate(out.begin(), out.end(), 0.0);
      CHECK(std::abs(a - b) <= 1e-9);
    }
  }
}

TEST_CASE("soft quantile rank arithmetic") {
  std::vector<double> x{0.3, 0.9, 0.1, 0.5, 0.7, 0.2, 0.8, 0.4, 0.6};
  Tape tape;
  auto q = soft_quantile(tape.leaf(Tensor::row_vector(x)), 0.1, relax(1e4));
  CHECK(std::abs(q.item() - 0.9) < 1e-3);
  Tape t2;
  CHECK_THROWS_AS(soft_quantile(t2.leaf(Tensor::scalar(1.0)), 0.4, relax(10.0)), std::invalid_argument);
  Tape t3;
  CHECK_THROWS(soft_sort(t3.leaf(Tensor(1, 0)), relax(10.0)));
}

TEST_CASE("soft quantile gradient is a convex combination") {
  Rng rng(RngSeed{8});
  for (auto kind : {SwapKind::Logistic, SwapKind::Cauchy}) {
    for (int t = 0; t < 20; ++t) {
      std::vector<double> x(13);
      for (auto& v : x) v = rng.normal();
      Tape tape;
      auto leaf = tape.leaf(Tensor::row_vector(x));
      tape.backward(soft_quantile(leaf, 0.2, relax(2.0, kind)));
      double s = 0.0;
      for (double g : leaf.grad().data) s += g;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("soft membership") {
  Tape tape;
  auto cfg = relax(10.0, SwapKind::Logistic, 0.05);
  auto q = tape.leaf(Tensor::scalar(0.7));
  CHECK(soft_membership(q, tape.leaf(Tensor::scalar(0.7)), cfg).item() == 0.5);
  CHECK(soft_membership(q, tape.leaf(Tensor::scalar(0.7 - 10 * 0.05)), cfg).item() > 1.0 - 5e-5);
  std::vector<double> grid;
  for (int i = 0; i <= 100; ++i) grid.push_back(-1.0 + 0.03 * i);
  auto mem = soft_membership(q, tape.leaf(Tensor::row_vector(grid)), cfg).value().data;
  for (std::size_t i = 1; i < mem.size(); ++i) CHECK(mem[i] < mem[i - 1]);
}

TEST_CASE("relaxations pass the finite-difference check") {
  Rng rng(RngSeed{9});
  for (auto kind : {SwapKind::Logistic, SwapKind::Cauchy}) {
    for (int t = 0; t < 20; ++t) {
      Tensor x(1, 11);
      for (auto& v : x.data) v = rng.normal();
      Tensor wts(1, 11);
      for (auto& v : wts.data) v = rng.normal();
      auto cfg = relax(1.0 + 4.0 * rng.uniform(), kind, 0.5);
      auto sort_rep = ad::grad_check(
          [cfg](Tape&, const std::vector<Var>& v) { return ad::sum(ad::mul(soft_sort(v[0], cfg), v[1])); },
          {x, wts});
      CHECK(sort_rep.passed);
      auto q_rep = ad::grad_check(
          [cfg](Tape&, const std::vector<Var>& v) { return soft_quantile(v[0], 0.1, cfg); }, {x});
      CHECK(q_rep.passed);
      auto m_rep = ad::grad_check(
          [cfg](Tape&, const std::vector<Var>& v) {
            auto q = soft_quantile(v[0], 0.1, cfg);
            return ad::sum(soft_membership(q, v[1], cfg));
          },
          {x, wts});
      CHECK(m_rep.passed);
    }
  }
}
