#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ecp/core.hpp"

using namespace ecp;

namespace {

LabeledDataset counting_dataset(std::size_t n) {
  LabeledDataset ds;
  ds.num_labels = 3;
  ds.features = Matrix(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    ds.features(i, 0) = static_cast<double>(i);
    ds.labels.push_back(static_cast<int>(i % 3));
  }
  return ds;
}

PredictionSet make_set(std::size_t k, std::initializer_list<int> members) {
  PredictionSet s(k);
  for (int m : members) s.member[static_cast<std::size_t>(m)] = true;
  return s;
}

}  // namespace

TEST_CASE("split partitions the dataset") {
  auto ds = counting_dataset(10);
  auto [cal, test] = split(ds, 0.5, RngSeed{7});
  CHECK(cal.size() == 5);
  CHECK(test.size() == 5);
  std::vector<double> seen;
  for (const auto* part : {&cal, &test}) {
    for (std::size_t i = 0; i < part->size(); ++i) {
      seen.push_back(part->features(i, 0));
      CHECK(part->labels[i] == static_cast<int>(part->features(i, 0)) % 3);
    }
  }
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < seen.size(); ++i) CHECK(seen[i] == static_cast<double>(i));
}

TEST_CASE("split is deterministic under seed") {
  auto a = split_indices(100, 0.3, RngSeed{42});
  auto b = split_indices(100, 0.3, RngSeed{42});
  auto c = split_indices(100, 0.3, RngSeed{43});
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a.first.size() == 30);
}

TEST_CASE("split rejects degenerate requests") {
  CHECK_THROWS_AS(split(counting_dataset(1), 0.5, RngSeed{1}), std::invalid_argument);
  CHECK_THROWS_AS(split(counting_dataset(10), 0.0, RngSeed{1}), std::invalid_argument);
  CHECK_THROWS_AS(split(counting_dataset(10), 1.0, RngSeed{1}), std::invalid_argument);
  LabeledDataset empty;
  empty.num_labels = 2;
  CHECK_THROWS_AS(split(empty, 0.5, RngSeed{1}), std::invalid_argument);
}

TEST_CASE("coverage and inefficiency") {
  std::vector<PredictionSet> full(4, PredictionSet(3, true));
  std::vector<int> labels{0, 1, 2, 1};
  CHECK(coverage(full, labels) == 1.0);
  std::vector<PredictionSet> empty(4, PredictionSet(3, false));
  CHECK(coverage(empty, labels) == 0.0);

  std::vector<PredictionSet> sets{make_set(2, {0}), make_set(2, {1}), make_set(2, {0})};
  std::vector<int> y{0, 1, 1};
  CHECK(coverage(sets, y) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(1.0 - coverage(sets, y) + coverage(sets, y) == 1.0);

  CHECK(inefficiency(sets) == 1.0);
  std::vector<PredictionSet> sized{make_set(3, {0}), make_set(3, {0, 1}), make_set(3, {0, 1, 2})};
  CHECK(inefficiency(sized) == 2.0);
  std::vector<PredictionSet> full10(5, PredictionSet(10, true));
  CHECK(inefficiency(full10) == 10.0);

  CHECK_THROWS(coverage(sets, std::vector<int>{0, 1}));
  CHECK_THROWS(inefficiency(std::vector<PredictionSet>{}));
}

TEST_CASE("binary entropy") {
  CHECK(binary_entropy(0.5) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(binary_entropy(0.0) == 0.0);
  CHECK(binary_entropy(1.0) == 0.0);
  // mpmath, 30 digits: 0.562335144618808350288...
  CHECK(std::abs(binary_entropy(0.25) - 0.56233514461880835) < 1e-15);
  CHECK_THROWS_AS(binary_entropy(-0.1), std::invalid_argument);
  CHECK_THROWS_AS(binary_entropy(1.1), std::invalid_argument);
}

TEST_CASE("binary entropy is symmetric on a 1000-point grid") {
  for (int i = 0; i <= 1000; ++i) {
    double p = i / 1000.0;
    CHECK(std::abs(binary_entropy(p) - binary_entropy(1.0 - p)) <= 1e-12);
  }
}

TEST_CASE("conformal rank arithmetic avoids ulp overshoot") {
  CHECK(conformal_rank(9, 0.1) == 9);
  CHECK(conformal_rank(1, 0.5) == 1);
  CHECK(conformal_rank(5, 0.01) == 6);
  CHECK(conformal_rank(199, 0.1) == 180);
}

TEST_CASE("dataset validation") {
  auto ds = counting_dataset(6);
  CHECK_NOTHROW(ds.validate());
  ds.labels[0] = 5;
  CHECK_THROWS_AS(ds.validate(), std::invalid_argument);
  ds.labels[0] = 0;
  ds.side_info = {0, 1, kMissingGroup, 0, 0, 0};
  CHECK_THROWS_AS(ds.validate(), std::invalid_argument);  // G = 0
  ds.num_groups = 2;
  CHECK_NOTHROW(ds.validate());
}

TEST_CASE("derived seeds differ per index and are stable") {
  CHECK(derive_seed(RngSeed{1}, 0) == derive_seed(RngSeed{1}, 0));
  CHECK(!(derive_seed(RngSeed{1}, 0) == derive_seed(RngSeed{1}, 1)));
  Rng a(RngSeed{9});
  Rng b(RngSeed{9});
  for (int i = 0; i < 10; ++i) CHECK(a.uniform() == b.uniform());
}
