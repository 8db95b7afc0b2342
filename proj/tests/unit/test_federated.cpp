#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ecp/federated.hpp"

using namespace ecp;

namespace {

LabeledDataset labeled_blobs(std::size_t n, int k, RngSeed seed) {
  Rng rng(seed);
  LabeledDataset ds;
  ds.num_labels = k;
  ds.features = Matrix(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    int y = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(k)));
    ds.features(i, 0) = y + 0.3 * rng.normal();
    ds.features(i, 1) = -y + 0.3 * rng.normal();
    ds.labels.push_back(y);
  }
  return ds;
}

JointTable random_joint(Rng& rng, std::size_t nx, std::size_t k, std::size_t g) {
  JointTable j(nx, std::vector<std::vector<double>>(k, std::vector<double>(g)));
  double s = 0.0;
  for (auto& a : j) {
    for (auto& b : a) {
      for (auto& v : b) s += (v = rng.gamma(0.8));
    }
  }
  for (auto& a : j) {
    for (auto& b : a) {
      for (auto& v : b) v /= s;
    }
  }
  return j;
}

std::vector<double> histogram(const LabeledDataset& ds) {
  std::vector<double> h(static_cast<std::size_t>(ds.num_labels), 0.0);
  for (int y : ds.labels) h[static_cast<std::size_t>(y)] += 1.0 / static_cast<double>(ds.size());
  return h;
}

}  // namespace

TEST_CASE("dirichlet partition is exact") {
  auto ds = labeled_blobs(500, 4, RngSeed{1});
  auto one = dirichlet_partition(ds, 1, 1.0, RngSeed{2});
  REQUIRE(one.size() == 1);
  CHECK(one[0] == ds);

  auto parts = dirichlet_partition(ds, 7, 0.5, RngSeed{3});
  std::vector<std::pair<double, int>> seen, original;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.size(); ++i) seen.emplace_back(p.features(i, 0), p.labels[i]);
  }
  for (std::size_t i = 0; i < ds.size(); ++i) original.emplace_back(ds.features(i, 0), ds.labels[i]);
  std::sort(seen.begin(), seen.end());
  std::sort(original.begin(), original.end());
  CHECK(seen == original);
  CHECK(dirichlet_partition(ds, 7, 0.5, RngSeed{3}) == parts);
  CHECK_THROWS(dirichlet_partition(labeled_blobs(3, 2, RngSeed{4}), 4, 1.0, RngSeed{5}));
}

TEST_CASE("large concentration gives near-global label mixes") {
  auto ds = labeled_blobs(20000, 5, RngSeed{6});
  auto global = histogram(ds);
  for (const auto& p : dirichlet_partition(ds, 4, 1e6, RngSeed{7})) {
    auto h = histogram(p);
    for (std::size_t y = 0; y < h.size(); ++y) CHECK(std::abs(h[y] - global[y]) <= 0.05 * global[y]);
  }
}

TEST_CASE("device term vanishes for a single device; side head is detached") {
  auto ds = labeled_blobs(40, 3, RngSeed{8});
  auto trunk = init_model({{2, 3}, Activation::Relu}, RngSeed{9});
  auto g = init_global_model(trunk, 1, RngSeed{10});
  TrainConfig cfg;
  cfg.loss = LossKind::MbFano;
  cfg.alpha_train = 0.2;
  ad::Tape tape;
  auto bound = bind(tape, g);
  auto loss = local_loss(tape, bound, g, ds.features, ds.labels, 0, cfg);
  CHECK(loss.device_term.item() == 0.0);

  auto g3 = init_global_model(trunk, 3, RngSeed{10});
  ad::Tape t3;
  auto b3 = bind(t3, g3);
  auto l3 = local_loss(t3, b3, g3, ds.features, ds.labels, 2, cfg);
  t3.backward(l3.side_term);
  for (double v : gather_grad(b3.trunk)) CHECK(v == 0.0);
  double head = 0.0;
  for (double v : gather_grad(b3.head_z_xy)) head += std::abs(v);
  CHECK(head > 0.0);
}

TEST_CASE("separable devices drive the device term to zero") {
  auto a = labeled_blobs(200, 3, RngSeed{11});
  auto b = labeled_blobs(200, 3, RngSeed{12});
  for (std::size_t i = 0; i < b.size(); ++i) b.features(i, 0) += 20.0;
  FederatedConfig cfg;
  cfg.devices = 2;
  cfg.rounds = 100;
  cfg.base.batch_size = 50;
  cfg.base.lr = 0.1;
  auto g = init_global_model(init_model({{2, 3}, Activation::Relu}, RngSeed{13}), 2, RngSeed{14});
  auto r = federated_train(g, {a, b}, cfg);
  for (int d = 0; d < 2; ++d) {
    ad::Tape tape;
    auto bound = bind(tape, r.model, false);
    const auto& ds = d == 0 ? a : b;
    auto loss = local_loss(tape, bound, r.model, ds.features, ds.labels, d, cfg.base);
    CHECK(loss.device_term.item() < 0.05);
  }
}

TEST_CASE("fedavg weighting") {
  auto ds = labeled_blobs(300, 3, RngSeed{15});
  auto devices = dirichlet_partition(ds, 3, 1.0, RngSeed{16});
  FederatedConfig cfg;
  cfg.devices = 3;
  cfg.rounds = 5;
  cfg.base.batch_size = 20;
  cfg.seed = RngSeed{17};
  auto g = init_global_model(init_model({{2, 3}, Activation::Relu}, RngSeed{18}), 3, RngSeed{19});

  auto zero = cfg;
  zero.local_epochs = 0;
  CHECK(fedavg_round(g, devices, zero, 0) == g);

  auto avg = fedavg_round(g, devices, cfg, 1);
  const double lr = scheduled_lr(cfg.base.lr, 1, cfg.rounds);
  const RngSeed round_seed = derive_seed(cfg.seed, 1);
  std::vector<double> expect(g.trunk.params.size(), 0.0);
  for (std::size_t j = 0; j < 3; ++j) {
    auto local = local_update(g, devices[j], static_cast<int>(j), cfg.base, 1, lr, derive_seed(round_seed, j));
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] += devices[j].size() / 300.0 * local.trunk.params[i];
  }
  for (std::size_t i = 0; i < expect.size(); ++i) CHECK(avg.trunk.params[i] == doctest::Approx(expect[i]).epsilon(1e-12));

  std::vector<LabeledDataset> single{devices[0], LabeledDataset{}};
  single[1].num_labels = 3;
  auto g2 = init_global_model(g.trunk, 2, RngSeed{19});
  auto one = fedavg_round(g2, single, cfg, 0);
  auto direct = local_update(g2, devices[0], 0, cfg.base, 1, cfg.base.lr, derive_seed(derive_seed(cfg.seed, 0), 0));
  CHECK(one == direct);
}

TEST_CASE("personalization") {
  auto ds = labeled_blobs(6, 3, RngSeed{20});
  auto g = init_global_model(init_model({{2, 3}, Activation::Relu}, RngSeed{21}), 2, RngSeed{22});
  CHECK(personalize(g, ds, 0, 0.1, RngSeed{23}) == g.trunk);
  auto m = personalize(g, ds, 300, 0.5, RngSeed{23});
  CHECK(m == personalize(g, ds, 300, 0.5, RngSeed{23}));
  ad::Tape tape;
  auto bound = bind(tape, m, false);
  auto lp = ad::log_softmax(forward_logits(bound, m, tape.constant(to_tensor(ds.features))));
  CHECK(loss_ce(lp, ds.labels).item() < 0.05);
}

TEST_CASE("entropy decomposition") {
  Rng rng(RngSeed{24});
  for (int t = 0; t < 100; ++t) {
    auto j = random_joint(rng, 4, 3, 2);
    auto d = entropy_decomposition(j);
    CHECK(std::abs(d.h_y_given_x - d.avg_local - d.mi) < 1e-12);
    CHECK(d.mi >= -1e-15);
  }
  // z independent of (x, y)
  auto base = random_joint(rng, 3, 3, 1);
  JointTable ind(3, std::vector<std::vector<double>>(3, std::vector<double>(2)));
  for (std::size_t x = 0; x < 3; ++x) {
    for (std::size_t y = 0; y < 3; ++y) {
      ind[x][y][0] = 0.3 * base[x][y][0];
      ind[x][y][1] = 0.7 * base[x][y][0];
    }
  }
  auto di = entropy_decomposition(ind);
  CHECK(std::abs(di.mi) < 1e-12);
  CHECK(di.avg_local == doctest::Approx(di.h_y_given_x).epsilon(1e-12));
  // y = z
  JointTable eq(3, std::vector<std::vector<double>>(3, std::vector<double>(3, 0.0)));
  for (std::size_t x = 0; x < 3; ++x) {
    for (std::size_t y = 0; y < 3; ++y) eq[x][y][y] = base[x][y][0];
  }
  auto de = entropy_decomposition(eq);
  CHECK(de.avg_local == 0.0);
  CHECK(de.mi == doctest::Approx(de.h_y_given_x).epsilon(1e-12));
  JointTable bad = eq;
  bad[0][0][0] += 0.5;
  CHECK_THROWS(entropy_decomposition(bad));
}

TEST_CASE("federated upper bound dominates the entropy") {
  Rng rng(RngSeed{25});
  PopulationSetup setup;
  setup.score.jitter = 1e-3;
  setup.alpha = 0.1;
  setup.n_cal = 50;
  for (int t = 0; t < 10; ++t) {
    auto j = random_joint(rng, 4, 3, 2);
    std::vector<ProbVector> q;
    for (int x = 0; x < 4; ++x) {
      ProbVector row(3);
      double s = 0.0;
      for (auto& v : row) s += (v = rng.gamma(1.0));
      for (auto& v : row) v /= s;
      q.push_back(row);
    }
    auto check = federated_bound_check(j, q, setup);
    CHECK(check.simple_fano >= check.h_y_given_x - 1e-9);
    CHECK(check.mb_fano >= check.h_y_given_x - 1e-9);
    CHECK(check.list_fano >= check.h_y_given_x - 1e-9);
  }
}
