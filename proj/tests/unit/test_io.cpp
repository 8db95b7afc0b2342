#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ecp/io.hpp"

using namespace ecp;

TEST_CASE("infinite thresholds are written as strings") {
  Calibration c;
  c.n = 5;
  c.alpha = 0.01;
  Json j = c;
  CHECK(j["q_hat"] == "inf");
  auto back = j.get<Calibration>();
  CHECK(std::isinf(back.q_hat));
  CHECK(back == c);
  c.q_hat = 0.25;
  CHECK(Json(c).get<Calibration>() == c);
  CHECK_THROWS_AS(real_from_json(Json("big")), ConfigError);
}

TEST_CASE("configs round-trip and reject unknown fields") {
  TrainConfig t;
  t.loss = LossKind::MbFano;
  t.batch_size = 500;
  t.relax = RelaxConfig{100.0, 0.5, SwapKind::Cauchy};
  t.seed = RngSeed{42};
  auto back = Json(t).get<TrainConfig>();
  CHECK(back.loss == LossKind::MbFano);
  CHECK(back.relax.swap_kind == SwapKind::Cauchy);
  CHECK(back.relax.steepness == 100.0);
  CHECK(back.seed == RngSeed{42});
  CHECK(Json(back) == Json(t));

  Json bad = Json(t);
  bad["learning_rate"] = 0.1;
  CHECK_THROWS_AS(bad.get<TrainConfig>(), ConfigError);

  ScoreSpec s{ScoreKind::Raps, 2, 0.01, 1e-6};
  CHECK(Json(s).get<ScoreSpec>() == s);
  CHECK_THROWS(Json{{"kind", "NOPE"}}.get<ScoreSpec>());

  FederatedConfig f;
  f.devices = 3;
  CHECK(Json(Json(f).get<FederatedConfig>()) == Json(f));
}

TEST_CASE("models and bound reports round-trip") {
  auto m = init_model(ModelSpec{{3, 4, 2}, Activation::Tanh}, RngSeed{1});
  CHECK(Json(m).get<Model>() == m);
  Json broken = m;
  broken["params"].erase(0);
  CHECK_THROWS_AS(broken.get<Model>(), ConfigError);

  BoundReport r;
  r.method = "dpi";
  r.value = 1.5;
  r.terms = {{"binary_entropy", 0.5}, {"covered", 1.0}};
  r.alpha = 0.1;
  r.n = 10;
  r.delta = 0.05;
  auto back = Json(r).get<BoundReport>();
  CHECK(back.method == "dpi");
  CHECK(back.terms == r.terms);
  CHECK(back.delta == r.delta);

  QuantizerModel q{Matrix::from_rows({{1.0, 2.0}, {3.0, 4.0}})};
  CHECK(Json(q).get<QuantizerModel>() == q);
}

TEST_CASE("task specs round-trip") {
  auto g = make_grouped_mixture(4, 3, 2.0, 0.5);
  auto back = Json(g).get<GaussianMixtureSpec>();
  CHECK(back.means == g.means);
  CHECK(back.label_groups == g.label_groups);
  DiscreteTaskSpec d;
  d.marginal = {0.5, 0.5};
  d.conditional = {{1.0, 0.0}, {0.5, 0.5}};
  auto dj = Json(d).get<DiscreteTaskSpec>();
  CHECK(dj.conditional == d.conditional);
}

TEST_CASE("atomic file writes") {
  auto dir = std::filesystem::temp_directory_path() / "ecp_io_test";
  std::filesystem::remove_all(dir);
  auto path = (dir / "sub" / "report.json").string();
  write_json_file(path, Json{{"a", 1}});
  CHECK(read_json_file(path)["a"] == 1);
  CHECK_FALSE(std::filesystem::exists(path + ".tmp"));
  CHECK_THROWS_AS(read_json_file((dir / "missing.json").string()), ConfigError);
  std::filesystem::remove_all(dir);
}
