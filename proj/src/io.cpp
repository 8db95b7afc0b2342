#include "ecp/io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

namespace ecp {

void require_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown field '" + key + "'");
  }
}

Json real_to_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return nullptr;
  return v;
}

double real_from_json(const Json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw ConfigError("expected a number or \"inf\", got \"" + s + "\"");
  }
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  if (!j.is_number()) throw ConfigError("expected a number");
  return j.get<double>();
}

void to_json(Json& j, const RngSeed& s) { j = s.value; }
void from_json(const Json& j, RngSeed& s) {
  if (!j.is_number_integer()) throw ConfigError("seed must be an integer");
  s.value = j.get<std::uint64_t>();
}

void to_json(Json& j, const Matrix& m) {
  j = Json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    j.push_back(std::vector<double>(row.begin(), row.end()));
  }
}
void from_json(const Json& j, Matrix& m) { m = Matrix::from_rows(j.get<std::vector<std::vector<double>>>()); }

void to_json(Json& j, const ScoreSpec& s) {
  j = Json{{"kind", to_string(s.kind)}, {"k_reg", s.k_reg}, {"lambda_reg", s.lambda_reg}, {"jitter", s.jitter}};
}
void from_json(const Json& j, ScoreSpec& s) {
  require_keys(j, {"kind", "k_reg", "lambda_reg", "jitter"}, "score");
  s = ScoreSpec{};
  if (j.contains("kind")) s.kind = score_kind_from_string(j.at("kind").get<std::string>());
  s.k_reg = j.value("k_reg", s.k_reg);
  s.lambda_reg = j.value("lambda_reg", s.lambda_reg);
  s.jitter = j.value("jitter", s.jitter);
  s.validate();
}

void to_json(Json& j, const RelaxConfig& r) {
  j = Json{{"steepness", r.steepness}, {"temperature", r.temperature}, {"swap_kind", to_string(r.swap_kind)}};
}
void from_json(const Json& j, RelaxConfig& r) {
  require_keys(j, {"steepness", "temperature", "swap_kind"}, "relax");
  r = RelaxConfig{};
  r.steepness = j.value("steepness", r.steepness);
  r.temperature = j.value("temperature", r.temperature);
  if (j.contains("swap_kind")) r.swap_kind = swap_kind_from_string(j.at("swap_kind").get<std::string>());
  r.validate();
}

void to_json(Json& j, const Calibration& c) {
  j = Json{{"q_hat", real_to_json(c.q_hat)}, {"n", c.n}, {"alpha", c.alpha}};
}
void from_json(const Json& j, Calibration& c) {
  require_keys(j, {"q_hat", "n", "alpha"}, "calibration");
  c.q_hat = real_from_json(j.at("q_hat"));
  c.n = j.at("n").get<std::size_t>();
  c.alpha = j.at("alpha").get<double>();
}

void to_json(Json& j, const BoundReport& r) {
  Json terms = Json::object();
  for (const auto& [name, v] : r.terms) terms[name] = real_to_json(v);
  j = Json{{"method", r.method}, {"value", real_to_json(r.value)}, {"terms", terms}, {"alpha", r.alpha},
           {"n", r.n},           {"delta", r.delta ? Json(*r.delta) : Json(nullptr)}, {"clip_events", r.clip_events}};
}
void from_json(const Json& j, BoundReport& r) {
  require_keys(j, {"method", "value", "terms", "alpha", "n", "delta", "clip_events"}, "bound report");
  r = BoundReport{};
  r.method = j.at("method").get<std::string>();
  r.value = real_from_json(j.at("value"));
  for (const auto& [name, v] : j.at("terms").items()) r.terms.emplace_back(name, real_from_json(v));
  r.alpha = j.at("alpha").get<double>();
  r.n = j.at("n").get<std::size_t>();
  if (j.contains("delta") && !j.at("delta").is_null()) r.delta = j.at("delta").get<double>();
  r.clip_events = j.value("clip_events", std::size_t{0});
}

void to_json(Json& j, const QuantizerModel& q) { j = Json{{"centroids", q.centroids}}; }
void from_json(const Json& j, QuantizerModel& q) {
  require_keys(j, {"centroids"}, "quantizer");
  q.centroids = j.at("centroids").get<Matrix>();
}

void to_json(Json& j, const ClampedBound& b) {
  j = Json{{"raw", real_to_json(b.raw)}, {"clamped", real_to_json(b.clamped)}, {"informative", b.informative}};
}

void to_json(Json& j, const QuantizedStudyRow& r) {
  j = Json{{"alpha", r.alpha},
           {"simple", r.simple},
           {"model_based", r.model_based},
           {"max_logsize", r.max_logsize},
           {"empirical_logsize", r.empirical_logsize},
           {"coverage", r.coverage}};
}

void to_json(Json& j, const ModelSpec& s) {
  j = Json{{"layer_sizes", s.layer_sizes}, {"activation", to_string(s.activation)}};
}
void from_json(const Json& j, ModelSpec& s) {
  require_keys(j, {"layer_sizes", "activation"}, "model spec");
  s = ModelSpec{};
  s.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
  if (j.contains("activation")) s.activation = activation_from_string(j.at("activation").get<std::string>());
  s.validate();
}

void to_json(Json& j, const Model& m) { j = Json{{"spec", m.spec}, {"params", m.params}}; }
void from_json(const Json& j, Model& m) {
  require_keys(j, {"spec", "params"}, "model");
  m.spec = j.at("spec").get<ModelSpec>();
  m.params = j.at("params").get<std::vector<double>>();
  if (m.params.size() != m.spec.num_params()) {
    throw ConfigError("model: expected " + std::to_string(m.spec.num_params()) + " parameters, got " +
                      std::to_string(m.params.size()));
  }
}

void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"loss", to_string(c.loss)},   {"alpha_train", c.alpha_train}, {"batch_size", c.batch_size},
           {"lr", c.lr},                  {"momentum", c.momentum},       {"epochs", c.epochs},
           {"relax", c.relax},            {"class_weight", c.class_weight}, {"delta", c.delta},
           {"eval_alpha", c.eval_alpha},  {"seed", c.seed}};
}
void from_json(const Json& j, TrainConfig& c) {
  require_keys(j, {"loss", "alpha_train", "batch_size", "lr", "momentum", "epochs", "relax", "class_weight", "delta",
                   "eval_alpha", "seed"},
               "training");
  c = TrainConfig{};
  if (j.contains("loss")) c.loss = loss_kind_from_string(j.at("loss").get<std::string>());
  c.alpha_train = j.value("alpha_train", c.alpha_train);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.epochs = j.value("epochs", c.epochs);
  if (j.contains("relax")) c.relax = j.at("relax").get<RelaxConfig>();
  c.class_weight = j.value("class_weight", c.class_weight);
  c.delta = j.value("delta", c.delta);
  c.eval_alpha = j.value("eval_alpha", c.eval_alpha);
  if (j.contains("seed")) c.seed = j.at("seed").get<RngSeed>();
  c.validate();
}

void to_json(Json& j, const EpochMetrics& m) {
  j = Json{{"epoch", m.epoch},
           {"lr", m.lr},
           {"mean_loss", real_to_json(m.mean_loss)},
           {"train_accuracy", m.train_accuracy},
           {"holdout_inefficiency", real_to_json(m.holdout_inefficiency)},
           {"holdout_coverage", real_to_json(m.holdout_coverage)}};
}

void to_json(Json& j, const SiReport& r) {
  j = Json{{"coverage", r.coverage},
           {"inefficiency", r.inefficiency},
           {"accuracy", r.accuracy},
           {"availability", r.availability},
           {"mondrian", r.mondrian}};
}

void to_json(Json& j, const FederatedConfig& c) {
  j = Json{{"devices", c.devices},
           {"dirichlet_conc", c.dirichlet_conc},
           {"rounds", c.rounds},
           {"local_epochs", c.local_epochs},
           {"base", c.base},
           {"personalize_epochs", c.personalize_epochs},
           {"personalize_lr_scale", c.personalize_lr_scale},
           {"seed", c.seed}};
}
void from_json(const Json& j, FederatedConfig& c) {
  require_keys(j, {"devices", "dirichlet_conc", "rounds", "local_epochs", "base", "personalize_epochs",
                   "personalize_lr_scale", "seed"},
               "federated");
  c = FederatedConfig{};
  c.devices = j.value("devices", c.devices);
  c.dirichlet_conc = j.value("dirichlet_conc", c.dirichlet_conc);
  c.rounds = j.value("rounds", c.rounds);
  c.local_epochs = j.value("local_epochs", c.local_epochs);
  if (j.contains("base")) c.base = j.at("base").get<TrainConfig>();
  c.personalize_epochs = j.value("personalize_epochs", c.personalize_epochs);
  c.personalize_lr_scale = j.value("personalize_lr_scale", c.personalize_lr_scale);
  if (j.contains("seed")) c.seed = j.at("seed").get<RngSeed>();
  c.validate();
}

void to_json(Json& j, const FedRoundMetrics& m) {
  j = Json{{"round", m.round},
           {"lr", m.lr},
           {"objective", real_to_json(m.objective)},
           {"coverage", m.coverage},
           {"inefficiency", m.inefficiency},
           {"coverage_si", m.coverage_si},
           {"inefficiency_si", m.inefficiency_si}};
}

void to_json(Json& j, const GaussianMixtureSpec& s) {
  j = Json{{"num_labels", s.num_labels}, {"dim", s.dim},       {"means", s.means},
           {"diag_vars", s.diag_vars},   {"priors", s.priors}, {"label_groups", s.label_groups}};
}
void from_json(const Json& j, GaussianMixtureSpec& s) {
  require_keys(j, {"num_labels", "dim", "means", "diag_vars", "priors", "label_groups"}, "gaussian mixture");
  s = GaussianMixtureSpec{};
  s.num_labels = j.at("num_labels").get<int>();
  s.dim = j.at("dim").get<int>();
  s.means = j.at("means").get<Matrix>();
  s.diag_vars = j.at("diag_vars").get<Matrix>();
  s.priors = j.at("priors").get<std::vector<double>>();
  s.label_groups = j.value("label_groups", std::vector<int>{});
  s.validate();
}

void to_json(Json& j, const DiscreteTaskSpec& s) {
  j = Json{{"marginal", s.marginal}, {"conditional", s.conditional}, {"group_table", s.group_table}};
}
void from_json(const Json& j, DiscreteTaskSpec& s) {
  require_keys(j, {"marginal", "conditional", "group_table"}, "discrete task");
  s = DiscreteTaskSpec{};
  s.marginal = j.at("marginal").get<std::vector<double>>();
  s.conditional = j.at("conditional").get<std::vector<ProbVector>>();
  s.group_table = j.value("group_table", std::vector<std::vector<ProbVector>>{});
  s.validate();
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const auto tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << text;
    if (!out) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, target);
}

void write_json_file(const std::string& path, const Json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

}  // namespace ecp
