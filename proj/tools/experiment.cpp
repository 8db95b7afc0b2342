#include "experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>

#include "ecp/population.hpp"

namespace ecp::cli {
namespace {

const std::vector<std::string> kBoundMethods{"simple_fano", "mb_fano",    "dpi",       "list_fano",
                                             "conftr",      "dpi_exact",  "dpi_plugin"};

template <class T>
T get_or(const Json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

TaskSource parse_task(const Json& j) {
  TaskSource t;
  if (!j.is_object() || !j.contains("kind")) throw ConfigError("task: missing field 'kind'");
  t.kind = j.at("kind").get<std::string>();
  if (t.kind == "gaussian_mixture") {
    require_keys(j, {"kind", "spec", "n", "seed"}, "task");
    t.mixture = j.at("spec").get<GaussianMixtureSpec>();
  } else if (t.kind == "ring_mixture") {
    require_keys(j, {"kind", "num_labels", "dim", "radius", "variance", "n", "seed"}, "task");
    t.mixture = make_ring_mixture(get_or(j, "num_labels", 10), get_or(j, "dim", 5), get_or(j, "radius", 2.0),
                                  get_or(j, "variance", 1.0));
  } else if (t.kind == "grouped_mixture") {
    require_keys(j, {"kind", "positions", "groups", "radius", "variance", "n", "seed"}, "task");
    t.mixture = make_grouped_mixture(get_or(j, "positions", 4), get_or(j, "groups", 3), get_or(j, "radius", 2.0),
                                     get_or(j, "variance", 0.5));
  } else if (t.kind == "discrete") {
    require_keys(j, {"kind", "spec", "n", "seed"}, "task");
    t.discrete = j.at("spec").get<DiscreteTaskSpec>();
  } else if (t.kind == "dataset") {
    require_keys(j, {"kind", "path"}, "task");
    t.path = j.at("path").get<std::string>();
  } else if (t.kind == "csv") {
    require_keys(j, {"kind", "path", "label_column", "side_info_column"}, "task");
    t.path = j.at("path").get<std::string>();
    t.csv.label_column = get_or<std::string>(j, "label_column", "label");
    if (j.contains("side_info_column")) t.csv.side_info_column = j.at("side_info_column").get<std::string>();
  } else if (t.kind == "idx") {
    require_keys(j, {"kind", "images", "labels"}, "task");
    t.path = j.at("images").get<std::string>();
    t.labels_path = j.at("labels").get<std::string>();
  } else {
    throw ConfigError("task: unknown kind '" + t.kind + "'");
  }
  if (t.is_generated()) {
    t.n = get_or<std::size_t>(j, "n", t.n);
    if (t.n < 2) throw ConfigError("task: n must be at least 2");
    if (j.contains("seed")) t.seed = j.at("seed").get<RngSeed>();
  } else {
    for (const auto& p : {t.path, t.labels_path}) {
      if (!p.empty() && !std::filesystem::exists(p)) throw ConfigError("task: file not found: " + p);
    }
  }
  return t;
}

SideInfoSettings parse_side_info(const Json& j) {
  require_keys(j, {"availability", "mondrian", "side_fraction", "epochs", "lr", "batch_size", "seed"}, "side_info");
  SideInfoSettings s;
  s.availability = get_or(j, "availability", s.availability);
  s.mondrian = get_or(j, "mondrian", s.mondrian);
  s.side_fraction = get_or(j, "side_fraction", s.side_fraction);
  s.train.epochs = get_or(j, "epochs", s.train.epochs);
  s.train.lr = get_or(j, "lr", s.train.lr);
  s.train.batch_size = get_or(j, "batch_size", s.train.batch_size);
  if (j.contains("seed")) s.train.seed = j.at("seed").get<RngSeed>();
  for (double a : s.availability) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("side_info: availability must lie in [0, 1]");
  }
  if (!(s.side_fraction > 0.0 && s.side_fraction < 1.0)) throw ConfigError("side_info: side_fraction must lie in (0, 1)");
  if (s.train.epochs < 0 || !(s.train.lr > 0.0) || s.train.batch_size == 0) {
    throw ConfigError("side_info: epochs >= 0, lr > 0 and batch_size > 0 required");
  }
  return s;
}

QuantizedStudyConfig parse_setsize(const Json& j) {
  require_keys(j, {"clusters", "kmeans_iters"}, "setsize");
  QuantizedStudyConfig q;
  q.clusters = get_or(j, "clusters", q.clusters);
  q.kmeans_iters = get_or(j, "kmeans_iters", q.kmeans_iters);
  if (q.clusters < 1 || q.kmeans_iters < 1) throw ConfigError("setsize: clusters and kmeans_iters must be positive");
  return q;
}

ModelSource parse_model(const Json& j) {
  require_keys(j, {"kind", "path"}, "model");
  ModelSource m;
  m.kind = get_or<std::string>(j, "kind", m.kind);
  if (m.kind == "checkpoint") {
    m.path = j.at("path").get<std::string>();
    if (!std::filesystem::exists(m.path)) throw ConfigError("model: file not found: " + m.path);
  } else if (m.kind != "bayes") {
    throw ConfigError("model: unknown kind '" + m.kind + "'");
  }
  return m;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Population standard deviation across seeds.
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::string fmt(double v, int digits = 6) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string mean_pm_std(const std::vector<double>& v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.3f_{±%.3f}", mean_of(v), std_of(v));
  return buf;
}

Json summary(const std::vector<double>& v) {
  return Json{{"mean", real_to_json(mean_of(v))}, {"std", real_to_json(std_of(v))}, {"formatted", mean_pm_std(v)}};
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

// Dataset plus model probabilities for every row.
struct Prepared {
  LabeledDataset data;
  std::vector<ProbVector> probs;
  Matrix logits;
};

LabeledDataset load_task(const TaskSource& t) {
  if (t.is_mixture()) return gen_gaussian_mixture(t.mixture, t.n, t.seed);
  if (t.is_discrete()) return gen_discrete_task(t.discrete, t.n, t.seed);
  if (t.kind == "dataset") return load_dataset(t.path);
  if (t.kind == "csv") return load_csv(t.path, t.csv);
  return load_idx(t.path, t.labels_path);
}

Model load_checkpoint(const std::string& path) { return read_json_file(path).get<Model>(); }

Prepared prepare(const ExperimentConfig& cfg) {
  Prepared p;
  p.data = load_task(cfg.task);
  const std::size_t n = p.data.size();
  if (cfg.model.kind == "checkpoint") {
    const Model m = load_checkpoint(cfg.model.path);
    if (static_cast<std::size_t>(m.spec.input_dim()) != p.data.dim() || m.spec.num_labels() != p.data.num_labels) {
      throw ConfigError("model: checkpoint shape does not match the task data");
    }
    p.logits = predict_logits(m, p.data.features);
    p.probs.resize(n);
    for (std::size_t i = 0; i < n; ++i) p.probs[i] = softmax(p.logits.row(i));
    return p;
  }
  if (!cfg.task.is_generated()) throw ConfigError("model: kind 'bayes' needs a generated task; use a checkpoint");
  p.probs.resize(n);
  p.logits = Matrix(n, static_cast<std::size_t>(p.data.num_labels));
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = p.data.features.row(i);
    p.probs[i] = cfg.task.is_mixture() ? gmm_posterior(cfg.task.mixture, x)
                                       : cfg.task.discrete.conditional[one_hot_index(x)];
    for (std::size_t k = 0; k < p.probs[i].size(); ++k) p.logits(i, k) = std::log(std::max(p.probs[i][k], kProbFloor));
  }
  return p;
}

RngSeed split_seed(std::uint64_t seed) { return derive_seed(RngSeed{seed}, 0); }
RngSeed jitter_seed(std::uint64_t seed, std::size_t example) {
  return derive_seed(derive_seed(RngSeed{seed}, 1), example);
}

struct Cell {
  std::vector<std::size_t> cal, test;
};

Cell split_cell(std::size_t n, double cal_fraction, std::uint64_t seed) {
  auto [cal, test] = split_indices(n, cal_fraction, split_seed(seed));
  if (cal.empty() || test.empty()) throw ConfigError("cal_fraction leaves an empty calibration or test split");
  return {std::move(cal), std::move(test)};
}

Calibration calibrate_cell(const Prepared& p, const ScoreSpec& score, const Cell& cell, double alpha,
                           std::uint64_t seed) {
  std::vector<double> s;
  s.reserve(cell.cal.size());
  for (std::size_t i : cell.cal) s.push_back(ecp::score(score, p.probs[i], p.data.labels[i], jitter_seed(seed, i)));
  return calibrate(s, alpha);
}

std::vector<PredictionSet> test_sets(const Prepared& p, const ScoreSpec& score, const Cell& cell,
                                     const Calibration& c, std::uint64_t seed) {
  std::vector<PredictionSet> sets;
  sets.reserve(cell.test.size());
  for (std::size_t i : cell.test) sets.push_back(predict_set(c, score, p.probs[i], jitter_seed(seed, i)));
  return sets;
}

std::vector<int> labels_of(const Prepared& p, const std::vector<std::size_t>& idx) {
  std::vector<int> y;
  y.reserve(idx.size());
  for (std::size_t i : idx) y.push_back(p.data.labels[i]);
  return y;
}

ModelSpec model_spec_for(const ExperimentConfig& cfg, const LabeledDataset& ds) {
  ModelSpec spec = cfg.model_spec ? *cfg.model_spec
                                  : ModelSpec{{static_cast<int>(ds.dim()), ds.num_labels}, Activation::Relu};
  if (static_cast<std::size_t>(spec.input_dim()) != ds.dim() || spec.num_labels() != ds.num_labels) {
    throw ConfigError("model_spec: layer sizes must start at the feature dimension and end at the label count");
  }
  return spec;
}

}  // namespace

ExperimentConfig parse_config(const Json& doc) {
  require_keys(doc,
               {"description", "task", "score", "alphas", "seeds", "cal_fraction", "train_fraction", "bounds", "delta",
                "model", "model_spec", "training", "federated", "side_info", "setsize", "output_dir"},
               "config");
  ExperimentConfig c;
  if (!doc.contains("task")) throw ConfigError("config: missing field 'task'");
  c.task = parse_task(doc.at("task"));
  if (doc.contains("score")) c.score = doc.at("score").get<ScoreSpec>();
  c.alphas = get_or(doc, "alphas", c.alphas);
  c.seeds = get_or(doc, "seeds", c.seeds);
  c.cal_fraction = get_or(doc, "cal_fraction", c.cal_fraction);
  c.train_fraction = get_or(doc, "train_fraction", c.train_fraction);
  c.bounds = get_or(doc, "bounds", c.bounds);
  c.delta = get_or(doc, "delta", c.delta);
  if (doc.contains("model")) c.model = parse_model(doc.at("model"));
  if (doc.contains("model_spec")) c.model_spec = doc.at("model_spec").get<ModelSpec>();
  if (doc.contains("training")) c.training = doc.at("training").get<TrainConfig>();
  if (doc.contains("federated")) c.federated = doc.at("federated").get<FederatedConfig>();
  if (doc.contains("side_info")) c.side_info = parse_side_info(doc.at("side_info"));
  if (doc.contains("setsize")) c.setsize = parse_setsize(doc.at("setsize"));
  c.output_dir = get_or(doc, "output_dir", c.output_dir);

  if (c.alphas.empty()) throw ConfigError("alphas: at least one value required");
  for (double a : c.alphas) {
    if (!(a > 0.0 && a < 1.0)) throw ConfigError("alphas: every value must lie in (0, 1)");
  }
  if (c.seeds.empty()) throw ConfigError("seeds: at least one value required");
  if (!(c.cal_fraction > 0.0 && c.cal_fraction < 1.0)) throw ConfigError("cal_fraction must lie in (0, 1)");
  if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
  if (!(c.delta > 0.0 && c.delta < 1.0)) throw ConfigError("delta must lie in (0, 1)");
  for (const auto& b : c.bounds) {
    if (std::find(kBoundMethods.begin(), kBoundMethods.end(), b) == kBoundMethods.end()) {
      throw ConfigError("bounds: unknown method '" + b + "'");
    }
  }
  if (c.output_dir.empty()) throw ConfigError("output_dir must not be empty");
  return c;
}

Outputs cmd_gen_data(const ExperimentConfig& cfg) {
  const LabeledDataset ds = load_task(cfg.task);
  const std::string path = (std::filesystem::path(cfg.output_dir) / "data.ecd").string();
  std::filesystem::create_directories(cfg.output_dir);
  save_dataset(ds, path);

  Outputs out;
  std::vector<std::size_t> counts(static_cast<std::size_t>(ds.num_labels), 0);
  for (int y : ds.labels) ++counts[static_cast<std::size_t>(y)];
  out.report = Json{{"command", "gen-data"},
                    {"path", "data.ecd"},
                    {"n", ds.size()},
                    {"dim", ds.dim()},
                    {"num_labels", ds.num_labels},
                    {"num_groups", ds.num_groups},
                    {"label_counts", counts}};
  if (cfg.task.is_discrete()) {
    out.report["h_y_given_x"] = discrete_exact_entropy(cfg.task.discrete);
    if (cfg.task.discrete.has_groups()) {
      out.report["h_y_given_x_z"] = discrete_exact_entropy_given_z(cfg.task.discrete);
    }
  } else if (cfg.task.is_mixture()) {
    const auto mc = gmm_cond_entropy_mc(cfg.task.mixture, 20000, derive_seed(cfg.task.seed, 1));
    out.report["h_y_given_x"] = mc.mean;
    out.report["h_y_given_x_se"] = mc.std_error;
  }
  out.csv_header = {"label", "count"};
  for (std::size_t k = 0; k < counts.size(); ++k) out.csv_rows.push_back({std::to_string(k), std::to_string(counts[k])});
  return out;
}

Outputs cmd_calibrate(const ExperimentConfig& cfg) {
  const Prepared p = prepare(cfg);
  const std::size_t na = cfg.alphas.size();
  std::vector<Calibration> cells(cfg.seeds.size() * na);
  parallel_for(cfg.seeds.size(), [&](std::size_t s) {
    const Cell cell = split_cell(p.data.size(), cfg.cal_fraction, cfg.seeds[s]);
    for (std::size_t a = 0; a < na; ++a) cells[s * na + a] = calibrate_cell(p, cfg.score, cell, cfg.alphas[a], cfg.seeds[s]);
  });

  Outputs out;
  out.report = Json{{"command", "calibrate"}, {"score", cfg.score}, {"calibrations", Json::array()}};
  out.csv_header = {"seed", "alpha", "n", "rank", "q_hat"};
  for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
    for (std::size_t a = 0; a < na; ++a) {
      const auto& c = cells[s * na + a];
      const std::size_t rank = conformal_rank(c.n, c.alpha);
      Json row{{"seed", cfg.seeds[s]}, {"alpha", c.alpha}, {"n", c.n}, {"rank", rank}, {"q_hat", real_to_json(c.q_hat)}};
      out.report["calibrations"].push_back(row);
      out.metrics.push_back(row);
      out.csv_rows.push_back({std::to_string(cfg.seeds[s]), fmt(c.alpha), std::to_string(c.n), std::to_string(rank),
                              fmt(c.q_hat, 17)});
    }
  }
  return out;
}

Outputs cmd_evaluate(const ExperimentConfig& cfg) {
  const Prepared p = prepare(cfg);
  const std::size_t na = cfg.alphas.size();
  struct Result {
    double q_hat, coverage, inefficiency;
  };
  std::vector<Result> cells(cfg.seeds.size() * na);
  parallel_for(cfg.seeds.size(), [&](std::size_t s) {
    const Cell cell = split_cell(p.data.size(), cfg.cal_fraction, cfg.seeds[s]);
    const auto labels = labels_of(p, cell.test);
    for (std::size_t a = 0; a < na; ++a) {
      const auto c = calibrate_cell(p, cfg.score, cell, cfg.alphas[a], cfg.seeds[s]);
      const auto sets = test_sets(p, cfg.score, cell, c, cfg.seeds[s]);
      cells[s * na + a] = {c.q_hat, coverage(sets, labels), inefficiency(sets)};
    }
  });

  Outputs out;
  out.report = Json{{"command", "evaluate"}, {"score", cfg.score}, {"seeds", cfg.seeds}, {"results", Json::array()}};
  out.csv_header = {"alpha", "coverage_mean", "coverage_std", "inefficiency_mean", "inefficiency_std", "inefficiency"};
  for (std::size_t a = 0; a < na; ++a) {
    std::vector<double> cov, ineff;
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
      const auto& r = cells[s * na + a];
      cov.push_back(r.coverage);
      ineff.push_back(r.inefficiency);
      out.metrics.push_back(Json{{"seed", cfg.seeds[s]},
                                 {"alpha", cfg.alphas[a]},
                                 {"q_hat", real_to_json(r.q_hat)},
                                 {"coverage", r.coverage},
                                 {"inefficiency", r.inefficiency}});
    }
    out.report["results"].push_back(
        Json{{"alpha", cfg.alphas[a]}, {"coverage", summary(cov)}, {"inefficiency", summary(ineff)}});
    out.csv_rows.push_back({fmt(cfg.alphas[a]), fmt(mean_of(cov)), fmt(std_of(cov)), fmt(mean_of(ineff)),
                            fmt(std_of(ineff)), mean_pm_std(ineff)});
  }
  return out;
}

Outputs cmd_bounds(const ExperimentConfig& cfg) {
  for (double a : cfg.alphas) require_bound_alpha(a);
  const Prepared p = prepare(cfg);
  const std::size_t na = cfg.alphas.size();
  const std::size_t nb = cfg.bounds.size();
  // values[(s * na + a) * nb + b]; cross-entropy per seed as the model reference.
  std::vector<double> values(cfg.seeds.size() * na * nb);
  std::vector<double> ce(cfg.seeds.size() * na);
  std::vector<Json> reports(cfg.seeds.size() * na * nb);
  parallel_for(cfg.seeds.size(), [&](std::size_t s) {
    const Cell cell = split_cell(p.data.size(), cfg.cal_fraction, cfg.seeds[s]);
    for (std::size_t a = 0; a < na; ++a) {
      const double alpha = cfg.alphas[a];
      const auto c = calibrate_cell(p, cfg.score, cell, alpha, cfg.seeds[s]);
      EvalBatch batch;
      batch.sets = test_sets(p, cfg.score, cell, c, cfg.seeds[s]);
      batch.labels = labels_of(p, cell.test);
      for (std::size_t i : cell.test) batch.probs.push_back(p.probs[i]);
      batch.n_cal = cell.cal.size();
      ce[s * na + a] = cross_entropy(batch);
      for (std::size_t b = 0; b < nb; ++b) {
        const auto& m = cfg.bounds[b];
        BoundReport r;
        if (m == "simple_fano") {
          r = simple_fano_bound(batch, alpha);
        } else if (m == "mb_fano") {
          r = mb_fano_bound(batch, alpha);
        } else if (m == "dpi") {
          r = dpi_bound(batch, alpha, cfg.delta);
        } else if (m == "dpi_plugin") {
          r = dpi_plugin_bound(batch, alpha);
        } else {
          r.method = m;
          r.alpha = alpha;
          r.n = batch.n_cal;
          if (m == "list_fano") r.value = list_fano_bound(batch, alpha);
          if (m == "dpi_exact") r.value = dpi_exact(batch);
          if (m == "conftr") {
            r.value = conftr_bound(inefficiency(batch.sets), alpha, batch.n_cal, batch.num_labels());
          }
        }
        values[(s * na + a) * nb + b] = r.value;
        Json j = r;
        j["seed"] = cfg.seeds[s];
        reports[(s * na + a) * nb + b] = std::move(j);
      }
    }
  });

  Outputs out;
  out.report = Json{{"command", "bounds"}, {"score", cfg.score}, {"delta", cfg.delta}, {"units", "nats"}};
  if (cfg.task.is_discrete()) out.report["h_y_given_x"] = discrete_exact_entropy(cfg.task.discrete);
  if (cfg.task.is_mixture()) {
    out.report["h_y_given_x"] = gmm_cond_entropy_mc(cfg.task.mixture, 20000, derive_seed(cfg.task.seed, 1)).mean;
  }
  out.report["results"] = Json::array();
  out.csv_header = {"alpha", "method", "mean", "std"};
  for (std::size_t a = 0; a < na; ++a) {
    Json row{{"alpha", cfg.alphas[a]}};
    std::vector<double> ce_a;
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) ce_a.push_back(ce[s * na + a]);
    row["cross_entropy"] = summary(ce_a);
    Json bounds = Json::object();
    for (std::size_t b = 0; b < nb; ++b) {
      std::vector<double> v;
      for (std::size_t s = 0; s < cfg.seeds.size(); ++s) v.push_back(values[(s * na + a) * nb + b]);
      bounds[cfg.bounds[b]] = summary(v);
      out.csv_rows.push_back({fmt(cfg.alphas[a]), cfg.bounds[b], fmt(mean_of(v)), fmt(std_of(v))});
    }
    out.csv_rows.push_back({fmt(cfg.alphas[a]), "cross_entropy", fmt(mean_of(ce_a)), fmt(std_of(ce_a))});
    row["bounds"] = std::move(bounds);
    out.report["results"].push_back(std::move(row));
  }
  for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
    for (std::size_t a = 0; a < na; ++a) {
      for (std::size_t b = 0; b < nb; ++b) out.metrics.push_back(reports[(s * na + a) * nb + b]);
    }
  }
  return out;
}

Outputs cmd_setsize(const ExperimentConfig& cfg) {
  for (double a : cfg.alphas) require_bound_alpha(a);
  const Prepared p = prepare(cfg);
  std::vector<QuantizedStudy> studies(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), [&](std::size_t s) {
    const Cell cell = split_cell(p.data.size(), cfg.cal_fraction, cfg.seeds[s]);
    auto rows_of = [&](const std::vector<std::size_t>& idx) {
      Matrix m(idx.size(), p.logits.cols());
      for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(p.logits.row(idx[r]).begin(), m.cols(), m.row(r).begin());
      return m;
    };
    QuantizedStudyConfig q = cfg.setsize;
    q.alphas = cfg.alphas;
    q.score = cfg.score;
    q.seed = derive_seed(RngSeed{cfg.seeds[s]}, 2);
    studies[s] = quantized_setsize_study(rows_of(cell.cal), labels_of(p, cell.cal), rows_of(cell.test),
                                         labels_of(p, cell.test), q);
  });

  Outputs out;
  out.report = Json{{"command", "setsize"}, {"clusters", cfg.setsize.clusters}, {"units", "nats"}};
  std::vector<double> h_lb;
  for (const auto& st : studies) h_lb.push_back(st.h_lb);
  out.report["h_lb"] = summary(h_lb);
  out.report["results"] = Json::array();
  out.csv_header = {"seed", "alpha", "simple", "model_based", "max_logsize", "empirical_logsize", "coverage"};
  for (std::size_t a = 0; a < cfg.alphas.size(); ++a) {
    std::vector<double> simple, mb, mx, emp, cov;
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
      const auto& r = studies[s].rows[a];
      simple.push_back(r.simple.clamped);
      mb.push_back(r.model_based.clamped);
      mx.push_back(r.max_logsize.clamped);
      emp.push_back(r.empirical_logsize);
      cov.push_back(r.coverage);
    }
    out.report["results"].push_back(Json{{"alpha", cfg.alphas[a]},
                                         {"simple", summary(simple)},
                                         {"model_based", summary(mb)},
                                         {"max_logsize", summary(mx)},
                                         {"empirical_logsize", summary(emp)},
                                         {"coverage", summary(cov)}});
  }
  for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
    for (const auto& r : studies[s].rows) {
      Json j = r;
      j["seed"] = cfg.seeds[s];
      j["h_lb"] = studies[s].h_lb;
      out.metrics.push_back(std::move(j));
      out.csv_rows.push_back({std::to_string(cfg.seeds[s]), fmt(r.alpha), fmt(r.simple.clamped),
                              fmt(r.model_based.clamped), fmt(r.max_logsize.clamped), fmt(r.empirical_logsize),
                              fmt(r.coverage)});
    }
  }
  return out;
}

namespace {

// Coverage / inefficiency of a fixed model on `eval`, over the configured seeds and alphas.
Json evaluate_model(const Model& model, const LabeledDataset& eval, const ExperimentConfig& cfg,
                    std::vector<std::vector<std::string>>& csv_rows, const std::string& arm) {
  Prepared p;
  p.data = eval;
  p.probs = predict_probs(model, eval.features);
  const std::size_t na = cfg.alphas.size();
  std::vector<std::pair<double, double>> cells(cfg.seeds.size() * na);
  parallel_for(cfg.seeds.size(), [&](std::size_t s) {
    const Cell cell = split_cell(p.data.size(), cfg.cal_fraction, cfg.seeds[s]);
    const auto labels = labels_of(p, cell.test);
    for (std::size_t a = 0; a < na; ++a) {
      const auto c = calibrate_cell(p, cfg.score, cell, cfg.alphas[a], cfg.seeds[s]);
      const auto sets = test_sets(p, cfg.score, cell, c, cfg.seeds[s]);
      cells[s * na + a] = {coverage(sets, labels), inefficiency(sets)};
    }
  });
  Json results = Json::array();
  for (std::size_t a = 0; a < na; ++a) {
    std::vector<double> cov, ineff;
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
      cov.push_back(cells[s * na + a].first);
      ineff.push_back(cells[s * na + a].second);
    }
    results.push_back(Json{{"alpha", cfg.alphas[a]}, {"coverage", summary(cov)}, {"inefficiency", summary(ineff)}});
    csv_rows.push_back({arm, fmt(cfg.alphas[a]), fmt(mean_of(cov)), fmt(std_of(cov)), fmt(mean_of(ineff)),
                        fmt(std_of(ineff)), mean_pm_std(ineff)});
  }
  return results;
}

double accuracy_of(const Model& model, const LabeledDataset& ds) {
  const Matrix logits = predict_logits(model, ds.features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto row = logits.row(i);
    hits += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) ==
            static_cast<std::size_t>(ds.labels[i]);
  }
  return ds.size() == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(ds.size());
}

}  // namespace

Outputs cmd_train(const ExperimentConfig& cfg) {
  const LabeledDataset ds = load_task(cfg.task);
  auto [train_set, eval_set] = split(ds, cfg.train_fraction, derive_seed(cfg.training.seed, 7));
  Model init = cfg.model.kind == "checkpoint" ? load_checkpoint(cfg.model.path)
                                              : init_model(model_spec_for(cfg, ds), derive_seed(cfg.training.seed, 8));
  if (static_cast<std::size_t>(init.spec.input_dim()) != ds.dim() || init.spec.num_labels() != ds.num_labels) {
    throw ConfigError("model: checkpoint shape does not match the task data");
  }
  const TrainResult result = train(std::move(init), train_set, cfg.training, &eval_set);

  std::filesystem::create_directories(cfg.output_dir);
  write_json_file((std::filesystem::path(cfg.output_dir) / "model.json").string(), Json(result.model));

  Outputs out;
  out.report = Json{{"command", "train"},
                    {"model", "model.json"},
                    {"training", cfg.training},
                    {"train_size", train_set.size()},
                    {"eval_size", eval_set.size()},
                    {"test_accuracy", accuracy_of(result.model, eval_set)}};
  for (const auto& m : result.history) out.metrics.push_back(Json(m));
  if (!result.history.empty()) out.report["final_epoch"] = result.history.back();
  out.csv_header = {"arm", "alpha", "coverage_mean", "coverage_std", "inefficiency_mean", "inefficiency_std",
                    "inefficiency"};
  out.report["results"] = evaluate_model(result.model, eval_set, cfg, out.csv_rows, to_string(cfg.training.loss));
  return out;
}

Outputs cmd_sideinfo(const ExperimentConfig& cfg) {
  Prepared all = prepare(cfg);
  if (!all.data.has_side_info()) throw ConfigError("sideinfo: the task data carries no side information");

  SideModel side;
  std::vector<std::size_t> eval_idx;
  std::string side_kind;
  if (cfg.task.is_discrete() && cfg.task.discrete.has_groups()) {
    side = table_side_model(cfg.task.discrete);
    side_kind = "table";
    for (std::size_t i = 0; i < all.data.size(); ++i) eval_idx.push_back(i);
  } else {
    auto [fit_idx, rest] = split_indices(all.data.size(), cfg.side_info.side_fraction, cfg.side_info.train.seed);
    side = train_side_model(all.data.subset(fit_idx), cfg.side_info.train);
    side_kind = "linear";
    eval_idx = std::move(rest);
  }
  const LabeledDataset eval = all.data.subset(eval_idx);
  std::vector<ProbVector> probs;
  for (std::size_t i : eval_idx) probs.push_back(all.probs[i]);

  std::vector<bool> arms{false};
  if (cfg.side_info.mondrian) arms.push_back(true);
  const std::size_t na = cfg.alphas.size(), nv = cfg.side_info.availability.size(), nm = arms.size();
  const std::size_t per_seed = na * nv * nm;
  std::vector<SiReport> cells(cfg.seeds.size() * per_seed);
  parallel_for(cfg.seeds.size(), [&](std::size_t s) {
    auto [cal_idx, test_idx] = split_indices(eval.size(), cfg.cal_fraction, split_seed(cfg.seeds[s]));
    if (cal_idx.empty() || test_idx.empty()) throw ConfigError("cal_fraction leaves an empty split");
    const auto cal = eval.subset(cal_idx), test = eval.subset(test_idx);
    std::vector<ProbVector> cp, tp;
    for (std::size_t i : cal_idx) cp.push_back(probs[i]);
    for (std::size_t i : test_idx) tp.push_back(probs[i]);
    std::size_t k = s * per_seed;
    for (double alpha : cfg.alphas) {
      for (double avail : cfg.side_info.availability) {
        for (bool mondrian : arms) {
          SiEvalConfig sc{cfg.score, alpha, avail, mondrian, derive_seed(RngSeed{cfg.seeds[s]}, 3)};
          cells[k++] = evaluate_si(cal, test, cp, tp, side, sc);
        }
      }
    }
  });

  Outputs out;
  out.report = Json{{"command", "sideinfo"},
                    {"side_model", side_kind},
                    {"side_log_likelihood", side_log_likelihood(side, eval)},
                    {"results", Json::array()}};
  out.csv_header = {"alpha", "availability", "mondrian", "coverage_mean", "coverage_std", "inefficiency_mean",
                    "inefficiency_std", "inefficiency", "accuracy_mean"};
  for (std::size_t a = 0; a < na; ++a) {
    for (std::size_t v = 0; v < nv; ++v) {
      for (std::size_t m = 0; m < nm; ++m) {
        std::vector<double> cov, ineff, acc;
        for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
          const auto& r = cells[s * per_seed + (a * nv + v) * nm + m];
          cov.push_back(r.coverage);
          ineff.push_back(r.inefficiency);
          acc.push_back(r.accuracy);
          Json j = r;
          j["seed"] = cfg.seeds[s];
          j["alpha"] = cfg.alphas[a];
          out.metrics.push_back(std::move(j));
        }
        out.report["results"].push_back(Json{{"alpha", cfg.alphas[a]},
                                             {"availability", cfg.side_info.availability[v]},
                                             {"mondrian", static_cast<bool>(arms[m])},
                                             {"coverage", summary(cov)},
                                             {"inefficiency", summary(ineff)},
                                             {"accuracy", summary(acc)}});
        out.csv_rows.push_back({fmt(cfg.alphas[a]), fmt(cfg.side_info.availability[v]), arms[m] ? "true" : "false",
                                fmt(mean_of(cov)), fmt(std_of(cov)), fmt(mean_of(ineff)), fmt(std_of(ineff)),
                                mean_pm_std(ineff), fmt(mean_of(acc))});
      }
    }
  }
  return out;
}

Outputs cmd_fed_train(const ExperimentConfig& cfg) {
  const LabeledDataset ds = load_task(cfg.task);
  const auto& fed = cfg.federated;
  const auto parts = dirichlet_partition(ds, fed.devices, fed.dirichlet_conc, derive_seed(fed.seed, 1));

  std::vector<LabeledDataset> train_parts, eval_parts;
  LabeledDataset pooled;
  pooled.num_labels = ds.num_labels;
  pooled.num_groups = fed.devices;
  pooled.features = Matrix(0, ds.dim());
  std::vector<double> pooled_x;
  for (int d = 0; d < fed.devices; ++d) {
    auto [tr, ev] = split(parts[static_cast<std::size_t>(d)], cfg.train_fraction,
                          derive_seed(fed.seed, 100 + static_cast<std::uint64_t>(d)));
    for (std::size_t i = 0; i < ev.size(); ++i) {
      pooled_x.insert(pooled_x.end(), ev.features.row(i).begin(), ev.features.row(i).end());
      pooled.labels.push_back(ev.labels[i]);
      pooled.side_info.push_back(d);
    }
    train_parts.push_back(std::move(tr));
    eval_parts.push_back(std::move(ev));
  }
  pooled.features = Matrix(pooled.labels.size(), ds.dim());
  pooled.features.data() = std::move(pooled_x);

  auto [cal0, test0] = split(pooled, cfg.cal_fraction, split_seed(cfg.seeds.front()));
  const FedEvalData monitor{cal0, test0};
  const Model trunk = init_model(model_spec_for(cfg, ds), derive_seed(fed.seed, 2));
  const GlobalModel init = init_global_model(trunk, fed.devices, derive_seed(fed.seed, 3));
  const FedResult result = federated_train(init, train_parts, fed, &monitor);

  std::filesystem::create_directories(cfg.output_dir);
  write_json_file((std::filesystem::path(cfg.output_dir) / "model.json").string(),
                  Json{{"trunk", result.model.trunk},
                       {"head_z_x", result.model.head_z_x},
                       {"head_z_xy", result.model.head_z_xy}});

  // Personalized models: one CE fine-tune per device, evaluated on that device's own split.
  std::vector<Model> personal(static_cast<std::size_t>(fed.devices));
  parallel_for(personal.size(), [&](std::size_t d) {
    personal[d] = personalize(result.model, train_parts[d], fed.personalize_epochs,
                              fed.base.lr * fed.personalize_lr_scale, derive_seed(fed.seed, 200 + d));
  });

  const std::size_t na = cfg.alphas.size();
  struct Arms {
    double glo_cov, glo_ineff, si_cov, si_ineff, per_cov, per_ineff;
  };
  std::vector<Arms> cells(cfg.seeds.size() * na);
  parallel_for(cfg.seeds.size(), [&](std::size_t s) {
    const std::uint64_t seed = cfg.seeds[s];
    auto [cal, test] = split(pooled, cfg.cal_fraction, split_seed(seed));
    for (std::size_t a = 0; a < na; ++a) {
      const double alpha = cfg.alphas[a];
      const auto g = evaluate_global(result.model, FedEvalData{cal, test}, cfg.score, alpha,
                                     derive_seed(RngSeed{seed}, 4));
      double covered = 0.0, total_size = 0.0, count = 0.0;
      for (int d = 0; d < fed.devices; ++d) {
        const auto& ev = eval_parts[static_cast<std::size_t>(d)];
        if (ev.size() < 2) continue;
        Prepared p;
        p.data = ev;
        p.probs = predict_probs(personal[static_cast<std::size_t>(d)], ev.features);
        auto [ci, ti] = split_indices(ev.size(), cfg.cal_fraction, split_seed(seed));
        if (ci.empty() || ti.empty()) continue;
        const Cell cell{ci, ti};
        const auto c = calibrate_cell(p, cfg.score, cell, alpha, seed);
        const auto sets = test_sets(p, cfg.score, cell, c, seed);
        const auto labels = labels_of(p, ti);
        const double nt = static_cast<double>(ti.size());
        covered += coverage(sets, labels) * nt;
        total_size += inefficiency(sets) * nt;
        count += nt;
      }
      cells[s * na + a] = {g.coverage,      g.inefficiency,  g.coverage_si, g.inefficiency_si,
                           covered / count, total_size / count};
    }
  });

  Outputs out;
  out.report = Json{{"command", "fed-train"},
                    {"model", "model.json"},
                    {"federated", fed},
                    {"device_sizes", Json::array()},
                    {"results", Json::array()}};
  for (const auto& t : train_parts) out.report["device_sizes"].push_back(t.size());
  if (!result.history.empty()) out.report["final_round"] = result.history.back();
  for (const auto& m : result.history) out.metrics.push_back(Json(m));
  out.csv_header = {"alpha", "arm", "coverage_mean", "coverage_std", "inefficiency_mean", "inefficiency_std",
                    "inefficiency"};
  const char* names[] = {"GLO", "GLO+SI", "PER"};
  for (std::size_t a = 0; a < na; ++a) {
    Json row{{"alpha", cfg.alphas[a]}};
    for (int arm = 0; arm < 3; ++arm) {
      std::vector<double> cov, ineff;
      for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
        const auto& c = cells[s * na + a];
        const double pairs[3][2] = {{c.glo_cov, c.glo_ineff}, {c.si_cov, c.si_ineff}, {c.per_cov, c.per_ineff}};
        cov.push_back(pairs[arm][0]);
        ineff.push_back(pairs[arm][1]);
      }
      row[names[arm]] = Json{{"coverage", summary(cov)}, {"inefficiency", summary(ineff)}};
      out.csv_rows.push_back({fmt(cfg.alphas[a]), names[arm], fmt(mean_of(cov)), fmt(std_of(cov)),
                              fmt(mean_of(ineff)), fmt(std_of(ineff)), mean_pm_std(ineff)});
    }
    out.report["results"].push_back(std::move(row));
  }
  return out;
}

void write_outputs(const std::string& dir, const Outputs& out) {
  const std::filesystem::path base(dir);
  write_json_file((base / "report.json").string(), out.report);

  std::ostringstream csv;
  for (std::size_t i = 0; i < out.csv_header.size(); ++i) csv << (i ? "," : "") << csv_field(out.csv_header[i]);
  csv << '\n';
  for (const auto& row : out.csv_rows) {
    for (std::size_t i = 0; i < row.size(); ++i) csv << (i ? "," : "") << csv_field(row[i]);
    csv << '\n';
  }
  write_text_atomic((base / "table.csv").string(), csv.str());

  std::string lines;
  for (const auto& m : out.metrics) lines += m.dump() + '\n';
  write_text_atomic((base / "metrics.jsonl").string(), lines);
}

}  // namespace ecp::cli
