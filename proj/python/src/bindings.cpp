#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ecp/io.hpp"
#include "ecp/population.hpp"
#include "ecp/repro.hpp"

namespace py = pybind11;
using namespace ecp;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-d array");
  Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy_n(a.data(), m.data().size(), m.data().begin());
  return m;
}

py::array_t<double> to_array(const Matrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

std::vector<ProbVector> rows_of(const Array& a) {
  const Matrix m = to_matrix(a);
  std::vector<ProbVector> rows(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) rows[i].assign(m.row(i).begin(), m.row(i).end());
  return rows;
}

py::object to_py(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
Json from_py(const py::object& o) {
  return Json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

std::optional<RngSeed> seed_of(const std::optional<std::uint64_t>& s) {
  return s ? std::optional<RngSeed>(RngSeed{*s}) : std::nullopt;
}

std::vector<PredictionSet> sets_of(const py::array_t<bool, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("sets: expected a 2-d boolean array");
  std::vector<PredictionSet> sets(static_cast<std::size_t>(a.shape(0)),
                                  PredictionSet(static_cast<std::size_t>(a.shape(1))));
  auto v = a.unchecked<2>();
  for (py::ssize_t i = 0; i < a.shape(0); ++i) {
    for (py::ssize_t k = 0; k < a.shape(1); ++k) sets[static_cast<std::size_t>(i)].member[static_cast<std::size_t>(k)] = v(i, k);
  }
  return sets;
}

py::array_t<bool> to_bool_array(const std::vector<PredictionSet>& sets, std::size_t k) {
  py::array_t<bool> out({sets.size(), k});
  auto v = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < sets.size(); ++i) {
    for (std::size_t c = 0; c < k; ++c) v(static_cast<py::ssize_t>(i), static_cast<py::ssize_t>(c)) = sets[i].member[c];
  }
  return out;
}

EvalBatch make_batch(const Array& probs, const std::vector<int>& labels,
                     const py::array_t<bool, py::array::c_style | py::array::forcecast>& sets, std::size_t n_cal) {
  EvalBatch b;
  b.probs = rows_of(probs);
  b.labels = labels;
  b.sets = sets_of(sets);
  b.n_cal = n_cal;
  b.validate();
  return b;
}

LabeledDataset dataset_of(const Array& x, const std::vector<int>& y, int num_labels) {
  LabeledDataset ds;
  ds.features = to_matrix(x);
  ds.labels = y;
  ds.num_labels = num_labels;
  ds.validate();
  return ds;
}

py::tuple dataset_tuple(const LabeledDataset& ds) {
  return py::make_tuple(to_array(ds.features), py::array_t<int>(py::cast(ds.labels)),
                        py::array_t<int>(py::cast(ds.side_info)));
}

}  // namespace

PYBIND11_MODULE(_ecp, m) {
  m.doc() = "Conformal prediction, entropy bounds and conformal training";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<TrainingDiverged>(m, "TrainingDiverged", PyExc_RuntimeError);

  py::class_<ScoreSpec>(m, "ScoreSpec")
      .def(py::init([](const std::string& kind, int k_reg, double lambda_reg, double jitter) {
             ScoreSpec s{score_kind_from_string(kind), k_reg, lambda_reg, jitter};
             s.validate();
             return s;
           }),
           py::arg("kind") = "THR", py::arg("k_reg") = 0, py::arg("lambda_reg") = 0.0, py::arg("jitter") = 0.0)
      .def_property_readonly("kind", [](const ScoreSpec& s) { return to_string(s.kind); })
      .def_readonly("k_reg", &ScoreSpec::k_reg)
      .def_readonly("lambda_reg", &ScoreSpec::lambda_reg)
      .def_readonly("jitter", &ScoreSpec::jitter)
      .def("__repr__", [](const ScoreSpec& s) { return "ScoreSpec(" + Json(s).dump() + ")"; });

  py::class_<Calibration>(m, "Calibration")
      .def_readonly("q_hat", &Calibration::q_hat)
      .def_readonly("n", &Calibration::n)
      .def_readonly("alpha", &Calibration::alpha)
      .def_property_readonly("alpha_n", &Calibration::alpha_n)
      .def_property_readonly("is_infinite", &Calibration::is_infinite)
      .def("__repr__", [](const Calibration& c) { return "Calibration(" + Json(c).dump() + ")"; });

  m.def("thread_limit", &thread_limit, "Worker count, capped by ECP_THREADS");
  m.def("conformal_rank", &conformal_rank, py::arg("n"), py::arg("alpha"));

  m.def(
      "score",
      [](const ScoreSpec& spec, const std::vector<double>& p, int y, std::optional<std::uint64_t> seed) {
        return ecp::score(spec, p, y, seed_of(seed));
      },
      py::arg("spec"), py::arg("p"), py::arg("y"), py::arg("seed") = py::none());
  m.def(
      "score_all",
      [](const ScoreSpec& spec, const std::vector<double>& p, std::optional<std::uint64_t> seed) {
        return score_all(spec, p, seed_of(seed));
      },
      py::arg("spec"), py::arg("p"), py::arg("seed") = py::none());
  m.def(
      "calibrate", [](const std::vector<double>& scores, double alpha) { return calibrate(scores, alpha); },
      py::arg("scores"), py::arg("alpha"));
  m.def(
      "predict_sets",
      [](const Calibration& cal, const ScoreSpec& spec, const Array& probs, std::optional<std::uint64_t> seed) {
        const auto rows = rows_of(probs);
        std::vector<PredictionSet> sets;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          sets.push_back(predict_set(cal, spec, rows[i], seed ? std::optional(derive_seed(RngSeed{*seed}, i)) : std::nullopt));
        }
        return to_bool_array(sets, rows.empty() ? 0 : rows.front().size());
      },
      py::arg("cal"), py::arg("spec"), py::arg("probs"), py::arg("seed") = py::none(),
      "Prediction sets for every row; row i uses derive_seed(seed, i) for its jitter draw");
  m.def(
      "coverage",
      [](const py::array_t<bool, py::array::c_style | py::array::forcecast>& sets, const std::vector<int>& labels) {
        return coverage(sets_of(sets), labels);
      },
      py::arg("sets"), py::arg("labels"));
  m.def(
      "inefficiency",
      [](const py::array_t<bool, py::array::c_style | py::array::forcecast>& sets) {
        return inefficiency(sets_of(sets));
      },
      py::arg("sets"));

  // Bounds take test-split probabilities, labels, boolean sets and the calibration size; reports come back as dicts.
  m.def(
      "simple_fano_bound",
      [](const Array& p, const std::vector<int>& y, const py::array_t<bool, py::array::c_style | py::array::forcecast>& s,
         std::size_t n_cal, double alpha) { return to_py(Json(simple_fano_bound(make_batch(p, y, s, n_cal), alpha))); },
      py::arg("probs"), py::arg("labels"), py::arg("sets"), py::arg("n_cal"), py::arg("alpha"));
  m.def(
      "mb_fano_bound",
      [](const Array& p, const std::vector<int>& y, const py::array_t<bool, py::array::c_style | py::array::forcecast>& s,
         std::size_t n_cal, double alpha) { return to_py(Json(mb_fano_bound(make_batch(p, y, s, n_cal), alpha))); },
      py::arg("probs"), py::arg("labels"), py::arg("sets"), py::arg("n_cal"), py::arg("alpha"));
  m.def(
      "dpi_bound",
      [](const Array& p, const std::vector<int>& y, const py::array_t<bool, py::array::c_style | py::array::forcecast>& s,
         std::size_t n_cal, double alpha, double delta) {
        return to_py(Json(dpi_bound(make_batch(p, y, s, n_cal), alpha, delta)));
      },
      py::arg("probs"), py::arg("labels"), py::arg("sets"), py::arg("n_cal"), py::arg("alpha"), py::arg("delta") = 0.05);
  m.def(
      "dpi_exact",
      [](const Array& p, const std::vector<int>& y, const py::array_t<bool, py::array::c_style | py::array::forcecast>& s,
         std::size_t n_cal) { return dpi_exact(make_batch(p, y, s, n_cal)); },
      py::arg("probs"), py::arg("labels"), py::arg("sets"), py::arg("n_cal"));
  m.def(
      "list_fano_bound",
      [](const Array& p, const std::vector<int>& y, const py::array_t<bool, py::array::c_style | py::array::forcecast>& s,
         std::size_t n_cal, double alpha) { return list_fano_bound(make_batch(p, y, s, n_cal), alpha); },
      py::arg("probs"), py::arg("labels"), py::arg("sets"), py::arg("n_cal"), py::arg("alpha"));
  m.def(
      "cross_entropy",
      [](const Array& p, const std::vector<int>& y) {
        EvalBatch b;
        b.probs = rows_of(p);
        b.labels = y;
        b.sets.assign(y.size(), PredictionSet(b.probs.empty() ? 0 : b.probs.front().size(), true));
        return cross_entropy(b);
      },
      py::arg("probs"), py::arg("labels"));
  m.def("conftr_bound", &conftr_bound, py::arg("mean_set_size"), py::arg("alpha"), py::arg("n"), py::arg("num_labels"));
  m.def("binary_entropy", &binary_entropy, py::arg("p"));

  m.def(
      "entropy_mle",
      [](const std::vector<std::size_t>& counts) {
        const auto e = entropy_mle(counts);
        return py::dict(py::arg("h_mle") = e.h_mle, py::arg("h_mm") = e.h_mm,
                        py::arg("observed_bins") = e.observed_bins, py::arg("n") = e.n);
      },
      py::arg("counts"));

  m.def(
      "ring_mixture",
      [](int num_labels, int dim, double radius, double variance) {
        return to_py(Json(make_ring_mixture(num_labels, dim, radius, variance)));
      },
      py::arg("num_labels"), py::arg("dim"), py::arg("radius") = 2.0, py::arg("variance") = 1.0,
      "Gaussian-mixture spec (dict) with means on a ring");
  m.def(
      "gen_gaussian_mixture",
      [](const py::object& spec, std::size_t n, std::uint64_t seed) {
        return dataset_tuple(gen_gaussian_mixture(from_py(spec).get<GaussianMixtureSpec>(), n, RngSeed{seed}));
      },
      py::arg("spec"), py::arg("n"), py::arg("seed"), "Returns (X, y, side_info)");
  m.def(
      "gmm_posterior",
      [](const py::object& spec, const Array& x) {
        const auto s = from_py(spec).get<GaussianMixtureSpec>();
        const Matrix xm = to_matrix(x);
        Matrix out(xm.rows(), static_cast<std::size_t>(s.num_labels));
        for (std::size_t i = 0; i < xm.rows(); ++i) {
          const auto p = gmm_posterior(s, xm.row(i));
          std::copy(p.begin(), p.end(), out.row(i).begin());
        }
        return to_array(out);
      },
      py::arg("spec"), py::arg("x"));
  m.def(
      "discrete_exact_entropy",
      [](const py::object& spec) { return discrete_exact_entropy(from_py(spec).get<DiscreteTaskSpec>()); },
      py::arg("spec"));
  m.def(
      "posterior_with_si",
      [](const std::vector<double>& p, const std::vector<double>& lik) { return posterior_with_si(p, lik); },
      py::arg("p"), py::arg("likelihood"));
  m.def(
      "entropy_decomposition",
      [](const JointTable& joint) {
        const auto d = entropy_decomposition(joint);
        return py::dict(py::arg("h_y_given_x") = d.h_y_given_x, py::arg("avg_local") = d.avg_local, py::arg("mi") = d.mi);
      },
      py::arg("joint"), "joint[x][y][z] probabilities");

  m.def(
      "init_model",
      [](const py::object& spec, std::uint64_t seed) {
        return to_py(Json(init_model(from_py(spec).get<ModelSpec>(), RngSeed{seed})));
      },
      py::arg("spec"), py::arg("seed"));
  m.def(
      "predict_probs",
      [](const py::object& model, const Array& x) {
        const auto probs = predict_probs(from_py(model).get<Model>(), to_matrix(x));
        Matrix out(probs.size(), probs.empty() ? 0 : probs.front().size());
        for (std::size_t i = 0; i < probs.size(); ++i) std::copy(probs[i].begin(), probs[i].end(), out.row(i).begin());
        return to_array(out);
      },
      py::arg("model"), py::arg("x"));
  m.def(
      "train",
      [](const py::object& model, const Array& x, const std::vector<int>& y, const py::object& config,
         std::optional<Array> x_hold, std::optional<std::vector<int>> y_hold) {
        const Model init = from_py(model).get<Model>();
        const auto cfg = from_py(config).get<TrainConfig>();
        const auto train_set = dataset_of(x, y, init.spec.num_labels());
        std::optional<LabeledDataset> hold;
        if (x_hold && y_hold) hold = dataset_of(*x_hold, *y_hold, init.spec.num_labels());
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(init, train_set, cfg, hold ? &*hold : nullptr);
        }
        Json history = Json::array();
        for (const auto& e : r.history) history.push_back(e);
        return py::make_tuple(to_py(Json(r.model)), to_py(history));
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("config"), py::arg("x_holdout") = py::none(),
      py::arg("y_holdout") = py::none(), "Returns (trained model dict, per-epoch metrics)");

  m.def("criteria", [] {
    py::list out;
    for (const auto& c : criteria()) out.append(py::dict(py::arg("id") = c.id, py::arg("slug") = c.slug, py::arg("summary") = c.summary));
    return out;
  });
  m.def(
      "repro",
      [](const std::string& key) {
        const int id = find_criterion(key).id;
        CriterionResult r;
        {
          py::gil_scoped_release release;
          r = run_criterion(id, repro_options_from_env());
        }
        return to_py(Json(r));
      },
      py::arg("criterion"), "Run one acceptance criterion by id or slug");
}
