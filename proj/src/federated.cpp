#include "ecp/federated.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "ecp/conformal.hpp"
#include "ecp/sideinfo.hpp"

namespace ecp {

void FederatedConfig::validate() const {
  if (devices < 1) throw std::invalid_argument("need at least one device");
  if (!(dirichlet_conc > 0.0)) throw std::invalid_argument("dirichlet concentration must be positive");
  if (rounds < 0 || local_epochs < 0 || personalize_epochs < 0) {
    throw std::invalid_argument("rounds and epochs must be nonnegative");
  }
  if (!(personalize_lr_scale >= 0.0)) throw std::invalid_argument("personalize_lr_scale must be nonnegative");
  base.validate();
}

namespace {

std::vector<double> dirichlet(Rng& rng, std::size_t m, double conc) {
  std::vector<double> w(m);
  double s = 0.0;
  for (auto& v : w) s += (v = rng.gamma(conc));
  if (!(s > 0.0)) {
    // Every gamma draw underflowed: the limit of Dir(conc) as conc -> 0 is a random vertex.
    std::fill(w.begin(), w.end(), 0.0);
    w[rng.uniform_index(m)] = 1.0;
    return w;
  }
  for (auto& v : w) v /= s;
  return w;
}

std::vector<std::size_t> largest_remainder(std::size_t total, const std::vector<double>& shares) {
  std::vector<std::size_t> counts(shares.size());
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t assigned = 0;
  for (std::size_t j = 0; j < shares.size(); ++j) {
    const double exact = shares[j] * static_cast<double>(total);
    counts[j] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[j];
    rema.emplace_back(exact - std::floor(exact), j);
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t t = 0; assigned < total; ++t, ++assigned) ++counts[rema[t % rema.size()].second];
  return counts;
}

}  // namespace

std::vector<LabeledDataset> dirichlet_partition(const LabeledDataset& ds, int m, double conc, RngSeed seed) {
  ds.validate();
  if (m < 1) throw std::invalid_argument("need at least one device");
  if (static_cast<std::size_t>(m) > ds.size()) throw std::invalid_argument("more devices than examples");
  if (!(conc > 0.0)) throw std::invalid_argument("dirichlet concentration must be positive");
  const auto md = static_cast<std::size_t>(m);
  std::vector<std::vector<std::size_t>> by_label(static_cast<std::size_t>(ds.num_labels));
  for (std::size_t i = 0; i < ds.size(); ++i) by_label[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  std::vector<std::vector<std::size_t>> assigned(md);
  for (std::size_t y = 0; y < by_label.size(); ++y) {
    auto& idx = by_label[y];
    if (idx.empty()) continue;
    Rng rng(derive_seed(seed, y));
    auto order = rng.permutation(idx.size());
    auto counts = largest_remainder(idx.size(), dirichlet(rng, md, conc));
    std::size_t pos = 0;
    for (std::size_t j = 0; j < md; ++j) {
      for (std::size_t c = 0; c < counts[j]; ++c) assigned[j].push_back(idx[order[pos++]]);
    }
  }
  std::vector<LabeledDataset> out;
  for (auto& rows : assigned) {
    std::sort(rows.begin(), rows.end());
    out.push_back(ds.subset(rows));
  }
  return out;
}

GlobalModel init_global_model(const Model& trunk, int m, RngSeed seed) {
  if (m < 1) throw std::invalid_argument("need at least one device");
  const int k = trunk.spec.num_labels();
  GlobalModel g;
  g.trunk = trunk;
  g.head_z_x = init_model(ModelSpec{{trunk.spec.input_dim(), m}, Activation::Relu}, derive_seed(seed, 0));
  g.head_z_xy = init_model(ModelSpec{{2 * k, m}, Activation::Relu}, derive_seed(seed, 1));
  return g;
}

BoundGlobal bind(ad::Tape& tape, const GlobalModel& g, bool requires_grad) {
  return BoundGlobal{bind(tape, g.trunk, requires_grad), bind(tape, g.head_z_x, requires_grad),
                     bind(tape, g.head_z_xy, requires_grad)};
}

namespace {

ad::Tensor one_hot(const std::vector<int>& labels, int k) {
  ad::Tensor t(labels.size(), static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < labels.size(); ++i) t(i, static_cast<std::size_t>(labels[i])) = 1.0;
  return t;
}

Matrix side_inputs(const Matrix& logits, const std::vector<int>& labels) {
  const std::size_t k = logits.cols();
  Matrix out(logits.rows(), 2 * k);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    for (std::size_t j = 0; j < k; ++j) out(i, j) = logits(i, j);
    out(i, k + static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return out;
}

}  // namespace

LocalLoss local_loss(ad::Tape& tape, const BoundGlobal& bound, const GlobalModel& g, const Matrix& x,
                     const std::vector<int>& labels, int device_id, const TrainConfig& cfg) {
  if (device_id < 0 || device_id >= g.num_devices()) throw std::out_of_range("device id out of range");
  auto xv = tape.constant(to_tensor(x));
  auto logits = forward_logits(bound.trunk, g.trunk, xv);
  LocalLoss out;
  out.base = loss_from_log_probs(ad::log_softmax(logits), labels, cfg);
  const std::vector<int> ids(labels.size(), device_id);
  auto lz = ad::log_softmax(forward_logits(bound.head_z_x, g.head_z_x, xv));
  out.device_term = ad::neg(ad::mean(ad::pick(lz, ids)));
  auto side_in = ad::concat({ad::detach(logits), tape.constant(one_hot(labels, g.trunk.spec.num_labels()))}, 1);
  auto lzy = ad::log_softmax(forward_logits(bound.head_z_xy, g.head_z_xy, side_in));
  out.side_term = ad::neg(ad::mean(ad::pick(lzy, ids)));
  out.total = ad::add(ad::add(out.base, out.device_term), out.side_term);
  return out;
}

double local_objective(const GlobalModel& g, const LabeledDataset& device_ds, int device_id,
                       const TrainConfig& cfg) {
  if (device_ds.size() == 0) throw std::invalid_argument("empty device dataset");
  ad::Tape tape;
  auto bound = bind(tape, g, false);
  auto loss = local_loss(tape, bound, g, device_ds.features, device_ds.labels, device_id, cfg);
  return ad::add(loss.base, loss.device_term).item();
}

namespace {

std::vector<std::vector<double>*> parts(GlobalModel& g) { return {&g.trunk.params, &g.head_z_x.params, &g.head_z_xy.params}; }

}  // namespace

GlobalModel local_update(const GlobalModel& g, const LabeledDataset& device_ds, int device_id,
                         const TrainConfig& cfg, int epochs, double lr, RngSeed seed) {
  GlobalModel m = g;
  const std::size_t n = device_ds.size();
  if (n == 0 || epochs == 0) return m;
  const std::size_t min_batch = cfg.loss == LossKind::Ce ? 1 : 2;
  auto params = parts(m);
  std::vector<std::vector<double>> velocity;
  for (auto* p : params) velocity.emplace_back(p->size(), 0.0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
    auto order = rng.permutation(n);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const std::size_t b = end - start;
      if (b < min_batch) break;
      if (cfg.loss != LossKind::Ce && conformal_rank(b / 2, cfg.alpha_train) > b / 2) break;
      Matrix x(b, device_ds.dim());
      std::vector<int> labels(b);
      for (std::size_t i = 0; i < b; ++i) {
        auto src = device_ds.features.row(order[start + i]);
        std::copy(src.begin(), src.end(), x.row(i).begin());
        labels[i] = device_ds.labels[order[start + i]];
      }
      ad::Tape tape;
      auto bound = bind(tape, m);
      auto loss = local_loss(tape, bound, m, x, labels, device_id, cfg);
      if (!std::isfinite(loss.total.item())) {
        throw TrainingDiverged("non-finite local loss on device " + std::to_string(device_id));
      }
      tape.backward(loss.total);
      const std::vector<std::vector<double>> grads{gather_grad(bound.trunk), gather_grad(bound.head_z_x),
                                                   gather_grad(bound.head_z_xy)};
      for (std::size_t part = 0; part < params.size(); ++part) {
        auto& p = *params[part];
        auto& v = velocity[part];
        for (std::size_t j = 0; j < p.size(); ++j) {
          v[j] = cfg.momentum * v[j] + grads[part][j];
          p[j] -= lr * (grads[part][j] + cfg.momentum * v[j]);
        }
      }
    }
  }
  return m;
}

GlobalModel fedavg_round(const GlobalModel& g, const std::vector<LabeledDataset>& devices,
                         const FederatedConfig& cfg, int round) {
  if (devices.empty()) throw std::invalid_argument("no devices");
  std::size_t total = 0;
  for (const auto& d : devices) total += d.size();
  if (total == 0) throw std::invalid_argument("all devices are empty");
  const double lr = scheduled_lr(cfg.base.lr, round, std::max(cfg.rounds, 1));
  const RngSeed round_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(round));

  std::vector<GlobalModel> locals(devices.size());
  parallel_for(devices.size(), [&](std::size_t j) {
    if (devices[j].size() == 0) return;
    locals[j] = local_update(g, devices[j], static_cast<int>(j), cfg.base, cfg.local_epochs, lr,
                             derive_seed(round_seed, j));
  });

  // Accumulate differences from the first nonempty local model so identical locals average exactly.
  std::size_t ref = 0;
  while (devices[ref].size() == 0) ++ref;
  GlobalModel out = locals[ref];
  auto out_parts = parts(out);
  for (std::size_t j = 0; j < devices.size(); ++j) {
    if (j == ref || devices[j].size() == 0) continue;
    const double w = static_cast<double>(devices[j].size()) / static_cast<double>(total);
    auto local_parts = parts(locals[j]);
    auto ref_parts = parts(locals[ref]);
    for (std::size_t part = 0; part < out_parts.size(); ++part) {
      for (std::size_t i = 0; i < out_parts[part]->size(); ++i) {
        (*out_parts[part])[i] += w * ((*local_parts[part])[i] - (*ref_parts[part])[i]);
      }
    }
  }
  return out;
}

Model personalize(const GlobalModel& g, const LabeledDataset& device_ds, int epochs, double lr, RngSeed seed) {
  if (device_ds.size() == 0) throw std::invalid_argument("empty device dataset");
  TrainConfig cfg;
  cfg.loss = LossKind::Ce;
  cfg.lr = lr;
  cfg.epochs = epochs;
  cfg.batch_size = std::max<std::size_t>(2, std::min<std::size_t>(cfg.batch_size, device_ds.size()));
  cfg.seed = seed;
  return train(g.trunk, device_ds, cfg).model;
}

std::vector<double> device_likelihood(const GlobalModel& g, std::span<const double> x, int device_id) {
  if (device_id < 0 || device_id >= g.num_devices()) throw std::out_of_range("device id out of range");
  Matrix xm(1, x.size());
  std::copy(x.begin(), x.end(), xm.row(0).begin());
  const auto logits = predict_logits(g.trunk, xm);
  const int k = g.trunk.spec.num_labels();
  std::vector<int> ys(static_cast<std::size_t>(k));
  std::iota(ys.begin(), ys.end(), 0);
  Matrix rep(static_cast<std::size_t>(k), static_cast<std::size_t>(k));
  for (std::size_t y = 0; y < rep.rows(); ++y) std::copy(logits.row(0).begin(), logits.row(0).end(), rep.row(y).begin());
  const auto probs = predict_probs(g.head_z_xy, side_inputs(rep, ys));
  std::vector<double> lik(static_cast<std::size_t>(k));
  for (std::size_t y = 0; y < lik.size(); ++y) lik[y] = probs[y][static_cast<std::size_t>(device_id)];
  return lik;
}

ProbVector device_posterior(const GlobalModel& g, std::span<const double> x, int device_id) {
  Matrix xm(1, x.size());
  std::copy(x.begin(), x.end(), xm.row(0).begin());
  const auto p = predict_probs(g.trunk, xm).front();
  return posterior_with_si(p, device_likelihood(g, x, device_id));
}

FedRoundMetrics evaluate_global(const GlobalModel& g, const FedEvalData& eval, const ScoreSpec& score_spec,
                                double alpha, RngSeed seed) {
  if (!eval.cal.has_side_info() || !eval.test.has_side_info()) {
    throw std::invalid_argument("federated evaluation data must carry device ids");
  }
  auto plain = [&](const LabeledDataset& ds) { return predict_probs(g.trunk, ds.features); };
  auto with_si = [&](const LabeledDataset& ds) {
    std::vector<ProbVector> out;
    for (std::size_t i = 0; i < ds.size(); ++i) out.push_back(device_posterior(g, ds.features.row(i), ds.side_info[i]));
    return out;
  };
  auto run = [&](const std::vector<ProbVector>& cp, const std::vector<ProbVector>& tp) {
    const RngSeed cal_seed = derive_seed(seed, 0), test_seed = derive_seed(seed, 1);
    std::vector<double> scores;
    for (std::size_t i = 0; i < cp.size(); ++i) scores.push_back(score(score_spec, cp[i], eval.cal.labels[i], derive_seed(cal_seed, i)));
    auto c = calibrate(scores, alpha);
    std::vector<PredictionSet> sets;
    for (std::size_t i = 0; i < tp.size(); ++i) sets.push_back(predict_set(c, score_spec, tp[i], derive_seed(test_seed, i)));
    return std::make_pair(coverage(sets, eval.test.labels), inefficiency(sets));
  };
  FedRoundMetrics m;
  std::tie(m.coverage, m.inefficiency) = run(plain(eval.cal), plain(eval.test));
  std::tie(m.coverage_si, m.inefficiency_si) = run(with_si(eval.cal), with_si(eval.test));
  return m;
}

FedResult federated_train(const GlobalModel& init, const std::vector<LabeledDataset>& devices,
                          const FederatedConfig& cfg, const FedEvalData* eval) {
  cfg.validate();
  if (static_cast<std::size_t>(init.num_devices()) != devices.size()) {
    throw std::invalid_argument("device heads do not match the device count");
  }
  FedResult result{init, {}};
  std::size_t total = 0;
  for (const auto& d : devices) total += d.size();
  for (int round = 0; round < cfg.rounds; ++round) {
    result.model = fedavg_round(result.model, devices, cfg, round);
    FedRoundMetrics m;
    if (eval != nullptr) {
      m = evaluate_global(result.model, *eval, ScoreSpec{}, cfg.base.eval_alpha,
                          derive_seed(cfg.seed, 1000000 + static_cast<std::uint64_t>(round)));
    }
    m.round = round;
    m.lr = scheduled_lr(cfg.base.lr, round, std::max(cfg.rounds, 1));
    double obj = 0.0;
    for (std::size_t j = 0; j < devices.size(); ++j) {
      const std::size_t n = devices[j].size();
      if (n == 0) continue;
      if (cfg.base.loss != LossKind::Ce && (n < 2 || conformal_rank(n / 2, cfg.base.alpha_train) > n / 2)) continue;
      obj += static_cast<double>(devices[j].size()) / static_cast<double>(total) *
             local_objective(result.model, devices[j], static_cast<int>(j), cfg.base);
    }
    m.objective = obj;
    result.history.push_back(m);
  }
  return result;
}

namespace {

void check_joint(const JointTable& joint) {
  if (joint.empty() || joint.front().empty() || joint.front().front().empty()) {
    throw std::invalid_argument("joint table must be nonempty");
  }
  const std::size_t k = joint.front().size(), g = joint.front().front().size();
  double total = 0.0;
  for (const auto& per_x : joint) {
    if (per_x.size() != k) throw std::invalid_argument("ragged joint table");
    for (const auto& per_y : per_x) {
      if (per_y.size() != g) throw std::invalid_argument("ragged joint table");
      for (double v : per_y) {
        if (!(v >= 0.0)) throw std::invalid_argument("joint table entries must be nonnegative");
        total += v;
      }
    }
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("joint table is not normalized");
}

double xlogy_ratio(double p, double num, double den) { return p > 0.0 ? p * std::log(num / den) : 0.0; }

}  // namespace

EntropyDecomposition entropy_decomposition(const JointTable& joint) {
  check_joint(joint);
  const std::size_t k = joint.front().size(), g = joint.front().front().size();
  EntropyDecomposition d;
  std::vector<double> pz(g, 0.0);
  for (const auto& per_x : joint) {
    for (const auto& per_y : per_x) {
      for (std::size_t z = 0; z < g; ++z) pz[z] += per_y[z];
    }
  }
  for (const auto& per_x : joint) {
    double px = 0.0;
    std::vector<double> pxy(k, 0.0), pxz(g, 0.0);
    for (std::size_t y = 0; y < k; ++y) {
      for (std::size_t z = 0; z < g; ++z) {
        pxy[y] += per_x[y][z];
        pxz[z] += per_x[y][z];
        px += per_x[y][z];
      }
    }
    for (std::size_t y = 0; y < k; ++y) d.h_y_given_x -= xlogy_ratio(pxy[y], pxy[y], px);
    for (std::size_t y = 0; y < k; ++y) {
      for (std::size_t z = 0; z < g; ++z) {
        const double p = per_x[y][z];
        d.avg_local -= xlogy_ratio(p, p, pxz[z]);
        d.mi += xlogy_ratio(p, p * px, pxy[y] * pxz[z]);
      }
    }
  }
  return d;
}

DiscreteTaskSpec local_task(const JointTable& joint, int z) {
  check_joint(joint);
  const std::size_t k = joint.front().size(), g = joint.front().front().size();
  if (z < 0 || static_cast<std::size_t>(z) >= g) throw std::out_of_range("device id out of range");
  const auto zi = static_cast<std::size_t>(z);
  DiscreteTaskSpec t;
  double pz = 0.0;
  for (const auto& per_x : joint) {
    double pxz = 0.0;
    for (std::size_t y = 0; y < k; ++y) pxz += per_x[y][zi];
    t.marginal.push_back(pxz);
    ProbVector row(k, 1.0 / static_cast<double>(k));
    if (pxz > 0.0) {
      for (std::size_t y = 0; y < k; ++y) row[y] = per_x[y][zi] / pxz;
    }
    t.conditional.push_back(row);
    pz += pxz;
  }
  if (!(pz > 0.0)) throw std::invalid_argument("device has zero probability");
  for (auto& v : t.marginal) v /= pz;
  return t;
}

FederatedBoundCheck federated_bound_check(const JointTable& joint, const std::vector<ProbVector>& q_model,
                                          const PopulationSetup& setup) {
  check_joint(joint);
  if (q_model.size() != joint.size()) throw std::invalid_argument("model needs one row per x");
  const std::size_t g = joint.front().front().size();
  FederatedBoundCheck out;
  out.h_y_given_x = entropy_decomposition(joint).h_y_given_x;
  for (const auto& per_x : joint) {
    double px = 0.0;
    std::vector<double> pxz(g, 0.0);
    for (const auto& per_y : per_x) {
      for (std::size_t z = 0; z < g; ++z) {
        pxz[z] += per_y[z];
        px += per_y[z];
      }
    }
    for (std::size_t z = 0; z < g; ++z) out.device_term -= xlogy_ratio(pxz[z], pxz[z], px);
  }
  for (std::size_t z = 0; z < g; ++z) {
    double pz = 0.0;
    for (const auto& per_x : joint) {
      for (const auto& per_y : per_x) pz += per_y[z];
    }
    if (pz <= 0.0) continue;
    const auto task = local_task(joint, static_cast<int>(z));
    const auto batch = population_batch(task, q_model, setup);
    out.simple_fano += pz * simple_fano_bound(batch, setup.alpha).value;
    out.mb_fano += pz * mb_fano_bound(batch, setup.alpha).value;
    out.list_fano += pz * list_fano_bound(batch, setup.alpha);
  }
  out.simple_fano += out.device_term;
  out.mb_fano += out.device_term;
  out.list_fano += out.device_term;
  return out;
}

}  // namespace ecp
