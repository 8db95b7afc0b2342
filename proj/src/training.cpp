#include "ecp/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ecp/conformal.hpp"

namespace ecp {

std::string to_string(Activation a) { return a == Activation::Relu ? "RELU" : "TANH"; }

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::Ce: return "CE";
    case LossKind::Conftr: return "CONFTR";
    case LossKind::ConftrClass: return "CONFTR_CLASS";
    case LossKind::Fano: return "FANO";
    case LossKind::MbFano: return "MB_FANO";
    case LossKind::Dpi: return "DPI";
  }
  return "?";
}

Activation activation_from_string(const std::string& name) {
  if (name == "RELU") return Activation::Relu;
  if (name == "TANH") return Activation::Tanh;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

LossKind loss_kind_from_string(const std::string& name) {
  for (auto k : {LossKind::Ce, LossKind::Conftr, LossKind::ConftrClass, LossKind::Fano, LossKind::MbFano,
                 LossKind::Dpi}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown loss '" + name + "'");
}

void ModelSpec::validate() const {
  if (layer_sizes.size() < 2) throw std::invalid_argument("model needs an input and an output size");
  for (int s : layer_sizes) {
    if (s < 1) throw std::invalid_argument("layer sizes must be positive");
  }
}

std::size_t ModelSpec::num_params() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    n += static_cast<std::size_t>(layer_sizes[l] + 1) * static_cast<std::size_t>(layer_sizes[l + 1]);
  }
  return n;
}

Model init_model(const ModelSpec& spec, RngSeed seed) {
  spec.validate();
  Model m{spec, std::vector<double>(spec.num_params())};
  Rng rng(seed);
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < spec.layer_sizes.size(); ++l) {
    const auto in = static_cast<std::size_t>(spec.layer_sizes[l]);
    const auto out = static_cast<std::size_t>(spec.layer_sizes[l + 1]);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (std::size_t i = 0; i < (in + 1) * out; ++i) m.params[off + i] = bound * (2.0 * rng.uniform() - 1.0);
    off += (in + 1) * out;
  }
  return m;
}

BoundModel bind(ad::Tape& tape, const Model& model, bool requires_grad) {
  BoundModel b;
  std::size_t off = 0;
  const auto& sizes = model.spec.layer_sizes;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const auto in = static_cast<std::size_t>(sizes[l]);
    const auto out = static_cast<std::size_t>(sizes[l + 1]);
    auto first = model.params.begin() + static_cast<std::ptrdiff_t>(off);
    b.weights.push_back(tape.leaf(ad::Tensor(in, out, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(in * out))), requires_grad));
    first += static_cast<std::ptrdiff_t>(in * out);
    b.biases.push_back(tape.leaf(ad::Tensor(1, out, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(out))), requires_grad));
    off += (in + 1) * out;
  }
  return b;
}

std::vector<double> gather_grad(const BoundModel& bound) {
  std::vector<double> g;
  for (std::size_t l = 0; l < bound.weights.size(); ++l) {
    const auto& gw = bound.weights[l].grad().data;
    const auto& gb = bound.biases[l].grad().data;
    g.insert(g.end(), gw.begin(), gw.end());
    g.insert(g.end(), gb.begin(), gb.end());
  }
  return g;
}

ad::Var forward_logits(const BoundModel& bound, const Model& model, ad::Var x) {
  if (x.cols() != static_cast<std::size_t>(model.spec.input_dim())) {
    throw std::invalid_argument("feature dimension does not match the model input");
  }
  ad::Var h = x;
  for (std::size_t l = 0; l < bound.weights.size(); ++l) {
    h = ad::add(ad::matmul(h, bound.weights[l]), bound.biases[l]);
    if (l + 1 < bound.weights.size()) {
      h = model.spec.activation == Activation::Relu ? ad::relu(h) : ad::tanh(h);
    }
  }
  return h;
}

Matrix predict_logits(const Model& model, const Matrix& x) {
  const auto& sizes = model.spec.layer_sizes;
  if (x.cols() != static_cast<std::size_t>(sizes.front())) {
    throw std::invalid_argument("feature dimension does not match the model input");
  }
  Matrix h = x;
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const auto in = static_cast<std::size_t>(sizes[l]);
    const auto out = static_cast<std::size_t>(sizes[l + 1]);
    const double* w = model.params.data() + off;
    const double* b = w + in * out;
    Matrix next(h.rows(), out);
    for (std::size_t i = 0; i < h.rows(); ++i) {
      for (std::size_t j = 0; j < out; ++j) next(i, j) = b[j];
      for (std::size_t p = 0; p < in; ++p) {
        const double v = h(i, p);
        if (v == 0.0) continue;
        for (std::size_t j = 0; j < out; ++j) next(i, j) += v * w[p * out + j];
      }
      if (l + 2 < sizes.size()) {
        for (std::size_t j = 0; j < out; ++j) {
          double& z = next(i, j);
          z = model.spec.activation == Activation::Relu ? std::max(z, 0.0) : std::tanh(z);
        }
      }
    }
    h = std::move(next);
    off += (in + 1) * out;
  }
  return h;
}

std::vector<ProbVector> predict_probs(const Model& model, const Matrix& x) {
  auto logits = predict_logits(model, x);
  std::vector<ProbVector> out;
  out.reserve(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) out.push_back(softmax(logits.row(i)));
  return out;
}

ad::Tensor to_tensor(const Matrix& m) { return ad::Tensor(m.rows(), m.cols(), m.data()); }

ConformalStep conformal_step(ad::Var log_probs, const std::vector<int>& labels, double alpha,
                             const RelaxConfig& relax) {
  const std::size_t b = log_probs.rows();
  if (labels.size() != b) throw std::invalid_argument("conformal_step label count mismatch");
  if (b < 2) throw std::invalid_argument("conformal_step needs at least 2 examples");
  const std::size_t n_cal = b / 2;
  if (conformal_rank(n_cal, alpha) > n_cal) {
    throw std::invalid_argument("batch too small: rank " + std::to_string(conformal_rank(n_cal, alpha)) +
                                " exceeds the " + std::to_string(n_cal) + " calibration rows");
  }
  std::vector<int> cal_labels(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_cal));
  ConformalStep step;
  step.n_cal = n_cal;
  step.test_labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(n_cal), labels.end());
  auto cal_scores = ad::neg(ad::pick(ad::slice_rows(log_probs, 0, n_cal), cal_labels));
  step.q_hat = soft_quantile(cal_scores, alpha, relax);
  step.test_log_probs = ad::slice_rows(log_probs, n_cal, b);
  step.soft_sets = soft_membership(step.q_hat, ad::neg(step.test_log_probs), relax);
  return step;
}

namespace {

ad::Var constant(ad::Var like, double v) { return like.tape->constant(ad::Tensor::scalar(v)); }

ad::Var one_minus(ad::Var v) { return ad::add_scalar(ad::neg(v), 1.0); }

// sum(w * v) / max(sum(w), floor)
ad::Var weighted_mean(ad::Var w, ad::Var v) {
  auto den = ad::maximum(ad::sum(w), constant(w, kSoftWeightFloor));
  return ad::div(ad::sum(ad::mul(w, v)), den);
}

ad::Var min_one(ad::Var v) { return ad::neg(ad::maximum(ad::neg(v), constant(v, -1.0))); }

double alpha_n(double alpha, std::size_t n) { return alpha - 1.0 / static_cast<double>(n + 1); }

void require_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 0.5)) throw std::invalid_argument("alpha must lie in (0, 0.5)");
}

}  // namespace

ad::Var loss_ce(ad::Var log_probs, const std::vector<int>& labels) {
  return ad::neg(ad::mean(ad::pick(log_probs, labels)));
}

ad::Var loss_conftr(ad::Var soft_sets) { return ad::log(ad::mean(ad::sum_rows(soft_sets))); }

ad::Var loss_conftr_class(ad::Var soft_sets, const std::vector<int>& labels, double class_weight) {
  auto miss = ad::mean(one_minus(ad::pick(soft_sets, labels)));
  return ad::add(loss_conftr(soft_sets), ad::scale(miss, class_weight));
}

ad::Var loss_fano(ad::Var soft_sets, const std::vector<int>& labels, double alpha, std::size_t n_cal) {
  require_alpha(alpha);
  const double k = static_cast<double>(soft_sets.cols());
  auto w = ad::pick(soft_sets, labels);
  auto size = ad::sum_rows(soft_sets);
  auto covered = weighted_mean(w, ad::log(size));
  auto uncovered = weighted_mean(one_minus(w), ad::log(ad::add_scalar(ad::neg(size), k)));
  auto value = ad::add(ad::scale(uncovered, alpha), ad::scale(covered, 1.0 - alpha_n(alpha, n_cal)));
  return ad::add_scalar(value, binary_entropy(alpha));
}

ad::Var loss_mb_fano(ad::Var soft_sets, ad::Var log_probs, const std::vector<int>& labels, double alpha,
                     std::size_t n_cal) {
  require_alpha(alpha);
  auto q = ad::exp(log_probs);
  auto w = ad::pick(soft_sets, labels);
  auto nll = ad::neg(ad::pick(log_probs, labels));
  auto mass_in = ad::sum_rows(ad::mul(soft_sets, q));
  auto mass_out = ad::sum_rows(ad::mul(one_minus(soft_sets), q));
  auto covered = weighted_mean(w, ad::add(nll, ad::log(mass_in)));
  auto uncovered = weighted_mean(one_minus(w), ad::add(nll, ad::log(mass_out)));
  auto value = ad::add(ad::scale(uncovered, alpha), ad::scale(covered, 1.0 - alpha_n(alpha, n_cal)));
  return ad::add_scalar(value, binary_entropy(alpha));
}

ad::Var loss_dpi(ad::Var soft_sets, ad::Var log_probs, const std::vector<int>& labels, double alpha,
                 std::size_t n_cal, double delta) {
  require_alpha(alpha);
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("delta must lie in (0, 1)");
  const std::size_t n = soft_sets.rows();
  if (n < 2) throw std::invalid_argument("loss_dpi needs at least 2 test rows");
  const double nd = static_cast<double>(n);
  auto z = ad::sum_rows(ad::mul(soft_sets, ad::exp(log_probs)));
  auto mean_z = ad::mean(z);
  auto centered = ad::sub(z, mean_z);
  auto var = ad::scale(ad::sum(ad::mul(centered, centered)), 1.0 / (nd - 1.0));
  const double log_term = std::log(2.0 / delta);
  auto dev = ad::add_scalar(ad::sqrt(ad::scale(var, 2.0 * log_term / nd)), 7.0 * log_term / (3.0 * (nd - 1.0)));
  auto q_in = min_one(ad::add(mean_z, dev));
  auto q_out = min_one(ad::add(one_minus(mean_z), dev));
  auto ce = loss_ce(log_probs, labels);
  auto value = ad::add(ad::scale(ad::log(q_in), 1.0 - alpha),
                       ad::scale(ad::log(q_out), alpha_n(alpha, n_cal)));
  return ad::add_scalar(ad::add(value, ce), binary_entropy(alpha));
}

void TrainConfig::validate() const {
  relax.validate();
  if (batch_size < 2) throw std::invalid_argument("batch_size must be at least 2");
  if (!(lr >= 0.0)) throw std::invalid_argument("lr must be nonnegative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (epochs < 0) throw std::invalid_argument("epochs must be nonnegative");
  if (!(eval_alpha > 0.0 && eval_alpha < 1.0)) throw std::invalid_argument("eval_alpha must lie in (0, 1)");
  if (loss == LossKind::Ce) return;
  if (!(alpha_train > 0.0 && alpha_train < 0.5)) throw std::invalid_argument("alpha_train must lie in (0, 0.5)");
  const std::size_t n_cal = batch_size / 2;
  if (conformal_rank(n_cal, alpha_train) > n_cal) {
    const std::size_t rank = conformal_rank(n_cal, alpha_train);
    std::size_t min_n = n_cal + 1;
    while (conformal_rank(min_n, alpha_train) > min_n) ++min_n;
    std::ostringstream msg;
    msg << "batch_size " << batch_size << " is too small for alpha_train " << alpha_train << ": rank ceil(("
        << n_cal << " + 1)(1 - " << alpha_train << ")) = " << rank << " exceeds the " << n_cal
        << " calibration rows; need batch_size >= " << 2 * min_n;
    throw std::invalid_argument(msg.str());
  }
}

ad::Var batch_loss(ad::Tape& tape, const BoundModel& bound, const Model& model, const Matrix& x,
                   const std::vector<int>& labels, const TrainConfig& cfg) {
  auto lp = ad::log_softmax(forward_logits(bound, model, tape.constant(to_tensor(x))));
  return loss_from_log_probs(lp, labels, cfg);
}

ad::Var loss_from_log_probs(ad::Var lp, const std::vector<int>& labels, const TrainConfig& cfg) {
  if (cfg.loss == LossKind::Ce) return loss_ce(lp, labels);
  auto step = conformal_step(lp, labels, cfg.alpha_train, cfg.relax);
  switch (cfg.loss) {
    case LossKind::Conftr: return loss_conftr(step.soft_sets);
    case LossKind::ConftrClass: return loss_conftr_class(step.soft_sets, step.test_labels, cfg.class_weight);
    case LossKind::Fano: return loss_fano(step.soft_sets, step.test_labels, cfg.alpha_train, step.n_cal);
    case LossKind::MbFano:
      return loss_mb_fano(step.soft_sets, step.test_log_probs, step.test_labels, cfg.alpha_train, step.n_cal);
    case LossKind::Dpi:
      return loss_dpi(step.soft_sets, step.test_log_probs, step.test_labels, cfg.alpha_train, step.n_cal,
                      cfg.delta);
    case LossKind::Ce: break;
  }
  return loss_ce(lp, labels);
}

double scheduled_lr(double lr, int epoch, int epochs) {
  double out = lr;
  for (int num : {2, 3, 4}) {
    if (epoch >= epochs * num / 5) out *= 0.1;
  }
  return out;
}

namespace {

struct HoldoutEval {
  double inefficiency = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
};

HoldoutEval evaluate_holdout(const Model& model, const LabeledDataset& holdout, double alpha) {
  HoldoutEval out;
  if (holdout.size() < 2) return out;
  const std::size_t n_cal = holdout.size() / 2;
  auto probs = predict_probs(model, holdout.features);
  ScoreSpec thr;
  std::vector<double> cal_scores;
  for (std::size_t i = 0; i < n_cal; ++i) cal_scores.push_back(score(thr, probs[i], holdout.labels[i]));
  auto cal = calibrate(cal_scores, alpha);
  std::vector<PredictionSet> sets;
  std::vector<int> labels;
  for (std::size_t i = n_cal; i < holdout.size(); ++i) {
    sets.push_back(predict_set(cal, thr, probs[i]));
    labels.push_back(holdout.labels[i]);
  }
  out.inefficiency = inefficiency(sets);
  out.coverage = coverage(sets, labels);
  return out;
}

double accuracy(const Model& model, const LabeledDataset& ds) {
  if (ds.size() == 0) return 0.0;
  auto logits = predict_logits(model, ds.features);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto row = logits.row(i);
    auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best == ds.labels[i]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(ds.size());
}

}  // namespace

TrainResult train(Model model, const LabeledDataset& train_set, const TrainConfig& cfg,
                  const LabeledDataset* holdout) {
  cfg.validate();
  model.spec.validate();
  train_set.validate();
  if (train_set.dim() != static_cast<std::size_t>(model.spec.input_dim())) {
    throw std::invalid_argument("training features do not match the model input");
  }
  if (train_set.num_labels > model.spec.num_labels()) {
    throw std::invalid_argument("dataset has more labels than the model outputs");
  }
  const std::size_t n = train_set.size();
  const std::size_t min_batch = cfg.loss == LossKind::Ce ? 1 : 2;

  TrainResult result;
  std::vector<double> velocity(model.params.size(), 0.0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = scheduled_lr(cfg.lr, epoch, cfg.epochs);
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    auto order = rng.permutation(n);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const std::size_t b = end - start;
      if (b < min_batch) break;
      if (cfg.loss != LossKind::Ce && conformal_rank(b / 2, cfg.alpha_train) > b / 2) break;
      Matrix x(b, train_set.dim());
      std::vector<int> labels(b);
      for (std::size_t i = 0; i < b; ++i) {
        auto src = train_set.features.row(order[start + i]);
        std::copy(src.begin(), src.end(), x.row(i).begin());
        labels[i] = train_set.labels[order[start + i]];
      }
      ad::Tape tape;
      auto bound = bind(tape, model);
      auto loss = batch_loss(tape, bound, model, x, labels, cfg);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite " << to_string(cfg.loss) << " loss at epoch " << epoch << ", batch " << batches
            << " (lr " << lr << ")";
        throw TrainingDiverged(msg.str());
      }
      tape.backward(loss);
      const auto grad = gather_grad(bound);
      for (std::size_t p = 0; p < model.params.size(); ++p) {
        velocity[p] = cfg.momentum * velocity[p] + grad[p];
        model.params[p] -= lr * (grad[p] + cfg.momentum * velocity[p]);
      }
      loss_sum += value;
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.mean_loss = batches > 0 ? loss_sum / static_cast<double>(batches) : std::numeric_limits<double>::quiet_NaN();
    m.train_accuracy = accuracy(model, train_set);
    HoldoutEval h;
    if (holdout != nullptr) h = evaluate_holdout(model, *holdout, cfg.eval_alpha);
    m.holdout_inefficiency = h.inefficiency;
    m.holdout_coverage = h.coverage;
    result.history.push_back(m);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace ecp
