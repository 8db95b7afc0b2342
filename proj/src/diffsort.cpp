#include "ecp/diffsort.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>

#include "ecp/core.hpp"

namespace ecp {

std::string to_string(SwapKind kind) { return kind == SwapKind::Logistic ? "LOGISTIC" : "CAUCHY"; }

SwapKind swap_kind_from_string(const std::string& name) {
  if (name == "LOGISTIC") return SwapKind::Logistic;
  if (name == "CAUCHY") return SwapKind::Cauchy;
  throw std::invalid_argument("unknown swap kind '" + name + "'");
}

void RelaxConfig::validate() const {
  if (!(steepness > 0.0)) throw std::invalid_argument("steepness must be positive");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
}

namespace {

struct Comparator {
  std::size_t lo;  // position receiving the smaller output
  std::size_t hi;
  double w;
  double dw;  // derivative of w with respect to (a - b), a the value entering `lo`
};

// w and dw/d(a-b) for one comparator.
std::pair<double, double> swap_weight(double diff, const RelaxConfig& cfg) {
  const double t = cfg.steepness * diff;
  if (cfg.swap_kind == SwapKind::Logistic) {
    const double w = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
    return {w, cfg.steepness * w * (1.0 - w)};
  }
  const double w = std::atan(t) / std::numbers::pi + 0.5;
  return {w, cfg.steepness / (std::numbers::pi * (1.0 + t * t))};
}

}  // namespace

ad::Var soft_sort(ad::Var values, const RelaxConfig& cfg) {
  cfg.validate();
  const ad::Tensor& in = values.value();
  const std::size_t m = in.size();
  if (m == 0) throw std::invalid_argument("soft_sort of an empty tensor");
  if (in.rows != 1 && in.cols != 1) throw std::invalid_argument("soft_sort needs a vector");
  std::size_t n = 1;
  while (n < m) n *= 2;

  std::vector<double> v(n, kSortSentinel);
  std::vector<bool> pad(n, false);
  for (std::size_t i = 0; i < m; ++i) v[i] = in.data[i];
  for (std::size_t i = m; i < n; ++i) pad[i] = true;

  auto layers = std::make_shared<std::vector<std::vector<Comparator>>>();
  // Input values of every layer, kept for the backward pass.
  auto states = std::make_shared<std::vector<std::vector<double>>>();
  for (std::size_t k = 2; k <= n; k *= 2) {
    for (std::size_t j = k / 2; j > 0; j /= 2) {
      states->push_back(v);
      std::vector<Comparator> layer;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t l = i ^ j;
        if (l <= i) continue;
        const bool ascending = (i & k) == 0;
        const std::size_t lo = ascending ? i : l;
        const std::size_t hi = ascending ? l : i;
        const double a = v[lo];
        const double b = v[hi];
        Comparator c{lo, hi, 0.0, 0.0};
        if (pad[lo] || pad[hi]) {
          // Hard compare: a padded slot always counts as the larger value.
          const bool swap = pad[lo] && !pad[hi];
          c.w = swap ? 1.0 : 0.0;
          if (swap) {
            std::swap(v[lo], v[hi]);
            std::swap(pad[lo], pad[hi]);
          }
        } else {
          auto [w, dw] = swap_weight(a - b, cfg);
          c.w = w;
          c.dw = dw;
          v[lo] = a + w * (b - a);
          v[hi] = b + w * (a - b);
        }
        layer.push_back(c);
      }
      layers->push_back(std::move(layer));
    }
  }

  ad::Tensor out(in.rows, in.cols);
  for (std::size_t i = 0; i < m; ++i) out.data[i] = v[i];

  const std::size_t rows = in.rows, cols = in.cols;
  return values.tape->record(out, {values}, [layers, states, m, n, rows, cols](const ad::Tensor& g) {
    std::vector<double> grad(n, 0.0);
    for (std::size_t i = 0; i < m; ++i) grad[i] = g.data[i];
    for (std::size_t li = layers->size(); li-- > 0;) {
      const auto& state = (*states)[li];
      for (const auto& c : (*layers)[li]) {
        const double a = state[c.lo];
        const double b = state[c.hi];
        const double g_lo = grad[c.lo];
        const double g_hi = grad[c.hi];
        const double w = c.w;
        const double dw = c.dw;
        // lo = a + w (b - a), hi = b + w (a - b), w = g(s (a - b)).
        const double da = g_lo * ((1.0 - w) + (b - a) * dw) + g_hi * (w + (a - b) * dw);
        const double db = g_lo * (w - (b - a) * dw) + g_hi * ((1.0 - w) - (a - b) * dw);
        grad[c.lo] = da;
        grad[c.hi] = db;
      }
    }
    ad::Tensor gin(rows, cols);
    for (std::size_t i = 0; i < m; ++i) gin.data[i] = grad[i];
    return std::vector<ad::Tensor>{gin};
  });
}

ad::Var soft_quantile(ad::Var scores, double alpha, const RelaxConfig& cfg) {
  const std::size_t m = scores.value().size();
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  const std::size_t r = conformal_rank(m, alpha);
  if (r > m || r == 0) {
    throw std::invalid_argument("quantile rank " + std::to_string(r) + " exceeds the " +
                                std::to_string(m) + " calibration scores");
  }
  auto sorted = soft_sort(scores, cfg);
  return ad::gather(sorted, {r - 1}, 1, 1);
}

ad::Var soft_membership(ad::Var q_hat, ad::Var scores, const RelaxConfig& cfg) {
  cfg.validate();
  return ad::sigmoid(ad::scale(ad::sub(q_hat, scores), 1.0 / cfg.temperature));
}

}  // namespace ecp
