#include "ecp/scores.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ecp {

std::string to_string(ScoreKind kind) {
  switch (kind) {
    case ScoreKind::ThrProb: return "THR_PROB";
    case ScoreKind::ThrLogProb: return "THR_LOGPROB";
    case ScoreKind::Aps: return "APS";
    case ScoreKind::Raps: return "RAPS";
  }
  return "?";
}

ScoreKind score_kind_from_string(const std::string& name) {
  if (name == "THR_PROB" || name == "THR") return ScoreKind::ThrProb;
  if (name == "THR_LOGPROB") return ScoreKind::ThrLogProb;
  if (name == "APS") return ScoreKind::Aps;
  if (name == "RAPS") return ScoreKind::Raps;
  throw std::invalid_argument("unknown score kind '" + name + "'");
}

void ScoreSpec::validate() const {
  if (k_reg < 0) throw std::invalid_argument("k_reg must be nonnegative");
  if (!(lambda_reg >= 0.0)) throw std::invalid_argument("lambda_reg must be nonnegative");
  if (!(jitter >= 0.0)) throw std::invalid_argument("jitter must be nonnegative");
}

double jitter_draw(const ScoreSpec& spec, std::optional<RngSeed> seed) {
  if (spec.jitter <= 0.0) return 0.0;
  if (!seed) throw std::invalid_argument("jittered scores need a seed");
  Rng rng(*seed);
  return spec.jitter * rng.uniform();
}

namespace {

// Descending-probability order, ties broken by the smaller label index first.
std::vector<std::size_t> descending_order(std::span<const double> p) {
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  return order;
}

void fill_unjittered(const ScoreSpec& spec, std::span<const double> p, std::span<double> out) {
  switch (spec.kind) {
    case ScoreKind::ThrProb:
      for (std::size_t y = 0; y < p.size(); ++y) out[y] = 1.0 - p[y];
      return;
    case ScoreKind::ThrLogProb:
      for (std::size_t y = 0; y < p.size(); ++y) out[y] = -std::log(std::max(p[y], kLogFloor));
      return;
    case ScoreKind::Aps:
    case ScoreKind::Raps: {
      auto order = descending_order(p);
      double cum = 0.0;
      for (std::size_t rank = 0; rank < order.size(); ++rank) {
        cum += p[order[rank]];
        double s = cum;
        if (spec.kind == ScoreKind::Raps) {
          auto over = static_cast<double>(rank + 1) - static_cast<double>(spec.k_reg);
          s += spec.lambda_reg * std::max(0.0, over);
        }
        out[order[rank]] = s;
      }
      return;
    }
  }
}

}  // namespace

std::vector<double> score_all(const ScoreSpec& spec, std::span<const double> p,
                              std::optional<RngSeed> seed) {
  spec.validate();
  std::vector<double> out(p.size());
  fill_unjittered(spec, p, out);
  double u = jitter_draw(spec, seed);
  if (u != 0.0) {
    for (double& s : out) s += u;
  }
  return out;
}

double score(const ScoreSpec& spec, std::span<const double> p, int y, std::optional<RngSeed> seed) {
  if (y < 0 || static_cast<std::size_t>(y) >= p.size()) {
    throw std::out_of_range("label " + std::to_string(y) + " out of range");
  }
  return score_all(spec, p, seed)[static_cast<std::size_t>(y)];
}

}  // namespace ecp
