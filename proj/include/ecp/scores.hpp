#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ecp/core.hpp"

namespace ecp {

enum class ScoreKind { ThrProb, ThrLogProb, Aps, Raps };

std::string to_string(ScoreKind kind);
ScoreKind score_kind_from_string(const std::string& name);

/// Nonconformity score configuration. RAPS fields are ignored for other kinds.
struct ScoreSpec {
  ScoreKind kind = ScoreKind::ThrProb;
  int k_reg = 0;
  double lambda_reg = 0.0;
  // Amplitude of the uniform tie-breaking noise; one draw per example, shared by all labels.
  double jitter = 0.0;

  void validate() const;
  bool operator==(const ScoreSpec&) const = default;
};

inline constexpr double kLogFloor = 1e-12;

/// Score of one label. `seed` is required when jitter > 0.
double score(const ScoreSpec& spec, std::span<const double> p, int y,
             std::optional<RngSeed> seed = std::nullopt);

/// Scores of every label, sharing a single jitter draw.
std::vector<double> score_all(const ScoreSpec& spec, std::span<const double> p,
                              std::optional<RngSeed> seed = std::nullopt);

/// The jitter draw for a given seed: uniform(0, jitter).
double jitter_draw(const ScoreSpec& spec, std::optional<RngSeed> seed);

}  // namespace ecp
