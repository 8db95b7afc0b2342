#pragma once

#include <string>

#include "ecp/autodiff.hpp"

namespace ecp {

enum class SwapKind { Logistic, Cauchy };

std::string to_string(SwapKind kind);
SwapKind swap_kind_from_string(const std::string& name);

struct RelaxConfig {
  double steepness = 10.0;   // sorting sharpness
  double temperature = 0.1;  // set-membership sharpness
  SwapKind swap_kind = SwapKind::Logistic;

  void validate() const;
};

/// Padding value for the bitonic network. Padded slots compare hard, so they never mix with
/// real entries and are stripped from the output.
inline constexpr double kSortSentinel = 1e9;

/// Ascending relaxed sort of a 1xm or mx1 tensor through a bitonic network.
ad::Var soft_sort(ad::Var values, const RelaxConfig& cfg);

/// Entry ceil((m+1)(1-alpha)) of soft_sort. Throws when that rank exceeds m.
ad::Var soft_quantile(ad::Var scores, double alpha, const RelaxConfig& cfg);

/// sigmoid((q_hat - score) / T), elementwise with q_hat broadcast.
ad::Var soft_membership(ad::Var q_hat, ad::Var scores, const RelaxConfig& cfg);

}  // namespace ecp
