#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ecp/io.hpp"

namespace ecp {

enum class Verdict { Pass, Fail, Skip };
std::string to_string(Verdict v);

struct CriterionInfo {
  int id = 0;
  std::string slug;
  std::string summary;
};

struct CriterionResult {
  int id = 0;
  std::string slug;
  Verdict verdict = Verdict::Fail;
  std::string detail;  // one-line measured summary
  Json measured;
  double seconds = 0.0;
};

struct ReproOptions {
  // Directory with the four MNIST IDX files; criterion 7 is skipped without it.
  std::optional<std::string> mnist_dir;
};

/// Options from the environment: ECP_MNIST_DIR.
ReproOptions repro_options_from_env();

const std::vector<CriterionInfo>& criteria();

/// Accepts the numeric id or the slug.
const CriterionInfo& find_criterion(const std::string& key);

CriterionResult run_criterion(int id, const ReproOptions& opts = {});

/// "PASS  3 ordering-chain  <detail>  (0.2 s)"
std::string format_result(const CriterionResult& r);

void to_json(Json& j, const CriterionResult& r);

}  // namespace ecp
