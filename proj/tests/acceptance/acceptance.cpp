#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "ecp/repro.hpp"

// Runs every acceptance criterion (or those named on the command line) and prints one
// PASS/FAIL/SKIP line each. Exit status is 1 when any criterion fails.
int main(int argc, char** argv) {
  std::vector<int> ids;
  try {
    for (int a = 1; a < argc; ++a) ids.push_back(ecp::find_criterion(argv[a]).id);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  }
  if (ids.empty()) {
    for (const auto& c : ecp::criteria()) ids.push_back(c.id);
  }
  const auto opts = ecp::repro_options_from_env();
  int failed = 0;
  for (int id : ids) {
    ecp::CriterionResult r;
    try {
      r = ecp::run_criterion(id, opts);
    } catch (const std::exception& e) {
      r.id = id;
      r.slug = ecp::find_criterion(std::to_string(id)).slug;
      r.verdict = ecp::Verdict::Fail;
      r.detail = std::string("error: ") + e.what();
    }
    if (r.verdict == ecp::Verdict::Fail) ++failed;
    std::printf("%s\n", ecp::format_result(r).c_str());
    std::fflush(stdout);
  }
  std::printf("%d criteria run, %d failed\n", static_cast<int>(ids.size()), failed);
  return failed == 0 ? 0 : 1;
}
