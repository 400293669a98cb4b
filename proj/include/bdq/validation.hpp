#ifndef BDQ_VALIDATION_HPP_
#define BDQ_VALIDATION_HPP_

#include <string>
#include <vector>

#include <json.hpp>

namespace bdq {

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  bool gating = true;  // soft report-only checks never fail the run
  double measured = 0.0;
  std::string tolerance;
  std::string detail;
};

// Suites: error_model, flatness, transforms, losses; "all" adds the
// end-to-end checks (net ordering, report determinism, overfit probe).
std::vector<CheckResult> run_validation_suite(const std::string& suite);

nlohmann::json validation_to_json(const std::vector<CheckResult>& checks);
bool all_gating_passed(const std::vector<CheckResult>& checks);

}  // namespace bdq

#endif  // BDQ_VALIDATION_HPP_
