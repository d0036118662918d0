#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cdl::gradcheck {

// Finite-difference validation of every analytic derivative in the library.
// Conventions: central differences with steps 1e-6 (inputs/weights), 1e-7
// (step sizes), 1e-5 * value (sharpness). The reported error is
//   |analytic - fd| / max(|analytic|, |fd|, atol / rtol)
// where atol bounds the finite-difference rounding noise (ulp-scale of the
// evaluated function divided by the step); comparisons whose true difference
// is below that noise cannot be resolved by any finite difference.
struct SuiteResult {
  std::string name;
  double max_err = 0.0;
  double tolerance = 0.0;
  std::int64_t instances = 0;
  bool pass = false;
};

struct Options {
  std::uint64_t seed = 42;
  int instances = 1000;
  // Test hook: perturbs the analytic value inside the harness so a broken
  // derivative is provably detected. Never touches library code.
  bool corrupt = false;
};

SuiteResult run_prop1(const Options& opt);            // exact identity, abs < 1e-10
SuiteResult run_quant_dtheta(const Options& opt);     // rel < 1e-5
SuiteResult run_quant_dstep(const Options& opt);      // rel < 1e-4
SuiteResult run_quant_dsharpness(const Options& opt); // rel < 1e-4
SuiteResult run_entropy_grads(const Options& opt);    // rel < 1e-4
SuiteResult run_rcdl_end_to_end(const Options& opt);  // rel < 1e-4, full objective

std::vector<SuiteResult> run_suites(const std::vector<std::string>& names, const Options& opt);
std::vector<std::string> suite_names();

}  // namespace cdl::gradcheck
