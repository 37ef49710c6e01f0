#pragma once

// Property suite over the finite-distribution oracle: random distributions
// plus two fixed reference cases, each identity reported as its worst
// residual against a tolerance.

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace madnet {

struct IdentityCheck {
  std::string name;
  double max_residual = 0.0;
  double tolerance = 0.0;
  bool informational = false;  ///< reported, never fails the suite

  bool pass() const { return informational || max_residual <= tolerance; }
};

struct SuiteReport {
  std::vector<IdentityCheck> checks;
  int cases = 0;  ///< random distributions drawn
  double seconds = 0.0;

  bool pass() const;
  /// First failing check, or nullptr.
  const IdentityCheck* first_failure() const;
  nlohmann::json to_json() const;
};

struct SuiteOptions {
  int cases = 200;
  int max_support = 50;
  std::uint64_t seed = 0;
  /// Negative control: negate the reconstructed representer.
  bool flip_reconstruction_sign = false;
};

SuiteReport run_identity_suite(const SuiteOptions& options = {});

}  // namespace madnet
