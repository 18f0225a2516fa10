#pragma once

#include <stdexcept>
#include <string>

namespace dmprune {

// Raised for any rejected input: invariant violations, malformed files,
// infeasible budgets. The CLI maps it to the "data error" exit code.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dmprune
