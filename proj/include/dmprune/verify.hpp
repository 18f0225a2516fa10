#pragma once

// Self-verification suite. Each check compares the engine against an
// independent reference or a measured quantity and reports pass/fail with
// the observed numbers.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dmprune {

struct CriterionResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct VerifyOptions {
  // Artifacts (fidelity table, reproducibility runs) land here.
  std::filesystem::path out_dir = "verify_artifacts";
  std::uint64_t seed = 42;
  std::size_t threads = 0;
  // Empty runs every criterion; otherwise only the listed names.
  std::vector<std::string> only;
};

CriterionResult check_dp_optimality(const VerifyOptions& opt);
CriterionResult check_incremental_equivalence(const VerifyOptions& opt);
CriterionResult check_fisher_oracle(const VerifyOptions& opt);
CriterionResult check_gradcheck(const VerifyOptions& opt);
CriterionResult check_fidelity(const VerifyOptions& opt);
CriterionResult check_end_to_end(const VerifyOptions& opt);
CriterionResult check_finetune_recovery(const VerifyOptions& opt);
CriterionResult check_complexity(const VerifyOptions& opt);
CriterionResult check_reproducibility(const VerifyOptions& opt);

std::vector<std::string> criterion_names();

std::vector<CriterionResult> run_acceptance(const VerifyOptions& opt);

// One line per criterion: "PASS name: detail (1.23 s)".
std::string format_result(const CriterionResult& r);

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Least-squares slope and coefficient of determination of y on x.
struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};
LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace dmprune
