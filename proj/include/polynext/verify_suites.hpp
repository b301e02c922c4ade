#pragma once

#include <string>
#include <vector>

namespace polynext {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Invariant suites runnable from the CLI (`verify --suite <name>`) and the
/// acceptance harness. Names: gradcheck, degree2, sigmoid-fold, bn-fold,
/// circuit, attention, architecture, all.
std::vector<CheckResult> run_verify_suite(const std::string& name);

std::vector<CheckResult> verify_gradcheck();
std::vector<CheckResult> verify_degree2();
std::vector<CheckResult> verify_sigmoid_fold(int64_t resolution = 128);
std::vector<CheckResult> verify_bn_fold();
std::vector<CheckResult> verify_circuit();
std::vector<CheckResult> verify_attention();
std::vector<CheckResult> verify_architecture();

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace polynext
