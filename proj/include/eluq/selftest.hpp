#pragma once

// Built-in numerical checks run by `eluq selftest`.

#include <cstddef>
#include <string>
#include <vector>

namespace eluq {

struct CheckResult {
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

struct SelfTestOptions {
  std::size_t primitive_trials = 20;
  std::size_t kinematics_events = 10000;
  /// Scales the SELU backward pass by 1.01 while the gradient suite runs.
  bool corrupt_selu = false;
};

/// Finite-difference checks of every primitive, the MNF layer forward pass
/// and KL penalty, and the full training loss (frozen noise, rel err < 1e-5).
std::vector<CheckResult> gradient_suite(const SelfTestOptions& opt = {});
/// Coupling-flow inverse round trip and log-determinant against a numerical
/// Jacobian on dims 2-6.
std::vector<CheckResult> flow_suite();
/// KL penalty oracles: matching prior, one unit-variance weight, quadrature.
std::vector<CheckResult> kl_suite();
/// Inverse-variance weighted mean against closed forms and a naive sum.
std::vector<CheckResult> weighted_average_suite();
/// Classical methods on noiseless radiation-free events and Q2 = s x y on
/// sampled truth.
std::vector<CheckResult> kinematics_suite(std::size_t n_events = 10000);

std::vector<CheckResult> run_selftest(const SelfTestOptions& opt = {});

}  // namespace eluq
