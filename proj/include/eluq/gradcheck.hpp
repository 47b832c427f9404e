#pragma once

#include <functional>
#include <string>
#include <vector>

#include "eluq/tensor.hpp"

namespace eluq {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t elements_checked = 0;
  std::string worst_location;  // "leaf <i> element <j>"
  double tolerance = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Relative errors are |a - n| / max(|a|, |n|, floor); the floor keeps
  /// near-zero gradients from turning round-off into relative noise.
  double denominator_floor = 1e-2;
};

/// Compares reverse-mode gradients of a scalar builder against central finite
/// differences over every element of `leaves`.
///
/// The builder must be deterministic: any stochastic node has to draw from a
/// rewound NoiseSource. It is evaluated twice up front and a bitwise mismatch
/// raises ContractError.
GradCheckReport gradient_check(const std::function<Tensor()>& builder, std::vector<Tensor> leaves,
                               double tolerance, GradCheckOptions options = {});

}  // namespace eluq
