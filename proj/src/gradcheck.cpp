#include "eluq/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "eluq/errors.hpp"

namespace eluq {

GradCheckReport gradient_check(const std::function<Tensor()>& builder, std::vector<Tensor> leaves,
                               double tolerance, GradCheckOptions options) {
  for (Tensor& leaf : leaves) {
    if (!leaf.requires_grad()) throw ContractError("gradient_check: leaf does not require grad");
    leaf.zero_grad();
  }
  const Tensor root = builder();
  if (root.size() != 1) throw ContractError("gradient_check: builder must return a scalar");
  root.backward();

  {
    NoGradGuard guard;
    const double first = root.item();
    const double second = builder().item();
    if (std::memcmp(&first, &second, sizeof(double)) != 0) {
      throw ContractError("gradient_check: builder is not deterministic (stochastic nodes not frozen)");
    }
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  const double h = options.step;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    Tensor& leaf = leaves[l];
    std::vector<double> analytic(leaf.size(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    // data() is re-fetched for every write so each perturbation bumps the
    // node revision seen by cached derived values.
    for (std::size_t i = 0; i < leaf.size(); ++i) {
      const double saved = leaf.values()[i];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard guard;
        leaf.data()[i] = saved + h;
        plus = builder().item();
        leaf.data()[i] = saved - h;
        minus = builder().item();
        leaf.data()[i] = saved;
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double abs_err = std::abs(numeric - analytic[i]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), options.denominator_floor});
      const double rel_err = abs_err / denom;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel_err > report.max_rel_error || !std::isfinite(rel_err)) {
        report.max_rel_error = std::isfinite(rel_err) ? rel_err : HUGE_VAL;
        report.worst_location = "leaf " + std::to_string(l) + " element " + std::to_string(i);
      }
      ++report.elements_checked;
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace eluq
