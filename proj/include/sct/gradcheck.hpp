#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sct/tensor.hpp"

namespace sct {

struct GradCheckEntry {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> parameters;
  double max_relative_error = 0.0;
  std::string worst_parameter;
  double tolerance = 0.0;
  double epsilon = 0.0;
  bool pass = false;
};

struct GradCheckOptions {
  double epsilon = 1e-4;
  double tolerance = 1e-4;
  // Fault-injection hook: may rewrite the analytic gradient of a parameter
  // before comparison.
  std::function<void(const std::string& name, std::span<double> grad)> analytic_hook;
};

// Compares analytic gradients of the scalar `forward()` against central
// differences (f(x+e) - f(x-e)) / 2e for every element of every parameter.
// Relative error is |a - n| / max(|a|, |n|, 1e-8).
//
// Throws NonDeterminismError if two evaluations at the unperturbed point
// disagree (e.g. stochastic depth drawing from an unpinned stream).
GradCheckReport finite_difference_check(const std::function<Tensor<double>()>& forward,
                                        std::span<NamedParameter<double>> params,
                                        const GradCheckOptions& options = {});

}  // namespace sct
