#include "sct/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "sct/errors.hpp"

namespace sct {

GradCheckReport finite_difference_check(const std::function<Tensor<double>()>& forward,
                                        std::span<NamedParameter<double>> params,
                                        const GradCheckOptions& options) {
  GradCheckReport report;
  report.tolerance = options.tolerance;
  report.epsilon = options.epsilon;

  for (auto& p : params) p.tensor.set_requires_grad(true);
  Tensor<double> loss = forward();
  const double base = loss.item();
  loss.backward(GradMode::kReset);

  const double again = forward().item();
  if (again != base) {
    throw NonDeterminismError("forward is not deterministic: re-evaluation gave " + std::to_string(again) +
                              " vs " + std::to_string(base));
  }

  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    std::vector<double> g(p.tensor.numel(), 0.0);
    if (p.tensor.has_grad()) std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), g.begin());
    if (options.analytic_hook) options.analytic_hook(p.name, g);
    analytic.push_back(std::move(g));
  }

  NoGradGuard no_grad;
  const double eps = options.epsilon;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    GradCheckEntry entry;
    entry.name = p.name;
    std::span<double> values = p.tensor.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = forward().item();
      values[i] = saved - eps;
      const double down = forward().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > entry.max_relative_error || i == 0) {
        entry.max_relative_error = rel;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    if (entry.max_relative_error > report.max_relative_error || k == 0) {
      report.max_relative_error = entry.max_relative_error;
      report.worst_parameter = entry.name;
    }
    report.parameters.push_back(std::move(entry));
  }
  report.pass = report.max_relative_error <= options.tolerance;
  return report;
}

}  // namespace sct
