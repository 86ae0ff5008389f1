#include <cmath>

#include "sct/errors.hpp"
#include "sct/training.hpp"

namespace sct {

void AdamConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be a finite non-negative number");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("train.eps must be positive");
}

template <typename T>
AdamState<T> AdamState<T>::zeros_like(std::span<const NamedParameter<T>> params) {
  AdamState<T> s;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.numel(), T{0});
    s.v.emplace_back(p.tensor.numel(), T{0});
  }
  return s;
}

template <typename T>
void adam_step(std::span<NamedParameter<T>> params, AdamState<T>& state, const AdamConfig& config) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                     std::to_string(params.size()) + " parameters");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.m[k].size() != params[k].tensor.numel() || state.v[k].size() != params[k].tensor.numel()) {
      throw ShapeError("adam_step: moment shape mismatch for '" + params[k].name + "'");
    }
    if (!params[k].tensor.has_grad()) continue;
    for (T g : params[k].tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + params[k].name + "'");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
  const T lr = static_cast<T>(config.lr), eps = static_cast<T>(config.eps);
  const T inv_c1 = static_cast<T>(1.0 / c1), inv_c2 = static_cast<T>(1.0 / c2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].tensor;
    auto theta = p.mutable_data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const bool has = p.has_grad();
    std::span<const T> grad = p.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T g = has ? grad[i] : T{0};
      m[i] = b1 * m[i] + (T{1} - b1) * g;
      v[i] = b2 * v[i] + (T{1} - b2) * g * g;
      const T mhat = m[i] * inv_c1;
      const T vhat = v[i] * inv_c2;
      theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <typename T>
double clip_grad_norm(std::span<NamedParameter<T>> params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (T& g : p.tensor.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(std::span<NamedParameter<float>>, AdamState<float>&, const AdamConfig&);
template void adam_step(std::span<NamedParameter<double>>, AdamState<double>&, const AdamConfig&);
template double clip_grad_norm(std::span<NamedParameter<float>>, double);
template double clip_grad_norm(std::span<NamedParameter<double>>, double);

}  // namespace sct
