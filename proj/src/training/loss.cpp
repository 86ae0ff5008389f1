#include <cmath>

#include "sct/errors.hpp"
#include "sct/training.hpp"

namespace sct {

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const std::uint8_t> targets) {
  if (logits.numel() != targets.size()) {
    throw ShapeError("bce_with_logits: logits " + shape_to_string(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  }
  std::vector<T> y(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] > 1) throw ConfigError("bce_with_logits: targets must be 0 or 1");
    y[i] = static_cast<T>(targets[i]);
  }
  const T* s = logits.data().data();
  const std::size_t n = y.size();
  T total = T{0};
  for (std::size_t i = 0; i < n; ++i) {
    total += std::max(s[i], T{0}) - s[i] * y[i] + std::log1p(std::exp(-std::abs(s[i])));
  }
  auto ln = logits.node();
  return Tensor<T>::from_op({1}, {total / static_cast<T>(n)}, {logits}, [ln, y = std::move(y)](detail::Node<T>& self) {
    T* g = ln->grad_buffer();
    const T scale = self.grad[0] / static_cast<T>(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      const T x = ln->value[i];
      const T sig = x >= T{0} ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
      g[i] += scale * (sig - y[i]);
    }
  });
}

template Tensor<float> bce_with_logits(const Tensor<float>&, std::span<const std::uint8_t>);
template Tensor<double> bce_with_logits(const Tensor<double>&, std::span<const std::uint8_t>);

}  // namespace sct
