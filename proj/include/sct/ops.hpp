#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sct/tensor.hpp"

// Differentiable tensor operations. Shapes must agree exactly; the only
// broadcasts are the explicit bias / leading-batch additions below.
namespace sct {

// sqrt(2/pi) and the cubic coefficient of the tanh-approximated GELU.
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;

// [m x k] x [k x n] -> [m x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// 2-D transpose.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// a[..., n] + bias[n]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias);

// a[B, ...] + b[...], b repeated over the leading axis.
template <typename T>
Tensor<T> add_broadcast_batch(const Tensor<T>& a, const Tensor<T>& b);

// Multiplies slice i of the leading axis by the constant factors[i].
template <typename T>
Tensor<T> scale_batch(const Tensor<T>& a, std::span<const T> factors);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> mean(const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// Max-subtracted softmax over the last axis.
template <typename T>
Tensor<T> softmax_last_dim(const Tensor<T>& a);

// Normalizes over the last axis, then applies gamma/beta of that length.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);

// x W^T + b for x[..., in], W[out, in], b[out]. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> concat_last_dim(std::span<const Tensor<T>> parts);

template <typename T>
std::vector<Tensor<T>> split_last_dim(const Tensor<T>& a, std::span<const std::size_t> sizes);

// Token-axis helpers for [B, T, d] sequences.
template <typename T>
Tensor<T> select_token(const Tensor<T>& seq, std::size_t index);  // -> [B, d]

template <typename T>
Tensor<T> replace_token(const Tensor<T>& seq, std::size_t index, const Tensor<T>& token);

template <typename T>
Tensor<T> append_token(const Tensor<T>& seq, const Tensor<T>& token);  // token [d], -> [B, T+1, d]

template <typename T>
Tensor<T> slice_tokens(const Tensor<T>& seq, std::size_t begin, std::size_t end);

// [B, h, w, c] -> [B, (h/p)(w/p), p*p*c]. Patches in row-major grid order,
// each flattened row-major over (row, column, channel).
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& images, std::size_t patch);

}  // namespace sct
