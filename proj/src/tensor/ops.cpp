#include "sct/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kernels.hpp"
#include "sct/errors.hpp"

namespace sct {

namespace {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_to_string(a.shape()));
  }
}

// Accumulate `g` into the gradient of node `p` if it is tracked.
template <typename T>
void accumulate(const std::shared_ptr<detail::Node<T>>& p, const std::vector<T>& g) {
  if (!p->requires_grad) return;
  T* dst = p->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename T>
std::size_t last_dim(const Tensor<T>& a) {
  return a.shape().back();
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_to_string(a.shape()) + " by " +
                     shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  auto an = a.node(), bn = b.node();
  return Tensor<T>::from_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::Node<T>& self) {
    if (an->requires_grad)
      kernels::gemm_nt(self.grad.data(), bn->value.data(), an->grad_buffer(), m, n, k, true);
    if (bn->requires_grad)
      kernels::gemm_tn_acc(an->value.data(), self.grad.data(), bn->grad_buffer(), m, k, n);
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  kernels::transpose_into(a.data().data(), out.data(), r, c);
  auto an = a.node();
  return Tensor<T>::from_op({c, r}, std::move(out), {a}, [an, r, c](detail::Node<T>& self) {
    std::vector<T> g(r * c);
    kernels::transpose_into(self.grad.data(), g.data(), c, r);
    accumulate(an, g);
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> out(a.numel());
  const T* x = a.data().data();
  const T* y = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  auto an = a.node(), bn = b.node();
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
    accumulate(an, self.grad);
    accumulate(bn, self.grad);
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  const T* x = a.data().data();
  const T* y = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  auto an = a.node(), bn = b.node();
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
    const std::size_t n = self.grad.size();
    if (an->requires_grad) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      T* g = bn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v *= factor;
  auto an = a.node();
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, [an, factor](detail::Node<T>& self) {
    T* g = an->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  const std::size_t n = last_dim(a);
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw ShapeError("add_bias: bias " + shape_to_string(bias.shape()) + " does not match " +
                     shape_to_string(a.shape()));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* b = bias.data().data();
  for (std::size_t r = 0; r < out.size(); r += n)
    for (std::size_t j = 0; j < n; ++j) out[r + j] += b[j];
  auto an = a.node(), bn = bias.node();
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, bias}, [an, bn, n](detail::Node<T>& self) {
    accumulate(an, self.grad);
    if (bn->requires_grad) {
      T* g = bn->grad_buffer();
      for (std::size_t r = 0; r < self.grad.size(); r += n)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r + j];
    }
  });
}

template <typename T>
Tensor<T> add_broadcast_batch(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() + 1 || !std::equal(b.shape().begin(), b.shape().end(), a.shape().begin() + 1)) {
    throw ShapeError("add_broadcast_batch: " + shape_to_string(b.shape()) +
                     " cannot be added to each slice of " + shape_to_string(a.shape()));
  }
  const std::size_t slice = b.numel();
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* y = b.data().data();
  for (std::size_t r = 0; r < out.size(); r += slice)
    for (std::size_t j = 0; j < slice; ++j) out[r + j] += y[j];
  auto an = a.node(), bn = b.node();
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [an, bn, slice](detail::Node<T>& self) {
    accumulate(an, self.grad);
    if (bn->requires_grad) {
      T* g = bn->grad_buffer();
      for (std::size_t r = 0; r < self.grad.size(); r += slice)
        for (std::size_t j = 0; j < slice; ++j) g[j] += self.grad[r + j];
    }
  });
}

template <typename T>
Tensor<T> scale_batch(const Tensor<T>& a, std::span<const T> factors) {
  if (factors.size() != a.dim(0)) {
    throw ShapeError("scale_batch: " + std::to_string(factors.size()) + " factors for " +
                     shape_to_string(a.shape()));
  }
  const std::size_t slice = a.numel() / a.dim(0);
  std::vector<T> fac(factors.begin(), factors.end());
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t s = 0; s < fac.size(); ++s)
    for (std::size_t j = 0; j < slice; ++j) out[s * slice + j] *= fac[s];
  auto an = a.node();
  return Tensor<T>::from_op(a.shape(), std::move(out), {a},
                            [an, fac = std::move(fac), slice](detail::Node<T>& self) {
                              T* g = an->grad_buffer();
                              for (std::size_t s = 0; s < fac.size(); ++s)
                                for (std::size_t j = 0; j < slice; ++j) g[s * slice + j] += fac[s] * self.grad[s * slice + j];
                            });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T{0};
  for (T v : a.data()) total += v;
  auto an = a.node();
  return Tensor<T>::from_op({1}, {total}, {a}, [an](detail::Node<T>& self) {
    T* g = an->grad_buffer();
    const T s = self.grad[0];
    for (std::size_t i = 0; i < an->value.size(); ++i) g[i] += s;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                     shape_to_string(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  auto an = a.node();
  return Tensor<T>::from_op(std::move(shape), std::move(out), {a},
                            [an](detail::Node<T>& self) { accumulate(an, self.grad); });
}

template <typename T>
Tensor<T> softmax_last_dim(const Tensor<T>& a) {
  const std::size_t n = last_dim(a);
  const std::size_t rows = a.numel() / n;
  std::vector<T> out(a.numel());
  const T* x = a.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * n;
    T* yr = out.data() + r * n;
    const T m = *std::max_element(xr, xr + n);
    T total = T{0};
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - m);
      total += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= total;
  }
  auto an = a.node();
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, [an, n, rows](detail::Node<T>& self) {
    T* g = an->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = self.value.data() + r * n;
      const T* gr = self.grad.data() + r * n;
      T dot = T{0};
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t n = last_dim(a);
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != n || beta.dim(0) != n) {
    throw ShapeError("layer_norm: gamma " + shape_to_string(gamma.shape()) + " / beta " +
                     shape_to_string(beta.shape()) + " do not match " + shape_to_string(a.shape()));
  }
  const std::size_t rows = a.numel() / n;
  std::vector<T> out(a.numel());
  std::vector<T> xhat(a.numel());
  std::vector<T> inv_std(rows);
  const T* x = a.data().data();
  const T* gm = gamma.data().data();
  const T* bt = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * n;
    T mu = T{0};
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<T>(n);
    T var = T{0};
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(n);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (xr[j] - mu) * is;
      xhat[r * n + j] = h;
      out[r * n + j] = h * gm[j] + bt[j];
    }
  }
  auto an = a.node(), gn = gamma.node(), bn = beta.node();
  return Tensor<T>::from_op(
      a.shape(), std::move(out), {a, gamma, beta},
      [an, gn, bn, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
        const T* gy = self.grad.data();
        if (gn->requires_grad || bn->requires_grad) {
          T* gg = gn->requires_grad ? gn->grad_buffer() : nullptr;
          T* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
              if (gg) gg[j] += gy[r * n + j] * xhat[r * n + j];
              if (gb) gb[j] += gy[r * n + j];
            }
          }
        }
        if (an->requires_grad) {
          T* gx = an->grad_buffer();
          const T* gm = gn->value.data();
          const T inv_n = T{1} / static_cast<T>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            T s1 = T{0}, s2 = T{0};
            for (std::size_t j = 0; j < n; ++j) {
              const T d = gy[r * n + j] * gm[j];
              s1 += d;
              s2 += d * xhat[r * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const T d = gy[r * n + j] * gm[j];
              gx[r * n + j] += inv_std[r] * (d - inv_n * s1 - xhat[r * n + j] * inv_n * s2);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T c = static_cast<T>(kGeluSqrt2OverPi);
  const T k = static_cast<T>(kGeluCubic);
  const std::size_t n = a.numel();
  const T* x = a.data().data();
  std::vector<T> out(n);
  std::vector<T> th(n);
  kernels::aligned_apply(x, th.data(), n, [c, k](auto& v) { v = (c * (v + k * v.cube())).tanh(); });
  for (std::size_t i = 0; i < n; ++i) out[i] = T{0.5} * x[i] * (T{1} + th[i]);
  auto an = a.node();
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, [an, c, k, th = std::move(th)](detail::Node<T>& self) {
    T* g = an->grad_buffer();
    const T* x = an->value.data();
    for (std::size_t i = 0; i < th.size(); ++i) {
      const T v = x[i];
      const T dinner = c * (T{1} + T{3} * k * v * v);
      const T d = T{0.5} * (T{1} + th[i]) + T{0.5} * v * (T{1} - th[i] * th[i]) * dinner;
      g[i] += d * self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || last_dim(x) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_to_string(x.shape()) + " incompatible with weight " +
                     shape_to_string(weight.shape()));
  }
  const std::size_t in = weight.dim(1), out_dim = weight.dim(0);
  const std::size_t rows = x.numel() / in;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw ShapeError("linear: bias " + shape_to_string(bias.shape()) + " incompatible with weight " +
                     shape_to_string(weight.shape()));
  }
  std::vector<T> out(rows * out_dim);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * out_dim);
  }
  kernels::gemm_nt(x.data().data(), weight.data().data(), out.data(), rows, in, out_dim, bias.defined());
  Shape shape = x.shape();
  shape.back() = out_dim;
  auto xn = x.node(), wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Tensor<T>::from_op(std::move(shape), std::move(out), std::move(parents),
                            [xn, wn, bn, rows, in, out_dim](detail::Node<T>& self) {
                              const T* gy = self.grad.data();
                              if (xn->requires_grad)
                                kernels::gemm_nn(gy, wn->value.data(), xn->grad_buffer(), rows, out_dim, in, true);
                              if (wn->requires_grad)
                                kernels::gemm_tn_acc(gy, xn->value.data(), wn->grad_buffer(), rows, out_dim, in);
                              if (bn && bn->requires_grad) {
                                T* gb = bn->grad_buffer();
                                for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t o = 0; o < out_dim; ++o) gb[o] += gy[r * out_dim + o];
                              }
                            });
}

template <typename T>
Tensor<T> concat_last_dim(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_last_dim: no inputs");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead) {
      throw ShapeError("concat_last_dim: " + shape_to_string(p.shape()) + " disagrees with " +
                       shape_to_string(parts[0].shape()) + " outside the last axis");
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<T> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].data().data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(src + r * widths[k], src + (r + 1) * widths[k], out.begin() + r * total + offset);
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  std::vector<Tensor<T>> parents(parts.begin(), parts.end());
  return Tensor<T>::from_op(std::move(shape), std::move(out), std::move(parents),
                            [nodes, widths, rows, total](detail::Node<T>& self) {
                              std::size_t off = 0;
                              for (std::size_t k = 0; k < nodes.size(); ++k) {
                                if (nodes[k]->requires_grad) {
                                  T* g = nodes[k]->grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t j = 0; j < widths[k]; ++j)
                                      g[r * widths[k] + j] += self.grad[r * total + off + j];
                                }
                                off += widths[k];
                              }
                            });
}

template <typename T>
std::vector<Tensor<T>> split_last_dim(const Tensor<T>& a, std::span<const std::size_t> sizes) {
  const std::size_t total = last_dim(a);
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != total) {
    throw ShapeError("split_last_dim: sizes do not sum to the last axis of " + shape_to_string(a.shape()));
  }
  const std::size_t rows = a.numel() / total;
  std::vector<Tensor<T>> result;
  std::size_t offset = 0;
  auto an = a.node();
  for (std::size_t width : sizes) {
    std::vector<T> out(rows * width);
    const T* src = a.data().data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(src + r * total + offset, src + r * total + offset + width, out.begin() + r * width);
    Shape shape = a.shape();
    shape.back() = width;
    result.push_back(Tensor<T>::from_op(std::move(shape), std::move(out), {a},
                                        [an, rows, total, offset, width](detail::Node<T>& self) {
                                          T* g = an->grad_buffer();
                                          for (std::size_t r = 0; r < rows; ++r)
                                            for (std::size_t j = 0; j < width; ++j)
                                              g[r * total + offset + j] += self.grad[r * width + j];
                                        }));
    offset += width;
  }
  return result;
}

template <typename T>
Tensor<T> select_token(const Tensor<T>& seq, std::size_t index) {
  require_rank("select_token", seq, 3);
  const std::size_t b = seq.dim(0), len = seq.dim(1), d = seq.dim(2);
  if (index >= len) throw ShapeError("select_token: index " + std::to_string(index) + " out of range for " + shape_to_string(seq.shape()));
  std::vector<T> out(b * d);
  const T* src = seq.data().data();
  for (std::size_t i = 0; i < b; ++i)
    std::copy(src + (i * len + index) * d, src + (i * len + index + 1) * d, out.begin() + i * d);
  auto sn = seq.node();
  return Tensor<T>::from_op({b, d}, std::move(out), {seq}, [sn, b, len, d, index](detail::Node<T>& self) {
    T* g = sn->grad_buffer();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) g[(i * len + index) * d + j] += self.grad[i * d + j];
  });
}

template <typename T>
Tensor<T> replace_token(const Tensor<T>& seq, std::size_t index, const Tensor<T>& token) {
  require_rank("replace_token", seq, 3);
  const std::size_t b = seq.dim(0), len = seq.dim(1), d = seq.dim(2);
  if (index >= len) throw ShapeError("replace_token: index " + std::to_string(index) + " out of range for " + shape_to_string(seq.shape()));
  if (token.shape() != Shape{b, d}) {
    throw ShapeError("replace_token: token " + shape_to_string(token.shape()) + " does not fit " +
                     shape_to_string(seq.shape()));
  }
  std::vector<T> out(seq.data().begin(), seq.data().end());
  const T* tk = token.data().data();
  for (std::size_t i = 0; i < b; ++i) std::copy(tk + i * d, tk + (i + 1) * d, out.begin() + (i * len + index) * d);
  auto sn = seq.node(), tn = token.node();
  return Tensor<T>::from_op(seq.shape(), std::move(out), {seq, token}, [sn, tn, b, len, d, index](detail::Node<T>& self) {
    if (sn->requires_grad) {
      T* g = sn->grad_buffer();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t t = 0; t < len; ++t) {
          if (t == index) continue;
          for (std::size_t j = 0; j < d; ++j) g[(i * len + t) * d + j] += self.grad[(i * len + t) * d + j];
        }
    }
    if (tn->requires_grad) {
      T* g = tn->grad_buffer();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[(i * len + index) * d + j];
    }
  });
}

template <typename T>
Tensor<T> append_token(const Tensor<T>& seq, const Tensor<T>& token) {
  require_rank("append_token", seq, 3);
  const std::size_t b = seq.dim(0), len = seq.dim(1), d = seq.dim(2);
  if (token.rank() != 1 || token.dim(0) != d) {
    throw ShapeError("append_token: token " + shape_to_string(token.shape()) + " does not match embedding dim of " +
                     shape_to_string(seq.shape()));
  }
  const std::size_t out_len = len + 1;
  std::vector<T> out(b * out_len * d);
  const T* src = seq.data().data();
  for (std::size_t i = 0; i < b; ++i) {
    std::copy(src + i * len * d, src + (i + 1) * len * d, out.begin() + i * out_len * d);
    std::copy(token.data().begin(), token.data().end(), out.begin() + (i * out_len + len) * d);
  }
  auto sn = seq.node(), tn = token.node();
  return Tensor<T>::from_op({b, out_len, d}, std::move(out), {seq, token}, [sn, tn, b, len, d](detail::Node<T>& self) {
    const std::size_t out_len = len + 1;
    if (sn->requires_grad) {
      T* g = sn->grad_buffer();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < len * d; ++j) g[i * len * d + j] += self.grad[i * out_len * d + j];
    }
    if (tn->requires_grad) {
      T* g = tn->grad_buffer();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[(i * out_len + len) * d + j];
    }
  });
}

template <typename T>
Tensor<T> slice_tokens(const Tensor<T>& seq, std::size_t begin, std::size_t end) {
  require_rank("slice_tokens", seq, 3);
  const std::size_t b = seq.dim(0), len = seq.dim(1), d = seq.dim(2);
  if (begin >= end || end > len) {
    throw ShapeError("slice_tokens: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_to_string(seq.shape()));
  }
  const std::size_t width = end - begin;
  std::vector<T> out(b * width * d);
  const T* src = seq.data().data();
  for (std::size_t i = 0; i < b; ++i)
    std::copy(src + (i * len + begin) * d, src + (i * len + end) * d, out.begin() + i * width * d);
  auto sn = seq.node();
  return Tensor<T>::from_op({b, width, d}, std::move(out), {seq}, [sn, b, len, d, begin, width](detail::Node<T>& self) {
    T* g = sn->grad_buffer();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < width * d; ++j) g[(i * len + begin) * d + j] += self.grad[i * width * d + j];
  });
}

template <typename T>
Tensor<T> extract_patches(const Tensor<T>& images, std::size_t patch) {
  require_rank("extract_patches", images, 4);
  const std::size_t b = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("extract_patches: image " + shape_to_string(images.shape()) +
                     " is not divisible into patches of size " + std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch, kp = gh * gw, pd = patch * patch * c;
  // index map: destination element -> source element
  std::vector<std::size_t> src_index(kp * pd);
  for (std::size_t pr = 0; pr < gh; ++pr)
    for (std::size_t pc = 0; pc < gw; ++pc)
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t dst = (pr * gw + pc) * pd + (y * patch + x) * c + ch;
            src_index[dst] = ((pr * patch + y) * w + (pc * patch + x)) * c + ch;
          }
  const std::size_t img = h * w * c;
  std::vector<T> out(b * kp * pd);
  const T* src = images.data().data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < kp * pd; ++j) out[i * kp * pd + j] = src[i * img + src_index[j]];
  auto in = images.node();
  return Tensor<T>::from_op({b, kp, pd}, std::move(out), {images},
                            [in, b, img, src_index = std::move(src_index)](detail::Node<T>& self) {
                              T* g = in->grad_buffer();
                              const std::size_t per = src_index.size();
                              for (std::size_t i = 0; i < b; ++i)
                                for (std::size_t j = 0; j < per; ++j) g[i * img + src_index[j]] += self.grad[i * per + j];
                            });
}

#define SCT_INSTANTIATE_OPS(T)                                                                        \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> transpose(const Tensor<T>&);                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> scale(const Tensor<T>&, T);                                                      \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> add_broadcast_batch(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> scale_batch(const Tensor<T>&, std::span<const T>);                               \
  template Tensor<T> sum(const Tensor<T>&);                                                           \
  template Tensor<T> mean(const Tensor<T>&);                                                          \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                \
  template Tensor<T> softmax_last_dim(const Tensor<T>&);                                              \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);             \
  template Tensor<T> gelu(const Tensor<T>&);                                                          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> concat_last_dim(std::span<const Tensor<T>>);                                     \
  template std::vector<Tensor<T>> split_last_dim(const Tensor<T>&, std::span<const std::size_t>);     \
  template Tensor<T> select_token(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> replace_token(const Tensor<T>&, std::size_t, const Tensor<T>&);                  \
  template Tensor<T> append_token(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> slice_tokens(const Tensor<T>&, std::size_t, std::size_t);                        \
  template Tensor<T> extract_patches(const Tensor<T>&, std::size_t);

SCT_INSTANTIATE_OPS(float)
SCT_INSTANTIATE_OPS(double)

#undef SCT_INSTANTIATE_OPS

}  // namespace sct
