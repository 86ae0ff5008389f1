#include "sct/vit.hpp"

#include <algorithm>
#include <cmath>

#include "../tensor/kernels.hpp"
#include "sct/errors.hpp"
#include "sct/ops.hpp"

namespace sct {

void ModalitySpec::validate() const {
  if (height == 0 || width == 0 || channels == 0 || patch_size == 0) {
    throw ConfigError("modality '" + name + "': height, width, channels and patch_size must be positive");
  }
  if (height % patch_size != 0 || width % patch_size != 0) {
    throw ConfigError("modality '" + name + "': " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by patch size " + std::to_string(patch_size));
  }
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& images, const ModalitySpec& spec, const LinearParams<T>& embedding) {
  if (images.rank() != 4 || images.dim(1) != spec.height || images.dim(2) != spec.width ||
      images.dim(3) != spec.channels) {
    throw ShapeError("patch_embed: modality '" + spec.name + "' expects [B x " + std::to_string(spec.height) +
                     "x" + std::to_string(spec.width) + "x" + std::to_string(spec.channels) + "], got " +
                     shape_to_string(images.shape()));
  }
  spec.validate();
  return linear(extract_patches(images, spec.patch_size), embedding.weight, embedding.bias);
}

template <typename T>
TokenSequence<T> append_class_token(const Tensor<T>& tokens, const Tensor<T>& cls) {
  return TokenSequence<T>{append_token(tokens, cls)};
}

template <typename T>
TokenSequence<T> add_positional_embedding(const TokenSequence<T>& seq, const Tensor<T>& pos, bool enabled) {
  if (!enabled) return seq;
  return TokenSequence<T>{add_broadcast_batch(seq.tokens, pos)};
}

template <typename T>
Tensor<T> attention_heads(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                          AttentionProbe<T>* probe) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention: q/k/v shapes " + shape_to_string(q.shape()) + ", " + shape_to_string(k.shape()) +
                     ", " + shape_to_string(v.shape()) + " must be equal [B x T x d]");
  }
  const std::size_t b = q.dim(0), len = q.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: embedding dim " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));

  // Each head is a [T x dh] view with leading dimension d inside its batch row.
  std::vector<T> probs(b * heads * len * len);
  std::vector<T> out(b * len * d);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = bi * len * d + h * dh;
      T* p = probs.data() + (bi * heads + h) * len * len;
      kernels::gemm(false, true, len, len, dh, scale, q.data().data() + off, d, k.data().data() + off, d, T{0}, p, len);
      for (std::size_t i = 0; i < len; ++i) {
        T* row = p + i * len;
        const T mx = *std::max_element(row, row + len);
        for (std::size_t j = 0; j < len; ++j) row[j] -= mx;
      }
      kernels::aligned_apply(p, p, len * len, [](auto& v) { v = v.exp(); });
      for (std::size_t i = 0; i < len; ++i) {
        T* row = p + i * len;
        T total = T{0};
        for (std::size_t j = 0; j < len; ++j) total += row[j];
        const T inv = T{1} / total;
        for (std::size_t j = 0; j < len; ++j) row[j] *= inv;
      }
      kernels::gemm(false, false, len, dh, len, T{1}, p, len, v.data().data() + off, d, T{0}, out.data() + off, d);
    }
  }
  if (probe) {
    probe->weights = probs;
    probe->batch = b;
    probe->heads = heads;
    probe->length = len;
  }

  auto qn = q.node(), kn = k.node(), vn = v.node();
  return Tensor<T>::from_op(
      q.shape(), std::move(out), {q, k, v},
      [qn, kn, vn, b, len, d, heads, dh, scale, probs = std::move(probs)](detail::Node<T>& self) {
        std::vector<T> ds(len * len);
        T* gq = qn->requires_grad ? qn->grad_buffer() : nullptr;
        T* gk = kn->requires_grad ? kn->grad_buffer() : nullptr;
        T* gv = vn->requires_grad ? vn->grad_buffer() : nullptr;
        for (std::size_t bi = 0; bi < b; ++bi) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = bi * len * d + h * dh;
            const T* p = probs.data() + (bi * heads + h) * len * len;
            const T* go = self.grad.data() + off;
            if (gv) kernels::gemm(true, false, len, dh, len, T{1}, p, len, go, d, T{1}, gv + off, d);
            if (!gq && !gk) continue;
            kernels::gemm(false, true, len, len, dh, T{1}, go, d, vn->value.data() + off, d, T{0}, ds.data(), len);
            for (std::size_t i = 0; i < len; ++i) {
              T dot = T{0};
              for (std::size_t j = 0; j < len; ++j) dot += ds[i * len + j] * p[i * len + j];
              for (std::size_t j = 0; j < len; ++j) ds[i * len + j] = p[i * len + j] * (ds[i * len + j] - dot) * scale;
            }
            if (gq) kernels::gemm(false, false, len, dh, len, T{1}, ds.data(), len, kn->value.data() + off, d, T{1}, gq + off, d);
            if (gk) kernels::gemm(true, false, len, dh, len, T{1}, ds.data(), len, qn->value.data() + off, d, T{1}, gk + off, d);
          }
        }
      });
}

template <typename T>
TokenSequence<T> multi_head_self_attention(const TokenSequence<T>& seq, const EncoderBlockParams<T>& params,
                                           AttentionProbe<T>* probe) {
  const Tensor<T>& x = seq.tokens;
  Tensor<T> q = linear(x, params.query.weight, params.query.bias);
  Tensor<T> k = linear(x, params.key.weight, params.key.bias);
  Tensor<T> v = linear(x, params.value.weight, params.value.bias);
  Tensor<T> heads = attention_heads(q, k, v, params.heads, probe);
  return TokenSequence<T>{linear(heads, params.output.weight, params.output.bias)};
}

template <typename T>
Tensor<T> stochastic_depth(const Tensor<T>& branch, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("stochastic depth rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return branch;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> factors(branch.dim(0));
  for (T& f : factors) f = rng.bernoulli(rate) ? T{0} : keep_scale;
  return scale_batch(branch, std::span<const T>(factors));
}

template <typename T>
TokenSequence<T> encoder_block(const TokenSequence<T>& seq, const EncoderBlockParams<T>& params, double drop_rate,
                               bool training, Rng& rng, AttentionProbe<T>* probe) {
  const T eps = static_cast<T>(kLayerNormEps);
  const Tensor<T>& x = seq.tokens;
  TokenSequence<T> normed{layer_norm(x, params.norm1.gamma, params.norm1.beta, eps)};
  Tensor<T> attn = multi_head_self_attention(normed, params, probe).tokens;
  Tensor<T> x1 = add(x, stochastic_depth(attn, drop_rate, training, rng));

  Tensor<T> h = layer_norm(x1, params.norm2.gamma, params.norm2.beta, eps);
  h = gelu(linear(h, params.mlp_in.weight, params.mlp_in.bias));
  h = linear(h, params.mlp_out.weight, params.mlp_out.bias);
  return TokenSequence<T>{add(x1, stochastic_depth(h, drop_rate, training, rng))};
}

#define SCT_INSTANTIATE_VIT(T)                                                                                      \
  template Tensor<T> patch_embed(const Tensor<T>&, const ModalitySpec&, const LinearParams<T>&);                     \
  template TokenSequence<T> append_class_token(const Tensor<T>&, const Tensor<T>&);                                  \
  template TokenSequence<T> add_positional_embedding(const TokenSequence<T>&, const Tensor<T>&, bool);               \
  template Tensor<T> attention_heads(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,              \
                                     AttentionProbe<T>*);                                                            \
  template TokenSequence<T> multi_head_self_attention(const TokenSequence<T>&, const EncoderBlockParams<T>&,         \
                                                      AttentionProbe<T>*);                                           \
  template Tensor<T> stochastic_depth(const Tensor<T>&, double, bool, Rng&);                                         \
  template TokenSequence<T> encoder_block(const TokenSequence<T>&, const EncoderBlockParams<T>&, double, bool, Rng&, \
                                          AttentionProbe<T>*);

SCT_INSTANTIATE_VIT(float)
SCT_INSTANTIATE_VIT(double)

#undef SCT_INSTANTIATE_VIT

}  // namespace sct
