#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "sct/rng.hpp"
#include "sct/tensor.hpp"

namespace sct {

// Geometry of one input modality. Height and width must be multiples of the
// patch size.
struct ModalitySpec {
  std::string name;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t patch_size = 0;

  void validate() const;  // throws ConfigError
  std::size_t grid_rows() const { return height / patch_size; }
  std::size_t grid_cols() const { return width / patch_size; }
  std::size_t num_patches() const { return grid_rows() * grid_cols(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t sequence_length() const { return num_patches() + 1; }

  bool operator==(const ModalitySpec&) const = default;
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out], or undefined for no bias
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct EncoderBlockParams {
  std::size_t heads = 1;
  LayerNormParams<T> norm1;
  LinearParams<T> query;
  LinearParams<T> key;  // bias undefined: shift-invariant under softmax
  LinearParams<T> value;
  LinearParams<T> output;
  LayerNormParams<T> norm2;
  LinearParams<T> mlp_in;   // d_e -> hidden
  LinearParams<T> mlp_out;  // hidden -> d_e
};

inline constexpr double kLayerNormEps = 1e-5;

// A batch of token sequences [batch, k_p + 1, d_e]; the class token sits at the
// last position.
template <typename T>
struct TokenSequence {
  Tensor<T> tokens;

  std::size_t batch() const { return tokens.dim(0); }
  std::size_t length() const { return tokens.dim(1); }
  std::size_t embed_dim() const { return tokens.dim(2); }
  std::size_t class_index() const { return length() - 1; }
};

// Optional capture of the softmax attention weights, [batch, heads, T, T].
template <typename T>
struct AttentionProbe {
  std::vector<T> weights;
  std::size_t batch = 0, heads = 0, length = 0;
};

// Shared linear map of every non-overlapping patch: [B, h, w, c] -> [B, k_p, d_e].
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& images, const ModalitySpec& spec, const LinearParams<T>& embedding);

template <typename T>
TokenSequence<T> append_class_token(const Tensor<T>& tokens, const Tensor<T>& cls);

template <typename T>
TokenSequence<T> add_positional_embedding(const TokenSequence<T>& seq, const Tensor<T>& pos, bool enabled);

// Scaled dot-product attention over per-head slices of q/k/v [B, T, d]; heads
// are concatenated back to [B, T, d] (no output projection).
template <typename T>
Tensor<T> attention_heads(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                          AttentionProbe<T>* probe = nullptr);

template <typename T>
TokenSequence<T> multi_head_self_attention(const TokenSequence<T>& seq, const EncoderBlockParams<T>& params,
                                           AttentionProbe<T>* probe = nullptr);

// Drop-path over the leading (sample) axis. In training each sample's branch
// is zeroed with probability `rate` and otherwise scaled by 1 / (1 - rate).
template <typename T>
Tensor<T> stochastic_depth(const Tensor<T>& branch, double rate, bool training, Rng& rng);

// Pre-norm block: x + SD(MHSA(LN(x))), then + SD(MLP(LN(.))).
template <typename T>
TokenSequence<T> encoder_block(const TokenSequence<T>& seq, const EncoderBlockParams<T>& params, double drop_rate,
                               bool training, Rng& rng, AttentionProbe<T>* probe = nullptr);

}  // namespace sct
