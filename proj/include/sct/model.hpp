#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sct/errors.hpp"
#include "sct/rng.hpp"
#include "sct/tensor.hpp"
#include "sct/vit.hpp"

namespace sct {

enum class FusionMode {
  kSct,    // one encoder per modality, class tokens synchronized after every block
  kEarly,  // modalities stacked along channels into one ViT
  kSingle, // one modality, plain ViT
};

std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(std::string_view text);

struct ModelConfig {
  FusionMode mode = FusionMode::kSct;
  std::vector<ModalitySpec> modalities;
  std::size_t embed_dim = 32;
  std::size_t depth = 2;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t num_labels = 12;
  bool use_pos_embed = true;
  double sd_rate = 0.0;
  // One fusion layer reused by every synchronization round instead of one per round.
  bool share_fusion = false;

  void validate() const;  // throws ConfigError naming the offending field/modality
  std::size_t mlp_hidden() const;
  // Geometry seen by the encoders: per modality for kSct, the channel-stacked
  // image for kEarly, the only modality for kSingle.
  std::vector<ModalitySpec> encoder_inputs() const;
  std::size_t fusion_layers() const;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Linear fusion z* = W concat(z_1, ..., z_N) + b with W [d_e, N d_e], b [d_e].
template <typename T>
struct FusionParams {
  Tensor<T> weight;
  Tensor<T> bias;
};

// Class tokens are each [B, d_e] (or [d_e] for a single sample); the result
// has the same leading shape.
template <typename T>
Tensor<T> fuse_class_tokens(std::span<const Tensor<T>> cls_tokens, const FusionParams<T>& params);

// Alternative fusion g: R^{N d_e} -> R^{d_e}; receives the per-modality class
// tokens and the synchronization round.
template <typename T>
using FusionTransform = std::function<Tensor<T>(std::span<const Tensor<T>> cls_tokens, std::size_t round)>;

template <typename T>
struct Encoder {
  ModalitySpec input;
  LinearParams<T> patch;
  Tensor<T> cls;  // [d_e]
  Tensor<T> pos;  // [k_p + 1, d_e]
  std::vector<EncoderBlockParams<T>> blocks;
};

// Instrumentation for forward_sct: after each synchronization, the class-token
// slot of every modality stream ([B * d_e] values each).
template <typename T>
struct ForwardProbe {
  std::vector<std::vector<std::vector<T>>> synced_class_tokens;  // [round][modality]
};

// Copies of a Model share parameter storage; use clone() for a deep copy.
template <typename T>
class Model {
 public:
  Model() = default;
  static Model build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  // Deterministic order; the tensors are handles onto the model's storage.
  std::vector<NamedParameter<T>> parameters() const;
  Tensor<T> parameter(const std::string& name) const;
  Model clone() const;

  // images: one [B, h, w, c] tensor per configured modality, in config order.
  // Returns logits [B, num_labels].
  Tensor<T> forward(std::span<const Tensor<T>> images, bool training, Rng& rng,
                    ForwardProbe<T>* probe = nullptr) const;

  std::vector<Encoder<T>>& encoders() { return encoders_; }
  const std::vector<Encoder<T>>& encoders() const { return encoders_; }
  std::vector<FusionParams<T>>& fusion() { return fusion_; }
  const std::vector<FusionParams<T>>& fusion() const { return fusion_; }
  LinearParams<T>& head() { return head_; }
  const LinearParams<T>& head() const { return head_; }

  void set_fusion_transform(FusionTransform<T> transform) { custom_fusion_ = std::move(transform); }
  const FusionTransform<T>& fusion_transform() const { return custom_fusion_; }

 private:
  ModelConfig config_;
  std::vector<Encoder<T>> encoders_;
  std::vector<FusionParams<T>> fusion_;
  LinearParams<T> head_;
  FusionTransform<T> custom_fusion_;
};

template <typename T>
Tensor<T> forward_sct(const Model<T>& model, std::span<const Tensor<T>> images, bool training, Rng& rng,
                      ForwardProbe<T>* probe = nullptr);

// Also serves kSingle (a single modality is a degenerate stack).
template <typename T>
Tensor<T> forward_early(const Model<T>& model, std::span<const Tensor<T>> images, bool training, Rng& rng);

struct ParameterCount {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> modules;  // in parameter order
};

template <typename T>
ParameterCount count_parameters(const Model<T>& model);

// Same architecture and values in another precision.
template <typename To, typename From>
Model<To> model_cast(const Model<From>& source) {
  Model<To> out = Model<To>::build(source.config(), 0);
  auto src = source.parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto in = src[i].tensor.data();
    auto target = dst[i].tensor.mutable_data();
    for (std::size_t k = 0; k < in.size(); ++k) target[k] = static_cast<To>(in[k]);
  }
  return out;
}

// Copies values by name from `source` into `target`; returns the number of
// tensors copied. Shapes must agree for every shared name.
template <typename To, typename From>
std::size_t copy_shared_parameters(const Model<From>& source, Model<To>& target) {
  std::size_t copied = 0;
  auto dst = target.parameters();
  for (const auto& s : source.parameters()) {
    for (auto& d : dst) {
      if (d.name != s.name) continue;
      if (d.tensor.shape() != s.tensor.shape()) {
        throw ShapeError("parameter '" + s.name + "': " + shape_to_string(s.tensor.shape()) + " vs " +
                         shape_to_string(d.tensor.shape()));
      }
      auto in = s.tensor.data();
      auto out = d.tensor.mutable_data();
      for (std::size_t k = 0; k < in.size(); ++k) out[k] = static_cast<To>(in[k]);
      ++copied;
    }
  }
  return copied;
}

extern template class Model<float>;
extern template class Model<double>;

}  // namespace sct
