#include "sct/model.hpp"

#include <cmath>
#include <set>

#include "sct/errors.hpp"
#include "sct/ops.hpp"

namespace sct {

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::kSct: return "sct";
    case FusionMode::kEarly: return "early";
    case FusionMode::kSingle: return "single";
  }
  return "unknown";
}

FusionMode parse_fusion_mode(std::string_view text) {
  if (text == "sct") return FusionMode::kSct;
  if (text == "early") return FusionMode::kEarly;
  if (text == "single") return FusionMode::kSingle;
  throw ConfigError("unknown model mode '" + std::string(text) + "' (expected sct, early or single)");
}

void ModelConfig::validate() const {
  if (modalities.empty()) throw ConfigError("model: at least one modality is required");
  std::set<std::string> names;
  for (const auto& m : modalities) {
    m.validate();
    if (!names.insert(m.name).second) throw ConfigError("model: duplicate modality name '" + m.name + "'");
  }
  if (embed_dim == 0) throw ConfigError("model.d_e must be positive");
  if (heads == 0) throw ConfigError("model.heads must be positive");
  if (embed_dim % heads != 0) {
    throw ConfigError("model.d_e = " + std::to_string(embed_dim) + " is not divisible by heads = " +
                      std::to_string(heads));
  }
  if (depth == 0) throw ConfigError("model.depth must be at least 1");
  if (num_labels == 0) throw ConfigError("model.num_labels must be positive");
  if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) throw ConfigError("model.mlp_ratio must give a positive hidden size");
  if (!(sd_rate >= 0.0 && sd_rate < 1.0)) throw ConfigError("stochastic depth rate must lie in [0, 1)");
  if (mode == FusionMode::kSingle && modalities.size() != 1) {
    throw ConfigError("model: mode 'single' requires exactly one modality, got " + std::to_string(modalities.size()));
  }
  if (mode == FusionMode::kEarly) {
    const auto& ref = modalities.front();
    for (const auto& m : modalities) {
      if (m.height != ref.height || m.width != ref.width || m.patch_size != ref.patch_size) {
        throw ConfigError("model: early fusion needs equal spatial size and patch size; modality '" + m.name + "' is " +
                          std::to_string(m.height) + "x" + std::to_string(m.width) + " p=" +
                          std::to_string(m.patch_size) + " but '" + ref.name + "' is " + std::to_string(ref.height) +
                          "x" + std::to_string(ref.width) + " p=" + std::to_string(ref.patch_size));
      }
    }
  }
}

std::size_t ModelConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
}

std::vector<ModalitySpec> ModelConfig::encoder_inputs() const {
  if (mode == FusionMode::kSct) return modalities;
  ModalitySpec stacked = modalities.front();
  if (mode == FusionMode::kEarly) {
    stacked.name = "";
    stacked.channels = 0;
    for (const auto& m : modalities) {
      stacked.name += (stacked.name.empty() ? "" : "+") + m.name;
      stacked.channels += m.channels;
    }
  }
  return {stacked};
}

std::size_t ModelConfig::fusion_layers() const {
  if (mode != FusionMode::kSct) return 0;
  return share_fusion ? 1 : depth;
}

nlohmann::json to_json(const ModelConfig& config) {
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : config.modalities) {
    mods.push_back({{"name", m.name},
                    {"height", m.height},
                    {"width", m.width},
                    {"channels", m.channels},
                    {"patch_size", m.patch_size}});
  }
  return {{"mode", to_string(config.mode)},
          {"modalities", mods},
          {"d_e", config.embed_dim},
          {"depth", config.depth},
          {"heads", config.heads},
          {"mlp_ratio", config.mlp_ratio},
          {"num_labels", config.num_labels},
          {"use_pos_embed", config.use_pos_embed},
          {"sd_rate", config.sd_rate},
          {"share_fusion", config.share_fusion}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.mode = parse_fusion_mode(j.at("mode").get<std::string>());
    for (const auto& m : j.at("modalities")) {
      c.modalities.push_back(ModalitySpec{m.at("name").get<std::string>(), m.at("height").get<std::size_t>(),
                                          m.at("width").get<std::size_t>(), m.at("channels").get<std::size_t>(),
                                          m.at("patch_size").get<std::size_t>()});
    }
    c.embed_dim = j.at("d_e").get<std::size_t>();
    c.depth = j.at("depth").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<double>();
    c.num_labels = j.at("num_labels").get<std::size_t>();
    c.use_pos_embed = j.at("use_pos_embed").get<bool>();
    c.sd_rate = j.at("sd_rate").get<double>();
    c.share_fusion = j.at("share_fusion").get<bool>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

template <typename T>
Tensor<T> fuse_class_tokens(std::span<const Tensor<T>> cls_tokens, const FusionParams<T>& params) {
  const std::size_t d = params.bias.numel();
  const std::size_t n = params.weight.dim(1) / d;
  if (cls_tokens.size() != n) {
    throw ShapeError("fuse_class_tokens: fusion layer expects " + std::to_string(n) + " class tokens, got " +
                     std::to_string(cls_tokens.size()));
  }
  for (const auto& t : cls_tokens) {
    if (t.shape().back() != d) {
      throw ShapeError("fuse_class_tokens: class token " + shape_to_string(t.shape()) + " does not have d_e = " +
                       std::to_string(d));
    }
  }
  return linear(concat_last_dim(cls_tokens), params.weight, params.bias);
}

namespace {

template <typename T>
Tensor<T> xavier(std::size_t out, std::size_t in, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<T> w(out * in);
  for (T& v : w) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * a);
  return Tensor<T>({out, in}, std::move(w), true);
}

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
  std::vector<T> w(shape_numel(shape));
  for (T& v : w) v = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>(std::move(shape), std::move(w), true);
}

template <typename T>
LinearParams<T> make_linear(std::size_t out, std::size_t in, Rng& rng) {
  return LinearParams<T>{xavier<T>(out, in, rng), Tensor<T>({out}, true)};
}

template <typename T>
LayerNormParams<T> make_norm(std::size_t d) {
  return LayerNormParams<T>{Tensor<T>::full({d}, T{1}, true), Tensor<T>({d}, true)};
}

template <typename T, typename F>
void visit_parameters(const std::vector<Encoder<T>>& encoders, const std::vector<FusionParams<T>>& fusion,
                      const LinearParams<T>& head, F&& f) {
  auto lin = [&](const std::string& prefix, const LinearParams<T>& p) {
    f(prefix + ".weight", p.weight);
    if (p.bias.defined()) f(prefix + ".bias", p.bias);
  };
  auto norm = [&](const std::string& prefix, const LayerNormParams<T>& p) {
    f(prefix + ".gamma", p.gamma);
    f(prefix + ".beta", p.beta);
  };
  for (std::size_t j = 0; j < encoders.size(); ++j) {
    const auto& e = encoders[j];
    const std::string base = "encoder" + std::to_string(j);
    lin(base + ".patch", e.patch);
    f(base + ".cls", e.cls);
    f(base + ".pos", e.pos);
    for (std::size_t i = 0; i < e.blocks.size(); ++i) {
      const auto& b = e.blocks[i];
      const std::string bp = base + ".block" + std::to_string(i);
      norm(bp + ".norm1", b.norm1);
      lin(bp + ".query", b.query);
      lin(bp + ".key", b.key);
      lin(bp + ".value", b.value);
      lin(bp + ".output", b.output);
      norm(bp + ".norm2", b.norm2);
      lin(bp + ".mlp_in", b.mlp_in);
      lin(bp + ".mlp_out", b.mlp_out);
    }
  }
  for (std::size_t r = 0; r < fusion.size(); ++r) {
    f("fusion" + std::to_string(r) + ".weight", fusion[r].weight);
    f("fusion" + std::to_string(r) + ".bias", fusion[r].bias);
  }
  lin("head", head);
}

template <typename T>
Tensor<T> stack_batch_check(const Tensor<T>& images, const ModalitySpec& spec) {
  if (images.rank() != 4 || images.dim(1) != spec.height || images.dim(2) != spec.width ||
      images.dim(3) != spec.channels) {
    throw ShapeError("modality '" + spec.name + "': expected images [B x " + std::to_string(spec.height) + "x" +
                     std::to_string(spec.width) + "x" + std::to_string(spec.channels) + "], got " +
                     shape_to_string(images.shape()));
  }
  return images;
}

template <typename T>
TokenSequence<T> embed(const Encoder<T>& encoder, const Tensor<T>& images, bool use_pos) {
  TokenSequence<T> seq = append_class_token(patch_embed(images, encoder.input, encoder.patch), encoder.cls);
  return add_positional_embedding(seq, encoder.pos, use_pos);
}

}  // namespace

template <typename T>
Model<T> Model<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model<T> model;
  model.config_ = config;
  Rng rng(seed);
  const std::size_t d = config.embed_dim;
  const std::size_t hidden = config.mlp_hidden();
  for (const auto& input : config.encoder_inputs()) {
    Encoder<T> e;
    e.input = input;
    e.patch = make_linear<T>(d, input.patch_dim(), rng);
    e.cls = normal_init<T>({d}, 0.02, rng);
    e.pos = normal_init<T>({input.sequence_length(), d}, 0.02, rng);
    for (std::size_t i = 0; i < config.depth; ++i) {
      EncoderBlockParams<T> b;
      b.heads = config.heads;
      b.norm1 = make_norm<T>(d);
      b.query = make_linear<T>(d, d, rng);
      // No key bias: it adds the same q.b to every logit of a query row, which
      // softmax cancels, so its gradient is identically zero.
      b.key = LinearParams<T>{xavier<T>(d, d, rng), Tensor<T>()};
      b.value = make_linear<T>(d, d, rng);
      b.output = make_linear<T>(d, d, rng);
      b.norm2 = make_norm<T>(d);
      b.mlp_in = make_linear<T>(hidden, d, rng);
      b.mlp_out = make_linear<T>(d, hidden, rng);
      e.blocks.push_back(std::move(b));
    }
    model.encoders_.push_back(std::move(e));
  }
  const std::size_t n = config.modalities.size();
  for (std::size_t r = 0; r < config.fusion_layers(); ++r) {
    // Block averaging [I/N | ... | I/N]: the first synchronized token is the
    // mean of the modality class tokens.
    std::vector<T> w(d * n * d, T{0});
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < n; ++j) w[i * n * d + j * d + i] = static_cast<T>(1.0 / static_cast<double>(n));
    model.fusion_.push_back(FusionParams<T>{Tensor<T>({d, n * d}, std::move(w), true), Tensor<T>({d}, true)});
  }
  model.head_ = make_linear<T>(config.num_labels, d, rng);
  return model;
}

template <typename T>
std::vector<NamedParameter<T>> Model<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  visit_parameters(encoders_, fusion_, head_,
                   [&](const std::string& name, const Tensor<T>& t) { out.push_back({name, t}); });
  return out;
}

template <typename T>
Tensor<T> Model<T>::parameter(const std::string& name) const {
  for (auto& p : parameters()) {
    if (p.name == name) return p.tensor;
  }
  throw ConfigError("no parameter named '" + name + "'");
}

template <typename T>
Model<T> Model<T>::clone() const {
  Model<T> copy = *this;
  auto deep = [](Tensor<T>& t) { t = t.clone().set_requires_grad(true); };
  auto lin = [&](LinearParams<T>& p) {
    deep(p.weight);
    if (p.bias.defined()) deep(p.bias);
  };
  auto norm = [&](LayerNormParams<T>& p) {
    deep(p.gamma);
    deep(p.beta);
  };
  for (auto& e : copy.encoders_) {
    lin(e.patch);
    deep(e.cls);
    deep(e.pos);
    for (auto& b : e.blocks) {
      norm(b.norm1);
      lin(b.query);
      lin(b.key);
      lin(b.value);
      lin(b.output);
      norm(b.norm2);
      lin(b.mlp_in);
      lin(b.mlp_out);
    }
  }
  for (auto& f : copy.fusion_) {
    deep(f.weight);
    deep(f.bias);
  }
  lin(copy.head_);
  return copy;
}

template <typename T>
Tensor<T> Model<T>::forward(std::span<const Tensor<T>> images, bool training, Rng& rng, ForwardProbe<T>* probe) const {
  if (config_.mode == FusionMode::kSct) return forward_sct(*this, images, training, rng, probe);
  return forward_early(*this, images, training, rng);
}

template <typename T>
Tensor<T> forward_sct(const Model<T>& model, std::span<const Tensor<T>> images, bool training, Rng& rng,
                      ForwardProbe<T>* probe) {
  const ModelConfig& config = model.config();
  if (config.mode != FusionMode::kSct) throw ConfigError("forward_sct called on a '" + to_string(config.mode) + "' model");
  const std::size_t n = config.modalities.size();
  if (images.size() != n) {
    throw ShapeError("forward_sct: expected " + std::to_string(n) + " modality inputs, got " +
                     std::to_string(images.size()));
  }
  const auto& encoders = model.encoders();
  std::vector<TokenSequence<T>> seqs;
  for (std::size_t j = 0; j < n; ++j) {
    stack_batch_check(images[j], encoders[j].input);
    seqs.push_back(embed(encoders[j], images[j], config.use_pos_embed));
  }
  Tensor<T> synced;
  for (std::size_t round = 0; round < config.depth; ++round) {
    std::vector<Tensor<T>> cls;
    for (std::size_t j = 0; j < n; ++j) {
      seqs[j] = encoder_block(seqs[j], encoders[j].blocks[round], config.sd_rate, training, rng);
      cls.push_back(select_token(seqs[j].tokens, seqs[j].class_index()));
    }
    if (model.fusion_transform()) {
      synced = model.fusion_transform()(std::span<const Tensor<T>>(cls), round);
    } else {
      const auto& fusion = model.fusion()[config.share_fusion ? 0 : round];
      synced = fuse_class_tokens(std::span<const Tensor<T>>(cls), fusion);
    }
    // The synchronized token replaces every modality's class-token slot.
    for (std::size_t j = 0; j < n; ++j) {
      seqs[j] = TokenSequence<T>{replace_token(seqs[j].tokens, seqs[j].class_index(), synced)};
    }
    if (probe) {
      auto& row = probe->synced_class_tokens.emplace_back();
      for (std::size_t j = 0; j < n; ++j) {
        Tensor<T> slot = select_token(seqs[j].tokens, seqs[j].class_index());
        row.emplace_back(slot.data().begin(), slot.data().end());
      }
    }
  }
  return linear(synced, model.head().weight, model.head().bias);
}

template <typename T>
Tensor<T> forward_early(const Model<T>& model, std::span<const Tensor<T>> images, bool training, Rng& rng) {
  const ModelConfig& config = model.config();
  if (config.mode == FusionMode::kSct) throw ConfigError("forward_early called on an 'sct' model");
  const std::size_t n = config.modalities.size();
  if (images.size() != n) {
    throw ShapeError("forward_early: expected " + std::to_string(n) + " modality inputs, got " +
                     std::to_string(images.size()));
  }
  for (std::size_t j = 0; j < n; ++j) stack_batch_check(images[j], config.modalities[j]);
  const Encoder<T>& encoder = model.encoders().front();
  Tensor<T> stacked = n == 1 ? images[0] : concat_last_dim(images);
  TokenSequence<T> seq = embed(encoder, stacked, config.use_pos_embed);
  for (const auto& block : encoder.blocks) seq = encoder_block(seq, block, config.sd_rate, training, rng);
  Tensor<T> cls = select_token(seq.tokens, seq.class_index());
  return linear(cls, model.head().weight, model.head().bias);
}

template <typename T>
ParameterCount count_parameters(const Model<T>& model) {
  ParameterCount count;
  for (const auto& p : model.parameters()) {
    // Group by "encoderJ.<component>" or the top-level component.
    std::string key;
    const auto first = p.name.find('.');
    if (p.name.rfind("encoder", 0) == 0) {
      const auto second = p.name.find('.', first + 1);
      key = p.name.substr(0, second);
    } else {
      key = p.name.substr(0, first);
    }
    count.total += p.tensor.numel();
    if (count.modules.empty() || count.modules.back().first != key) count.modules.emplace_back(key, 0);
    count.modules.back().second += p.tensor.numel();
  }
  return count;
}

#define SCT_INSTANTIATE_MODEL(T)                                                                                          \
  template class Model<T>;                                                                                                \
  template Tensor<T> fuse_class_tokens(std::span<const Tensor<T>>, const FusionParams<T>&);                              \
  template Tensor<T> forward_sct(const Model<T>&, std::span<const Tensor<T>>, bool, Rng&, ForwardProbe<T>*);             \
  template Tensor<T> forward_early(const Model<T>&, std::span<const Tensor<T>>, bool, Rng&);                             \
  template ParameterCount count_parameters(const Model<T>&);

SCT_INSTANTIATE_MODEL(float)
SCT_INSTANTIATE_MODEL(double)

#undef SCT_INSTANTIATE_MODEL

}  // namespace sct
