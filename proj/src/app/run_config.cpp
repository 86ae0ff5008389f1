#include <malloc.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "sct/app.hpp"
#include "sct/errors.hpp"

namespace sct {

namespace {

using nlohmann::json;

// Reads keys of one JSON object and rejects the ones nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void count(const std::string& key, std::size_t& dst) {
    if (!has(key)) return;
    const json& v = raw(key);
    natural(key, v);
    dst = v.get<std::size_t>();
  }
  void u64(const std::string& key, std::uint64_t& dst) {
    if (!has(key)) return;
    const json& v = raw(key);
    natural(key, v);
    dst = v.get<std::uint64_t>();
  }
  void real(const std::string& key, double& dst) {
    if (!has(key)) return;
    const json& v = raw(key);
    if (!v.is_number()) throw ConfigError(where(key) + " must be a number");
    dst = v.get<double>();
  }
  void boolean(const std::string& key, bool& dst) {
    if (!has(key)) return;
    const json& v = raw(key);
    if (!v.is_boolean()) throw ConfigError(where(key) + " must be true or false");
    dst = v.get<bool>();
  }
  void string(const std::string& key, std::string& dst) {
    if (!has(key)) return;
    const json& v = raw(key);
    if (!v.is_string()) throw ConfigError(where(key) + " must be a string");
    dst = v.get<std::string>();
  }

  std::string where(const std::string& key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown key '" + where(item.key()) + "'");
    }
  }

 private:
  // Parsed text yields unsigned for non-negative literals, but programmatic
  // json stores them signed.
  void natural(const std::string& key, const json& v) const {
    const bool ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    if (!ok) throw ConfigError(where(key) + " must be a non-negative integer");
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void parse_data(const json& j, GeneratorConfig& c) {
  Section s(j, "data");
  if (s.has("modalities")) {
    const json& list = s.raw("modalities");
    if (!list.is_array() || list.empty()) throw ConfigError("data.modalities must be a non-empty array");
    c.modalities.clear();
    for (std::size_t i = 0; i < list.size(); ++i) {
      Section m(list[i], "data.modalities[" + std::to_string(i) + "]");
      ImageGeometry g;
      m.string("name", g.name);
      m.count("height", g.height);
      m.count("width", g.width);
      m.count("channels", g.channels);
      m.finish();
      if (g.name.empty()) throw ConfigError(m.where("name") + " is required");
      c.modalities.push_back(g);
    }
  }
  s.count("group1", c.group1);
  s.count("group2", c.group2);
  s.count("joint", c.joint);
  s.real("presence_prior", c.presence_prior);
  s.real("amplitude", c.amplitude);
  s.real("decoy_prob", c.decoy_prob);
  s.real("noise_sigma", c.noise_sigma);
  s.count("train_samples", c.train_samples);
  s.count("test_samples", c.test_samples);
  s.count("min_cell", c.min_cell);
  s.finish();
}

void parse_model(const json& j, RunConfig& c) {
  Section s(j, "model");
  s.string("mode", c.mode);
  s.count("d_e", c.embed_dim);
  s.count("depth", c.depth);
  s.count("heads", c.heads);
  s.real("mlp_ratio", c.mlp_ratio);
  s.boolean("use_pos_embed", c.use_pos_embed);
  s.boolean("share_fusion", c.share_fusion);
  if (s.has("patch_sizes")) {
    const json& p = s.raw("patch_sizes");
    if (!p.is_object()) throw ConfigError("model.patch_sizes must map modality names to patch sizes");
    c.patch_sizes.clear();
    for (const auto& item : p.items()) {
      const json& v = item.value();
      if (!v.is_number_integer() || v.get<std::int64_t>() <= 0) {
        throw ConfigError("model.patch_sizes." + item.key() + " must be a positive integer");
      }
      c.patch_sizes.emplace_back(item.key(), item.value().get<std::size_t>());
    }
  }
  s.finish();
}

void parse_train(const json& j, TrainConfig& c) {
  Section s(j, "train");
  s.real("lr", c.adam.lr);
  s.real("beta1", c.adam.beta1);
  s.real("beta2", c.adam.beta2);
  s.real("eps", c.adam.eps);
  s.count("epochs", c.epochs);
  s.count("batch_size", c.batch_size);
  s.real("sd_rate", c.sd_rate);
  s.real("grad_clip", c.grad_clip);
  s.boolean("augment", c.augment);
  s.real("sensor_drop", c.augmentation.sensor_drop);
  s.real("flip_prob", c.augmentation.flip_prob);
  s.count("max_shift", c.augmentation.max_shift);
  s.count("checkpoint_every", c.checkpoint_every);
  s.count("eval_batch", c.eval_batch);
  s.finish();
}

void parse_metrics(const json& j, TrainConfig& c) {
  Section s(j, "metrics");
  s.real("threshold", c.threshold);
  s.real("beta", c.beta);
  s.finish();
}

std::size_t patch_size_for(const RunConfig& c, const std::string& name) {
  for (const auto& [n, p] : c.patch_sizes) {
    if (n == name) return p;
  }
  return 5;
}

}  // namespace

RunConfig::RunConfig() {
  // Flips relocate the position-coded class cells of the synthetic data.
  train.augmentation.flip_prob = 0.0;
}

ModelConfig model_config_for(const RunConfig& c, const std::vector<ImageGeometry>& geometry, std::size_t num_labels) {
  ModelConfig m;
  std::vector<ImageGeometry> used;
  if (c.mode == "sct" || c.mode == "early") {
    m.mode = parse_fusion_mode(c.mode);
    used = geometry;
  } else if (c.mode.rfind("single:", 0) == 0) {
    m.mode = FusionMode::kSingle;
    const std::string name = c.mode.substr(7);
    auto it = std::find_if(geometry.begin(), geometry.end(), [&](const ImageGeometry& g) { return g.name == name; });
    if (it == geometry.end()) throw ConfigError("model.mode: no modality named '" + name + "'");
    used = {*it};
  } else {
    throw ConfigError("model.mode must be 'sct', 'early' or 'single:<modality>', got '" + c.mode + "'");
  }
  for (const auto& g : used) {
    m.modalities.push_back(ModalitySpec{g.name, g.height, g.width, g.channels, patch_size_for(c, g.name)});
  }
  m.embed_dim = c.embed_dim;
  m.depth = c.depth;
  m.heads = c.heads;
  m.mlp_ratio = c.mlp_ratio;
  m.num_labels = num_labels;
  m.use_pos_embed = c.use_pos_embed;
  m.sd_rate = c.train.sd_rate;
  m.share_fusion = c.share_fusion;
  return m;
}

ModelConfig RunConfig::model_config() const { return model_config_for(*this, data.modalities, data.num_labels()); }

void RunConfig::validate() const {
  data.validate();
  train.validate();
  for (const auto& [name, p] : patch_sizes) {
    if (std::none_of(data.modalities.begin(), data.modalities.end(),
                     [&](const ImageGeometry& g) { return g.name == name; })) {
      throw ConfigError("model.patch_sizes: no modality named '" + name + "'");
    }
    if (p == 0) throw ConfigError("model.patch_sizes." + name + " must be positive");
  }
  model_config().validate();
  if (train.augment) {
    for (const auto& g : data.modalities) {
      if (train.augmentation.max_shift >= std::min(g.height, g.width)) {
        throw ConfigError("train.max_shift = " + std::to_string(train.augmentation.max_shift) +
                          " must be smaller than the sides of modality '" + g.name + "'");
      }
    }
  }
}

void set_run_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.data.seed = seed;
  c.train.seed = seed;
}

RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  Section s(j, "config");
  std::uint64_t seed = 0;
  s.u64("seed", seed);
  std::string out = c.output_dir.string();
  s.string("output_dir", out);
  c.output_dir = out;
  if (s.has("data")) parse_data(s.raw("data"), c.data);
  if (s.has("model")) parse_model(s.raw("model"), c);
  if (s.has("train")) parse_train(s.raw("train"), c.train);
  if (s.has("metrics")) parse_metrics(s.raw("metrics"), c.train);
  s.finish();
  set_run_seed(c, seed);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json data = to_json(c.data);
  data.erase("seed");
  nlohmann::json patches = nlohmann::json::object();
  for (const auto& g : c.data.modalities) patches[g.name] = patch_size_for(c, g.name);
  const TrainConfig& t = c.train;
  return {{"seed", c.seed},
          {"output_dir", c.output_dir.string()},
          {"data", data},
          {"model",
           {{"mode", c.mode},
            {"d_e", c.embed_dim},
            {"depth", c.depth},
            {"heads", c.heads},
            {"mlp_ratio", c.mlp_ratio},
            {"use_pos_embed", c.use_pos_embed},
            {"share_fusion", c.share_fusion},
            {"patch_sizes", patches}}},
          {"train",
           {{"lr", t.adam.lr},
            {"beta1", t.adam.beta1},
            {"beta2", t.adam.beta2},
            {"eps", t.adam.eps},
            {"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"sd_rate", t.sd_rate},
            {"grad_clip", t.grad_clip},
            {"augment", t.augment},
            {"sensor_drop", t.augmentation.sensor_drop},
            {"flip_prob", t.augmentation.flip_prob},
            {"max_shift", t.augmentation.max_shift},
            {"checkpoint_every", t.checkpoint_every},
            {"eval_batch", t.eval_batch}}},
          {"metrics", {{"threshold", t.threshold}, {"beta", t.beta}}}};
}

void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out << text;
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ScoreMatrix read_scores_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scores file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConsistencyError(path.string() + " is empty");
  std::size_t scores = 0, targets = 0;
  {
    std::stringstream header(line);
    std::string cell;
    while (std::getline(header, cell, ',')) {
      if (cell == "score_" + std::to_string(scores) && targets == 0) {
        ++scores;
      } else if (cell == "target_" + std::to_string(targets)) {
        ++targets;
      } else {
        throw ConsistencyError(path.string() + ": unexpected header column '" + cell + "'");
      }
    }
  }
  if (scores == 0 || scores != targets) {
    throw ConsistencyError(path.string() + ": header needs score_0.. and target_0.. columns in equal number");
  }
  ScoreMatrix m;
  m.labels = scores;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream cells(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(cells, cell, ',')) {
      try {
        std::size_t used = 0;
        if (col < scores) {
          m.scores.push_back(std::stod(cell, &used));
        } else {
          const int v = std::stoi(cell, &used);
          if (v != 0 && v != 1) throw std::invalid_argument("target");
          m.targets.push_back(static_cast<std::uint8_t>(v));
        }
        if (used != cell.size()) throw std::invalid_argument("trailing");
      } catch (const std::logic_error&) {
        throw ConsistencyError(path.string() + ": row " + std::to_string(row) + " column " + std::to_string(col + 1) +
                               " is not valid: '" + cell + "'");
      }
      ++col;
    }
    if (col != 2 * scores) {
      throw ConsistencyError(path.string() + ": row " + std::to_string(row) + " has " + std::to_string(col) +
                             " columns, expected " + std::to_string(2 * scores));
    }
    ++m.samples;
  }
  m.validate();
  return m;
}

}  // namespace sct
