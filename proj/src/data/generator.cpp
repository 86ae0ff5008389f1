#include <cmath>

#include "sct/data.hpp"
#include "sct/errors.hpp"

namespace sct {

std::size_t Dataset::modality_index(const std::string& name) const {
  for (std::size_t j = 0; j < modalities.size(); ++j) {
    if (modalities[j].name == name) return j;
  }
  throw ConfigError("dataset has no modality named '" + name + "'");
}

DatasetView train_split(const Dataset& dataset) { return {&dataset, 0, dataset.train_count}; }
DatasetView test_split(const Dataset& dataset) { return {&dataset, dataset.train_count, dataset.samples.size()}; }
DatasetView full_view(const Dataset& dataset) { return {&dataset, 0, dataset.samples.size()}; }

namespace {

std::size_t grid_side(std::size_t labels) {
  auto g = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(labels))));
  while (g * g < labels) ++g;
  return g;
}

}  // namespace

GeneratorConfig GeneratorConfig::desk_default() {
  GeneratorConfig c;
  c.modalities = {ImageGeometry{"s1", 30, 30, 2}, ImageGeometry{"s2", 30, 30, 3}};
  return c;
}

void GeneratorConfig::validate() const {
  if (modalities.empty()) throw ConfigError("data.modalities: at least one modality is required");
  for (const auto& m : modalities) {
    if (m.height == 0 || m.width == 0 || m.channels == 0) {
      throw ConfigError("data.modalities: '" + m.name + "' must have positive height, width and channels");
    }
  }
  const std::size_t l = num_labels();
  if (l == 0) throw ConfigError("data: label groups must contain at least one label");
  if (group2 > 0 && modalities.size() < 2) throw ConfigError("data.group2 needs a second modality");
  if (!(presence_prior > 0.0 && presence_prior < 1.0)) throw ConfigError("data.presence_prior must lie in (0, 1)");
  if (!(decoy_prob >= 0.0 && decoy_prob <= 1.0)) throw ConfigError("data.decoy_prob must lie in [0, 1]");
  if (!(noise_sigma >= 0.0)) throw ConfigError("data.noise_sigma must be non-negative");
  if (!std::isfinite(amplitude)) throw ConfigError("data.amplitude must be finite");
  if (num_samples() == 0) throw ConfigError("data: at least one sample is required");
  if (min_cell == 0) throw ConfigError("data.min_cell must be positive");
  const std::size_t g = grid_side(l);
  for (const auto& m : modalities) {
    const std::size_t ch = m.height / g, cw = m.width / g;
    if (ch < 1 || cw < 1) {
      throw ConfigError("data: " + std::to_string(l) + " labels need a " + std::to_string(g) + "x" + std::to_string(g) +
                        " grid; cells of modality '" + m.name + "' would be smaller than 1 pixel");
    }
    if (ch < min_cell || cw < min_cell) {
      throw ConfigError("data: " + std::to_string(l) + " labels exceed the grid capacity of modality '" + m.name +
                        "' (" + std::to_string(ch) + "x" + std::to_string(cw) + " px cells, minimum " +
                        std::to_string(min_cell) + ")");
    }
  }
}

nlohmann::json to_json(const GeneratorConfig& c) {
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : c.modalities) {
    mods.push_back({{"name", m.name}, {"height", m.height}, {"width", m.width}, {"channels", m.channels}});
  }
  return {{"modalities", mods},          {"group1", c.group1},
          {"group2", c.group2},          {"joint", c.joint},
          {"presence_prior", c.presence_prior}, {"amplitude", c.amplitude},
          {"decoy_prob", c.decoy_prob},  {"noise_sigma", c.noise_sigma},
          {"train_samples", c.train_samples}, {"test_samples", c.test_samples},
          {"seed", c.seed},              {"min_cell", c.min_cell}};
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  try {
    GeneratorConfig c;
    c.modalities.clear();
    for (const auto& m : j.at("modalities")) {
      c.modalities.push_back(ImageGeometry{m.at("name").get<std::string>(), m.at("height").get<std::size_t>(),
                                           m.at("width").get<std::size_t>(), m.at("channels").get<std::size_t>()});
    }
    c.group1 = j.at("group1").get<std::size_t>();
    c.group2 = j.at("group2").get<std::size_t>();
    c.joint = j.at("joint").get<std::size_t>();
    c.presence_prior = j.at("presence_prior").get<double>();
    c.amplitude = j.at("amplitude").get<double>();
    c.decoy_prob = j.at("decoy_prob").get<double>();
    c.noise_sigma = j.at("noise_sigma").get<double>();
    c.train_samples = j.at("train_samples").get<std::size_t>();
    c.test_samples = j.at("test_samples").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.min_cell = j.at("min_cell").get<std::size_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
}

LabelGroup label_group(const GeneratorConfig& config, std::size_t label) {
  if (label < config.group1) return LabelGroup::kFirst;
  if (label < config.group1 + config.group2) return LabelGroup::kSecond;
  return LabelGroup::kJoint;
}

CellLocation class_cell(const GeneratorConfig& config, std::size_t modality, std::size_t label) {
  const auto& m = config.modalities.at(modality);
  const std::size_t g = grid_side(config.num_labels());
  const std::size_t ch = m.height / g, cw = m.width / g;
  return CellLocation{(label / g) * ch, (label % g) * cw, ch, cw, label % m.channels};
}

Dataset generate_dataset(const GeneratorConfig& config) {
  config.validate();
  const std::size_t n = config.modalities.size();
  const std::size_t l = config.num_labels();

  Dataset ds;
  ds.modalities = config.modalities;
  for (std::size_t k = 0; k < l; ++k) {
    switch (label_group(config, k)) {
      case LabelGroup::kFirst: ds.label_names.push_back(config.modalities[0].name + "_only_" + std::to_string(k)); break;
      case LabelGroup::kSecond: ds.label_names.push_back(config.modalities[1].name + "_only_" + std::to_string(k)); break;
      case LabelGroup::kJoint: ds.label_names.push_back("joint_" + std::to_string(k)); break;
    }
  }
  ds.train_count = config.train_samples;
  ds.generator = to_json(config);

  std::vector<std::vector<CellLocation>> cells(n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < l; ++k) cells[j].push_back(class_cell(config, j, k));

  Rng rng(derive_seed(config.seed, SeedPurpose::kData));
  const auto amp = static_cast<float>(config.amplitude);
  ds.samples.reserve(config.num_samples());
  for (std::size_t s = 0; s < config.num_samples(); ++s) {
    Sample sample;
    for (const auto& m : config.modalities) sample.images.emplace_back(m.numel(), 0.0f);
    sample.labels.resize(l);
    for (std::size_t k = 0; k < l; ++k) sample.labels[k] = rng.bernoulli(config.presence_prior) ? 1 : 0;

    auto stamp = [&](std::size_t j, std::size_t k) {
      const auto& c = cells[j][k];
      const auto& m = config.modalities[j];
      auto& img = sample.images[j];
      for (std::size_t y = c.row0; y < c.row0 + c.rows; ++y)
        for (std::size_t x = c.col0; x < c.col0 + c.cols; ++x) img[(y * m.width + x) * m.channels + c.channel] += amp;
    };
    for (std::size_t k = 0; k < l; ++k) {
      const bool present = sample.labels[k] != 0;
      switch (label_group(config, k)) {
        case LabelGroup::kFirst:
          if (present) stamp(0, k);
          break;
        case LabelGroup::kSecond:
          if (present) stamp(1, k);
          break;
        case LabelGroup::kJoint:
          if (present) {
            for (std::size_t j = 0; j < n; ++j) stamp(j, k);
          } else if (rng.bernoulli(config.decoy_prob)) {
            stamp(rng.index(n), k);
          }
          break;
      }
    }
    if (config.noise_sigma > 0.0) {
      for (auto& img : sample.images)
        for (float& v : img) v += static_cast<float>(config.noise_sigma * rng.normal());
    }
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

}  // namespace sct
