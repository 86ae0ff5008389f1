#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sct/rng.hpp"

namespace sct {

struct ImageGeometry {
  std::string name;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t numel() const { return height * width * channels; }
  bool operator==(const ImageGeometry&) const = default;
};

// One multi-modal sample: N images (row-major h, w, c) plus a multi-hot label vector.
struct Sample {
  std::vector<std::vector<float>> images;
  std::vector<std::uint8_t> labels;

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::vector<ImageGeometry> modalities;
  std::vector<std::string> label_names;
  std::vector<Sample> samples;
  std::size_t train_count = 0;  // samples [0, train_count) train, the rest test
  nlohmann::json generator;     // echo of the generating config, if any

  std::size_t num_labels() const { return label_names.size(); }
  std::size_t modality_index(const std::string& name) const;  // throws ConfigError
};

// Contiguous range of samples of a dataset.
struct DatasetView {
  const Dataset* dataset = nullptr;
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  const Sample& operator[](std::size_t i) const { return dataset->samples[begin + i]; }
};

DatasetView train_split(const Dataset& dataset);
DatasetView test_split(const Dataset& dataset);
DatasetView full_view(const Dataset& dataset);

// Synthetic generator. Labels are split into three groups: group-1 classes
// appear only in modality 0, group-2 only in modality 1, joint classes in all
// modalities (with single-modality decoys when absent).
struct GeneratorConfig {
  std::vector<ImageGeometry> modalities;
  std::size_t group1 = 4;
  std::size_t group2 = 4;
  std::size_t joint = 4;
  double presence_prior = 0.3;
  double amplitude = 1.0;
  double decoy_prob = 0.5;
  double noise_sigma = 0.25;
  std::size_t train_samples = 2000;
  std::size_t test_samples = 500;
  std::uint64_t seed = 0;
  // Smallest class cell side (pixels) accepted when laying out the label grid.
  std::size_t min_cell = 3;

  std::size_t num_labels() const { return group1 + group2 + joint; }
  std::size_t num_samples() const { return train_samples + test_samples; }
  void validate() const;  // throws ConfigError

  static GeneratorConfig desk_default();
};

nlohmann::json to_json(const GeneratorConfig& config);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

// Which group a label belongs to and where its pattern lives.
enum class LabelGroup { kFirst, kSecond, kJoint };
LabelGroup label_group(const GeneratorConfig& config, std::size_t label);

struct CellLocation {
  std::size_t row0, col0, rows, cols, channel;
};
// Pixel cell of class `label` in modality `m` (grid of ceil(sqrt(l)) cells per side).
CellLocation class_cell(const GeneratorConfig& config, std::size_t modality, std::size_t label);

Dataset generate_dataset(const GeneratorConfig& config);

// Writes manifest.json, modality_<j>.bin and labels.bin. Returns the CRC-32C
// of the manifest bytes.
std::uint32_t write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

std::uint32_t crc32c(std::span<const std::uint8_t> bytes);

struct AugmentConfig {
  double sensor_drop = 0.25;  // per-modality drop probability
  double flip_prob = 0.5;     // each of horizontal / vertical
  std::size_t max_shift = 2;  // shift-crop translation range [-t, t]

  void validate() const;
};

// RandomSensorDrop (retain-one), independent flips, then zero-padded shift per
// modality. Labels are untouched.
Sample augment_sample(const Sample& sample, std::span<const ImageGeometry> geometry, const AugmentConfig& config,
                      Rng& rng);

}  // namespace sct
