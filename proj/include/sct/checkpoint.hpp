#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sct/model.hpp"

namespace sct {

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const StoredTensor&) const = default;
};

// Container layout:
//   8 bytes  magic "SCTCKPT1"
//   8 bytes  header length H (little-endian u64)
//   H bytes  JSON header: format_version, config, epoch, seed, optimizer step,
//            tensor manifest [{name, role, shape, offset, count}]
//   payload  little-endian IEEE-754 f32 values in manifest order
struct Checkpoint {
  ModelConfig config;
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::vector<StoredTensor> parameters;
  // Adam moments, one entry per parameter in the same order (optional).
  std::optional<std::uint64_t> optimizer_step;
  std::vector<StoredTensor> adam_m;
  std::vector<StoredTensor> adam_v;
};

Checkpoint make_checkpoint(const Model<float>& model, std::size_t epoch, std::uint64_t seed);
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace sct
