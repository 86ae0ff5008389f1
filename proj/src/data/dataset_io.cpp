#include <bit>
#include <boost/crc.hpp>
#include <cstring>
#include <fstream>

#include "sct/data.hpp"
#include "sct/errors.hpp"

namespace sct {

namespace fs = std::filesystem;

std::uint32_t crc32c(std::span<const std::uint8_t> bytes) {
  boost::crc_optimal<32, 0x1EDC6F41, 0xFFFFFFFF, 0xFFFFFFFF, true, true> crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

namespace {

constexpr int kFormatVersion = 1;

std::string modality_file(std::size_t j) { return "modality_" + std::to_string(j) + ".bin"; }

void append_f32le(std::vector<std::uint8_t>& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

float read_f32le(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

std::uint32_t write_dataset(const Dataset& ds, const fs::path& dir) {
  const std::size_t m = ds.samples.size();
  const std::size_t l = ds.num_labels();
  fs::create_directories(dir);

  nlohmann::json files = nlohmann::json::object();
  nlohmann::json mods = nlohmann::json::array();
  for (std::size_t j = 0; j < ds.modalities.size(); ++j) {
    const auto& g = ds.modalities[j];
    std::vector<std::uint8_t> bytes;
    bytes.reserve(m * g.numel() * 4);
    for (const auto& s : ds.samples) {
      if (s.images.at(j).size() != g.numel()) throw ShapeError("write_dataset: image size disagrees with modality '" + g.name + "'");
      for (float v : s.images[j]) append_f32le(bytes, v);
    }
    write_file_atomic(dir / modality_file(j), bytes);
    files[modality_file(j)] = {{"bytes", bytes.size()}, {"crc32c", crc32c(bytes)}};
    mods.push_back({{"name", g.name},
                    {"height", g.height},
                    {"width", g.width},
                    {"channels", g.channels},
                    {"file", modality_file(j)}});
  }
  std::vector<std::uint8_t> labels;
  labels.reserve(m * l);
  for (const auto& s : ds.samples) {
    if (s.labels.size() != l) throw ShapeError("write_dataset: label vector length disagrees with label names");
    labels.insert(labels.end(), s.labels.begin(), s.labels.end());
  }
  write_file_atomic(dir / "labels.bin", labels);
  files["labels.bin"] = {{"bytes", labels.size()}, {"crc32c", crc32c(labels)}};

  nlohmann::json manifest = {{"format_version", kFormatVersion},
                             {"dtype", "f32le"},
                             {"num_modalities", ds.modalities.size()},
                             {"modalities", mods},
                             {"num_labels", l},
                             {"label_names", ds.label_names},
                             {"num_samples", m},
                             {"train_samples", ds.train_count},
                             {"test_samples", m - ds.train_count},
                             {"files", files},
                             {"generator", ds.generator}};
  const std::string text = manifest.dump(2) + "\n";
  std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
  write_file_atomic(dir / "manifest.json", bytes);
  return crc32c(bytes);
}

Dataset load_dataset(const fs::path& dir) {
  const auto manifest_bytes = read_file(dir / "manifest.json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw ConsistencyError("manifest.json is not valid JSON: " + std::string(e.what()));
  }

  Dataset ds;
  std::size_t m = 0, l = 0;
  nlohmann::json files;
  try {
    if (manifest.at("format_version").get<int>() != kFormatVersion) {
      throw ConsistencyError("unsupported dataset format_version " + manifest.at("format_version").dump());
    }
    if (manifest.at("dtype").get<std::string>() != "f32le") {
      throw ConsistencyError("unsupported dtype " + manifest.at("dtype").dump());
    }
    for (const auto& g : manifest.at("modalities")) {
      ds.modalities.push_back(ImageGeometry{g.at("name").get<std::string>(), g.at("height").get<std::size_t>(),
                                            g.at("width").get<std::size_t>(), g.at("channels").get<std::size_t>()});
    }
    if (manifest.at("num_modalities").get<std::size_t>() != ds.modalities.size()) {
      throw ConsistencyError("manifest num_modalities disagrees with the modality list");
    }
    ds.label_names = manifest.at("label_names").get<std::vector<std::string>>();
    l = manifest.at("num_labels").get<std::size_t>();
    if (l != ds.label_names.size()) {
      throw ConsistencyError("manifest num_labels = " + std::to_string(l) + " but " +
                             std::to_string(ds.label_names.size()) + " label names are listed");
    }
    m = manifest.at("num_samples").get<std::size_t>();
    ds.train_count = manifest.at("train_samples").get<std::size_t>();
    if (ds.train_count + manifest.at("test_samples").get<std::size_t>() != m) {
      throw ConsistencyError("manifest train_samples + test_samples != num_samples");
    }
    files = manifest.at("files");
    if (manifest.contains("generator")) ds.generator = manifest.at("generator");
  } catch (const nlohmann::json::exception& e) {
    throw ConsistencyError("manifest.json: " + std::string(e.what()));
  }

  // Validates the manifest's own size claim, then the payload length, then the checksum.
  auto load_payload = [&](const std::string& name, std::size_t expected_bytes) {
    if (!files.contains(name)) throw ConsistencyError("manifest does not list " + name);
    const auto declared = files[name].at("bytes").get<std::size_t>();
    if (declared != expected_bytes) {
      throw ConsistencyError(name + ": manifest declares " + std::to_string(declared) + " bytes but its shapes imply " +
                             std::to_string(expected_bytes));
    }
    auto bytes = read_file(dir / name);
    if (bytes.size() < declared) {
      throw TruncationError(name + " is truncated: " + std::to_string(bytes.size()) + " of " +
                            std::to_string(declared) + " bytes");
    }
    if (bytes.size() > declared) {
      throw ConsistencyError(name + " has " + std::to_string(bytes.size()) + " bytes, manifest declares " +
                             std::to_string(declared));
    }
    if (crc32c(bytes) != files[name].at("crc32c").get<std::uint32_t>()) {
      throw ChecksumError(name + ": CRC-32C mismatch");
    }
    return bytes;
  };

  ds.samples.resize(m);
  for (std::size_t j = 0; j < ds.modalities.size(); ++j) {
    const std::size_t per = ds.modalities[j].numel();
    const auto bytes = load_payload(modality_file(j), m * per * 4);
    for (std::size_t s = 0; s < m; ++s) {
      auto& img = ds.samples[s].images.emplace_back(per);
      const std::uint8_t* p = bytes.data() + s * per * 4;
      for (std::size_t i = 0; i < per; ++i) img[i] = read_f32le(p + 4 * i);
    }
  }
  const auto labels = load_payload("labels.bin", m * l);
  for (std::size_t s = 0; s < m; ++s) {
    auto& y = ds.samples[s].labels;
    y.assign(labels.begin() + static_cast<std::ptrdiff_t>(s * l), labels.begin() + static_cast<std::ptrdiff_t>((s + 1) * l));
    for (auto v : y) {
      if (v > 1) throw ConsistencyError("labels.bin: sample " + std::to_string(s) + " has a label byte outside {0,1}");
    }
  }
  return ds;
}

}  // namespace sct
