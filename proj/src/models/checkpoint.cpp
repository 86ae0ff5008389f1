#include "sct/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "sct/errors.hpp"

namespace sct {

namespace {

constexpr char kMagic[8] = {'S', 'C', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr int kFormatVersion = 1;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

Checkpoint make_checkpoint(const Model<float>& model, std::size_t epoch, std::uint64_t seed) {
  Checkpoint ck;
  ck.config = model.config();
  ck.epoch = epoch;
  ck.seed = seed;
  for (const auto& p : model.parameters()) {
    ck.parameters.push_back({p.name, p.tensor.shape(), std::vector<float>(p.tensor.data().begin(), p.tensor.data().end())});
  }
  return ck;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  auto add = [&](const std::vector<StoredTensor>& list, const char* role) {
    for (const auto& t : list) {
      tensors.push_back({{"name", t.name}, {"role", role}, {"shape", t.shape}, {"offset", offset}, {"count", t.values.size()}});
      offset += t.values.size() * 4;
    }
  };
  add(ck.parameters, "parameter");
  add(ck.adam_m, "adam_m");
  add(ck.adam_v, "adam_v");
  nlohmann::json header = {{"format_version", kFormatVersion},
                           {"config", to_json(ck.config)},
                           {"epoch", ck.epoch},
                           {"seed", ck.seed},
                           {"optimizer_step", ck.optimizer_step ? nlohmann::json(*ck.optimizer_step) : nlohmann::json(nullptr)},
                           {"payload_bytes", offset},
                           {"tensors", tensors}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto* list : {&ck.parameters, &ck.adam_m, &ck.adam_v}) {
    for (const auto& t : *list) {
      for (float v : t.values) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
      }
    }
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16) throw TruncationError("checkpoint shorter than its fixed preamble");
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw ConsistencyError("not a checkpoint file (bad magic)");
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (bytes.size() < 16 + header_len) throw TruncationError("checkpoint header is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ConsistencyError(std::string("checkpoint header: ") + e.what());
  }
  Checkpoint ck;
  try {
    if (header.at("format_version").get<int>() != kFormatVersion) throw ConsistencyError("unsupported checkpoint format_version");
    ck.config = model_config_from_json(header.at("config"));
    ck.epoch = header.at("epoch").get<std::size_t>();
    ck.seed = header.at("seed").get<std::uint64_t>();
    if (!header.at("optimizer_step").is_null()) ck.optimizer_step = header.at("optimizer_step").get<std::uint64_t>();
    const auto payload = header.at("payload_bytes").get<std::size_t>();
    const std::uint8_t* base = bytes.data() + 16 + header_len;
    const std::size_t available = bytes.size() - 16 - header_len;
    if (available < payload) throw TruncationError("checkpoint payload is truncated");
    if (available > payload) throw ConsistencyError("checkpoint has trailing bytes after the payload");
    for (const auto& t : header.at("tensors")) {
      StoredTensor st;
      st.name = t.at("name").get<std::string>();
      st.shape = t.at("shape").get<Shape>();
      const auto count = t.at("count").get<std::size_t>();
      const auto off = t.at("offset").get<std::size_t>();
      if (count != shape_numel(st.shape) || off + count * 4 > payload) {
        throw ConsistencyError("checkpoint tensor '" + st.name + "' disagrees with the payload layout");
      }
      st.values.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(base[off + 4 * i + b]) << (8 * b);
        st.values[i] = std::bit_cast<float>(bits);
      }
      const auto role = t.at("role").get<std::string>();
      if (role == "parameter") ck.parameters.push_back(std::move(st));
      else if (role == "adam_m") ck.adam_m.push_back(std::move(st));
      else if (role == "adam_v") ck.adam_v.push_back(std::move(st));
      else throw ConsistencyError("checkpoint tensor '" + st.name + "' has unknown role " + role);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConsistencyError(std::string("checkpoint header: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ck) {
  Model<T> model = Model<T>::build(ck.config, 0);
  auto params = model.parameters();
  if (params.size() != ck.parameters.size()) {
    throw ConsistencyError("checkpoint holds " + std::to_string(ck.parameters.size()) + " parameters, config implies " +
                           std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& st = ck.parameters[i];
    if (st.name != params[i].name || st.shape != params[i].tensor.shape()) {
      throw ConsistencyError("checkpoint parameter '" + st.name + "' " + shape_to_string(st.shape) +
                             " does not match expected '" + params[i].name + "' " +
                             shape_to_string(params[i].tensor.shape()));
    }
    auto dst = params[i].tensor.mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(st.values[k]);
  }
  return model;
}

template Model<float> model_from_checkpoint<float>(const Checkpoint&);
template Model<double> model_from_checkpoint<double>(const Checkpoint&);

}  // namespace sct
