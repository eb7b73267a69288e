#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "echo/model.hpp"

namespace echo {
namespace {

constexpr char kMagic[8] = {'E', 'C', 'H', 'O', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32_le(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)]))
         << (8 * i);
  return v;
}

void put_f32_le(std::string& out, float f) { put_u32_le(out, std::bit_cast<std::uint32_t>(f)); }

CheckpointError integrity(const std::string& what) {
  return CheckpointError(CheckpointError::Reason::integrity, what);
}

}  // namespace

void save_checkpoint(const ParameterSet<float>& params, const ModelConfig& config,
                     const std::filesystem::path& path) {
  std::string payload;
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : params.entries) {
    manifest.push_back({{"name", e.name},
                        {"shape", e.value.shape.to_vector()},
                        {"offset", offset},
                        {"trainable", e.trainable}});
    for (float v : e.value.data) put_f32_le(payload, v);
    offset += e.value.size();
  }
  nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                           {"config", model_config_to_json(config)},
                           {"init_scheme", params.init_scheme},
                           {"manifest", manifest},
                           {"payload_bytes", payload.size()},
                           {"checksum_fnv1a64", hex(fnv1a(payload))}};
  const std::string head = header.dump();
  std::string file(kMagic, sizeof kMagic);
  put_u32_le(file, static_cast<std::uint32_t>(head.size()));
  file += head;
  file += payload;
  write_text_file(path, file);
}

std::pair<ParameterSet<float>, ModelConfig> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < sizeof kMagic + 4 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw integrity("not a checkpoint file: bad magic");
  const std::size_t head_len = get_u32_le(bytes, sizeof kMagic);
  const std::size_t head_at = sizeof kMagic + 4;
  if (bytes.size() < head_at + head_len) throw integrity("checkpoint header is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(head_at, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw integrity(std::string("checkpoint header is corrupt: ") + e.what());
  }
  try {
    if (header.at("format_version").get<int>() != kCheckpointFormatVersion)
      throw CheckpointError(CheckpointError::Reason::version, "unsupported checkpoint version");
    const std::string payload = bytes.substr(head_at + head_len);
    if (payload.size() != header.at("payload_bytes").get<std::size_t>())
      throw integrity("checkpoint payload is truncated or padded");
    if (hex(fnv1a(payload)) != header.at("checksum_fnv1a64").get<std::string>())
      throw integrity("checkpoint payload checksum mismatch");

    const ModelConfig config = model_config_from_json(header.at("config"));
    const auto layout = parameter_layout(config);
    const auto& manifest = header.at("manifest");
    if (manifest.size() != layout.size())
      throw CheckpointError(CheckpointError::Reason::shape,
                            "checkpoint manifest does not match its config layout");
    ParameterSet<float> params;
    params.init_scheme = header.value("init_scheme", "");
    const std::size_t total = payload.size() / 4;
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& m = manifest[i];
      const auto name = m.at("name").get<std::string>();
      const auto dims = m.at("shape").get<std::vector<std::size_t>>();
      const nn::Shape shape = nn::Shape::from(dims);
      if (name != layout[i].first || !(shape == layout[i].second))
        throw CheckpointError(CheckpointError::Reason::shape,
                              "parameter '" + name + "' has shape " + shape.str() + ", expected '" +
                                  layout[i].first + "' " + layout[i].second.str());
      const auto offset = m.at("offset").get<std::size_t>();
      if (offset + shape.size() > total) throw integrity("manifest offset past payload end");
      nn::Tensor<float> t(shape);
      for (std::size_t k = 0; k < t.size(); ++k)
        t.data[k] = std::bit_cast<float>(get_u32_le(payload, 4 * (offset + k)));
      params.add(name, std::move(t), m.at("trainable").get<bool>());
    }
    return {std::move(params), config};
  } catch (const nlohmann::json::exception& e) {
    throw integrity(std::string("checkpoint header is malformed: ") + e.what());
  }
}

std::pair<ParameterSet<float>, ModelConfig> load_checkpoint(const std::filesystem::path& path,
                                                            const ModelConfig& expected) {
  auto loaded = load_checkpoint(path);
  if (!(loaded.second == expected)) {
    const auto want = parameter_layout(expected);
    std::string detail = "checkpoint config differs from the expected model";
    for (std::size_t i = 0; i < want.size() && i < loaded.first.entries.size(); ++i) {
      const auto& have = loaded.first.entries[i];
      if (have.name != want[i].first || !(have.value.shape == want[i].second)) {
        detail = "shape mismatch: '" + have.name + "' is " + have.value.shape.str() +
                 ", expected '" + want[i].first + "' " + want[i].second.str();
        break;
      }
    }
    throw CheckpointError(CheckpointError::Reason::shape, detail);
  }
  return loaded;
}

}  // namespace echo
