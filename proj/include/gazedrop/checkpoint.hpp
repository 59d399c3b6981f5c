#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "gazedrop/dropout.hpp"
#include "gazedrop/error.hpp"
#include "gazedrop/net.hpp"
#include "gazedrop/pgm.hpp"

namespace gazedrop {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "gazedrop-checkpoint";

struct CheckpointMeta {
  std::uint64_t seed = 0;
  int epoch = 0;
  std::string branch = "follow";
  std::string variant;
  DropoutSpec dropout;
  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
  PilotNetMini net;
  CheckpointMeta meta;
};

inline nlohmann::json to_json(const ArchConfig& a) {
  nlohmann::json convs = nlohmann::json::array();
  for (const auto& c : a.convs) convs.push_back({c.filters, c.kernel, c.stride, c.pad});
  return {{"in_h", a.in_h}, {"in_w", a.in_w}, {"in_c", a.in_c}, {"convs", convs}, {"fc", a.fc},
          {"dropout_slots", a.dropout_slots}};
}

inline ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig a;
  a.in_h = j.at("in_h").get<int>();
  a.in_w = j.at("in_w").get<int>();
  a.in_c = j.at("in_c").get<int>();
  a.convs.clear();
  for (const auto& c : j.at("convs")) {
    if (!c.is_array() || c.size() != 4) throw CheckpointError("conv layer entries must be [filters, kernel, stride, pad]");
    a.convs.push_back({c[0].get<int>(), c[1].get<int>(), c[2].get<int>(), c[3].get<int>()});
  }
  a.fc = j.at("fc").get<std::vector<int>>();
  a.dropout_slots = j.at("dropout_slots").get<std::vector<int>>();
  return a;
}

inline nlohmann::json to_json(const DropoutSpec& d) {
  return {{"mode", std::string(to_string(d.mode))}, {"dp", d.dp},         {"blob_sigma", d.blob_sigma},
          {"blob_canvas_h", d.blob_canvas_h},       {"blob_canvas_w", d.blob_canvas_w},
          {"calibrated", d.calibrated}};
}

inline DropoutSpec dropout_from_json(const nlohmann::json& j) {
  DropoutSpec d;
  d.mode = parse_dropout_mode(j.at("mode").get<std::string>());
  d.dp = j.at("dp").get<double>();
  d.blob_sigma = j.value("blob_sigma", d.blob_sigma);
  d.blob_canvas_h = j.value("blob_canvas_h", std::int64_t{0});
  d.blob_canvas_w = j.value("blob_canvas_w", std::int64_t{0});
  d.calibrated = j.value("calibrated", false);
  d.validate();
  return d;
}

namespace detail {

inline void append_le_floats(std::string& out, std::span<const float> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[start + i * 4 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
}

inline float read_le_float(const char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

// UTF-8 JSON header line, then the parameters as little-endian float32.
inline std::string encode_checkpoint(const PilotNetMini& net, const CheckpointMeta& meta) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : net.tensors()) tensors.push_back({{"name", t.name}, {"shape", t.shape}});
  nlohmann::json header = {
      {"format", kCheckpointFormat},
      {"version", kCheckpointVersion},
      {"arch", to_json(net.arch())},
      {"tensors", tensors},
      {"blob_floats", net.parameter_count()},
      {"meta",
       {{"seed", meta.seed}, {"epoch", meta.epoch}, {"branch", meta.branch}, {"variant", meta.variant},
        {"dropout", to_json(meta.dropout)}}},
  };
  std::string out = header.dump() + "\n";
  detail::append_le_floats(out, net.parameters());
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw CheckpointError("checkpoint header is not newline-terminated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  try {
    if (header.at("format").get<std::string>() != kCheckpointFormat) throw CheckpointError("not a gazedrop checkpoint");
    const int version = header.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint c{PilotNetMini(arch_from_json(header.at("arch"))), {}};
    const auto& declared = header.at("tensors");
    const auto& expected = c.net.tensors();
    if (declared.size() != expected.size()) throw CheckpointError("checkpoint tensor list does not match architecture");
    std::size_t declared_total = 0;
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const Shape shape = declared[i].at("shape").get<Shape>();
      if (declared[i].at("name").get<std::string>() != expected[i].name || shape != expected[i].shape) {
        throw CheckpointError("checkpoint tensor '" + declared[i].at("name").get<std::string>() +
                              "' does not match architecture");
      }
      declared_total += shape_volume(shape);
    }
    const auto blob_floats = header.at("blob_floats").get<std::size_t>();
    const std::size_t blob_bytes = bytes.size() - nl - 1;
    if (declared_total != blob_floats || blob_floats * 4 != blob_bytes) {
      throw CheckpointError("checkpoint length mismatch: header declares " + std::to_string(declared_total) +
                            " floats, blob holds " + std::to_string(blob_bytes) + " bytes");
    }
    auto params = c.net.parameters();
    const char* p = bytes.data() + nl + 1;
    for (std::size_t i = 0; i < params.size(); ++i) params[i] = detail::read_le_float(p + 4 * i);
    const auto& m = header.at("meta");
    c.meta.seed = m.at("seed").get<std::uint64_t>();
    c.meta.epoch = m.at("epoch").get<int>();
    c.meta.branch = m.at("branch").get<std::string>();
    c.meta.variant = m.at("variant").get<std::string>();
    c.meta.dropout = dropout_from_json(m.at("dropout"));
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint architecture invalid: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(c.net, c.meta));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const DataError& e) {
    throw CheckpointError(e.what());
  }
  return decode_checkpoint(bytes);
}

}  // namespace gazedrop
