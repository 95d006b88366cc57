// Copyright 2026 The Lightsphere Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lightsphere/lightsphere.hpp"
#include "lightsphere/nn.hpp"

// Checkpoint layout (all integers little-endian):
//   "NLSP" | u32 version | u32 header bytes | header JSON
//   | f32 parameter blocks in declared order
//   | [u64 adam step | f32 m, v per block]   (if header.optimizer)
//   | u64 FNV-1a of everything before it

namespace nls {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'N', 'L', 'S', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline nlohmann::json to_json(const HashGridConfig& g) {
  return {{"dims", g.dims}, {"levels", g.levels}, {"base_res", g.base_res}, {"growth", g.growth},
          {"table_size_log2", g.table_size_log2}, {"features_per_level", g.features_per_level}};
}

inline HashGridConfig grid_from_json(const nlohmann::json& j) {
  HashGridConfig g;
  g.dims = j.at("dims").get<int>();
  g.levels = j.at("levels").get<int>();
  g.base_res = j.at("base_res").get<int>();
  g.growth = j.at("growth").get<double>();
  g.table_size_log2 = j.at("table_size_log2").get<int>();
  g.features_per_level = j.at("features_per_level").get<int>();
  return g;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"gamma1_pos", to_json(c.gamma1_pos)}, {"gamma1_view", to_json(c.gamma1_view)},
          {"gamma2", to_json(c.gamma2)},         {"hidden_dim", c.hidden_dim},
          {"num_layers", c.num_layers},          {"feature_dim", c.feature_dim},
          {"max_offset", c.max_offset},          {"eta_r", c.eta_r},
          {"offset_variant", to_string(c.offset_variant)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.gamma1_pos = grid_from_json(j.at("gamma1_pos"));
  c.gamma1_view = grid_from_json(j.at("gamma1_view"));
  c.gamma2 = grid_from_json(j.at("gamma2"));
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.max_offset = j.at("max_offset").get<double>();
  c.eta_r = j.at("eta_r").get<double>();
  c.offset_variant = offset_variant_from_string(j.at("offset_variant").get<std::string>());
  c.validate();
  return c;
}

namespace detail {

inline nlohmann::json calib_to_json(const FrameCalib<float>& f) {
  const auto& k = f.intrinsics;
  return {{"intrinsics", {k.fx, k.fy, k.cx, k.cy}},
          {"distortion", f.distortion.kappa},
          {"gyro", f.gyro.m},
          {"width", f.width},
          {"height", f.height},
          {"rs_skew_s", f.rs_skew_s}};
}

inline FrameCalib<float> calib_from_json(const nlohmann::json& j) {
  FrameCalib<float> f;
  const auto k = j.at("intrinsics").get<std::array<float, 4>>();
  f.intrinsics = {k[0], k[1], k[2], k[3]};
  f.distortion.kappa = j.at("distortion").get<std::array<float, 5>>();
  f.gyro.m = j.at("gyro").get<std::array<float, 9>>();
  f.width = j.at("width").get<int>();
  f.height = j.at("height").get<int>();
  f.rs_skew_s = j.at("rs_skew_s").get<float>();
  return f;
}

class ByteWriter {
 public:
  std::vector<std::uint8_t> bytes;

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void floats(std::span<const float> v) {
    const std::size_t at = bytes.size();
    bytes.resize(at + 4 * v.size());
    std::uint8_t* out = bytes.data() + at;
    for (float f : v) {
      const auto u = std::bit_cast<std::uint32_t>(f);
      out[0] = static_cast<std::uint8_t>(u);
      out[1] = static_cast<std::uint8_t>(u >> 8);
      out[2] = static_cast<std::uint8_t>(u >> 16);
      out[3] = static_cast<std::uint8_t>(u >> 24);
      out += 4;
    }
  }
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : p_(data), end_(data + size) {}

  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end_ - p_) < n) throw CheckpointError("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{p_[i]} << (8 * i);
    p_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{p_[i]} << (8 * i);
    p_ += 8;
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* at = p_;
    p_ += n;
    return at;
  }
  void floats(std::span<float> v) {
    const std::uint8_t* in = take(4 * v.size());
    for (float& f : v) {
      const std::uint32_t u = std::uint32_t{in[0]} | std::uint32_t{in[1]} << 8 | std::uint32_t{in[2]} << 16 |
                              std::uint32_t{in[3]} << 24;
      f = std::bit_cast<float>(u);
      in += 4;
    }
  }
  std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }

 private:
  const std::uint8_t* p_;
  const std::uint8_t* end_;
};

}  // namespace detail

struct Checkpoint {
  LightSphereModel<float> model;
  std::optional<AdamState<float>> optimizer;
  nlohmann::json meta = nlohmann::json::object();  // color pipeline, training summary
};

inline std::vector<std::uint8_t> serialize_checkpoint(const LightSphereModel<float>& m,
                                                      const AdamState<float>* opt = nullptr,
                                                      const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json header;
  header["config"] = to_json(m.cfg);
  header["frames"] = nlohmann::json::array();
  for (const auto& f : m.frames) header["frames"].push_back(detail::calib_to_json(f));
  header["mask_levels"] = {m.mask1.active_levels, m.mask2.active_levels};
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : m.params) blocks.push_back({{"name", b.name}, {"size", b.value.size()}});
  header["blocks"] = blocks;
  header["optimizer"] = opt != nullptr;
  if (opt) {
    const auto& c = opt->cfg;
    header["adam"] = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps},
                      {"weight_decay", c.weight_decay}};
    if (opt->m.size() != m.params.size()) throw CheckpointError("optimizer state does not match the model");
  }
  header["meta"] = meta;
  const std::string text = header.dump();

  detail::ByteWriter w;
  std::size_t total = 16 + text.size() + 8;
  for (const auto& b : m.params) total += 4 * b.value.size() * (opt ? 3 : 1);
  w.bytes.reserve(total);
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text.data(), text.size());
  for (const auto& b : m.params) w.floats(b.value);
  if (opt) {
    w.u64(static_cast<std::uint64_t>(opt->step));
    for (std::size_t i = 0; i < opt->m.size(); ++i) {
      w.floats(opt->m[i]);
      w.floats(opt->v[i]);
    }
  }
  w.u64(fnv1a64(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

inline Checkpoint deserialize_checkpoint(const std::uint8_t* data, std::size_t size) {
  if (size < 4 + 4 + 4 + 8 || std::memcmp(data, kCheckpointMagic, 4) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  detail::ByteReader tail(data + size - 8, 8);
  if (tail.u64() != fnv1a64(data, size - 8)) throw CheckpointError("checkpoint checksum mismatch");

  detail::ByteReader r(data + 4, size - 12);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t header_len = r.u32();
  const auto* text = reinterpret_cast<const char*>(r.take(header_len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text, text + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  try {
    auto& m = ck.model;
    m.cfg = model_config_from_json(header.at("config"));
    for (const auto& f : header.at("frames")) m.frames.push_back(detail::calib_from_json(f));
    if (m.frames.empty()) throw CheckpointError("checkpoint has no frames");
    m.allocate();
    const auto levels = header.at("mask_levels").get<std::array<int, 2>>();
    m.mask1.active_levels = levels[0];
    m.mask2.active_levels = levels[1];
    const auto& blocks = header.at("blocks");
    if (blocks.size() != m.params.size()) throw CheckpointError("checkpoint block count mismatch");
    for (std::size_t i = 0; i < m.params.size(); ++i) {
      if (blocks[i].at("name").get<std::string>() != m.params[i].name ||
          blocks[i].at("size").get<std::size_t>() != m.params[i].value.size())
        throw CheckpointError("checkpoint block " + std::to_string(i) + " does not match its config");
    }
    ck.meta = header.value("meta", nlohmann::json::object());
    for (auto& b : m.params) r.floats(b.value);
    if (header.at("optimizer").get<bool>()) {
      const auto& a = header.at("adam");
      AdamConfig c{a.at("lr").get<double>(), a.at("beta1").get<double>(), a.at("beta2").get<double>(),
                   a.at("eps").get<double>(), a.at("weight_decay").get<double>()};
      AdamState<float> st(m.params, c);
      st.step = static_cast<long long>(r.u64());
      for (std::size_t i = 0; i < st.m.size(); ++i) {
        r.floats(st.m[i]);
        r.floats(st.v[i]);
      }
      ck.optimizer = std::move(st);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  if (r.remaining() != 0) throw CheckpointError("checkpoint has trailing bytes");
  return ck;
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  return deserialize_checkpoint(bytes.data(), bytes.size());
}

inline void save_checkpoint(const std::filesystem::path& path, const LightSphereModel<float>& m,
                            const AdamState<float>* opt = nullptr,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  const auto bytes = serialize_checkpoint(m, opt, meta);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("short write to " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return deserialize_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace nls
