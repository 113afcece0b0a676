// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "seqrec/numerics/params.hpp"

namespace seqrec {

// Layout:
//   8 bytes   magic "SEQRECK1"
//   8 bytes   little-endian uint64 header length H
//   H bytes   UTF-8 JSON: {"format", "arrays": [{"name","shape","offset"}], "metadata"}
//   payload   little-endian float32 values; "offset" is in bytes from payload start
inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'Q', 'R', 'E', 'C', 'K', '1'};

struct Checkpoint {
  ParamStore params;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json arrays = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const Tensor& t = ckpt.params[i];
    arrays.push_back({{"name", ckpt.params.name(i)}, {"shape", t.shape()}, {"offset", offset}});
    offset += 4 * t.size();
  }
  nlohmann::json header = {{"format", "seqrec-checkpoint-v1"}, {"arrays", arrays}, {"metadata", ckpt.metadata}};
  const std::string head = header.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u64(out, head.size());
  out += head;
  out.reserve(out.size() + offset);
  for (std::size_t i = 0; i < ckpt.params.size(); ++i)
    for (float v : ckpt.params[i].values()) detail::put_f32(out, v);
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw DataError("not a seqrec checkpoint (bad magic)");
  const std::uint64_t head_len = detail::get_u64(p + 8);
  if (16 + head_len > bytes.size()) throw DataError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::size_t payload = 16 + head_len;
  Checkpoint ckpt;
  ckpt.metadata = header.value("metadata", nlohmann::json::object());
  for (const auto& a : header.at("arrays")) {
    Shape shape = a.at("shape").get<Shape>();
    const std::uint64_t off = a.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_size(shape);
    if (payload + off + 4 * n > bytes.size())
      throw DataError("checkpoint array '" + a.at("name").get<std::string>() + "' exceeds payload");
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = detail::get_f32(p + payload + off + 4 * i);
    ckpt.params.add(a.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values)));
  }
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint '" + path + "'");
  const std::string bytes = serialize_checkpoint(ckpt);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace seqrec
