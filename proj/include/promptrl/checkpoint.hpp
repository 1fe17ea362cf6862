// SPDX-License-Identifier: Apache-2.0
//
// Parameter checkpoints:
//
//   line 1   "PROMPTRL-CKPT 1\n"
//   line 2   compact JSON header {"model":..., "precision":32|64,
//            "count":N, "segments":[[name, offset, rows, cols], ...]} + "\n"
//   rest     N little-endian IEEE-754 values (float32 or float64)
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "promptrl/error.hpp"
#include "promptrl/nn.hpp"

namespace promptrl::nn {

inline constexpr const char* kCheckpointMagic = "PROMPTRL-CKPT 1";

template <typename Real>
constexpr int precision_bits() {
  static_assert(std::is_same_v<Real, float> || std::is_same_v<Real, double>);
  return std::is_same_v<Real, float> ? 32 : 64;
}

template <typename Real>
std::string encode_checkpoint(const ParamVector<Real>& params, const nlohmann::ordered_json& model) {
  nlohmann::ordered_json header;
  header["model"] = model;
  header["precision"] = precision_bits<Real>();
  header["count"] = params.size();
  auto segs = nlohmann::ordered_json::array();
  for (const auto& s : params.segments()) {
    segs.push_back(nlohmann::ordered_json::array({s.name, s.offset, s.rows, s.cols}));
  }
  header["segments"] = segs;

  std::string out = std::string(kCheckpointMagic) + "\n" + header.dump() + "\n";
  using Bits = std::conditional_t<std::is_same_v<Real, float>, std::uint32_t, std::uint64_t>;
  for (Real v : params.values()) {
    const auto bits = std::bit_cast<Bits>(v);
    for (std::size_t b = 0; b < sizeof(Bits); ++b) {
      out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  }
  return out;
}

struct DecodedHeader {
  nlohmann::ordered_json model;
  int precision = 64;
};

template <typename Real>
ParamVector<Real> decode_checkpoint(const std::string& bytes, DecodedHeader* header_out = nullptr) {
  const auto first = bytes.find('\n');
  require(first != std::string::npos && bytes.substr(0, first) == kCheckpointMagic, ErrorCode::Io,
          "not a checkpoint (bad magic)");
  const auto second = bytes.find('\n', first + 1);
  require(second != std::string::npos, ErrorCode::Io, "truncated checkpoint header");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.substr(first + 1, second - first - 1));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Io, std::string("checkpoint header: ") + e.what());
  }
  const int precision = header.at("precision").get<int>();
  require(precision == 32 || precision == 64, ErrorCode::Io, "precision must be 32 or 64");
  const auto count = header.at("count").get<std::size_t>();

  ParamVector<Real> params;
  for (const auto& s : header.at("segments")) {
    params.add_segment(s.at(0).get<std::string>(), s.at(2).get<std::size_t>(), s.at(3).get<std::size_t>());
    require(params.segments().back().offset == s.at(1).get<std::size_t>(), ErrorCode::Io,
            "segment offsets are not contiguous");
  }
  require(params.size() == count, ErrorCode::Io, "segment table does not cover the value count");
  const std::size_t width = precision == 32 ? 4 : 8;
  require(bytes.size() - (second + 1) == count * width, ErrorCode::Io, "payload size mismatch");

  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + second + 1);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (std::size_t b = 0; b < width; ++b) {
      bits |= static_cast<std::uint64_t>(p[i * width + b]) << (8 * b);
    }
    const double value = width == 4 ? static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)))
                                    : std::bit_cast<double>(bits);
    params.values()[i] = static_cast<Real>(value);
  }
  if (header_out != nullptr) {
    header_out->model = header.at("model");
    header_out->precision = precision;
  }
  return params;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::Io, "write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace promptrl::nn
