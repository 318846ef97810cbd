// Copyright 2026 The SEM Toolkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Little-endian binary containers.
//
//   SEMW (SAE weights):  "SEMW" u32 version=1 u32 d u32 s
//                        f32 W_e[s*d] f32 W_d[d*s] f32 b_pre[d]     (row-major)
//   SEME (embeddings):   "SEME" u32 version=1 u32 rows u32 cols f32 payload[rows*cols]

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "sem/common.hpp"
#include "sem/sae.hpp"

namespace sem {

namespace io_detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::vector<std::uint8_t>& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline double get_f32(const std::uint8_t* p) {
  return static_cast<double>(std::bit_cast<float>(get_u32(p)));
}

inline std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Header {
  std::uint32_t version;
  std::uint32_t a;
  std::uint32_t b;
};

inline Header parse_header(const std::vector<std::uint8_t>& bytes, std::string_view magic,
                           const std::string& what) {
  if (bytes.size() < 16) {
    throw FormatError(what + ": file too short for header (" + std::to_string(bytes.size()) +
                      " bytes)");
  }
  if (std::memcmp(bytes.data(), magic.data(), 4) != 0) {
    throw FormatError(what + ": bad magic, expected \"" + std::string(magic) + "\"");
  }
  Header h{get_u32(bytes.data() + 4), get_u32(bytes.data() + 8), get_u32(bytes.data() + 12)};
  if (h.version != 1) {
    throw FormatError(what + ": unsupported version " + std::to_string(h.version));
  }
  return h;
}

inline void check_payload(std::size_t got, std::uint64_t want_floats, const std::string& what) {
  const std::uint64_t want = 16 + 4 * want_floats;
  if (got != want) {
    throw FormatError(what + ": payload size mismatch, expected " + std::to_string(want) +
                      " bytes, got " + std::to_string(got));
  }
}

}  // namespace io_detail

// Writes bytes to a sibling temporary and renames it into place, so a failed
// write never leaves a partial file at `path`.
inline void write_file_atomic(const std::filesystem::path& path, const void* data,
                              std::size_t size) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw FormatError("write failed for " + path.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw FormatError("cannot replace " + path.string());
  }
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

inline std::vector<std::uint8_t> serialize_sae_weights(const SaeWeights& w) {
  w.validate();
  const auto d = static_cast<std::uint32_t>(w.input_dim());
  const auto s = static_cast<std::uint32_t>(w.latent_dim());
  std::vector<std::uint8_t> out;
  out.reserve(16 + 4 * (2ull * d * s + d));
  out.insert(out.end(), {'S', 'E', 'M', 'W'});
  io_detail::put_u32(out, 1);
  io_detail::put_u32(out, d);
  io_detail::put_u32(out, s);
  for (Index i = 0; i < s; ++i)
    for (Index j = 0; j < d; ++j) io_detail::put_f32(out, w.encoder(i, j));
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < s; ++j) io_detail::put_f32(out, w.decoder(i, j));
  for (Index i = 0; i < d; ++i) io_detail::put_f32(out, w.centering_bias[i]);
  return out;
}

inline SaeWeights parse_sae_weights(const std::vector<std::uint8_t>& bytes,
                                    const std::string& what = "SEMW") {
  const auto h = io_detail::parse_header(bytes, "SEMW", what);
  const std::uint64_t d = h.a;
  const std::uint64_t s = h.b;
  if (d == 0 || s == 0) throw FormatError(what + ": header declares a zero dimension");
  io_detail::check_payload(bytes.size(), 2 * d * s + d, what);
  SaeWeights w;
  w.encoder.resize(static_cast<Index>(s), static_cast<Index>(d));
  w.decoder.resize(static_cast<Index>(d), static_cast<Index>(s));
  w.centering_bias.resize(static_cast<Index>(d));
  const std::uint8_t* p = bytes.data() + 16;
  for (Index i = 0; i < w.encoder.rows(); ++i)
    for (Index j = 0; j < w.encoder.cols(); ++j, p += 4) w.encoder(i, j) = io_detail::get_f32(p);
  for (Index i = 0; i < w.decoder.rows(); ++i)
    for (Index j = 0; j < w.decoder.cols(); ++j, p += 4) w.decoder(i, j) = io_detail::get_f32(p);
  for (Index i = 0; i < w.centering_bias.size(); ++i, p += 4)
    w.centering_bias[i] = io_detail::get_f32(p);
  if (!w.encoder.allFinite() || !w.decoder.allFinite() || !w.centering_bias.allFinite()) {
    throw FormatError(what + ": non-finite weight values");
  }
  return w;
}

inline void save_sae_weights(const SaeWeights& w, const std::filesystem::path& path) {
  const auto bytes = serialize_sae_weights(w);
  write_file_atomic(path, bytes.data(), bytes.size());
}

inline SaeWeights load_sae_weights(const std::filesystem::path& path) {
  return parse_sae_weights(io_detail::read_all(path), path.string());
}

enum class NanPolicy { kReject, kAllow };

inline std::vector<std::uint8_t> serialize_embedding_matrix(const RowMatrix& m) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + 4 * static_cast<std::size_t>(m.size()));
  out.insert(out.end(), {'S', 'E', 'M', 'E'});
  io_detail::put_u32(out, 1);
  io_detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  io_detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) io_detail::put_f32(out, m(i, j));
  return out;
}

inline RowMatrix parse_embedding_matrix(const std::vector<std::uint8_t>& bytes,
                                        NanPolicy policy = NanPolicy::kReject,
                                        const std::string& what = "SEME") {
  const auto h = io_detail::parse_header(bytes, "SEME", what);
  io_detail::check_payload(bytes.size(), std::uint64_t{h.a} * h.b, what);
  RowMatrix m(static_cast<Index>(h.a), static_cast<Index>(h.b));
  const std::uint8_t* p = bytes.data() + 16;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j, p += 4) m(i, j) = io_detail::get_f32(p);
  if (policy == NanPolicy::kReject && !m.allFinite()) {
    throw FormatError(what + ": non-finite values in payload");
  }
  return m;
}

inline void write_embedding_matrix(const RowMatrix& m, const std::filesystem::path& path) {
  const auto bytes = serialize_embedding_matrix(m);
  write_file_atomic(path, bytes.data(), bytes.size());
}

inline RowMatrix read_embedding_matrix(const std::filesystem::path& path,
                                       NanPolicy policy = NanPolicy::kReject) {
  return parse_embedding_matrix(io_detail::read_all(path), policy, path.string());
}

}  // namespace sem
