// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cue/common.hpp"

namespace cue {

/// SAE feature address, written `layer:index`.
struct FeatureId {
  std::uint32_t layer = 0;
  std::uint32_t index = 0;

  auto operator<=>(const FeatureId&) const = default;

  std::string str() const { return concat(layer, ':', index); }
};

/// One layer's activation vector in sparse form. Indices strictly increase;
/// zeros are never stored.
struct LayerActivations {
  struct Entry {
    std::uint32_t index;
    float value;
    bool operator==(const Entry&) const = default;
  };
  std::vector<Entry> entries;

  bool operator==(const LayerActivations&) const = default;

  float at(std::uint32_t index) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), index,
                               [](const Entry& e, std::uint32_t i) { return e.index < i; });
    return (it != entries.end() && it->index == index) ? it->value : 0.0f;
  }

  std::vector<float> densify(std::size_t width) const {
    std::vector<float> out(width, 0.0f);
    for (const auto& e : entries) out.at(e.index) = e.value;
    return out;
  }
};

/// Drops zeros; negative inputs are clamped to zero (and so dropped too).
template <typename T>
LayerActivations sparsify(std::span<const T> dense) {
  LayerActivations out;
  for (std::size_t i = 0; i < dense.size(); ++i) {
    const auto v = static_cast<float>(dense[i]);
    if (v > 0.0f) out.entries.push_back({static_cast<std::uint32_t>(i), v});
  }
  return out;
}

template <typename T>
LayerActivations sparsify(const std::vector<T>& dense) {
  return sparsify(std::span<const T>(dense));
}

/// Per-feature maximum over token positions.
inline LayerActivations max_pool_tokens(std::span<const LayerActivations> tokens, std::size_t width) {
  if (tokens.empty()) fail(ErrorKind::numeric, "max_pool_tokens: empty token list");
  std::vector<float> pooled(width, 0.0f);
  for (const auto& tok : tokens) {
    for (const auto& e : tok.entries) {
      if (e.index >= width)
        fail(ErrorKind::numeric, "max_pool_tokens: index ", e.index, " >= width ", width);
      pooled[e.index] = std::max(pooled[e.index], e.value);
    }
  }
  return sparsify(std::span<const float>(pooled));
}

/// Dense overload; every token vector must have the same width.
template <typename T>
LayerActivations max_pool_tokens(const std::vector<std::vector<T>>& tokens) {
  if (tokens.empty()) fail(ErrorKind::numeric, "max_pool_tokens: empty token list");
  const auto width = tokens.front().size();
  std::vector<float> pooled(width, 0.0f);
  for (const auto& tok : tokens) {
    if (tok.size() != width) fail(ErrorKind::numeric, "max_pool_tokens: ragged token widths");
    for (std::size_t j = 0; j < width; ++j)
      pooled[j] = std::max(pooled[j], static_cast<float>(tok[j]));
  }
  return sparsify(std::span<const float>(pooled));
}

/// One assertion's max-pooled activations, keyed by layer.
struct ActivationRecord {
  std::string assertion_id;
  std::string label;
  std::map<std::uint32_t, LayerActivations> per_layer;

  bool operator==(const ActivationRecord&) const = default;

  float value(FeatureId f) const {
    auto it = per_layer.find(f.layer);
    return it == per_layer.end() ? 0.0f : it->second.at(f.index);
  }
};

struct DumpManifest {
  std::string model_id;
  std::vector<std::uint32_t> layers;
  std::vector<std::uint32_t> sae_width;  // aligned with layers
  std::vector<std::uint32_t> d_model;    // aligned with layers
  std::uint64_t record_count = 0;

  bool operator==(const DumpManifest&) const = default;

  std::optional<std::size_t> slot(std::uint32_t layer) const {
    auto it = std::find(layers.begin(), layers.end(), layer);
    if (it == layers.end()) return std::nullopt;
    return static_cast<std::size_t>(it - layers.begin());
  }
  bool has_layer(std::uint32_t layer) const { return slot(layer).has_value(); }
  std::uint32_t width_of(std::uint32_t layer) const { return sae_width.at(checked_slot(layer)); }
  std::uint32_t d_model_of(std::uint32_t layer) const { return d_model.at(checked_slot(layer)); }

  void validate() const {
    if (sae_width.size() != layers.size() || d_model.size() != layers.size())
      fail(ErrorKind::format, "manifest: sae_width/d_model must align with layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (i > 0 && layers[i] <= layers[i - 1])
        fail(ErrorKind::format, "manifest: layers must be strictly increasing");
      if (sae_width[i] == 0 || d_model[i] == 0)
        fail(ErrorKind::format, "manifest: widths must be positive");
    }
  }

 private:
  std::size_t checked_slot(std::uint32_t layer) const {
    auto s = slot(layer);
    if (!s) fail(ErrorKind::format, "layer ", layer, " not in manifest");
    return *s;
  }
};

inline nlohmann::json to_json(const DumpManifest& m) {
  return {{"format", "cue-activation-dump"}, {"version", 1},
          {"model_id", m.model_id},          {"layers", m.layers},
          {"sae_width", m.sae_width},        {"d_model", m.d_model},
          {"record_count", m.record_count},  {"records_file", "records.bin"}};
}

inline DumpManifest manifest_from_json(const nlohmann::json& j) {
  DumpManifest m;
  try {
    if (j.at("format") != "cue-activation-dump" || j.at("version") != 1)
      fail(ErrorKind::format, "manifest: unsupported format/version");
    m.model_id = j.at("model_id").get<std::string>();
    m.layers = j.at("layers").get<std::vector<std::uint32_t>>();
    m.sae_width = j.at("sae_width").get<std::vector<std::uint32_t>>();
    m.d_model = j.at("d_model").get<std::vector<std::uint32_t>>();
    m.record_count = j.at("record_count").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "manifest: ", e.what());
  }
  m.validate();
  return m;
}

namespace wire {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline void put_varint(std::string& out, std::uint64_t v) {
  while (v >= 0x80) {
    out.push_back(static_cast<char>((v & 0x7f) | 0x80));
    v >>= 7;
  }
  out.push_back(static_cast<char>(v));
}

inline std::uint32_t crc32_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

/// Bounds-checked little-endian cursor over a byte buffer.
class Reader {
 public:
  Reader(std::string_view data, std::string origin) : data_(data), origin_(std::move(origin)) {}

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }
  std::string_view slice(std::size_t from, std::size_t to) const { return data_.substr(from, to - from); }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }

  std::uint64_t varint() {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
      need(1);
      const auto b = static_cast<unsigned char>(data_[pos_++]);
      v |= static_cast<std::uint64_t>(b & 0x7f) << shift;
      if (!(b & 0x80)) return v;
    }
    fail(ErrorKind::format, origin_, ": varint too long at byte ", pos_);
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) fail(ErrorKind::format, origin_, ": truncated at byte ", pos_);
  }

  std::string_view data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace wire

/// Serializes one record: id and label as u32-length-prefixed UTF-8, then for
/// every manifest layer (in manifest order) a varint entry count followed by
/// (u32 index, f32 value) pairs, then a CRC32 of the preceding record bytes.
/// Manifest layers absent from the record are written as empty blocks.
inline std::string encode_record(const DumpManifest& m, const ActivationRecord& r) {
  for (const auto& [layer, acts] : r.per_layer) {
    if (!m.has_layer(layer))
      fail(ErrorKind::format, "record '", r.assertion_id, "' references layer ", layer,
           " absent from manifest");
    const auto width = m.width_of(layer);
    std::int64_t prev = -1;
    for (const auto& e : acts.entries) {
      if (static_cast<std::int64_t>(e.index) <= prev || e.index >= width)
        fail(ErrorKind::format, "record '", r.assertion_id, "' layer ", layer,
             ": indices must be strictly increasing and < ", width);
      if (!(e.value > 0.0f) || !std::isfinite(e.value))
        fail(ErrorKind::format, "record '", r.assertion_id, "' layer ", layer,
             ": stored values must be finite and > 0");
      prev = e.index;
    }
  }
  std::string out;
  wire::put_u32(out, static_cast<std::uint32_t>(r.assertion_id.size()));
  out += r.assertion_id;
  wire::put_u32(out, static_cast<std::uint32_t>(r.label.size()));
  out += r.label;
  for (auto layer : m.layers) {
    auto it = r.per_layer.find(layer);
    const auto* entries = it == r.per_layer.end() ? nullptr : &it->second.entries;
    wire::put_varint(out, entries ? entries->size() : 0);
    if (!entries) continue;
    for (const auto& e : *entries) {
      wire::put_u32(out, e.index);
      wire::put_f32(out, e.value);
    }
  }
  wire::put_u32(out, wire::crc32_of(out));
  return out;
}

/// Decodes one record; every manifest layer appears in the result.
inline ActivationRecord decode_record(const DumpManifest& m, wire::Reader& in) {
  const auto start = in.pos();
  ActivationRecord r;
  r.assertion_id = in.bytes(in.u32());
  r.label = in.bytes(in.u32());
  for (std::size_t s = 0; s < m.layers.size(); ++s) {
    auto& acts = r.per_layer[m.layers[s]];
    const auto n = in.varint();
    if (n > m.sae_width[s])
      fail(ErrorKind::format, "record '", r.assertion_id, "': entry count exceeds SAE width");
    acts.entries.reserve(n);
    for (std::uint64_t k = 0; k < n; ++k) {
      const auto idx = in.u32();
      const auto val = in.f32();
      if (idx >= m.sae_width[s] || (!acts.entries.empty() && idx <= acts.entries.back().index) ||
          !(val > 0.0f) || !std::isfinite(val))
        fail(ErrorKind::format, "record '", r.assertion_id, "': invalid entry in layer ", m.layers[s]);
      acts.entries.push_back({idx, val});
    }
  }
  const auto crc = wire::crc32_of(in.slice(start, in.pos()));
  if (in.u32() != crc) fail(ErrorKind::format, "record '", r.assertion_id, "': checksum failure");
  return r;
}

/// Streams records into `<dir>/records.bin`; `close()` writes
/// `<dir>/manifest.json` with the final record count.
class DumpWriter {
 public:
  DumpWriter(const std::filesystem::path& dir, DumpManifest manifest)
      : dir_(dir), manifest_(std::move(manifest)) {
    manifest_.validate();
    std::filesystem::create_directories(dir_);
    out_.open(dir_ / "records.bin", std::ios::binary | std::ios::trunc);
    if (!out_) fail(ErrorKind::input, "cannot write ", (dir_ / "records.bin").string());
    manifest_.record_count = 0;
  }

  void append(const ActivationRecord& r) {
    const auto bytes = encode_record(manifest_, r);
    out_.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    ++manifest_.record_count;
  }

  const DumpManifest& close() {
    out_.close();
    if (!out_) fail(ErrorKind::input, "failed writing ", (dir_ / "records.bin").string());
    write_file_bytes((dir_ / "manifest.json").string(), to_json(manifest_).dump(2) + "\n");
    return manifest_;
  }

 private:
  std::filesystem::path dir_;
  DumpManifest manifest_;
  std::ofstream out_;
};

struct Dump {
  DumpManifest manifest;
  std::vector<ActivationRecord> records;
};

inline DumpManifest write_dump(const std::filesystem::path& dir, const DumpManifest& manifest,
                               std::span<const ActivationRecord> records) {
  DumpWriter w(dir, manifest);
  for (const auto& r : records) w.append(r);
  return w.close();
}

inline DumpManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = (dir / "manifest.json").string();
  const auto text = read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, path, ": ", e.what());
  }
  return manifest_from_json(j);
}

/// Reads a dump directory. Uses nothing but the two files inside it.
inline Dump read_dump(const std::filesystem::path& dir) {
  Dump d;
  d.manifest = read_manifest(dir);
  const auto path = (dir / "records.bin").string();
  const auto bytes = read_file_bytes(path);
  wire::Reader in(bytes, path);
  d.records.reserve(d.manifest.record_count);
  while (!in.done()) {
    if (d.records.size() == d.manifest.record_count)
      fail(ErrorKind::format, path, ": more records than manifest record_count");
    d.records.push_back(decode_record(d.manifest, in));
  }
  if (d.records.size() != d.manifest.record_count)
    fail(ErrorKind::format, path, ": truncated, ", d.records.size(), " of ", d.manifest.record_count,
         " records present");
  return d;
}

/// Dense row-major matrix of SAE decoder weights, rows = SAE width,
/// cols = d_model. Stored as float32, held widened.
struct DecoderMatrix {
  std::uint32_t layer = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<double> values;

  bool operator==(const DecoderMatrix&) const = default;

  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values).subspan(r * cols, cols);
  }
};

inline constexpr std::size_t kMatrixHeaderBytes = 64;

inline std::string decoder_filename(std::uint32_t layer) { return concat("decoder_L", layer, ".bin"); }

/// 64-byte header (compact JSON `{"layer":..,"rows":..,"cols":..}` padded with
/// spaces, final byte '\n') followed by rows*cols little-endian float32.
inline std::string encode_decoder(const DecoderMatrix& m) {
  if (m.values.size() != static_cast<std::size_t>(m.rows) * m.cols)
    fail(ErrorKind::format, "decoder L", m.layer, ": value count does not match dims");
  std::string header = nlohmann::json{{"layer", m.layer}, {"rows", m.rows}, {"cols", m.cols}}.dump();
  if (header.size() >= kMatrixHeaderBytes) fail(ErrorKind::format, "decoder header too long");
  header.resize(kMatrixHeaderBytes - 1, ' ');
  header.push_back('\n');
  std::string out = std::move(header);
  out.reserve(kMatrixHeaderBytes + 4 * m.values.size());
  for (double v : m.values) {
    const auto f = static_cast<float>(v);
    if (!std::isfinite(f)) fail(ErrorKind::numeric, "decoder L", m.layer, ": non-finite value");
    wire::put_f32(out, f);
  }
  return out;
}

inline void write_decoder(const std::filesystem::path& path, const DecoderMatrix& m) {
  write_file_bytes(path.string(), encode_decoder(m));
}

struct MatrixDims {
  std::uint32_t rows;
  std::uint32_t cols;
};

inline DecoderMatrix decode_decoder(std::string_view bytes, const std::string& origin,
                                    std::optional<MatrixDims> expect = std::nullopt) {
  if (bytes.size() < kMatrixHeaderBytes) fail(ErrorKind::format, origin, ": truncated header");
  DecoderMatrix m;
  try {
    const auto h = nlohmann::json::parse(bytes.substr(0, kMatrixHeaderBytes));
    m.layer = h.at("layer").get<std::uint32_t>();
    m.rows = h.at("rows").get<std::uint32_t>();
    m.cols = h.at("cols").get<std::uint32_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, origin, ": bad header: ", e.what());
  }
  if (expect && (expect->rows != m.rows || expect->cols != m.cols))
    fail(ErrorKind::format, origin, ": dims ", m.rows, "x", m.cols, " do not match expected ",
         expect->rows, "x", expect->cols);
  const std::size_t n = static_cast<std::size_t>(m.rows) * m.cols;
  const auto payload = bytes.substr(kMatrixHeaderBytes);
  if (payload.size() < 4 * n)
    fail(ErrorKind::format, origin, ": truncated payload (", payload.size(), " of ", 4 * n, " bytes)");
  if (payload.size() > 4 * n) fail(ErrorKind::format, origin, ": trailing bytes after payload");
  wire::Reader in(payload, origin);
  m.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float f = in.f32();
    if (!std::isfinite(f)) fail(ErrorKind::numeric, origin, ": non-finite value at element ", i);
    m.values[i] = f;
  }
  return m;
}

inline DecoderMatrix read_decoder(const std::filesystem::path& path,
                                  std::optional<MatrixDims> expect = std::nullopt) {
  return decode_decoder(read_file_bytes(path.string()), path.string(), expect);
}

/// Reads `decoder_L{layer}.bin` checked against the manifest's dims.
inline DecoderMatrix read_decoder(const std::filesystem::path& dir, const DumpManifest& m,
                                  std::uint32_t layer) {
  auto d = read_decoder(dir / decoder_filename(layer), MatrixDims{m.width_of(layer), m.d_model_of(layer)});
  if (d.layer != layer) fail(ErrorKind::format, decoder_filename(layer), ": header layer mismatch");
  return d;
}

}  // namespace cue
