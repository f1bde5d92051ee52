// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cue/activations.hpp"
#include "cue/common.hpp"
#include "cue/prototypes.hpp"
#include "cue/selection.hpp"

namespace cue {

/// Feature-space direction toward one label, aligned with the selection.
struct SteeringDirection {
  std::string target;
  std::vector<double> delta;
};

/// Target prototype minus the mean of all other prototypes (raw, uncentered).
inline SteeringDirection steering_delta(const PrototypeSet& protos, const std::string& target) {
  if (protos.labels.size() < 2) fail(ErrorKind::config, "steering needs at least two labels");
  const auto t = protos.slot(target);
  const std::size_t d = protos.dim();
  std::vector<double> others(d, 0.0);
  for (std::size_t c = 0; c < protos.labels.size(); ++c) {
    if (c == t) continue;
    for (std::size_t i = 0; i < d; ++i) others[i] += protos.prototypes[c][i];
  }
  const auto k = static_cast<double>(protos.labels.size() - 1);
  SteeringDirection dir{target, std::vector<double>(d)};
  for (std::size_t i = 0; i < d; ++i) dir.delta[i] = protos.prototypes[t][i] - others[i] / k;
  return dir;
}

struct DecodeOptions {
  /// Keep only layers with layer % stride == 0.
  std::uint32_t layer_stride = 1;
  /// Rescale each per-layer vector to unit L2 norm before alpha is applied.
  bool normalize = false;
};

/// Per-layer residual-space vectors plus the global strength alpha.
struct SteeringVectorSet {
  std::map<std::uint32_t, std::vector<double>> per_layer;
  double alpha = 1.0;
  std::string target;
  std::uint64_t selection_hash = 0;

  std::vector<std::uint32_t> intervened_layers() const {
    std::vector<std::uint32_t> out;
    for (const auto& [l, _] : per_layer) out.push_back(l);
    return out;
  }
};

/// Scatters delta into each owning layer's SAE basis and maps it through the
/// decoder: v_L = W_dec(L)^T delta_L. Layers without selected features (or
/// excluded by the stride) are omitted.
inline SteeringVectorSet decode_delta(const SteeringDirection& dir, const SelectionResult& selection,
                                      const std::map<std::uint32_t, DecoderMatrix>& decoders,
                                      const DecodeOptions& opt = {}) {
  if (dir.delta.size() != selection.selected.size())
    fail(ErrorKind::numeric, "decode_delta: delta has ", dir.delta.size(), " entries, selection has ",
         selection.selected.size());
  if (opt.layer_stride == 0) fail(ErrorKind::config, "layer stride must be >= 1");
  SteeringVectorSet out;
  out.target = dir.target;
  out.selection_hash = selection_hash(selection);
  for (std::size_t i = 0; i < dir.delta.size(); ++i) {
    const auto f = selection.selected[i];
    if (f.layer % opt.layer_stride != 0) continue;
    auto it = decoders.find(f.layer);
    if (it == decoders.end()) fail(ErrorKind::input, "no decoder for layer ", f.layer);
    const auto& dec = it->second;
    if (f.index >= dec.rows)
      fail(ErrorKind::format, "feature ", f.str(), " outside decoder width ", dec.rows);
    auto& v = out.per_layer.try_emplace(f.layer, dec.cols, 0.0).first->second;
    if (v.size() != dec.cols) fail(ErrorKind::format, "decoder width mismatch at layer ", f.layer);
    const auto row = dec.row(f.index);
    for (std::size_t k = 0; k < dec.cols; ++k) v[k] += dir.delta[i] * row[k];
  }
  if (opt.normalize)
    for (auto& [_, v] : out.per_layer) {
      const double n = vec::norm(v);
      if (n > 0.0)
        for (auto& x : v) x /= n;
    }
  return out;
}

/// h + alpha * v for hooked layers; other layers pass through.
inline std::vector<double> apply_steering(std::span<const double> h, std::uint32_t layer,
                                          const SteeringVectorSet& set) {
  std::vector<double> out(h.begin(), h.end());
  auto it = set.per_layer.find(layer);
  if (it == set.per_layer.end()) return out;
  if (it->second.size() != h.size())
    fail(ErrorKind::numeric, "apply_steering: residual has ", h.size(), " dims, layer ", layer, " vector has ",
         it->second.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += set.alpha * it->second[k];
  return out;
}

inline void apply_steering_inplace(std::span<double> h, std::uint32_t layer, const SteeringVectorSet& set) {
  auto it = set.per_layer.find(layer);
  if (it == set.per_layer.end()) return;
  if (it->second.size() != h.size()) fail(ErrorKind::numeric, "apply_steering: dim mismatch at layer ", layer);
  for (std::size_t k = 0; k < h.size(); ++k) h[k] += set.alpha * it->second[k];
}

struct AlphaPolicy {
  std::vector<double> candidates{0.25, 0.5, 1.0, 2.0};
  double fluency_floor = 5.0;

  void validate() const {
    for (std::size_t i = 0; i < candidates.size(); ++i)
      if (!(candidates[i] > 0.0) || (i > 0 && candidates[i] <= candidates[i - 1]))
        fail(ErrorKind::config, "alpha candidates must be positive and strictly increasing");
  }
};

struct AlphaScores {
  double cultural = 0.0;
  double fluency = 0.0;
};

/// Smallest candidate whose steered cultural score beats the explicit baseline
/// while staying at or above the fluency floor.
inline std::optional<double> select_alpha(const std::map<double, AlphaScores>& table, double explicit_baseline,
                                          const AlphaPolicy& policy = {}) {
  if (table.empty()) fail(ErrorKind::config, "select_alpha: empty score table");
  policy.validate();
  for (double a : policy.candidates) {
    auto it = table.find(a);
    if (it == table.end()) continue;
    if (it->second.cultural > explicit_baseline && it->second.fluency >= policy.fluency_floor) return a;
  }
  return std::nullopt;
}

inline std::string steering_filename(std::uint32_t layer) { return concat("steer_L", layer, ".bin"); }

/// Writes `steering.json` plus one `steer_L{layer}.bin` per layer. Each
/// payload file uses the decoder layout with rows = 1, cols = d_model.
inline void write_steering(const std::filesystem::path& dir, const SteeringVectorSet& set) {
  std::filesystem::create_directories(dir);
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& [layer, v] : set.per_layer) {
    DecoderMatrix m{layer, 1, static_cast<std::uint32_t>(v.size()), v};
    write_decoder(dir / steering_filename(layer), m);
    layers.push_back({{"layer", layer}, {"d_model", v.size()}, {"file", steering_filename(layer)}});
  }
  const nlohmann::json header{{"format", "cue-steering"},
                              {"version", 1},
                              {"alpha", set.alpha},
                              {"target", set.target},
                              {"selection_hash", hex64(set.selection_hash)},
                              {"layers", layers}};
  write_file_bytes((dir / "steering.json").string(), header.dump(2) + "\n");
}

inline SteeringVectorSet read_steering(const std::filesystem::path& dir) {
  const auto path = (dir / "steering.json").string();
  SteeringVectorSet set;
  try {
    const auto h = nlohmann::json::parse(read_file_bytes(path));
    if (h.at("format") != "cue-steering") fail(ErrorKind::format, path, ": not a steering header");
    set.alpha = h.at("alpha").get<double>();
    set.target = h.at("target").get<std::string>();
    set.selection_hash = std::stoull(h.at("selection_hash").get<std::string>(), nullptr, 16);
    for (const auto& l : h.at("layers")) {
      const auto layer = l.at("layer").get<std::uint32_t>();
      const auto dm = l.at("d_model").get<std::uint32_t>();
      auto m = read_decoder(dir / l.at("file").get<std::string>(), MatrixDims{1, dm});
      set.per_layer[layer] = std::move(m.values);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, path, ": ", e.what());
  }
  return set;
}

}  // namespace cue
