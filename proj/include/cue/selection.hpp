// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cue/activations.hpp"
#include "cue/common.hpp"

namespace cue {

/// How a feature's activations are discretized before the MI sum.
struct QuantizationScheme {
  enum class Kind { binary, quantile };
  Kind kind = Kind::binary;
  std::uint32_t bins = 2;   // quantile only
  double threshold = 0.0;   // binary only: value > threshold -> 1

  static QuantizationScheme binary(double threshold = 0.0) { return {Kind::binary, 2, threshold}; }
  static QuantizationScheme quantile(std::uint32_t k) {
    if (k < 2) fail(ErrorKind::config, "quantile scheme needs >= 2 bins");
    return {Kind::quantile, k, 0.0};
  }

  /// Accepts "binary", "binary:<threshold>" or "quantile:<K>".
  static QuantizationScheme parse(const std::string& s) {
    const auto parts = split(s, ':');
    try {
      if (parts[0] == "binary" && parts.size() == 1) return binary();
      if (parts[0] == "binary" && parts.size() == 2) return binary(std::stod(parts[1]));
      if (parts[0] == "quantile" && parts.size() == 2)
        return quantile(static_cast<std::uint32_t>(std::stoul(parts[1])));
    } catch (const std::logic_error&) {
    }
    fail(ErrorKind::config, "unknown quantization scheme '", s, "'");
  }

  std::string str() const {
    return kind == Kind::binary ? concat("binary:", threshold) : concat("quantile:", bins);
  }
};

namespace detail {

// Linear-interpolation quantile of sorted data at probability p.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace detail

/// Binary: 1 if value > threshold else 0.
/// Quantile: bin 0 holds exact zeros; nonzero values go to bins 1..K split at
/// the K-quantiles (linear interpolation) of the nonzero values. A value equal
/// to a cut point falls in the lower bin.
inline std::vector<std::uint32_t> quantize(std::span<const double> values, const QuantizationScheme& scheme) {
  std::vector<std::uint32_t> out(values.size(), 0);
  if (scheme.kind == QuantizationScheme::Kind::binary) {
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] > scheme.threshold ? 1 : 0;
    return out;
  }
  std::vector<double> nonzero;
  for (double v : values)
    if (v != 0.0) nonzero.push_back(v);
  if (nonzero.empty()) return out;
  std::sort(nonzero.begin(), nonzero.end());
  std::vector<double> cuts;
  for (std::uint32_t k = 1; k < scheme.bins; ++k)
    cuts.push_back(detail::quantile_sorted(nonzero, static_cast<double>(k) / scheme.bins));
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] == 0.0) continue;
    const auto above = std::count_if(cuts.begin(), cuts.end(), [&](double c) { return values[i] > c; });
    out[i] = 1 + static_cast<std::uint32_t>(above);
  }
  return out;
}

/// Plug-in MI in bits from a joint count table (rows: bins, cols: labels).
inline double mutual_information_from_counts(const std::vector<std::vector<std::uint64_t>>& joint) {
  std::vector<double> row_tot(joint.size(), 0.0);
  std::vector<double> col_tot;
  double n = 0.0;
  for (std::size_t a = 0; a < joint.size(); ++a) {
    if (col_tot.size() < joint[a].size()) col_tot.resize(joint[a].size(), 0.0);
    for (std::size_t c = 0; c < joint[a].size(); ++c) {
      row_tot[a] += static_cast<double>(joint[a][c]);
      col_tot[c] += static_cast<double>(joint[a][c]);
      n += static_cast<double>(joint[a][c]);
    }
  }
  const auto occupied_rows = std::count_if(row_tot.begin(), row_tot.end(), [](double t) { return t > 0; });
  if (occupied_rows <= 1) return 0.0;
  double bits = 0.0;
  for (std::size_t a = 0; a < joint.size(); ++a)
    for (std::size_t c = 0; c < joint[a].size(); ++c) {
      const auto nac = static_cast<double>(joint[a][c]);
      if (nac == 0.0) continue;
      bits += nac / n * std::log2(nac * n / (row_tot[a] * col_tot[c]));
    }
  return std::max(bits, 0.0);
}

/// Plug-in estimate of I(A; C) in bits from paired samples.
inline double mutual_information(std::span<const std::uint32_t> bins, std::span<const std::uint32_t> labels) {
  if (bins.size() != labels.size())
    fail(ErrorKind::numeric, "mutual_information: length mismatch (", bins.size(), " vs ", labels.size(), ")");
  if (bins.empty()) fail(ErrorKind::numeric, "mutual_information: no samples");
  const auto n_bins = *std::max_element(bins.begin(), bins.end()) + 1;
  const auto n_labels = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<std::uint64_t>> joint(n_bins, std::vector<std::uint64_t>(n_labels, 0));
  for (std::size_t i = 0; i < bins.size(); ++i) ++joint[bins[i]][labels[i]];
  return mutual_information_from_counts(joint);
}

struct MIScore {
  FeatureId feature;
  double bits = 0.0;
  bool operator==(const MIScore&) const = default;
};

/// Label index per record, labels numbered by first appearance.
struct LabelIndex {
  std::vector<std::string> names;
  std::vector<std::uint32_t> ids;  // one per record

  std::uint32_t id_of(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) fail(ErrorKind::config, "unknown label '", name, "'");
    return static_cast<std::uint32_t>(it - names.begin());
  }
};

inline LabelIndex index_labels(std::span<const ActivationRecord> records) {
  LabelIndex li;
  for (const auto& r : records) {
    auto it = std::find(li.names.begin(), li.names.end(), r.label);
    if (it == li.names.end()) {
      li.ids.push_back(static_cast<std::uint32_t>(li.names.size()));
      li.names.push_back(r.label);
    } else {
      li.ids.push_back(static_cast<std::uint32_t>(it - li.names.begin()));
    }
  }
  return li;
}

/// MI of every feature that is active in at least one record. Features never
/// active are constant and score exactly 0, so they are not listed.
inline std::vector<MIScore> score_features(std::span<const ActivationRecord> records,
                                           const QuantizationScheme& scheme) {
  const auto li = index_labels(records);
  const std::size_t n = records.size();
  std::map<FeatureId, std::vector<std::pair<std::uint32_t, float>>> columns;
  for (std::size_t r = 0; r < n; ++r)
    for (const auto& [layer, acts] : records[r].per_layer)
      for (const auto& e : acts.entries)
        columns[{layer, e.index}].push_back({static_cast<std::uint32_t>(r), e.value});

  std::vector<std::uint64_t> label_totals(li.names.size(), 0);
  for (auto id : li.ids) ++label_totals[id];

  const bool sparse_binary =
      scheme.kind == QuantizationScheme::Kind::binary && scheme.threshold >= 0.0;
  std::vector<MIScore> scores;
  scores.reserve(columns.size());
  std::vector<double> dense;
  for (const auto& [feature, column] : columns) {
    double bits;
    if (sparse_binary) {
      // Zeros are inactive, so the 2 x |C| table follows from the active rows.
      std::vector<std::vector<std::uint64_t>> joint(2, std::vector<std::uint64_t>(li.names.size(), 0));
      for (const auto& [r, v] : column)
        if (v > scheme.threshold) ++joint[1][li.ids[r]];
      for (std::size_t c = 0; c < label_totals.size(); ++c) joint[0][c] = label_totals[c] - joint[1][c];
      bits = mutual_information_from_counts(joint);
    } else {
      dense.assign(n, 0.0);
      for (const auto& [r, v] : column) dense[r] = v;
      const auto bins = quantize(dense, scheme);
      bits = mutual_information(bins, li.ids);
    }
    scores.push_back({feature, bits});
  }
  return scores;
}

/// Features ranked by MI and the minimal prefix reaching rho of total MI.
struct SelectionResult {
  std::vector<MIScore> ranked;
  double rho = 0.1;
  std::vector<FeatureId> selected;
  double total_bits = 0.0;

  bool operator==(const SelectionResult&) const = default;
};

/// Descending bits, ties by ascending (layer, index).
inline void rank_scores(std::vector<MIScore>& scores) {
  std::sort(scores.begin(), scores.end(), [](const MIScore& a, const MIScore& b) {
    if (a.bits != b.bits) return a.bits > b.bits;
    return a.feature < b.feature;
  });
}

inline SelectionResult select_features(std::vector<MIScore> scores, double rho) {
  if (!(rho > 0.0 && rho <= 1.0)) fail(ErrorKind::config, "rho must be in (0, 1], got ", rho);
  rank_scores(scores);
  SelectionResult res;
  res.rho = rho;
  for (const auto& s : scores) {
    if (!(s.bits >= 0.0) || !std::isfinite(s.bits))
      fail(ErrorKind::numeric, "invalid MI score for ", s.feature.str());
    res.total_bits += s.bits;
  }
  if (res.total_bits <= 0.0)
    fail(ErrorKind::numeric, "empty selection: no feature carries information about the label");
  const double cut = rho * res.total_bits;
  double cumulative = 0.0;
  for (const auto& s : scores) {
    res.selected.push_back(s.feature);
    cumulative += s.bits;
    if (cumulative >= cut) break;
  }
  res.ranked = std::move(scores);
  return res;
}

/// Number of selected features per layer.
inline std::map<std::uint32_t, std::size_t> layer_distribution(const SelectionResult& sel) {
  std::map<std::uint32_t, std::size_t> out;
  for (const auto& f : sel.selected) ++out[f.layer];
  return out;
}

struct LayerShareRow {
  std::uint32_t layer;
  std::size_t count_a, count_b;
  double share_a, share_b;
};

/// Side-by-side per-layer counts and shares of two selections (e.g. selections
/// computed on a base corpus and on an augmented one).
inline std::vector<LayerShareRow> compare_layer_distributions(const SelectionResult& a,
                                                              const SelectionResult& b) {
  const auto da = layer_distribution(a);
  const auto db = layer_distribution(b);
  std::map<std::uint32_t, LayerShareRow> rows;
  for (const auto& [l, c] : da) rows[l] = {l, c, 0, 0, 0};
  for (const auto& [l, c] : db) {
    rows.try_emplace(l, LayerShareRow{l, 0, 0, 0, 0});
    rows[l].count_b = c;
  }
  std::vector<LayerShareRow> out;
  for (auto& [l, row] : rows) {
    row.share_a = a.selected.empty() ? 0.0 : static_cast<double>(row.count_a) / a.selected.size();
    row.share_b = b.selected.empty() ? 0.0 : static_cast<double>(row.count_b) / b.selected.size();
    out.push_back(row);
  }
  return out;
}

inline nlohmann::json to_json(const SelectionResult& s) {
  auto score_json = [](const MIScore& m) {
    return nlohmann::json{{"layer", m.feature.layer}, {"index", m.feature.index}, {"bits", m.bits}};
  };
  nlohmann::json selected = nlohmann::json::array();
  for (std::size_t i = 0; i < s.selected.size(); ++i) selected.push_back(score_json(s.ranked.at(i)));
  nlohmann::json ranked = nlohmann::json::array();
  for (const auto& m : s.ranked)
    if (m.bits > 0.0) ranked.push_back(score_json(m));
  nlohmann::json dist = nlohmann::json::array();
  for (const auto& [l, c] : layer_distribution(s)) dist.push_back({{"layer", l}, {"count", c}});
  return {{"rho", s.rho},
          {"total_bits", s.total_bits},
          {"selected", selected},
          {"ranked", ranked},
          {"layer_distribution", dist}};
}

inline SelectionResult selection_from_json(const nlohmann::json& j) {
  SelectionResult s;
  try {
    s.rho = j.at("rho").get<double>();
    s.total_bits = j.at("total_bits").get<double>();
    const auto& src = j.contains("ranked") ? j.at("ranked") : j.at("selected");
    for (const auto& e : src)
      s.ranked.push_back({{e.at("layer").get<std::uint32_t>(), e.at("index").get<std::uint32_t>()},
                          e.at("bits").get<double>()});
    for (const auto& e : j.at("selected"))
      s.selected.push_back({e.at("layer").get<std::uint32_t>(), e.at("index").get<std::uint32_t>()});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "selection: ", e.what());
  }
  return s;
}

/// Hash of the ordered selected feature list.
inline std::uint64_t selection_hash(const SelectionResult& s) {
  std::string key;
  for (const auto& f : s.selected) key += f.str() + ';';
  return fnv1a64(key);
}

}  // namespace cue
