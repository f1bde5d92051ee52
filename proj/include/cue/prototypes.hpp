// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cue/activations.hpp"
#include "cue/common.hpp"
#include "cue/selection.hpp"

namespace cue {

/// An input's activations restricted to the selected features, in selection order.
using CueVector = std::vector<double>;

inline CueVector cue_project(const ActivationRecord& record, const SelectionResult& selection) {
  CueVector v(selection.selected.size(), 0.0);
  for (std::size_t i = 0; i < selection.selected.size(); ++i) {
    const auto f = selection.selected[i];
    auto it = record.per_layer.find(f.layer);
    if (it == record.per_layer.end())
      fail(ErrorKind::format, "record '", record.assertion_id, "' has no layer ", f.layer,
           " required by selected feature ", f.str());
    v[i] = it->second.at(f.index);
  }
  return v;
}

namespace vec {

inline double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity; 0 when either vector is zero.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

inline std::vector<double> sub(std::span<const double> a, std::span<const double> b) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

}  // namespace vec

/// Per-label mean CuE vectors, their unweighted mean, and the centered rows.
struct PrototypeSet {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> prototypes;  // |C| x |S|
  std::vector<double> global_mean;              // |S|
  std::vector<std::vector<double>> centered;    // |C| x |S|
  std::vector<std::size_t> counts;              // records per label

  std::size_t dim() const { return global_mean.size(); }

  std::size_t slot(const std::string& label) const {
    auto it = std::find(labels.begin(), labels.end(), label);
    if (it == labels.end()) fail(ErrorKind::config, "unknown label '", label, "'");
    return static_cast<std::size_t>(it - labels.begin());
  }

  /// Recomputes global_mean and centered from prototypes.
  void recenter() {
    const std::size_t d = prototypes.empty() ? 0 : prototypes.front().size();
    global_mean.assign(d, 0.0);
    for (const auto& p : prototypes)
      for (std::size_t i = 0; i < d; ++i) global_mean[i] += p[i];
    for (auto& m : global_mean) m /= static_cast<double>(prototypes.size());
    centered.clear();
    for (const auto& p : prototypes) centered.push_back(vec::sub(p, global_mean));
  }
};

/// Label rows appear in order of first appearance in `records`.
inline PrototypeSet build_prototypes(std::span<const ActivationRecord> records,
                                     const SelectionResult& selection) {
  if (records.empty()) fail(ErrorKind::numeric, "build_prototypes: no records");
  PrototypeSet ps;
  const std::size_t d = selection.selected.size();
  for (const auto& r : records) {
    if (r.label.empty()) fail(ErrorKind::format, "record '", r.assertion_id, "' has no label");
    auto it = std::find(ps.labels.begin(), ps.labels.end(), r.label);
    std::size_t c;
    if (it == ps.labels.end()) {
      c = ps.labels.size();
      ps.labels.push_back(r.label);
      ps.prototypes.emplace_back(d, 0.0);
      ps.counts.push_back(0);
    } else {
      c = static_cast<std::size_t>(it - ps.labels.begin());
    }
    const auto v = cue_project(r, selection);
    for (std::size_t i = 0; i < d; ++i) ps.prototypes[c][i] += v[i];
    ++ps.counts[c];
  }
  for (std::size_t c = 0; c < ps.labels.size(); ++c)
    for (auto& x : ps.prototypes[c]) x /= static_cast<double>(ps.counts[c]);
  ps.recenter();
  return ps;
}

struct BiasScores {
  std::vector<double> cosine;  // aligned with PrototypeSet::labels
  std::string argmax;
  bool tie = false;            // several labels share the maximum
};

/// Cosine between the centered response and each centered prototype.
/// Exact ties for the maximum resolve to the lexicographically smallest label.
inline BiasScores bias_score(std::span<const double> response, const PrototypeSet& protos) {
  if (response.size() != protos.dim())
    fail(ErrorKind::numeric, "bias_score: response has ", response.size(), " dims, prototypes have ",
         protos.dim());
  BiasScores out;
  const auto centered = vec::sub(response, protos.global_mean);
  for (const auto& p : protos.centered) out.cosine.push_back(vec::cosine(centered, p));
  const double best = *std::max_element(out.cosine.begin(), out.cosine.end());
  std::size_t hits = 0;
  for (std::size_t c = 0; c < out.cosine.size(); ++c) {
    if (out.cosine[c] != best) continue;
    if (hits++ == 0 || protos.labels[c] < out.argmax) out.argmax = protos.labels[c];
  }
  out.tie = hits > 1;
  return out;
}

/// Total-variation distance between the share distribution and uniform.
inline double concentration_index(std::span<const double> shares) {
  if (shares.empty()) fail(ErrorKind::numeric, "concentration_index: no labels");
  double total = 0.0;
  for (double s : shares) {
    if (!(s >= 0.0)) fail(ErrorKind::numeric, "concentration_index: negative share");
    total += s;
  }
  if (std::abs(total - 1.0) > 1e-9)
    fail(ErrorKind::numeric, "concentration_index: shares sum to ", total, ", not 1");
  const double uniform = 1.0 / static_cast<double>(shares.size());
  double tvd = 0.0;
  for (double s : shares) tvd += std::abs(s - uniform);
  return 0.5 * tvd;
}

inline double concentration_index(const std::map<std::string, double>& shares) {
  std::vector<double> v;
  for (const auto& [_, s] : shares) v.push_back(s);
  return concentration_index(v);
}

struct ResponseBias {
  std::string response_id;
  BiasScores scores;
};

struct BiasReport {
  std::vector<std::string> labels;
  std::vector<ResponseBias> per_response;
  std::vector<double> shares;  // fraction of argmax assignments per label
  double concentration = 0.0;
};

inline BiasReport bias_report(const std::vector<std::pair<std::string, CueVector>>& responses,
                              const PrototypeSet& protos) {
  BiasReport rep;
  rep.labels = protos.labels;
  rep.shares.assign(protos.labels.size(), 0.0);
  for (const auto& [id, v] : responses) {
    auto s = bias_score(v, protos);
    rep.shares[protos.slot(s.argmax)] += 1.0;
    rep.per_response.push_back({id, std::move(s)});
  }
  if (!responses.empty()) {
    for (auto& s : rep.shares) s /= static_cast<double>(responses.size());
    rep.concentration = concentration_index(rep.shares);
  }
  return rep;
}

inline nlohmann::json to_json(const PrototypeSet& p) {
  return {{"labels", p.labels},
          {"counts", p.counts},
          {"prototypes", p.prototypes},
          {"global_mean", p.global_mean},
          {"centered", p.centered}};
}

inline PrototypeSet prototypes_from_json(const nlohmann::json& j) {
  PrototypeSet p;
  try {
    p.labels = j.at("labels").get<std::vector<std::string>>();
    p.counts = j.at("counts").get<std::vector<std::size_t>>();
    p.prototypes = j.at("prototypes").get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "prototypes: ", e.what());
  }
  if (p.labels.size() != p.prototypes.size()) fail(ErrorKind::format, "prototypes: row count mismatch");
  p.recenter();
  return p;
}

inline nlohmann::json to_json(const BiasReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& pr : r.per_response) {
    nlohmann::json cos = nlohmann::json::object();
    for (std::size_t c = 0; c < r.labels.size(); ++c) cos[r.labels[c]] = pr.scores.cosine[c];
    rows.push_back({{"response_id", pr.response_id},
                    {"cosine", cos},
                    {"argmax", pr.scores.argmax},
                    {"tie", pr.scores.tie}});
  }
  nlohmann::json shares = nlohmann::json::object();
  for (std::size_t c = 0; c < r.labels.size(); ++c) shares[r.labels[c]] = r.shares[c];
  return {{"labels", r.labels}, {"per_response", rows}, {"shares", shares}, {"concentration", r.concentration}};
}

/// Response x label cosine table for plotting.
inline std::string heatmap_csv(const BiasReport& r) {
  std::string out = "response_id";
  for (const auto& l : r.labels) out += "," + l;
  out += "\n";
  for (const auto& pr : r.per_response) {
    out += pr.response_id;
    for (double c : pr.scores.cosine) out += concat(",", c);
    out += "\n";
  }
  return out;
}

}  // namespace cue
