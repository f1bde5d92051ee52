// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include "cue/common.hpp"
#include "cue/rng.hpp"

namespace cue {

struct Assertion {
  std::string id;
  std::string label;
  std::string text;

  bool operator==(const Assertion&) const = default;
};

/// Labeled assertions in file order. `labels` lists each distinct label once,
/// in order of first appearance.
struct Corpus {
  std::vector<Assertion> records;
  std::vector<std::string> labels;

  void add(Assertion a) {
    if (std::find(labels.begin(), labels.end(), a.label) == labels.end())
      labels.push_back(a.label);
    records.push_back(std::move(a));
  }

  std::size_t count(const std::string& label) const {
    return static_cast<std::size_t>(std::count_if(
        records.begin(), records.end(),
        [&](const Assertion& a) { return a.label == label; }));
  }
};

/// Parses the tab-separated corpus format: `id<TAB>label<TAB>text`, one
/// record per line. Lines starting with '#' and blank lines are skipped.
inline Corpus parse_corpus(const std::string& contents, const std::string& origin = "<memory>") {
  Corpus corpus;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < contents.size()) {
    auto end = contents.find('\n', start);
    if (end == std::string::npos) end = contents.size();
    std::string line = contents.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;

    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos)
      fail(ErrorKind::format, origin, ":", line_no, ": expected 3 tab-separated fields");
    Assertion a{line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), line.substr(t2 + 1)};
    if (a.id.empty() || a.label.empty() || a.text.empty())
      fail(ErrorKind::format, origin, ":", line_no, ": empty id, label or text");
    if (!seen.insert(a.id).second)
      fail(ErrorKind::format, origin, ":", line_no, ": duplicate id '", a.id, "'");
    corpus.add(std::move(a));
  }
  return corpus;
}

inline Corpus load_corpus(const std::string& path) {
  return parse_corpus(read_file_bytes(path), path);
}

inline std::string format_corpus(const Corpus& corpus) {
  std::string out;
  for (const auto& a : corpus.records) out += a.id + '\t' + a.label + '\t' + a.text + '\n';
  return out;
}

struct SampleResult {
  Corpus corpus;
  /// Labels with fewer than n records (kept whole), with their counts.
  std::map<std::string, std::size_t> undersupplied;
};

/// Keeps n records per label, chosen uniformly without replacement.
///
/// Labels are visited in lexicographic order; for each label a partial
/// Fisher-Yates over its record positions draws from one Rng(seed) stream.
/// The kept records are emitted in their original file order.
inline SampleResult sample_per_label(const Corpus& corpus, std::size_t n, std::uint64_t seed) {
  if (n == 0) fail(ErrorKind::config, "sample_per_label: n must be >= 1");

  std::map<std::string, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < corpus.records.size(); ++i)
    by_label[corpus.records[i].label].push_back(i);

  SampleResult result;
  std::vector<bool> keep(corpus.records.size(), false);
  Rng rng(seed);
  for (auto& [label, positions] : by_label) {
    if (positions.size() <= n) {
      if (positions.size() < n) result.undersupplied[label] = positions.size();
      for (auto p : positions) keep[p] = true;
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(positions.size() - i));
      std::swap(positions[i], positions[j]);
      keep[positions[i]] = true;
    }
  }
  for (std::size_t i = 0; i < corpus.records.size(); ++i)
    if (keep[i]) result.corpus.add(corpus.records[i]);
  return result;
}

}  // namespace cue
