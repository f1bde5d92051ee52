// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "cue/rng.hpp"
#include "cue/selection.hpp"
#include "test_util.hpp"
#include "toy_fixture.hpp"

namespace cue {
namespace {

using testing::error_message;

// Hand computation for a binary feature active in k1 of 3 records of one
// label and k2 of 3 of another, out of 3 labels x 3 records.
double oracle_bits(const std::vector<std::pair<int, int>>& active_total) {
  double n = 0, active = 0;
  for (auto [a, t] : active_total) {
    n += t;
    active += a;
  }
  double bits = 0;
  for (auto [a, t] : active_total) {
    for (double cnt : {static_cast<double>(a), static_cast<double>(t - a)}) {
      if (cnt == 0) continue;
      const double row = cnt == a ? active : n - active;
      bits += cnt / n * std::log2(cnt * n / (row * t));
    }
  }
  return bits;
}

std::vector<std::uint32_t> toy_label_ids() { return {0, 0, 0, 1, 1, 1, 2, 2, 2}; }

TEST(Quantize, BinaryThresholdZero) {
  const std::vector<double> v{0, 3, 0.1};
  EXPECT_EQ(quantize(v, QuantizationScheme::binary()), (std::vector<std::uint32_t>{0, 1, 1}));
  EXPECT_EQ(quantize(v, QuantizationScheme::binary(0.5)), (std::vector<std::uint32_t>{0, 1, 0}));
}

TEST(Quantize, AllZerosGoToBinZero) {
  const std::vector<double> z(5, 0.0);
  EXPECT_EQ(quantize(z, QuantizationScheme::binary()), std::vector<std::uint32_t>(5, 0));
  EXPECT_EQ(quantize(z, QuantizationScheme::quantile(4)), std::vector<std::uint32_t>(5, 0));
}

TEST(Quantize, QuantileTwoBinsSplitsAtMedianOfNonzeros) {
  const std::vector<double> v{0, 1, 2, 3, 4};
  EXPECT_EQ(quantize(v, QuantizationScheme::quantile(2)), (std::vector<std::uint32_t>{0, 1, 1, 2, 2}));
}

TEST(Quantize, SchemeParsing) {
  EXPECT_EQ(QuantizationScheme::parse("binary").kind, QuantizationScheme::Kind::binary);
  EXPECT_EQ(QuantizationScheme::parse("binary:0.5").threshold, 0.5);
  EXPECT_EQ(QuantizationScheme::parse("quantile:4").bins, 4u);
  error_message([] { QuantizationScheme::parse("quantile:1"); }, ErrorKind::config);
  error_message([] { QuantizationScheme::parse("kmeans"); }, ErrorKind::config);
  error_message([] { QuantizationScheme::parse("binary:x"); }, ErrorKind::config);
}

TEST(MutualInformation, ToyFeatures) {
  const auto labels = toy_label_ids();
  const std::vector<std::uint32_t> f2{0, 0, 0, 1, 1, 0, 0, 0, 0};
  const std::vector<std::uint32_t> f3{0, 1, 0, 0, 0, 0, 1, 1, 0};
  const std::vector<std::uint32_t> f4{1, 1, 1, 1, 1, 1, 1, 1, 1};
  EXPECT_NEAR(mutual_information(f2, labels), 0.4582, 1e-4);
  EXPECT_NEAR(mutual_information(f3, labels), 0.3061, 1e-4);
  EXPECT_EQ(mutual_information(f4, labels), 0.0);
  EXPECT_NEAR(mutual_information(f2, labels), oracle_bits({{0, 3}, {2, 3}, {0, 3}}), 1e-12);
  EXPECT_NEAR(mutual_information(f3, labels), oracle_bits({{1, 3}, {0, 3}, {2, 3}}), 1e-12);
}

TEST(MutualInformation, Errors) {
  const std::vector<std::uint32_t> a{0, 1}, b{0};
  error_message([&] { mutual_information(a, b); }, ErrorKind::numeric);
  error_message([] { mutual_information({}, {}); }, ErrorKind::numeric);
}

// Brute force: enumerate every (a, c) cell of the joint table directly from
// the samples.
double brute_force_mi(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& c) {
  const double n = static_cast<double>(a.size());
  const auto na = *std::max_element(a.begin(), a.end()) + 1;
  const auto nc = *std::max_element(c.begin(), c.end()) + 1;
  double bits = 0;
  for (std::uint32_t x = 0; x < na; ++x)
    for (std::uint32_t y = 0; y < nc; ++y) {
      double pxy = 0, px = 0, py = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        pxy += (a[i] == x && c[i] == y);
        px += (a[i] == x);
        py += (c[i] == y);
      }
      pxy /= n;
      px /= n;
      py /= n;
      if (pxy > 0) bits += pxy * std::log2(pxy / (px * py));
    }
  return bits;
}

double entropy(const std::vector<std::uint32_t>& v) {
  std::map<std::uint32_t, double> cnt;
  for (auto x : v) cnt[x] += 1;
  double h = 0;
  for (const auto& [k, c] : cnt) h -= c / v.size() * std::log2(c / v.size());
  return h;
}

TEST(MutualInformation, MatchesBruteForceAndBounds) {
  Rng rng(11);
  for (int t = 0; t < 1000; ++t) {
    const auto n = 1 + rng.below(12);
    const auto ka = 1 + rng.below(4), kc = 1 + rng.below(5);
    std::vector<std::uint32_t> a(n), c(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<std::uint32_t>(rng.below(ka));
      c[i] = static_cast<std::uint32_t>(rng.below(kc));
    }
    const double mi = mutual_information(a, c);
    ASSERT_NEAR(mi, std::max(0.0, brute_force_mi(a, c)), 1e-10);
    EXPECT_GE(mi, 0.0);
    EXPECT_LE(mi, std::min(entropy(a), entropy(c)) + 1e-12);
  }
}

TEST(MutualInformation, PermutedLabelsDriveMedianTowardZero) {
  Rng rng(3);
  std::vector<std::uint32_t> labels, bins;
  for (std::uint32_t c = 0; c < 4; ++c)
    for (int i = 0; i < 50; ++i) {
      labels.push_back(c);
      bins.push_back(c == 0 ? (rng.bernoulli(0.9) ? 1 : 0) : (rng.bernoulli(0.05) ? 1 : 0));
    }
  const double informative = mutual_information(bins, labels);
  std::vector<double> nulls;
  for (int t = 0; t < 101; ++t) {
    auto perm = labels;
    rng.shuffle(perm);
    nulls.push_back(mutual_information(bins, perm));
  }
  std::nth_element(nulls.begin(), nulls.begin() + 50, nulls.end());
  EXPECT_GT(informative, 0.4);
  EXPECT_LT(nulls[50], 0.03);
}

TEST(ScoreFeatures, ToyDatasetMatchesHandValues) {
  const auto recs = testing::toy_records();
  auto scores = score_features(recs, QuantizationScheme::binary());
  std::map<FeatureId, double> by;
  for (const auto& s : scores) by[s.feature] = s.bits;
  EXPECT_NEAR(by.at(testing::kF1), 0.4582, 1e-4);
  EXPECT_NEAR(by.at(testing::kF2), 0.4582, 1e-4);
  EXPECT_NEAR(by.at(testing::kF3), 0.3061, 1e-4);
  EXPECT_EQ(by.at(testing::kF4), 0.0);
  // The sparse binary path agrees with quantizing the dense column directly.
  const auto li = index_labels(recs);
  for (const auto& [f, bits] : by) {
    std::vector<double> dense;
    for (const auto& r : recs) dense.push_back(r.value(f));
    EXPECT_NEAR(bits, mutual_information(quantize(dense, QuantizationScheme::binary()), li.ids), 1e-12);
  }
}

TEST(ScoreFeatures, QuantileSchemeIsBoundedByLabelEntropy) {
  for (const auto& s : score_features(testing::toy_records(), QuantizationScheme::quantile(3))) {
    EXPECT_GE(s.bits, 0.0);
    EXPECT_LE(s.bits, std::log2(3.0) + 1e-12);
  }
}

std::vector<MIScore> toy_scores() {
  return {{testing::kF4, 0.0}, {testing::kF3, 0.306}, {testing::kF2, 0.458}, {testing::kF1, 0.458}};
}

TEST(Select, ToyRhoPointOneSelectsF1) {
  const auto s = select_features(toy_scores(), 0.1);
  EXPECT_EQ(s.selected, (std::vector<FeatureId>{testing::kF1}));
  EXPECT_NEAR(s.total_bits, 1.222, 1e-9);
  EXPECT_EQ(s.ranked.front().feature, testing::kF1);
}

TEST(Select, ToyRhoPointNineSelectsThree) {
  EXPECT_EQ(select_features(toy_scores(), 0.9).selected,
            (std::vector<FeatureId>{testing::kF1, testing::kF2, testing::kF3}));
}

TEST(Select, RhoOneSelectsAllInformative) {
  EXPECT_EQ(select_features(toy_scores(), 1.0).selected.size(), 3u);
}

TEST(Select, Errors) {
  error_message([] { select_features(toy_scores(), 0.0); }, ErrorKind::config);
  error_message([] { select_features(toy_scores(), 1.5); }, ErrorKind::config);
  const auto msg = error_message([] { select_features({{testing::kF4, 0.0}}, 0.5); }, ErrorKind::numeric);
  EXPECT_NE(msg.find("empty selection"), std::string::npos);
  error_message([] { select_features({}, 0.5); }, ErrorKind::numeric);
}

TEST(Select, MonotoneInRhoAndMinimalPrefix) {
  Rng rng(8);
  for (int t = 0; t < 200; ++t) {
    std::vector<MIScore> scores;
    const auto n = 1 + rng.below(30);
    for (std::uint32_t i = 0; i < n; ++i)
      scores.push_back({{static_cast<std::uint32_t>(rng.below(3)), i},
                        rng.bernoulli(0.2) ? 0.0 : std::round(rng.uniform(0, 2) * 8) / 8});
    if (std::all_of(scores.begin(), scores.end(), [](const MIScore& s) { return s.bits == 0; }))
      scores[0].bits = 1.0;
    double r1 = rng.uniform(0.01, 1.0), r2 = rng.uniform(0.01, 1.0);
    if (r1 > r2) std::swap(r1, r2);
    const auto a = select_features(scores, r1), b = select_features(scores, r2);
    ASSERT_LE(a.selected.size(), b.selected.size());
    EXPECT_TRUE(std::equal(a.selected.begin(), a.selected.end(), b.selected.begin()));
    double cum = 0;
    for (std::size_t i = 0; i < a.selected.size(); ++i) cum += a.ranked[i].bits;
    EXPECT_GE(cum, r1 * a.total_bits);
    EXPECT_LT(cum - a.ranked[a.selected.size() - 1].bits, r1 * a.total_bits);
  }
}

TEST(Select, JsonRoundTripAndDeterminism) {
  const auto recs = testing::toy_records();
  const auto a = select_features(score_features(recs, QuantizationScheme::binary()), 0.9);
  const auto b = select_features(score_features(recs, QuantizationScheme::binary()), 0.9);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  const auto back = selection_from_json(to_json(a));
  EXPECT_EQ(back.selected, a.selected);
  EXPECT_EQ(back.total_bits, a.total_bits);
  EXPECT_EQ(selection_hash(back), selection_hash(a));
  error_message([] { selection_from_json({{"rho", 0.1}}); }, ErrorKind::format);
}

TEST(Select, LayerDistribution) {
  SelectionResult a, b;
  a.selected = {{0, 1}, {0, 2}, {4, 1}, {8, 3}};
  b.selected = {{4, 1}, {4, 2}};
  EXPECT_EQ(layer_distribution(a), (std::map<std::uint32_t, std::size_t>{{0, 2}, {4, 1}, {8, 1}}));
  const auto rows = compare_layer_distributions(a, b);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1].layer, 4u);
  EXPECT_DOUBLE_EQ(rows[1].share_a, 0.25);
  EXPECT_DOUBLE_EQ(rows[1].share_b, 1.0);
  EXPECT_EQ(rows[2].count_b, 0u);
}

}  // namespace
}  // namespace cue
