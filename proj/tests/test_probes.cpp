// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "cue/probes.hpp"
#include "cue/rng.hpp"
#include "test_util.hpp"

namespace cue {
namespace {

using testing::error_message;

struct Data {
  FeatureRows xs;
  std::vector<std::uint32_t> ys;
};

Data clusters(std::size_t classes, std::size_t per_class, std::size_t dim, double spread, Rng& rng) {
  Data d;
  std::vector<std::vector<double>> centers(classes, std::vector<double>(dim));
  for (auto& c : centers)
    for (auto& x : c) x = rng.normal(0, 3);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      std::vector<double> x(dim);
      for (std::size_t k = 0; k < dim; ++k) x[k] = centers[c][k] + rng.normal(0, spread);
      d.xs.push_back(x);
      d.ys.push_back(static_cast<std::uint32_t>(c));
    }
  return d;
}

TEST(TrainProbe, SeparableClustersReachFullTrainingAccuracy) {
  Rng rng(1);
  const auto d = clusters(2, 30, 4, 0.3, rng);
  const auto fit = train_probe(d.xs, d.ys, 2);
  EXPECT_EQ(fit.probe.predict(d.xs), d.ys);
}

TEST(TrainProbe, LossNeverIncreasesAndIsDeterministic) {
  Rng rng(2);
  const auto d = clusters(4, 20, 6, 2.0, rng);
  ProbeHyper h;
  h.lr = 5.0;  // deliberately too large; backtracking must cope
  const auto fit = train_probe(d.xs, d.ys, 4, h);
  for (std::size_t i = 1; i < fit.loss_history.size(); ++i)
    EXPECT_LE(fit.loss_history[i], fit.loss_history[i - 1]);
  EXPECT_EQ(train_probe(d.xs, d.ys, 4, h).probe.weights, fit.probe.weights);
}

TEST(TrainProbe, ConstantFeaturesPredictMajority) {
  FeatureRows xs(10, std::vector<double>{1.0, 2.0});
  std::vector<std::uint32_t> ys{0, 1, 1, 1, 1, 1, 2, 2, 0, 1};
  const auto fit = train_probe(xs, ys, 3);
  for (auto p : fit.probe.predict(xs)) EXPECT_EQ(p, 1u);
}

TEST(TrainProbe, DegenerateInputs) {
  error_message([] { train_probe({}, {}, 2); }, ErrorKind::numeric);
  const FeatureRows xs{{1}, {2}};
  error_message([&] { train_probe(xs, std::vector<std::uint32_t>{0, 0}, 2); }, ErrorKind::numeric);
  error_message([&] { train_probe(xs, std::vector<std::uint32_t>{0, 0}, 1); }, ErrorKind::numeric);
  error_message([&] { train_probe(xs, std::vector<std::uint32_t>{0}, 2); }, ErrorKind::numeric);
}

TEST(TrainProbe, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 3 + rng.below(8), d = 1 + rng.below(4), k = 2 + rng.below(3);
    FeatureRows xs(n, std::vector<double>(d));
    std::vector<std::uint32_t> ys(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (auto& x : xs[i]) x = rng.normal();
      ys[i] = static_cast<std::uint32_t>(rng.below(k));
    }
    LayerProbe p{d, k, std::vector<double>(d * k), std::vector<double>(k)};
    for (auto& w : p.weights) w = rng.normal();
    for (auto& b : p.bias) b = rng.normal();
    const double l2 = 0.1;
    const auto g = probe_loss(p, xs, ys, l2);
    const double eps = 1e-5;
    auto check = [&](double& param, double analytic) {
      const double keep = param;
      param = keep + eps;
      const double up = probe_loss(p, xs, ys, l2).loss;
      param = keep - eps;
      const double down = probe_loss(p, xs, ys, l2).loss;
      param = keep;
      const double numeric = (up - down) / (2 * eps);
      EXPECT_LE(std::abs(numeric - analytic), 1e-4 * std::max(1.0, std::abs(numeric)));
    };
    for (std::size_t i = 0; i < p.weights.size(); ++i) check(p.weights[i], g.grad_w[i]);
    for (std::size_t c = 0; c < k; ++c) check(p.bias[c], g.grad_b[c]);
  }
}

TEST(MacroF1, Examples) {
  const std::vector<std::uint32_t> gold{0, 1, 0, 1, 2, 2};
  EXPECT_DOUBLE_EQ(macro_f1(gold, gold, 3), 1.0);
  const std::vector<std::uint32_t> g2{0, 0, 1, 1}, all_a{0, 0, 0, 0};
  EXPECT_DOUBLE_EQ(macro_f1(all_a, g2, 2), 1.0 / 3.0);
  // A label absent from gold and predictions is left out of the mean.
  EXPECT_DOUBLE_EQ(macro_f1(all_a, g2, 5), 1.0 / 3.0);
  // Predicted but never gold contributes 0.
  const std::vector<std::uint32_t> pred{0, 0, 1, 2};
  EXPECT_DOUBLE_EQ(macro_f1(pred, g2, 3), (1.0 + 2.0 / 3.0 + 0.0) / 3.0);
  error_message([] { macro_f1(std::vector<std::uint32_t>{0}, std::vector<std::uint32_t>{}, 2); },
                ErrorKind::numeric);
}

TEST(MacroF1, UniformRandomOver22LabelsIsNearChance) {
  Rng rng(4);
  std::vector<std::uint32_t> gold, pred;
  for (std::uint32_t c = 0; c < 22; ++c)
    for (int i = 0; i < 2000; ++i) {
      gold.push_back(c);
      pred.push_back(static_cast<std::uint32_t>(rng.below(22)));
    }
  EXPECT_NEAR(macro_f1(pred, gold, 22), 1.0 / 22.0, 0.005);
}

TEST(MacroF1, PermutationEquivariant) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t k = 2 + rng.below(6);
    std::vector<std::uint32_t> gold(40), pred(40), perm(k);
    for (auto& g : gold) g = static_cast<std::uint32_t>(rng.below(k));
    for (auto& p : pred) p = static_cast<std::uint32_t>(rng.below(k));
    for (std::size_t i = 0; i < k; ++i) perm[i] = static_cast<std::uint32_t>(i);
    rng.shuffle(perm);
    auto pg = gold, pp = pred;
    for (auto& g : pg) g = perm[g];
    for (auto& p : pp) p = perm[p];
    EXPECT_NEAR(macro_f1(pp, pg, k), macro_f1(pred, gold, k), 1e-12);
  }
}

TEST(Confusion, Examples) {
  const std::vector<std::uint32_t> gold{0, 1, 1, 2, 2, 2};
  const auto perfect = confusion_matrix(gold, gold, 3);
  EXPECT_EQ(perfect, (ConfusionMatrix{{1, 0, 0}, {0, 2, 0}, {0, 0, 3}}));
  const std::vector<std::uint32_t> zeros(6, 0);
  const auto col = confusion_matrix(zeros, gold, 3);
  EXPECT_EQ(col, (ConfusionMatrix{{1, 0, 0}, {2, 0, 0}, {3, 0, 0}}));
  std::size_t total = 0;
  for (const auto& r : col)
    for (auto v : r) total += v;
  EXPECT_EQ(total, gold.size());
  error_message([] { confusion_matrix(std::vector<std::uint32_t>{3}, std::vector<std::uint32_t>{0}, 3); },
                ErrorKind::numeric);
}

TEST(Split, StratifiedAndDeterministic) {
  std::vector<std::uint32_t> labels;
  for (std::uint32_t c = 0; c < 3; ++c)
    for (int i = 0; i < 10; ++i) labels.push_back(c);
  const auto s = stratified_split(labels, 0.2, 7);
  EXPECT_EQ(s.test.size(), 6u);
  EXPECT_EQ(s.train.size(), 24u);
  std::map<std::uint32_t, int> per;
  for (auto i : s.test) ++per[labels[i]];
  for (const auto& [_, n] : per) EXPECT_EQ(n, 2);
  EXPECT_EQ(stratified_split(labels, 0.2, 7).test, s.test);
}

TEST(RunProbes, SignalLayerBeatsNoiseLayerAndCsv) {
  Rng rng(6);
  const auto d = clusters(5, 40, 8, 0.5, rng);
  FeatureRows noise(d.xs.size(), std::vector<double>(8));
  for (auto& r : noise)
    for (auto& x : r) x = rng.normal();
  const std::vector<std::string> names{"a", "b", "c", "d", "e"};
  const auto rep = run_probes({{0, d.xs}, {1, noise}}, d.ys, names);
  ASSERT_EQ(rep.layers.size(), 2u);
  EXPECT_DOUBLE_EQ(rep.chance, 0.2);
  EXPECT_GT(rep.layers[0].macro_f1, 0.9);
  EXPECT_LT(rep.layers[1].macro_f1, 0.5);
  for (std::size_t g = 0; g < 5; ++g) {
    std::size_t row = 0;
    for (auto v : rep.layers[0].confusion[g]) row += v;
    EXPECT_EQ(row, 8u);
  }
  const auto csv = confusion_csv(rep.layers[0].confusion, names);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "gold\\predicted,a,b,c,d,e");
  EXPECT_EQ(to_json(rep).at("layers").size(), 2u);
}

}  // namespace
}  // namespace cue
