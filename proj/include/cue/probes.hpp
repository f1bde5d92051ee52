// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cue/common.hpp"
#include "cue/rng.hpp"

namespace cue {

using FeatureRows = std::vector<std::vector<double>>;  // n x d

struct ProbeHyper {
  std::size_t epochs = 300;
  double lr = 0.5;
  double l2 = 1e-3;
  std::uint64_t seed = 0;
};

/// Multinomial logistic regression for one layer: logits = x W + b.
struct LayerProbe {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::vector<double> weights;  // dim x classes, row-major
  std::vector<double> bias;     // classes

  std::vector<double> logits(std::span<const double> x) const {
    std::vector<double> z(bias);
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t c = 0; c < classes; ++c) z[c] += x[i] * weights[i * classes + c];
    return z;
  }

  std::uint32_t predict(std::span<const double> x) const {
    const auto z = logits(x);
    return static_cast<std::uint32_t>(std::max_element(z.begin(), z.end()) - z.begin());
  }

  std::vector<std::uint32_t> predict(const FeatureRows& xs) const {
    std::vector<std::uint32_t> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(predict(x));
    return out;
  }
};

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad_w;
  std::vector<double> grad_b;
};

/// Mean cross-entropy plus (l2/2)*||W||^2, and its gradient.
inline LossGrad probe_loss(const LayerProbe& p, const FeatureRows& xs, std::span<const std::uint32_t> ys,
                           double l2) {
  LossGrad out;
  out.grad_w.assign(p.weights.size(), 0.0);
  out.grad_b.assign(p.classes, 0.0);
  const double inv_n = 1.0 / static_cast<double>(xs.size());
  for (std::size_t s = 0; s < xs.size(); ++s) {
    auto z = p.logits(xs[s]);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (auto& v : z) sum += (v = std::exp(v - mx));
    out.loss -= (std::log(z[ys[s]] / sum)) * inv_n;
    for (std::size_t c = 0; c < p.classes; ++c) {
      const double g = (z[c] / sum - (c == ys[s] ? 1.0 : 0.0)) * inv_n;
      out.grad_b[c] += g;
      for (std::size_t i = 0; i < p.dim; ++i) out.grad_w[i * p.classes + c] += g * xs[s][i];
    }
  }
  for (std::size_t k = 0; k < p.weights.size(); ++k) {
    out.loss += 0.5 * l2 * p.weights[k] * p.weights[k];
    out.grad_w[k] += l2 * p.weights[k];
  }
  return out;
}

struct ProbeFit {
  LayerProbe probe;
  std::vector<double> loss_history;  // loss before each epoch, then final
};

/// Full-batch gradient descent. A step that would raise the loss is retried
/// at half the learning rate, so the loss never increases.
inline ProbeFit train_probe(const FeatureRows& xs, std::span<const std::uint32_t> ys, std::size_t n_classes,
                            const ProbeHyper& hyper = {}) {
  if (xs.empty() || xs.size() != ys.size()) fail(ErrorKind::numeric, "train_probe: empty or mismatched input");
  if (n_classes < 2) fail(ErrorKind::numeric, "train_probe: need at least two classes");
  std::vector<bool> present(n_classes, false);
  for (auto y : ys) {
    if (y >= n_classes) fail(ErrorKind::numeric, "train_probe: label ", y, " out of range");
    present[y] = true;
  }
  for (std::size_t c = 0; c < n_classes; ++c)
    if (!present[c]) fail(ErrorKind::numeric, "train_probe: label ", c, " absent from training data");

  ProbeFit fit;
  auto& p = fit.probe;
  p.dim = xs.front().size();
  p.classes = n_classes;
  p.weights.resize(p.dim * n_classes);
  p.bias.assign(n_classes, 0.0);
  Rng rng(stage_seed(hyper.seed, "probe-init"));
  for (auto& w : p.weights) w = rng.normal(0.0, 0.01);

  double lr = hyper.lr;
  auto cur = probe_loss(p, xs, ys, hyper.l2);
  fit.loss_history.push_back(cur.loss);
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    bool accepted = false;
    for (int attempt = 0; attempt < 40 && !accepted; ++attempt) {
      LayerProbe trial = p;
      for (std::size_t k = 0; k < trial.weights.size(); ++k) trial.weights[k] -= lr * cur.grad_w[k];
      for (std::size_t c = 0; c < n_classes; ++c) trial.bias[c] -= lr * cur.grad_b[c];
      auto next = probe_loss(trial, xs, ys, hyper.l2);
      if (next.loss <= cur.loss) {
        p = std::move(trial);
        cur = std::move(next);
        accepted = true;
      } else {
        lr *= 0.5;
      }
    }
    fit.loss_history.push_back(cur.loss);
    if (!accepted) break;
  }
  return fit;
}

/// Rows indexed [gold][predicted].
using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

inline ConfusionMatrix confusion_matrix(std::span<const std::uint32_t> predicted, std::span<const std::uint32_t> gold,
                                        std::size_t n_classes) {
  if (predicted.size() != gold.size()) fail(ErrorKind::numeric, "confusion_matrix: length mismatch");
  ConfusionMatrix m(n_classes, std::vector<std::size_t>(n_classes, 0));
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] >= n_classes || predicted[i] >= n_classes)
      fail(ErrorKind::numeric, "confusion_matrix: label out of range");
    ++m[gold[i]][predicted[i]];
  }
  return m;
}

/// Unweighted mean of per-label F1. Labels absent from both gold and
/// predictions are left out of the mean; a label predicted but never gold
/// contributes 0.
inline double macro_f1(std::span<const std::uint32_t> predicted, std::span<const std::uint32_t> gold,
                       std::size_t n_classes) {
  const auto m = confusion_matrix(predicted, gold, n_classes);
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::size_t gold_c = 0, pred_c = 0;
    for (std::size_t k = 0; k < n_classes; ++k) {
      gold_c += m[c][k];
      pred_c += m[k][c];
    }
    if (gold_c == 0 && pred_c == 0) continue;
    const double tp = static_cast<double>(m[c][c]);
    sum += 2.0 * tp / static_cast<double>(gold_c + pred_c);
    ++counted;
  }
  return counted ? sum / static_cast<double>(counted) : 0.0;
}

struct Split {
  std::vector<std::size_t> train, test;
};

/// Per-label shuffle; round(test_fraction * count) of each label go to test.
inline Split stratified_split(std::span<const std::uint32_t> labels, double test_fraction, std::uint64_t seed) {
  std::map<std::uint32_t, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(i);
  Rng rng(seed);
  Split s;
  for (auto& [_, idx] : by_label) {
    rng.shuffle(idx);
    const auto n_test = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(idx.size()) + 0.5));
    for (std::size_t k = 0; k < idx.size(); ++k) (k < n_test ? s.test : s.train).push_back(idx[k]);
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

struct LayerProbeResult {
  std::uint32_t layer = 0;
  double macro_f1 = 0.0;
  double train_accuracy = 0.0;
  ConfusionMatrix confusion;
};

struct ProbeReport {
  std::vector<std::string> labels;
  std::vector<LayerProbeResult> layers;
  double chance = 0.0;
};

/// Trains and evaluates one probe per layer on a shared stratified 80/20 split.
inline ProbeReport run_probes(const std::map<std::uint32_t, FeatureRows>& features_by_layer,
                              std::span<const std::uint32_t> labels, const std::vector<std::string>& label_names,
                              const ProbeHyper& hyper = {}, double test_fraction = 0.2) {
  ProbeReport rep;
  rep.labels = label_names;
  rep.chance = 1.0 / static_cast<double>(label_names.size());
  const auto split = stratified_split(labels, test_fraction, stage_seed(hyper.seed, "probe-split"));
  auto gather = [](const FeatureRows& xs, const std::vector<std::size_t>& idx) {
    FeatureRows out;
    for (auto i : idx) out.push_back(xs[i]);
    return out;
  };
  std::vector<std::uint32_t> y_train, y_test;
  for (auto i : split.train) y_train.push_back(labels[i]);
  for (auto i : split.test) y_test.push_back(labels[i]);
  for (const auto& [layer, xs] : features_by_layer) {
    if (xs.size() != labels.size()) fail(ErrorKind::numeric, "run_probes: layer ", layer, " row count mismatch");
    const auto x_train = gather(xs, split.train);
    const auto fit = train_probe(x_train, y_train, label_names.size(), hyper);
    const auto pred_train = fit.probe.predict(x_train);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred_train.size(); ++i) correct += pred_train[i] == y_train[i];
    const auto pred = fit.probe.predict(gather(xs, split.test));
    rep.layers.push_back({layer, macro_f1(pred, y_test, label_names.size()),
                          static_cast<double>(correct) / static_cast<double>(y_train.size()),
                          confusion_matrix(pred, y_test, label_names.size())});
  }
  return rep;
}

inline nlohmann::json to_json(const ProbeReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers)
    layers.push_back({{"layer", l.layer},
                      {"macro_f1", l.macro_f1},
                      {"train_accuracy", l.train_accuracy},
                      {"confusion", l.confusion}});
  return {{"labels", r.labels}, {"chance", r.chance}, {"layers", layers}};
}

inline std::string confusion_csv(const ConfusionMatrix& m, const std::vector<std::string>& labels) {
  std::string out = "gold\\predicted";
  for (const auto& l : labels) out += "," + l;
  out += "\n";
  for (std::size_t g = 0; g < m.size(); ++g) {
    out += labels[g];
    for (auto v : m[g]) out += "," + std::to_string(v);
    out += "\n";
  }
  return out;
}

}  // namespace cue
