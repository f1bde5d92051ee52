// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cue/activations.hpp"
#include "cue/common.hpp"
#include "cue/rng.hpp"
#include "cue/steering.hpp"

namespace cue::toy {

struct ToyConfig {
  std::uint32_t n_layers = 2;
  std::uint32_t d_model = 32;
  std::uint32_t n_heads = 2;
  std::uint32_t vocab = 64;
  std::uint32_t max_seq = 32;
  std::uint32_t d_sae = 128;
  std::uint64_t seed = 0;
  /// Tokens [0, d_model) get basis-aligned embeddings and unembeddings that
  /// planted SAE features decode onto.
  bool aligned_unembedding = true;
  /// Norm of an aligned token's embedding.
  double aligned_embed_scale = 5.0;
  /// Norm of an aligned token's unembedding row.
  double aligned_unembed_scale = 0.5;
  /// Expected norm of the remaining (generic) token embeddings in aligned mode.
  double generic_embed_scale = 0.3;
  /// Block weights are drawn N(0, block_init / sqrt(fan_in)).
  double block_init = 0.3;
  /// SAE pre-activation threshold (b_enc = -threshold).
  double sae_threshold = 1.0;

  void validate() const {
    if (!n_layers || !d_model || !n_heads || !vocab || !max_seq || !d_sae)
      fail(ErrorKind::config, "toy config: all sizes must be positive");
    if (d_model % n_heads != 0) fail(ErrorKind::config, "toy config: d_model must be divisible by n_heads");
    if (d_sae < d_model) fail(ErrorKind::config, "toy config: d_sae must be >= d_model");
    if (aligned_unembedding && vocab < d_model)
      fail(ErrorKind::config, "toy config: aligned mode needs vocab >= d_model");
  }
};

inline nlohmann::json to_json(const ToyConfig& c) {
  return {{"n_layers", c.n_layers},
          {"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"vocab", c.vocab},
          {"max_seq", c.max_seq},
          {"d_sae", c.d_sae},
          {"seed", c.seed},
          {"aligned_unembedding", c.aligned_unembedding},
          {"aligned_embed_scale", c.aligned_embed_scale},
          {"aligned_unembed_scale", c.aligned_unembed_scale},
          {"generic_embed_scale", c.generic_embed_scale},
          {"block_init", c.block_init},
          {"sae_threshold", c.sae_threshold}};
}

inline ToyConfig toy_config_from_json(const nlohmann::json& j) {
  ToyConfig c;
  try {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.vocab = j.value("vocab", c.vocab);
    c.max_seq = j.value("max_seq", c.max_seq);
    c.d_sae = j.value("d_sae", c.d_sae);
    c.seed = j.value("seed", c.seed);
    c.aligned_unembedding = j.value("aligned_unembedding", c.aligned_unembedding);
    c.aligned_embed_scale = j.value("aligned_embed_scale", c.aligned_embed_scale);
    c.aligned_unembed_scale = j.value("aligned_unembed_scale", c.aligned_unembed_scale);
    c.generic_embed_scale = j.value("generic_embed_scale", c.generic_embed_scale);
    c.block_init = j.value("block_init", c.block_init);
    c.sae_threshold = j.value("sae_threshold", c.sae_threshold);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, "toy config: ", e.what());
  }
  c.validate();
  return c;
}

/// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  static Matrix gaussian(std::size_t r, std::size_t c, double stddev, Rng& rng) {
    Matrix m(r, c);
    for (auto& x : m.data) x = rng.normal(0.0, stddev);
    return m;
  }
};

/// y = x * W for W of shape (x.size() x out).
inline std::vector<double> matvec_right(std::span<const double> x, const Matrix& w) {
  std::vector<double> y(w.cols, 0.0);
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const auto r = w.row(i);
    for (std::size_t j = 0; j < w.cols; ++j) y[j] += xi * r[j];
  }
  return y;
}

inline void random_unit(std::span<double> out, Rng& rng) {
  double n = 0.0;
  do {
    n = 0.0;
    for (auto& x : out) {
      x = rng.normal();
      n += x * x;
    }
  } while (n == 0.0);
  n = std::sqrt(n);
  for (auto& x : out) x /= n;
}

/// Per-layer SAE: encode(h) = max(0, h W_enc + b), decode(a) = a W_dec.
struct SaeLayer {
  Matrix encoder;  // d_model x d_sae
  std::vector<double> bias;
  Matrix decoder;  // d_sae x d_model, unit rows

  std::size_t width() const { return decoder.rows; }
  std::size_t d_model() const { return decoder.cols; }

  std::vector<double> encode(std::span<const double> h) const {
    if (h.size() != encoder.rows) fail(ErrorKind::numeric, "sae encode: dim mismatch");
    auto pre = matvec_right(h, encoder);
    for (std::size_t j = 0; j < pre.size(); ++j) pre[j] = std::max(0.0, pre[j] + bias[j]);
    return pre;
  }

  std::vector<double> decode(std::span<const double> a) const {
    if (a.size() != decoder.rows) fail(ErrorKind::numeric, "sae decode: dim mismatch");
    return matvec_right(a, decoder);
  }

  /// Encoder tied to the decoder (W_enc = W_dec^T) with a uniform bias.
  static SaeLayer tied(Matrix decoder, double bias) {
    SaeLayer s;
    s.encoder = Matrix(decoder.cols, decoder.rows);
    for (std::size_t j = 0; j < decoder.rows; ++j)
      for (std::size_t k = 0; k < decoder.cols; ++k) s.encoder(k, j) = decoder(j, k);
    s.bias.assign(decoder.rows, bias);
    s.decoder = std::move(decoder);
    return s;
  }
};

struct SyntheticSae {
  std::vector<SaeLayer> layers;  // index = model layer

  DecoderMatrix export_decoder(std::uint32_t layer) const {
    const auto& d = layers.at(layer).decoder;
    return {layer, static_cast<std::uint32_t>(d.rows), static_cast<std::uint32_t>(d.cols), d.data};
  }
};

struct SharedGroup {
  std::vector<std::string> labels;
  std::vector<FeatureId> features;
};

/// Ground truth for the synthetic dump.
struct PlantedSpec {
  std::vector<std::string> labels;
  std::map<std::string, std::vector<FeatureId>> planted;  // culture-unique
  std::vector<SharedGroup> shared;
  std::vector<FeatureId> universal;
  double noise_rate = 0.05;
  double strength_lo = 2.0;
  double strength_hi = 8.0;
  /// Probability a label's own planted feature fires on one of its records.
  double planted_rate = 0.9;
  /// Probability a group-shared feature fires on a record of a member label.
  double shared_rate = 0.55;

  /// Features that are neither planted, shared nor universal.
  std::vector<FeatureId> noise_features(const ToyConfig& cfg) const {
    std::set<FeatureId> used(universal.begin(), universal.end());
    for (const auto& [_, fs] : planted) used.insert(fs.begin(), fs.end());
    for (const auto& g : shared) used.insert(g.features.begin(), g.features.end());
    std::vector<FeatureId> out;
    for (std::uint32_t l = 0; l < cfg.n_layers; ++l)
      for (std::uint32_t i = 0; i < cfg.d_sae; ++i)
        if (!used.count({l, i})) out.push_back({l, i});
    return out;
  }

  void validate(const ToyConfig& cfg) const {
    std::set<FeatureId> seen;
    for (const auto& [label, fs] : planted)
      for (auto f : fs) {
        if (!seen.insert(f).second) fail(ErrorKind::config, "planted sets must be disjoint (", f.str(), ")");
        if (f.layer >= cfg.n_layers || f.index >= cfg.d_sae)
          fail(ErrorKind::config, "planted feature ", f.str(), " out of range");
      }
    for (auto f : universal)
      if (seen.count(f)) fail(ErrorKind::config, "universal feature ", f.str(), " is also planted");
    if (!(noise_rate >= 0.0 && noise_rate < 1.0)) fail(ErrorKind::config, "noise_rate must be in [0,1)");
    if (!(strength_lo > 0.0 && strength_hi >= strength_lo))
      fail(ErrorKind::config, "firing strength range must be positive");
  }
};

inline nlohmann::json to_json(const PlantedSpec& s) {
  auto ids = [](const std::vector<FeatureId>& fs) {
    nlohmann::json a = nlohmann::json::array();
    for (auto f : fs) a.push_back({f.layer, f.index});
    return a;
  };
  nlohmann::json planted = nlohmann::json::object();
  for (const auto& [l, fs] : s.planted) planted[l] = ids(fs);
  nlohmann::json shared = nlohmann::json::array();
  for (const auto& g : s.shared) shared.push_back({{"labels", g.labels}, {"features", ids(g.features)}});
  return {{"labels", s.labels},           {"planted", planted},
          {"shared", shared},             {"universal", ids(s.universal)},
          {"noise_rate", s.noise_rate},   {"firing_strength", {s.strength_lo, s.strength_hi}},
          {"planted_rate", s.planted_rate}, {"shared_rate", s.shared_rate}};
}

inline PlantedSpec planted_spec_from_json(const nlohmann::json& j) {
  auto ids = [](const nlohmann::json& a) {
    std::vector<FeatureId> out;
    for (const auto& p : a) out.push_back({p.at(0).get<std::uint32_t>(), p.at(1).get<std::uint32_t>()});
    return out;
  };
  PlantedSpec s;
  try {
    s.labels = j.at("labels").get<std::vector<std::string>>();
    for (const auto& [l, fs] : j.at("planted").items()) s.planted[l] = ids(fs);
    for (const auto& g : j.value("shared", nlohmann::json::array()))
      s.shared.push_back({g.at("labels").get<std::vector<std::string>>(), ids(g.at("features"))});
    s.universal = ids(j.value("universal", nlohmann::json::array()));
    s.noise_rate = j.value("noise_rate", s.noise_rate);
    if (j.contains("firing_strength")) {
      s.strength_lo = j.at("firing_strength").at(0).get<double>();
      s.strength_hi = j.at("firing_strength").at(1).get<double>();
    }
    s.planted_rate = j.value("planted_rate", s.planted_rate);
    s.shared_rate = j.value("shared_rate", s.shared_rate);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, "planted spec: ", e.what());
  }
  return s;
}

struct PlantedLayout {
  std::size_t n_labels = 4;
  std::size_t planted_per_label = 8;  // per layer
  std::size_t universal = 16;         // per layer
  std::size_t shared_per_group = 32;  // per layer; labels are paired into groups
};

/// Default ground truth: per layer, `planted_per_label` features per label,
/// adjacent label pairs sharing `shared_per_group` features, `universal`
/// always-on features, everything else noise. Feature indices are a seeded
/// permutation of the SAE width.
inline PlantedSpec default_planted_spec(const ToyConfig& cfg, const PlantedLayout& layout = {},
                                        std::uint64_t seed = 0) {
  const std::size_t n_groups = layout.n_labels / 2;
  const std::size_t needed = layout.n_labels * layout.planted_per_label + layout.universal +
                             n_groups * layout.shared_per_group;
  if (needed > cfg.d_sae) fail(ErrorKind::config, "planted layout needs ", needed, " features per layer");
  PlantedSpec s;
  for (std::size_t c = 0; c < layout.n_labels; ++c) s.labels.push_back(concat("culture", c));
  s.shared.resize(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) s.shared[g].labels = {s.labels[2 * g], s.labels[2 * g + 1]};
  Rng rng(stage_seed(seed, "planted-layout"));
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    std::vector<std::uint32_t> perm(cfg.d_sae);
    for (std::uint32_t i = 0; i < cfg.d_sae; ++i) perm[i] = i;
    rng.shuffle(perm);
    std::size_t next = 0;
    for (std::size_t c = 0; c < layout.n_labels; ++c)
      for (std::size_t k = 0; k < layout.planted_per_label; ++k) s.planted[s.labels[c]].push_back({l, perm[next++]});
    for (std::size_t g = 0; g < n_groups; ++g)
      for (std::size_t k = 0; k < layout.shared_per_group; ++k) s.shared[g].features.push_back({l, perm[next++]});
    for (std::size_t k = 0; k < layout.universal; ++k) s.universal.push_back({l, perm[next++]});
  }
  return s;
}

/// Aligned token for each planted feature: within a layer, planted features
/// are enumerated label by label and assigned basis directions 0, 1, 2, ...
/// modulo d_model.
inline std::map<FeatureId, std::uint32_t> planted_tokens(const PlantedSpec& spec, const ToyConfig& cfg) {
  std::map<FeatureId, std::uint32_t> out;
  std::map<std::uint32_t, std::uint32_t> next_in_layer;
  for (const auto& label : spec.labels) {
    auto it = spec.planted.find(label);
    if (it == spec.planted.end()) continue;
    for (auto f : it->second) out[f] = next_in_layer[f.layer]++ % cfg.d_model;
  }
  return out;
}

/// Distinct aligned tokens carrying each label's planted features.
inline std::map<std::string, std::vector<std::uint32_t>> label_tokens(const PlantedSpec& spec,
                                                                      const ToyConfig& cfg) {
  const auto tok = planted_tokens(spec, cfg);
  std::map<std::string, std::vector<std::uint32_t>> out;
  for (const auto& label : spec.labels) {
    std::set<std::uint32_t> ts;
    auto it = spec.planted.find(label);
    if (it != spec.planted.end())
      for (auto f : it->second) ts.insert(tok.at(f));
    out[label].assign(ts.begin(), ts.end());
  }
  return out;
}

/// Builds the SAE. Aligned mode: planted decoder rows are the basis vectors of
/// their tokens; shared rows point at the normalized sum of the member labels'
/// planted directions plus a small jitter; other rows are random unit vectors.
/// The encoder is tied to the decoder with bias -sae_threshold.
inline SyntheticSae build_sae(const ToyConfig& cfg, const PlantedSpec& spec) {
  cfg.validate();
  spec.validate(cfg);
  Rng rng(stage_seed(cfg.seed, "sae"));
  const auto tokens = planted_tokens(spec, cfg);
  SyntheticSae sae;
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    Matrix dec(cfg.d_sae, cfg.d_model);
    for (std::size_t j = 0; j < cfg.d_sae; ++j) random_unit(dec.row(j), rng);
    if (cfg.aligned_unembedding) {
      for (const auto& [f, t] : tokens) {
        if (f.layer != l) continue;
        auto r = dec.row(f.index);
        std::fill(r.begin(), r.end(), 0.0);
        r[t] = 1.0;
      }
      for (const auto& g : spec.shared) {
        std::vector<double> dir(cfg.d_model, 0.0);
        for (const auto& label : g.labels) {
          auto it = spec.planted.find(label);
          if (it == spec.planted.end()) continue;
          for (auto f : it->second)
            if (f.layer == l) dir[tokens.at(f)] += 1.0;
        }
        const double n = vec::norm(dir);
        if (n == 0.0) continue;
        for (auto f : g.features) {
          if (f.layer != l) continue;
          auto r = dec.row(f.index);
          std::vector<double> jitter(cfg.d_model);
          random_unit(jitter, rng);
          for (std::size_t k = 0; k < cfg.d_model; ++k) r[k] = dir[k] / n + 0.2 * jitter[k];
          const double rn = vec::norm(r);
          for (auto& x : r) x /= rn;
        }
      }
    }
    sae.layers.push_back(SaeLayer::tied(std::move(dec), -cfg.sae_threshold));
  }
  return sae;
}

inline DumpManifest synthetic_manifest(const ToyConfig& cfg) {
  DumpManifest m;
  m.model_id = concat("toy-transformer-seed", cfg.seed);
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    m.layers.push_back(l);
    m.sae_width.push_back(cfg.d_sae);
    m.d_model.push_back(cfg.d_model);
  }
  return m;
}

/// Draws n_per_label records per label following the planted ground truth.
/// Records are ordered label by label; ids are `<label>-<i>`.
inline Dump generate_synthetic_dump(const PlantedSpec& spec, const ToyConfig& cfg, std::size_t n_per_label,
                                    std::uint64_t seed) {
  if (n_per_label == 0) fail(ErrorKind::config, "n_per_label must be >= 1");
  spec.validate(cfg);
  Rng rng(stage_seed(seed, "synthetic-dump"));
  const auto noise = spec.noise_features(cfg);
  Dump d;
  d.manifest = synthetic_manifest(cfg);
  for (const auto& label : spec.labels) {
    for (std::size_t i = 0; i < n_per_label; ++i) {
      std::map<FeatureId, float> active;
      auto fire = [&](FeatureId f) {
        active[f] = static_cast<float>(rng.uniform(spec.strength_lo, spec.strength_hi));
      };
      if (auto it = spec.planted.find(label); it != spec.planted.end())
        for (auto f : it->second)
          if (rng.bernoulli(spec.planted_rate)) fire(f);
      for (const auto& g : spec.shared) {
        if (std::find(g.labels.begin(), g.labels.end(), label) == g.labels.end()) continue;
        for (auto f : g.features)
          if (rng.bernoulli(spec.shared_rate)) fire(f);
      }
      for (auto f : spec.universal) fire(f);
      for (auto f : noise)
        if (rng.bernoulli(spec.noise_rate)) fire(f);

      ActivationRecord r;
      r.assertion_id = concat(label, "-", i);
      r.label = label;
      for (auto l : d.manifest.layers) r.per_layer[l];
      for (const auto& [f, v] : active) r.per_layer[f.layer].entries.push_back({f.index, v});
      d.records.push_back(std::move(r));
    }
  }
  d.manifest.record_count = d.records.size();
  return d;
}

struct ForwardResult {
  std::vector<std::vector<double>> logits;                   // seq x vocab
  std::vector<std::vector<std::vector<double>>> residuals;   // layer x seq x d_model, post-intervention
};

struct Intervention {
  const SteeringVectorSet* set = nullptr;
  /// Positions before this index are left untouched (0 = whole sequence).
  std::size_t from_position = 0;
};

/// Pre-norm decoder-only transformer with random weights. Logits are read
/// directly from the final residual stream (no final norm) through the
/// unembedding.
class ToyTransformer {
 public:
  explicit ToyTransformer(const ToyConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(stage_seed(cfg_.seed, "toy-transformer"));
    const std::size_t d = cfg_.d_model;
    const double unit = 1.0 / std::sqrt(static_cast<double>(d));
    embed_ = Matrix::gaussian(cfg_.vocab, d, unit, rng);
    unembed_ = embed_;
    if (cfg_.aligned_unembedding) {
      for (auto& x : embed_.data) x *= cfg_.generic_embed_scale;
      unembed_ = embed_;
      for (std::size_t t = 0; t < d; ++t) {
        auto e = embed_.row(t);
        auto u = unembed_.row(t);
        std::fill(e.begin(), e.end(), 0.0);
        std::fill(u.begin(), u.end(), 0.0);
        e[t] = cfg_.aligned_embed_scale;
        u[t] = cfg_.aligned_unembed_scale;
      }
    } else {
      unembed_ = Matrix::gaussian(cfg_.vocab, d, unit, rng);
    }
    pos_ = Matrix::gaussian(cfg_.max_seq, d, 0.1 * unit, rng);
    const double s = cfg_.block_init * unit;
    const double s_mlp = cfg_.block_init / std::sqrt(4.0 * d);
    for (std::uint32_t l = 0; l < cfg_.n_layers; ++l) {
      Block b;
      b.wq = Matrix::gaussian(d, d, s, rng);
      b.wk = Matrix::gaussian(d, d, s, rng);
      b.wv = Matrix::gaussian(d, d, s, rng);
      b.wo = Matrix::gaussian(d, d, s, rng);
      b.w1 = Matrix::gaussian(d, 4 * d, s, rng);
      b.w2 = Matrix::gaussian(4 * d, d, s_mlp, rng);
      blocks_.push_back(std::move(b));
    }
  }

  const ToyConfig& config() const { return cfg_; }
  const Matrix& unembedding() const { return unembed_; }
  const Matrix& embedding() const { return embed_; }

  ForwardResult forward(std::span<const std::uint32_t> tokens, Intervention iv = {}) const {
    if (tokens.empty()) fail(ErrorKind::config, "forward: empty token sequence");
    if (tokens.size() > cfg_.max_seq) fail(ErrorKind::config, "forward: sequence longer than max_seq");
    const std::size_t n = tokens.size(), d = cfg_.d_model;
    std::vector<std::vector<double>> h(n, std::vector<double>(d));
    for (std::size_t p = 0; p < n; ++p) {
      if (tokens[p] >= cfg_.vocab) fail(ErrorKind::config, "forward: token ", tokens[p], " out of range");
      const auto e = embed_.row(tokens[p]);
      const auto q = pos_.row(p);
      for (std::size_t k = 0; k < d; ++k) h[p][k] = e[k] + q[k];
    }
    ForwardResult out;
    for (std::uint32_t l = 0; l < cfg_.n_layers; ++l) {
      run_block(blocks_[l], h);
      if (iv.set)
        for (std::size_t p = iv.from_position; p < n; ++p) apply_steering_inplace(h[p], l, *iv.set);
      out.residuals.push_back(h);
    }
    for (std::size_t p = 0; p < n; ++p) {
      std::vector<double> lg(cfg_.vocab);
      for (std::size_t t = 0; t < cfg_.vocab; ++t) lg[t] = vec::dot(h[p], unembed_.row(t));
      out.logits.push_back(std::move(lg));
    }
    return out;
  }

 private:
  struct Block {
    Matrix wq, wk, wv, wo, w1, w2;
  };

  static std::vector<double> rms_norm(std::span<const double> x) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
    std::vector<double> y(x.begin(), x.end());
    for (auto& v : y) v *= inv;
    return y;
  }

  static double gelu(double x) {
    const double c = std::sqrt(2.0 / std::numbers::pi);
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
  }

  void run_block(const Block& b, std::vector<std::vector<double>>& h) const {
    const std::size_t n = h.size(), d = cfg_.d_model, hd = d / cfg_.n_heads;
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (std::size_t p = 0; p < n; ++p) {
      const auto x = rms_norm(h[p]);
      q[p] = matvec_right(x, b.wq);
      k[p] = matvec_right(x, b.wk);
      v[p] = matvec_right(x, b.wv);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t p = 0; p < n; ++p) {
      std::vector<double> ctx(d, 0.0);
      for (std::size_t head = 0; head < cfg_.n_heads; ++head) {
        const std::size_t off = head * hd;
        std::vector<double> w(p + 1);
        double mx = -INFINITY;
        for (std::size_t s = 0; s <= p; ++s) {
          double a = 0.0;
          for (std::size_t i = 0; i < hd; ++i) a += q[p][off + i] * k[s][off + i];
          w[s] = a * scale;
          mx = std::max(mx, w[s]);
        }
        double z = 0.0;
        for (auto& x : w) z += (x = std::exp(x - mx));
        for (std::size_t s = 0; s <= p; ++s)
          for (std::size_t i = 0; i < hd; ++i) ctx[off + i] += w[s] / z * v[s][off + i];
      }
      const auto attn = matvec_right(ctx, b.wo);
      for (std::size_t i = 0; i < d; ++i) h[p][i] += attn[i];
    }
    for (std::size_t p = 0; p < n; ++p) {
      auto mid = matvec_right(rms_norm(h[p]), b.w1);
      for (auto& x : mid) x = gelu(x);
      const auto mlp = matvec_right(mid, b.w2);
      for (std::size_t i = 0; i < d; ++i) h[p][i] += mlp[i];
    }
  }

  ToyConfig cfg_;
  Matrix embed_, unembed_, pos_;
  std::vector<Block> blocks_;
};

inline std::vector<double> log_softmax(std::span<const double> logits, double temperature = 1.0) {
  std::vector<double> out(logits.begin(), logits.end());
  double mx = -INFINITY;
  for (auto& x : out) mx = std::max(mx, x /= temperature);
  double z = 0.0;
  for (double x : out) z += std::exp(x - mx);
  const double lz = mx + std::log(z);
  for (auto& x : out) x -= lz;
  return out;
}

struct Generation {
  std::vector<std::uint32_t> tokens;  // continuation only
};

struct SamplingOptions {
  std::size_t n_new = 16;
  double temperature = 0.9;
  // CTRL-style penalty on tokens already generated: positive logits are
  // divided by it, negative ones multiplied. 1 disables it.
  double repetition_penalty = 1.0;
  bool steer_prompt = true;  // false: intervene on generated positions only

  void validate() const {
    if (!(temperature > 0.0)) fail(ErrorKind::config, "temperature must be positive");
    if (!(repetition_penalty >= 1.0)) fail(ErrorKind::config, "repetition_penalty must be >= 1");
  }
};

/// Temperature sampling, optionally under a steering intervention.
inline Generation generate(const ToyTransformer& model, std::span<const std::uint32_t> prompt,
                           const SamplingOptions& opt, Rng& rng, const SteeringVectorSet* steering = nullptr) {
  if (prompt.empty()) fail(ErrorKind::config, "generate: empty prompt");
  opt.validate();
  std::vector<std::uint32_t> seq(prompt.begin(), prompt.end());
  std::vector<bool> seen(model.config().vocab, false);
  Generation g;
  const std::size_t max_len = model.config().max_seq;
  for (std::size_t step = 0; step < opt.n_new && seq.size() < max_len; ++step) {
    Intervention iv{steering, opt.steer_prompt ? 0 : prompt.size()};
    const auto fr = model.forward(seq, iv);
    auto logits = fr.logits.back();
    for (std::size_t t = 0; t < logits.size(); ++t)
      if (seen[t]) logits[t] = logits[t] > 0.0 ? logits[t] / opt.repetition_penalty : logits[t] * opt.repetition_penalty;
    const auto lp = log_softmax(logits, opt.temperature);
    double u = rng.uniform(), acc = 0.0;
    std::uint32_t pick = static_cast<std::uint32_t>(lp.size() - 1);
    for (std::size_t t = 0; t < lp.size(); ++t) {
      acc += std::exp(lp[t]);
      if (u < acc) {
        pick = static_cast<std::uint32_t>(t);
        break;
      }
    }
    seq.push_back(pick);
    seen[pick] = true;
    g.tokens.push_back(pick);
  }
  return g;
}

/// Mean per-token log-likelihood of `continuation` after `prompt` under the
/// unsteered model.
inline double mean_loglik(const ToyTransformer& model, std::span<const std::uint32_t> prompt,
                          std::span<const std::uint32_t> continuation) {
  if (continuation.empty()) return 0.0;
  std::vector<std::uint32_t> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  const auto fr = model.forward(seq);
  double total = 0.0;
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const auto lp = log_softmax(fr.logits[prompt.size() + i - 1]);
    total += lp[continuation[i]];
  }
  return total / static_cast<double>(continuation.size());
}

/// Runs `tokens` through the unsteered model, SAE-encodes every position at
/// every layer and max-pools over positions.
inline ActivationRecord encode_sequence(const ToyTransformer& model, const SyntheticSae& sae,
                                        std::span<const std::uint32_t> tokens, std::string id,
                                        std::string label) {
  const auto fr = model.forward(tokens);
  ActivationRecord r{std::move(id), std::move(label), {}};
  for (std::uint32_t l = 0; l < model.config().n_layers; ++l) {
    std::vector<std::vector<double>> per_token;
    for (const auto& h : fr.residuals[l]) per_token.push_back(sae.layers.at(l).encode(h));
    r.per_layer[l] = max_pool_tokens(per_token);
  }
  return r;
}

/// Token ids rendered as text ("t3 t17 ...") and parsed back.
inline std::string tokens_to_text(std::span<const std::uint32_t> tokens) {
  std::string out;
  for (auto t : tokens) out += (out.empty() ? "t" : " t") + std::to_string(t);
  return out;
}

inline std::vector<std::uint32_t> text_to_tokens(const std::string& text, std::uint32_t vocab) {
  std::vector<std::uint32_t> out;
  for (const auto& w : split(text, ' ')) {
    if (w.empty()) continue;
    if (w.size() < 2 || w[0] != 't') fail(ErrorKind::format, "toy text: bad token '", w, "'");
    std::uint32_t t;
    try {
      t = static_cast<std::uint32_t>(std::stoul(w.substr(1)));
    } catch (const std::logic_error&) {
      fail(ErrorKind::format, "toy text: bad token '", w, "'");
    }
    if (t >= vocab) fail(ErrorKind::format, "toy text: token ", t, " out of vocabulary");
    out.push_back(t);
  }
  return out;
}

/// Tokens not owned by any label.
inline std::vector<std::uint32_t> generic_tokens(const std::map<std::string, std::vector<std::uint32_t>>& owned,
                                                 std::uint32_t vocab) {
  std::set<std::uint32_t> used;
  for (const auto& [_, ts] : owned) used.insert(ts.begin(), ts.end());
  std::vector<std::uint32_t> out;
  for (std::uint32_t t = 0; t < vocab; ++t)
    if (!used.count(t)) out.push_back(t);
  return out;
}

/// A synthetic assertion for `label`: each position is one of the label's
/// tokens with probability `density`, otherwise a generic token; the final
/// position always carries a label token.
inline std::vector<std::uint32_t> synthetic_assertion(std::span<const std::uint32_t> own,
                                                      std::span<const std::uint32_t> generic, std::size_t length,
                                                      double density, Rng& rng) {
  std::vector<std::uint32_t> seq;
  for (std::size_t p = 0; p < length; ++p) {
    const bool mine = p + 1 == length || generic.empty() || rng.bernoulli(density);
    const auto& pool = mine ? own : generic;
    seq.push_back(pool[rng.below(pool.size())]);
  }
  return seq;
}

}  // namespace cue::toy
