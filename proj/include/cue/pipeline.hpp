// SPDX-License-Identifier: Apache-2.0
#pragma once

// File-based pipeline stages behind the `cue` command line tool. Every stage
// reads its inputs from files, writes its artifacts under the run directory
// (--out) and records a run manifest with the config hash and input hashes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cue/activations.hpp"
#include "cue/common.hpp"
#include "cue/corpus.hpp"
#include "cue/eval.hpp"
#include "cue/probes.hpp"
#include "cue/prototypes.hpp"
#include "cue/rng.hpp"
#include "cue/selection.hpp"
#include "cue/steering.hpp"
#include "cue/toymodel.hpp"

namespace cue::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kConfigError = 2, kMissingInput = 3, kNumericFailure = 4 };

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"select",    "prototypes", "bias",  "steer-build",
                                              "steer-run", "probe",      "synth", "report"};
  return names;
}

inline const std::vector<std::string>& condition_names() {
  static const std::vector<std::string> names{"implicit", "steer-implicit", "explicit", "steer-explicit"};
  return names;
}

struct RunConfig {
  fs::path corpus;    // default <out>/corpus.tsv
  fs::path dump;      // default <out>/dump
  fs::path decoders;  // default <out>/decoders
  fs::path out = ".";
  fs::path config;    // optional toy/planted JSON for synth
  double rho = 0.1;
  std::vector<double> alphas{0.25, 0.5, 1.0, 2.0};
  std::uint64_t seed = 0;
  std::uint32_t layer_stride = 1;
  std::string scheme = "binary";
  std::string target;     // empty: every label
  std::string condition;  // empty: every condition present
  std::size_t samples = 100;       // generations per (target, alpha)
  std::size_t n_per_label = 50;    // synth records per label
  std::size_t gen_tokens = 16;
  double temperature = 0.9;
  double repetition_penalty = 1.3;
  double fluency_floor = 5.0;
  bool normalize = false;
  bool steer_prompt = true;
  std::string probe_pooling = "final";  // final | mean

  toy::SamplingOptions sampling() const { return {gen_tokens, temperature, repetition_penalty, steer_prompt}; }

  fs::path dump_dir() const { return dump.empty() ? out / "dump" : dump; }
  fs::path decoder_dir() const { return decoders.empty() ? out / "decoders" : decoders; }
  fs::path corpus_path() const { return corpus.empty() ? out / "corpus.tsv" : corpus; }

  void validate() const {
    if (!(rho > 0.0 && rho <= 1.0)) fail(ErrorKind::config, "--rho must be in (0, 1]");
    if (layer_stride == 0) fail(ErrorKind::config, "--layer-stride must be >= 1");
    if (!condition.empty() &&
        std::find(condition_names().begin(), condition_names().end(), condition) == condition_names().end())
      fail(ErrorKind::config, "unknown --condition '", condition, "'");
    for (std::size_t i = 0; i < alphas.size(); ++i)
      if (alphas[i] < 0.0 || (i > 0 && alphas[i] <= alphas[i - 1]))
        fail(ErrorKind::config, "--alphas must be non-negative and strictly increasing");
    if (samples == 0 || n_per_label == 0 || gen_tokens == 0)
      fail(ErrorKind::config, "--samples, --per-label and --gen-tokens must be positive");
    sampling().validate();
    QuantizationScheme::parse(scheme);
    if (probe_pooling != "final" && probe_pooling != "mean")
      fail(ErrorKind::config, "--probe-pooling must be 'final' or 'mean'");
  }

  /// Hash over every setting (paths included).
  json to_json() const {
    return {{"corpus", corpus.string()},   {"dump", dump.string()},
            {"decoders", decoders.string()}, {"out", out.string()},
            {"config", config.string()},   {"rho", rho},
            {"alphas", alphas},            {"seed", seed},
            {"layer_stride", layer_stride}, {"scheme", scheme},
            {"target", target},            {"condition", condition},
            {"samples", samples},          {"n_per_label", n_per_label},
            {"gen_tokens", gen_tokens},    {"temperature", temperature},
            {"repetition_penalty", repetition_penalty}, {"fluency_floor", fluency_floor}, {"normalize", normalize},
            {"steer_prompt", steer_prompt}, {"probe_pooling", probe_pooling}};
  }
  std::string hash() const { return hex64(fnv1a64(to_json().dump())); }
};

/// Tracks inputs and outputs of one command and writes `run_<command>.json`.
class RunLog {
 public:
  RunLog(std::string command, const RunConfig& cfg) : command_(std::move(command)), cfg_(cfg) {}

  /// Fails with a missing-input error naming the artifact.
  fs::path require(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) fail(ErrorKind::input, "missing ", what, ": ", p.string());
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file()) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) inputs_[f.string()] = hex64(fnv1a64(read_file_bytes(f.string())));
    } else {
      inputs_[p.string()] = hex64(fnv1a64(read_file_bytes(p.string())));
    }
    return p;
  }

  void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_file_bytes(p.string(), text);
    outputs_.push_back(p.string());
  }

  /// JSON artifacts carry the producing config hash.
  void write_json(const fs::path& p, json j) {
    j["config_hash"] = cfg_.hash();
    write_text(p, j.dump(2) + "\n");
  }

  void note_output(const fs::path& p) { outputs_.push_back(p.string()); }

  void finish() {
    std::sort(outputs_.begin(), outputs_.end());
    const json j{{"command", command_}, {"config_hash", cfg_.hash()}, {"config", cfg_.to_json()},
                 {"inputs", inputs_},   {"outputs", outputs_}};
    fs::create_directories(cfg_.out);
    // steer-run is invoked once per condition, so each gets its own log.
    const auto name = command_ == "steer-run" && !cfg_.condition.empty() ? concat(command_, "_", cfg_.condition)
                                                                         : command_;
    write_file_bytes((cfg_.out / concat("run_", name, ".json")).string(), j.dump(2) + "\n");
  }

 private:
  std::string command_;
  const RunConfig& cfg_;
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> outputs_;
};

inline json read_json(const fs::path& p) {
  try {
    return json::parse(read_file_bytes(p.string()));
  } catch (const json::exception& e) {
    fail(ErrorKind::format, p.string(), ": ", e.what());
  }
}

/// Toy model, SAE and planted ground truth reconstructed from synth.json.
struct ToyWorld {
  toy::ToyConfig config;
  toy::PlantedSpec spec;
  toy::ToyTransformer model;
  toy::SyntheticSae sae;

  explicit ToyWorld(const json& j)
      : config(toy::toy_config_from_json(j.at("toy"))),
        spec(toy::planted_spec_from_json(j.at("planted"))),
        model(config),
        sae(toy::build_sae(config, spec)) {}

  std::vector<std::uint32_t> implicit_prompt(std::uint64_t seed) const {
    const auto generic = toy::generic_tokens(toy::label_tokens(spec, config), config.vocab);
    Rng rng(stage_seed(seed, "prompt"));
    std::vector<std::uint32_t> p;
    for (int i = 0; i < 4; ++i) p.push_back(generic[rng.below(generic.size())]);
    return p;
  }

  /// Implicit prompt preceded by the target's first token ("I am from <c>").
  std::vector<std::uint32_t> explicit_prompt(std::uint64_t seed, const std::string& target) const {
    auto p = implicit_prompt(seed);
    const auto own = toy::label_tokens(spec, config).at(target);
    if (own.empty()) fail(ErrorKind::config, "label '", target, "' has no tokens");
    p.insert(p.begin(), own.front());
    return p;
  }

  double universal_share(const ActivationRecord& r) const {
    std::set<FeatureId> uni(spec.universal.begin(), spec.universal.end());
    double total = 0.0, on_universal = 0.0;
    for (const auto& [layer, acts] : r.per_layer)
      for (const auto& e : acts.entries) {
        total += e.value;
        if (uni.count({layer, e.index})) on_universal += e.value;
      }
    return total > 0.0 ? on_universal / total : 0.0;
  }
};

inline ToyWorld load_world(RunLog& log, const RunConfig& cfg) {
  return ToyWorld(read_json(log.require(cfg.out / "synth.json", "toy model description (run `synth` first)")));
}

inline SelectionResult load_selection(RunLog& log, const RunConfig& cfg) {
  return selection_from_json(read_json(log.require(cfg.out / "selection.json", "SelectionResult (run `select`)")));
}

inline PrototypeSet load_prototypes(RunLog& log, const RunConfig& cfg) {
  return prototypes_from_json(read_json(log.require(cfg.out / "prototypes.json", "PrototypeSet (run `prototypes`)")));
}

inline Dump load_dump(RunLog& log, const fs::path& dir, const std::string& what) {
  log.require(dir / "manifest.json", what + " manifest");
  log.require(dir / "records.bin", what + " records");
  return read_dump(dir);
}

inline std::string alpha_tag(double a) {
  std::ostringstream o;
  o << a;
  return "alpha_" + o.str();
}

inline std::vector<std::string> targets_for(const RunConfig& cfg, const PrototypeSet& protos) {
  if (cfg.target.empty()) return protos.labels;
  protos.slot(cfg.target);
  return {cfg.target};
}

// ---------------------------------------------------------------- commands

inline void cmd_synth(const RunConfig& cfg) {
  RunLog log("synth", cfg);
  json user = json::object();
  if (!cfg.config.empty()) user = read_json(log.require(cfg.config, "synth config"));
  auto tc = toy::toy_config_from_json(user.value("toy", json::object()));
  if (!user.contains("toy") || !user.at("toy").contains("seed")) tc.seed = stage_seed(cfg.seed, "toy");
  const auto spec = user.contains("planted") ? toy::planted_spec_from_json(user.at("planted"))
                                             : toy::default_planted_spec(tc, {}, stage_seed(cfg.seed, "layout"));
  spec.validate(tc);
  log.write_json(cfg.out / "synth.json", {{"toy", to_json(tc)}, {"planted", to_json(spec)},
                                          {"n_per_label", cfg.n_per_label}, {"seed", cfg.seed}});

  const auto dump = toy::generate_synthetic_dump(spec, tc, cfg.n_per_label, stage_seed(cfg.seed, "dump"));
  write_dump(cfg.dump_dir(), dump.manifest, dump.records);
  log.note_output(cfg.dump_dir() / "manifest.json");
  log.note_output(cfg.dump_dir() / "records.bin");

  const auto sae = toy::build_sae(tc, spec);
  fs::create_directories(cfg.decoder_dir());
  for (std::uint32_t l = 0; l < tc.n_layers; ++l) {
    write_decoder(cfg.decoder_dir() / decoder_filename(l), sae.export_decoder(l));
    log.note_output(cfg.decoder_dir() / decoder_filename(l));
  }

  // Token-level assertions for probing, one per dump record.
  const auto owned = toy::label_tokens(spec, tc);
  const auto generic = toy::generic_tokens(owned, tc.vocab);
  Rng rng(stage_seed(cfg.seed, "corpus"));
  Corpus corpus;
  for (const auto& r : dump.records) {
    const auto toks = toy::synthetic_assertion(owned.at(r.label), generic, 8, 0.4, rng);
    corpus.add({r.assertion_id, r.label, toy::tokens_to_text(toks)});
  }
  log.write_text(cfg.corpus_path(), "# id\tlabel\ttext\n" + format_corpus(corpus));
  log.finish();
}

inline void cmd_select(const RunConfig& cfg) {
  RunLog log("select", cfg);
  const auto dump = load_dump(log, cfg.dump_dir(), "activation dump");
  const auto scheme = QuantizationScheme::parse(cfg.scheme);
  auto sel = select_features(score_features(dump.records, scheme), cfg.rho);
  auto j = to_json(sel);
  j["scheme"] = scheme.str();
  log.write_json(cfg.out / "selection.json", j);
  log.finish();
}

inline void cmd_prototypes(const RunConfig& cfg) {
  RunLog log("prototypes", cfg);
  const auto sel = load_selection(log, cfg);
  const auto dump = load_dump(log, cfg.dump_dir(), "activation dump");
  const auto protos = build_prototypes(dump.records, sel);
  log.write_json(cfg.out / "prototypes.json", to_json(protos));
  log.finish();
}

inline void cmd_steer_build(const RunConfig& cfg) {
  RunLog log("steer-build", cfg);
  const auto sel = load_selection(log, cfg);
  const auto protos = load_prototypes(log, cfg);
  std::optional<DumpManifest> manifest;
  if (fs::exists(cfg.dump_dir() / "manifest.json"))
    manifest = read_manifest(log.require(cfg.dump_dir(), "activation dump").string());

  std::set<std::uint32_t> layers;
  for (const auto& f : sel.selected)
    if (f.layer % cfg.layer_stride == 0) layers.insert(f.layer);
  std::map<std::uint32_t, DecoderMatrix> decoders;
  for (auto l : layers) {
    const auto path = log.require(cfg.decoder_dir() / decoder_filename(l), concat("decoder for layer ", l));
    decoders[l] = manifest ? read_decoder(cfg.decoder_dir(), *manifest, l) : read_decoder(path);
  }
  const DecodeOptions opt{cfg.layer_stride, cfg.normalize};
  json index = json::array();
  for (const auto& target : targets_for(cfg, protos)) {
    auto set = decode_delta(steering_delta(protos, target), sel, decoders, opt);
    for (double a : cfg.alphas) {
      set.alpha = a;
      const auto dir = cfg.out / "steering" / target / alpha_tag(a);
      write_steering(dir, set);
      for (const auto& e : fs::directory_iterator(dir)) log.note_output(e.path());
      index.push_back({{"target", target}, {"alpha", a}, {"dir", dir.string()}});
    }
  }
  log.write_json(cfg.out / "steering" / "index.json", {{"sets", index}});
  log.finish();
}

inline bool is_steered(const std::string& condition) { return condition.rfind("steer-", 0) == 0; }

/// Generates `samples` responses per (target, alpha) for one condition and
/// stores their pooled activations as a dump plus a JSONL side file.
inline void cmd_steer_run(const RunConfig& cfg) {
  RunLog log("steer-run", cfg);
  if (cfg.condition.empty()) fail(ErrorKind::config, "steer-run needs --condition");
  const auto world = load_world(log, cfg);
  const auto protos = load_prototypes(log, cfg);
  const bool steered = is_steered(cfg.condition);
  const bool explicit_prompt = cfg.condition.find("explicit") != std::string::npos;
  const std::vector<double> alphas = steered ? cfg.alphas : std::vector<double>{0.0};

  const auto out_dir = cfg.out / "generations" / cfg.condition;
  DumpWriter writer(out_dir, toy::synthetic_manifest(world.config));
  std::string jsonl;
  for (const auto& target : targets_for(cfg, protos)) {
    const auto prompt = explicit_prompt ? world.explicit_prompt(cfg.seed, target) : world.implicit_prompt(cfg.seed);
    for (double a : alphas) {
      std::optional<SteeringVectorSet> set;
      if (steered) {
        const auto dir = cfg.out / "steering" / target / alpha_tag(a);
        log.require(dir, concat("steering set for ", target, " at alpha ", a, " (run `steer-build`)"));
        set = read_steering(dir);
        set->alpha = a;
      }
      for (std::size_t i = 0; i < cfg.samples; ++i) {
        // The stream depends on prompt kind, target and index only, so an
        // alpha = 0 steered run reproduces the matching unsteered run.
        Rng rng(stage_seed(cfg.seed, concat("gen/", explicit_prompt ? "explicit" : "implicit", "/", target, "/", i)));
        const auto g = toy::generate(world.model, prompt, cfg.sampling(), rng, set ? &*set : nullptr);
        const auto id = concat(cfg.condition, "/", target, "/", alpha_tag(a), "/", i);
        const auto rec = toy::encode_sequence(world.model, world.sae, g.tokens, id, target);
        writer.append(rec);
        jsonl += json{{"id", id},
                      {"target", target},
                      {"alpha", a},
                      {"text", toy::tokens_to_text(g.tokens)},
                      {"mean_loglik", toy::mean_loglik(world.model, prompt, g.tokens)},
                      {"universal_share", world.universal_share(rec)}}
                     .dump() +
                 "\n";
      }
    }
  }
  writer.close();
  log.note_output(out_dir / "manifest.json");
  log.note_output(out_dir / "records.bin");
  log.write_text(out_dir / "responses.jsonl", jsonl);
  log.finish();
}

struct ResponseRow {
  std::string id, target, text;
  double alpha = 0.0, mean_loglik = 0.0, universal_share = 0.0;
};

inline std::vector<ResponseRow> read_responses(RunLog& log, const fs::path& dir) {
  const auto text = read_file_bytes(log.require(dir / "responses.jsonl", "responses").string());
  std::vector<ResponseRow> rows;
  for (const auto& line : split(text, '\n')) {
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      rows.push_back({j.at("id"), j.at("target"), j.at("text"), j.at("alpha"), j.at("mean_loglik"),
                      j.at("universal_share")});
    } catch (const json::exception& e) {
      fail(ErrorKind::format, (dir / "responses.jsonl").string(), ": ", e.what());
    }
  }
  return rows;
}

inline std::vector<std::string> present_conditions(const RunConfig& cfg) {
  if (!cfg.condition.empty()) return {cfg.condition};
  std::vector<std::string> out;
  for (const auto& c : condition_names())
    if (fs::exists(cfg.out / "generations" / c / "manifest.json")) out.push_back(c);
  if (out.empty()) fail(ErrorKind::input, "missing generations: run `steer-run` first");
  return out;
}

inline void cmd_bias(const RunConfig& cfg) {
  RunLog log("bias", cfg);
  const auto sel = load_selection(log, cfg);
  const auto protos = load_prototypes(log, cfg);
  for (const auto& condition : present_conditions(cfg)) {
    const auto gens = load_dump(log, cfg.out / "generations" / condition, "generations for " + condition);
    std::vector<std::pair<std::string, CueVector>> responses;
    for (const auto& r : gens.records) responses.emplace_back(r.assertion_id, cue_project(r, sel));
    const auto report = bias_report(responses, protos);

    // Argmax rate toward the intended target per (target, alpha).
    std::map<std::pair<std::string, std::string>, std::pair<std::size_t, std::size_t>> hits;
    for (std::size_t i = 0; i < gens.records.size(); ++i) {
      const auto parts = split(gens.records[i].assertion_id, '/');
      auto& h = hits[{gens.records[i].label, parts.size() > 2 ? parts[2] : "alpha_0"}];
      h.second++;
      if (report.per_response[i].scores.argmax == gens.records[i].label) h.first++;
    }
    json rates = json::array();
    for (const auto& [key, h] : hits)
      rates.push_back({{"target", key.first},
                       {"alpha", key.second},
                       {"n", h.second},
                       {"argmax_rate", static_cast<double>(h.first) / static_cast<double>(h.second)}});
    auto j = to_json(report);
    j["condition"] = condition;
    j["target_rates"] = rates;
    log.write_json(cfg.out / "bias" / (condition + ".json"), j);
    log.write_text(cfg.out / "bias" / (condition + "_heatmap.csv"), heatmap_csv(report));
  }
  log.finish();
}

inline void cmd_report(const RunConfig& cfg) {
  RunLog log("report", cfg);
  const auto sel = load_selection(log, cfg);
  const auto protos = load_prototypes(log, cfg);
  for (const auto& c : condition_names())
    log.require(cfg.out / "generations" / c / "manifest.json", "generations for condition " + c);

  struct Scored {
    ResponseRow row;
    JudgeScore score;
    bool argmax_hit;
  };
  std::map<std::string, std::vector<Scored>> by_condition;
  std::map<std::string, double> ll_ref;  // per target, from implicit generations
  {
    std::map<std::string, std::pair<double, std::size_t>> acc;
    for (const auto& r : read_responses(log, cfg.out / "generations" / "implicit")) {
      acc[r.target].first += r.mean_loglik;
      acc[r.target].second++;
    }
    for (const auto& [t, a] : acc) ll_ref[t] = a.first / static_cast<double>(a.second);
  }
  std::string concentration_csv = "condition,concentration";
  for (const auto& l : protos.labels) concentration_csv += ",share_" + l;
  concentration_csv += "\n";
  for (const auto& condition : condition_names()) {
    const auto dir = cfg.out / "generations" / condition;
    const auto gens = load_dump(log, dir, "generations for " + condition);
    const auto rows = read_responses(log, dir);
    if (rows.size() != gens.records.size()) fail(ErrorKind::format, dir.string(), ": responses/records mismatch");
    std::vector<std::pair<std::string, CueVector>> responses;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto cv = cue_project(gens.records[i], sel);
      responses.emplace_back(rows[i].id, cv);
      const ProxyJudge judge("proxy", protos, ll_ref.at(rows[i].target));
      const JudgedResponse jr{rows[i].id, rows[i].text, cv, rows[i].universal_share, rows[i].mean_loglik};
      const Judge* judges[] = {&judge};
      by_condition[condition].push_back(
          {rows[i], ensemble_score(judges, jr, rows[i].target), bias_score(cv, protos).argmax == rows[i].target});
    }
    const auto rep = bias_report(responses, protos);
    concentration_csv += concat(condition, ",", rep.concentration);
    for (double s : rep.shares) concentration_csv += concat(",", s);
    concentration_csv += "\n";
  }

  // condition x country (x alpha) means.
  std::string csv = "condition,country,alpha,n,faithfulness,rarity,fluency,argmax_rate\n";
  std::map<std::string, std::map<double, AlphaScores>> alpha_tables;
  std::map<std::string, double> explicit_baseline;
  for (const auto& condition : condition_names()) {
    std::map<std::pair<std::string, double>, std::vector<const Scored*>> groups;
    for (const auto& s : by_condition[condition]) groups[{s.row.target, s.row.alpha}].push_back(&s);
    for (const auto& [key, items] : groups) {
      double f = 0, r = 0, fl = 0, hit = 0;
      for (const auto* s : items) {
        f += s->score.faithfulness;
        r += s->score.rarity;
        fl += s->score.fluency;
        hit += s->argmax_hit;
      }
      const auto n = static_cast<double>(items.size());
      csv += concat(condition, ",", key.first, ",", key.second, ",", items.size(), ",", f / n, ",", r / n, ",",
                    fl / n, ",", hit / n, "\n");
      if (condition == "steer-implicit") alpha_tables[key.first][key.second] = {f / n, fl / n};
      if (condition == "explicit") explicit_baseline[key.first] = f / n;
    }
  }
  log.write_text(cfg.out / "report.csv", csv);
  log.write_text(cfg.out / "concentration.csv", concentration_csv);

  AlphaPolicy policy;
  std::vector<double> positive;
  for (double a : cfg.alphas)
    if (a > 0.0) positive.push_back(a);
  policy.candidates = positive;
  policy.fluency_floor = cfg.fluency_floor;
  json chosen = json::object();
  std::map<std::string, std::optional<double>> picked;
  for (const auto& [target, table] : alpha_tables) {
    picked[target] = select_alpha(table, explicit_baseline.at(target), policy);
    chosen[target] = picked[target] ? json(*picked[target]) : json(nullptr);
  }
  log.write_json(cfg.out / "alpha_selection.json", {{"selected", chosen}, {"fluency_floor", cfg.fluency_floor}});

  // Pairwise comparisons with two proxy judges: one prefers faithfulness,
  // the other faithfulness + rarity. Presentation order is randomized.
  const std::vector<std::pair<std::string, std::string>> pairs{
      {"steer-implicit", "explicit"}, {"steer-explicit", "explicit"}, {"steer-implicit", "implicit"}};
  std::vector<WinTieLoss> table;
  Rng order(stage_seed(cfg.seed, "pairwise-order"));
  for (const auto& [ca, cb] : pairs) {
    WinTieLoss wtl{ca, cb};
    std::map<std::pair<std::string, std::size_t>, const Scored*> b_items;
    std::map<std::string, std::size_t> b_seen;
    for (const auto& s : by_condition[cb]) b_items[{s.row.target, b_seen[s.row.target]++}] = &s;
    std::map<std::string, std::size_t> a_seen;
    for (const auto& s : by_condition[ca]) {
      const double want = picked[s.row.target].value_or(positive.empty() ? 0.0 : positive.front());
      if (is_steered(ca) && s.row.alpha != want) continue;
      auto it = b_items.find({s.row.target, a_seen[s.row.target]++});
      if (it == b_items.end()) continue;
      const auto& o = it->second->score;
      const bool a_first = order.bernoulli(0.5);
      const auto pick1 = pick_from_scores(s.score.faithfulness, o.faithfulness, a_first);
      const auto pick2 = pick_from_scores(s.score.faithfulness + s.score.rarity, o.faithfulness + o.rarity, a_first);
      wtl.add(pairwise(pick1, pick2));
    }
    table.push_back(wtl);
  }
  log.write_text(cfg.out / "pairwise.csv", win_tie_loss_csv(table));
  log.finish();
}

inline void cmd_probe(const RunConfig& cfg) {
  RunLog log("probe", cfg);
  const auto world = load_world(log, cfg);
  const auto corpus = load_corpus(log.require(cfg.corpus_path(), "corpus").string());
  if (corpus.records.empty()) fail(ErrorKind::input, "corpus is empty");
  std::map<std::uint32_t, FeatureRows> features;
  std::vector<std::uint32_t> labels;
  for (const auto& a : corpus.records) {
    const auto toks = toy::text_to_tokens(a.text, world.config.vocab);
    const auto fr = world.model.forward(toks);
    for (std::uint32_t l = 0; l < world.config.n_layers; ++l) {
      const auto& res = fr.residuals[l];
      if (cfg.probe_pooling == "final") {
        features[l].push_back(res.back());
        continue;
      }
      std::vector<double> mean(res.front().size(), 0.0);
      for (const auto& h : res)
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += h[k] / static_cast<double>(res.size());
      features[l].push_back(std::move(mean));
    }
    labels.push_back(static_cast<std::uint32_t>(
        std::find(corpus.labels.begin(), corpus.labels.end(), a.label) - corpus.labels.begin()));
  }
  ProbeHyper hyper;
  hyper.seed = stage_seed(cfg.seed, "probe");
  const auto rep = run_probes(features, labels, corpus.labels, hyper);
  log.write_json(cfg.out / "probe.json", to_json(rep));
  for (const auto& l : rep.layers)
    log.write_text(cfg.out / concat("probe_confusion_L", l.layer, ".csv"), confusion_csv(l.confusion, rep.labels));
  log.finish();
}

/// Runs one command; returns the process exit code and reports errors on `err`.
inline int run_command(const std::string& name, const RunConfig& cfg, std::ostream& err = std::cerr) {
  try {
    cfg.validate();
    if (name == "synth") cmd_synth(cfg);
    else if (name == "select") cmd_select(cfg);
    else if (name == "prototypes") cmd_prototypes(cfg);
    else if (name == "steer-build") cmd_steer_build(cfg);
    else if (name == "steer-run") cmd_steer_run(cfg);
    else if (name == "bias") cmd_bias(cfg);
    else if (name == "report") cmd_report(cfg);
    else if (name == "probe") cmd_probe(cfg);
    else fail(ErrorKind::config, "unknown command '", name, "'");
    return kOk;
  } catch (const Error& e) {
    err << "cue " << name << ": " << e.what() << "\n";
    switch (e.kind()) {
      case ErrorKind::config: return kConfigError;
      case ErrorKind::input:
      case ErrorKind::format: return kMissingInput;
      case ErrorKind::numeric: return kNumericFailure;
    }
    return kNumericFailure;
  } catch (const fs::filesystem_error& e) {
    err << "cue " << name << ": " << e.what() << "\n";
    return kMissingInput;
  }
}

}  // namespace cue::cli
