// SPDX-License-Identifier: Apache-2.0
//
// cue: command line front end for the cultural-feature pipeline.
//
//   cue synth       --out run/ --seed 1
//   cue select      --out run/ --rho 0.5
//   cue prototypes  --out run/
//   cue steer-build --out run/ --alphas 0.25,0.5,1,2
//   cue steer-run   --out run/ --condition steer-implicit
//   cue bias        --out run/
//   cue report      --out run/
//   cue probe       --out run/
//
// Exit codes: 0 success, 2 config error, 3 missing or malformed input,
// 4 numeric failure.

#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "cue/pipeline.hpp"

int main(int argc, char** argv) {
  using cue::cli::RunConfig;
  CLI::App app{"Cultural SAE-feature selection, bias measurement and steering"};
  app.require_subcommand(1, 1);

  RunConfig cfg;
  std::string corpus, dump, decoders, out = ".", config;
  const std::map<std::string, std::string> help{
      {"synth", "write a toy model, planted activation dump, decoders and corpus"},
      {"select", "rank features by mutual information and keep the rho prefix"},
      {"prototypes", "build per-label prototypes over the selected features"},
      {"bias", "score generations against the prototypes per condition"},
      {"steer-build", "decode steering vectors per target and alpha"},
      {"steer-run", "generate responses for one condition"},
      {"probe", "train per-layer linear probes on the corpus"},
      {"report", "judge all four conditions and write summary tables"}};
  for (const auto& name : cue::cli::command_names()) {
    auto* sub = app.add_subcommand(name, help.at(name));
    sub->add_option("--corpus", corpus, "assertion corpus TSV (id, label, text)");
    sub->add_option("--dump", dump, "activation dump directory");
    sub->add_option("--decoders", decoders, "directory of decoder_L{l}.bin files");
    sub->add_option("--out", out, "run directory for artifacts")->capture_default_str();
    sub->add_option("--config", config, "synth configuration JSON (toy and planted sections)");
    sub->add_option("--rho", cfg.rho, "MI mass fraction to select")->capture_default_str();
    sub->add_option("--alphas", cfg.alphas, "steering strengths")->delimiter(',')->capture_default_str();
    sub->add_option("--seed", cfg.seed, "run seed")->capture_default_str();
    sub->add_option("--layer-stride", cfg.layer_stride, "intervene on every k-th layer")->capture_default_str();
    sub->add_flag("--normalize", cfg.normalize, "scale each layer's steering vector to unit norm");
    sub->add_option("--scheme", cfg.scheme, "binary, binary:T or quantile:K")->capture_default_str();
    sub->add_option("--target", cfg.target, "restrict to one label");
    sub->add_option("--condition", cfg.condition, "implicit, explicit, steer-implicit or steer-explicit");
    sub->add_option("--samples", cfg.samples, "generations per target and alpha")->capture_default_str();
    sub->add_option("--per-label", cfg.n_per_label, "synthetic records per label")->capture_default_str();
    sub->add_option("--gen-tokens", cfg.gen_tokens, "tokens per generation")->capture_default_str();
    sub->add_option("--temperature", cfg.temperature, "sampling temperature")->capture_default_str();
    sub->add_option("--repetition-penalty", cfg.repetition_penalty, "penalty on repeated tokens")
        ->capture_default_str();
    sub->add_option("--fluency-floor", cfg.fluency_floor, "minimum fluency for alpha selection")
        ->capture_default_str();
    sub->add_flag("--no-steer-prompt{false}", cfg.steer_prompt, "steer generated positions only");
    sub->add_option("--probe-pooling", cfg.probe_pooling, "residual pooling for probes (final|mean)")
        ->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cue::cli::kConfigError;
  }
  cfg.corpus = corpus;
  cfg.dump = dump;
  cfg.decoders = decoders;
  cfg.out = out;
  cfg.config = config;
  return cue::cli::run_command(app.get_subcommands().front()->get_name(), cfg);
}
