// SPDX-License-Identifier: Apache-2.0
#include <sys/wait.h>

#include <cstdlib>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "cue/pipeline.hpp"
#include "test_util.hpp"

namespace cue::cli {
namespace {

using testing::TempDir;

RunConfig small_config(const fs::path& out) {
  RunConfig c;
  c.out = out;
  c.n_per_label = 30;
  c.samples = 4;
  c.alphas = {0.0, 1.0};
  return c;
}

int run(const std::string& cmd, const RunConfig& cfg, std::string* err_text = nullptr) {
  std::ostringstream err;
  const int rc = run_command(cmd, cfg, err);
  if (err_text) *err_text = err.str();
  return rc;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CUE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Pipeline, SelectRanksPlantedFeaturesFirst) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TempDir dir;
    auto cfg = small_config(dir.path());
    cfg.n_per_label = 50;
    cfg.seed = seed;
    ASSERT_EQ(run("synth", cfg), kOk);
    ASSERT_EQ(run("select", cfg), kOk);
    const auto synth = read_json(dir / "synth.json");
    const auto spec = toy::planted_spec_from_json(synth.at("planted"));
    std::set<FeatureId> planted;
    for (const auto& [_, fs] : spec.planted) planted.insert(fs.begin(), fs.end());
    const auto sel = selection_from_json(read_json(dir / "selection.json"));
    ASSERT_FALSE(sel.selected.empty());
    // Shared group features are label-informative too and may interleave
    // with planted ones; noise and universal features never enter.
    std::set<FeatureId> shared;
    for (const auto& g : spec.shared) shared.insert(g.features.begin(), g.features.end());
    for (const auto& f : sel.selected)
      EXPECT_TRUE(planted.count(f) || shared.count(f)) << "seed " << seed << " " << f.str();
    EXPECT_TRUE(planted.count(sel.ranked.front().feature)) << "seed " << seed;
    // Every planted and group-shared feature outranks every noise feature.
    std::size_t last_informative = 0, first_noise = sel.ranked.size(), informative = 0;
    for (std::size_t i = 0; i < sel.ranked.size(); ++i) {
      const auto f = sel.ranked[i].feature;
      if (planted.count(f) || shared.count(f)) {
        last_informative = i;
        ++informative;
      } else if (first_noise == sel.ranked.size()) {
        first_noise = i;
      }
    }
    EXPECT_EQ(informative, planted.size() + shared.size()) << "seed " << seed;
    EXPECT_LT(last_informative, first_noise) << "seed " << seed;
    EXPECT_EQ(read_json(dir / "run_select.json").at("config_hash"), cfg.hash());
  }
}

TEST(Pipeline, ArtifactsAreIdempotent) {
  TempDir dir;
  auto cfg = small_config(dir.path());
  ASSERT_EQ(run("synth", cfg), kOk);
  ASSERT_EQ(run("select", cfg), kOk);
  ASSERT_EQ(run("prototypes", cfg), kOk);
  const auto sel = read_file_bytes((dir / "selection.json").string());
  const auto protos = read_file_bytes((dir / "prototypes.json").string());
  const auto records = read_file_bytes((dir / "dump" / "records.bin").string());
  ASSERT_EQ(run("synth", cfg), kOk);
  ASSERT_EQ(run("select", cfg), kOk);
  ASSERT_EQ(run("prototypes", cfg), kOk);
  EXPECT_EQ(read_file_bytes((dir / "selection.json").string()), sel);
  EXPECT_EQ(read_file_bytes((dir / "prototypes.json").string()), protos);
  EXPECT_EQ(read_file_bytes((dir / "dump" / "records.bin").string()), records);
}

TEST(Pipeline, FullChainProducesReport) {
  TempDir dir;
  auto cfg = small_config(dir.path());
  cfg.rho = 0.5;
  for (const char* cmd : {"synth", "select", "prototypes", "steer-build"}) ASSERT_EQ(run(cmd, cfg), kOk) << cmd;
  for (const auto& cond : condition_names()) {
    auto c = cfg;
    c.condition = cond;
    ASSERT_EQ(run("steer-run", c), kOk) << cond;
  }
  ASSERT_EQ(run("bias", cfg), kOk);
  ASSERT_EQ(run("report", cfg), kOk);

  // An alpha = 0 steered generation reproduces the unsteered one.
  const auto plain = read_dump((dir / "generations" / "implicit").string());
  const auto steered = read_dump((dir / "generations" / "steer-implicit").string());
  std::map<std::string, const ActivationRecord*> by_id;
  for (const auto& r : steered.records) by_id[r.assertion_id] = &r;
  std::size_t matched = 0;
  for (const auto& r : plain.records) {
    auto id = r.assertion_id;
    id.replace(0, std::string("implicit/").size(), "steer-implicit/");
    const auto* s = by_id.at(id);
    EXPECT_EQ(s->per_layer, r.per_layer) << id;
    ++matched;
  }
  EXPECT_EQ(matched, 4u * cfg.samples);

  const auto csv = read_file_bytes((dir / "report.csv").string());
  std::set<std::pair<std::string, std::string>> cells;
  std::size_t lines = 0;
  for (const auto& line : split(csv, '\n')) {
    if (line.empty() || lines++ == 0) continue;
    const auto f = split(line, ',');
    ASSERT_EQ(f.size(), 8u) << line;
    cells.insert({f[0], f[1]});
  }
  EXPECT_EQ(cells.size(), 4u * 4u);
  EXPECT_EQ(lines, 1u + 4u + 4u + 8u + 8u);
  for (const char* f : {"concentration.csv", "pairwise.csv", "alpha_selection.json", "bias/implicit.json",
                        "bias/steer-explicit_heatmap.csv", "run_report.json", "run_steer-run_implicit.json",
                        "run_steer-run_steer-explicit.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(split(read_file_bytes((dir / "pairwise.csv").string()), '\n').size(), 5u);
}

TEST(Pipeline, ProbeCommandWritesReport) {
  TempDir dir;
  auto cfg = small_config(dir.path());
  ASSERT_EQ(run("synth", cfg), kOk);
  for (const char* pooling : {"final", "mean"}) {
    cfg.probe_pooling = pooling;
    ASSERT_EQ(run("probe", cfg), kOk) << pooling;
    const auto j = read_json(dir / "probe.json");
    EXPECT_EQ(j.at("layers").size(), 2u);
    EXPECT_DOUBLE_EQ(j.at("chance").get<double>(), 0.25);
  }
  EXPECT_TRUE(fs::exists(dir / "probe_confusion_L1.csv"));
  cfg.probe_pooling = "max";
  EXPECT_EQ(run("probe", cfg), kConfigError);
}

TEST(Pipeline, MissingInputNamesArtifact) {
  TempDir dir;
  std::string err;
  EXPECT_EQ(run("prototypes", small_config(dir.path()), &err), kMissingInput);
  EXPECT_NE(err.find("SelectionResult"), std::string::npos) << err;
  EXPECT_EQ(run("select", small_config(dir.path()), &err), kMissingInput);
  EXPECT_NE(err.find("activation dump"), std::string::npos) << err;
}

TEST(Pipeline, ConfigErrors) {
  TempDir dir;
  auto cfg = small_config(dir.path());
  cfg.rho = 1.5;
  EXPECT_EQ(run("select", cfg), kConfigError);
  cfg = small_config(dir.path());
  cfg.alphas = {1.0, 0.5};
  EXPECT_EQ(run("steer-build", cfg), kConfigError);
  cfg = small_config(dir.path());
  EXPECT_EQ(run("steer-run", cfg), kConfigError);  // no --condition
  EXPECT_EQ(run("frobnicate", cfg), kConfigError);
}

TEST(Pipeline, DegenerateDumpIsNumericFailure) {
  TempDir dir;
  auto cfg = small_config(dir.path());
  DumpManifest m{"one-label", {0}, {8}, {4}, 0};
  std::vector<ActivationRecord> recs;
  for (int i = 0; i < 3; ++i) recs.push_back({concat("a", i), "only", {{0, sparsify(std::vector<float>{1, 0, 2})}}});
  write_dump((dir / "dump").string(), m, recs);
  std::string err;
  EXPECT_EQ(run("select", cfg, &err), kNumericFailure);
  EXPECT_NE(err.find("empty selection"), std::string::npos) << err;
}

TEST(Cli, ExitCodes) {
  TempDir dir;
  const auto out = dir.path().string();
  EXPECT_EQ(run_cli("select --out " + out + " --rho 0"), kConfigError);
  EXPECT_EQ(run_cli("select --out " + out), kMissingInput);
  EXPECT_EQ(run_cli("no-such-command"), kConfigError);
  EXPECT_EQ(run_cli("synth --out " + out + " --per-label 5"), kOk);
  EXPECT_TRUE(fs::exists(dir / "corpus.tsv"));
  EXPECT_EQ(run_cli("select --out " + out + " --rho 0.2 --scheme quantile:4"), kOk);
  EXPECT_EQ(run_cli("select --out " + out + " --scheme bogus"), kConfigError);
  EXPECT_EQ(run_cli("--help"), kOk);
}

}  // namespace
}  // namespace cue::cli
