// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cue/common.hpp"
#include "cue/prototypes.hpp"

namespace cue {

/// Likert scores on [1, 10].
struct JudgeScore {
  double faithfulness = 1.0;
  double rarity = 1.0;
  double fluency = 1.0;

  bool operator==(const JudgeScore&) const = default;
};

/// What a judge sees of one generation.
struct JudgedResponse {
  std::string id;
  std::string text;
  CueVector cue;                 // activations on the selected features
  double universal_share = 0.0;  // fraction of activation mass on universal features
  double mean_loglik = 0.0;      // per token, under the unsteered model
};

/// Adapter seam for scoring backends (LLM judges or the proxies below).
class Judge {
 public:
  virtual ~Judge() = default;
  virtual std::string name() const = 0;
  virtual JudgeScore score(const JudgedResponse& response, const std::string& target) const = 0;
};

/// Per-dimension mean over judges.
inline JudgeScore ensemble_score(std::span<const Judge* const> judges, const JudgedResponse& response,
                                 const std::string& target) {
  if (judges.empty()) fail(ErrorKind::config, "ensemble_score: no judges");
  JudgeScore sum{0.0, 0.0, 0.0};
  for (const Judge* j : judges) {
    JudgeScore s;
    try {
      s = j->score(response, target);
    } catch (const std::exception& e) {
      fail(ErrorKind::numeric, "judge '", j->name(), "' failed: ", e.what());
    }
    sum.faithfulness += s.faithfulness;
    sum.rarity += s.rarity;
    sum.fluency += s.fluency;
  }
  const auto n = static_cast<double>(judges.size());
  return {sum.faithfulness / n, sum.rarity / n, sum.fluency / n};
}

enum class Side { A, B };
enum class PairResult { A, B, tie };

struct PairwiseOutcome {
  PairResult result;
  Side first_pick;
  Side second_pick;
};

/// Two-judge agreement: same pick wins, disagreement is a tie.
inline PairwiseOutcome pairwise(Side first_pick, Side second_pick) {
  const auto result = first_pick != second_pick ? PairResult::tie
                      : first_pick == Side::A   ? PairResult::A
                                                : PairResult::B;
  return {result, first_pick, second_pick};
}

/// Converts two scalar scores into a pick. Equal scores go to whichever
/// response was presented first.
inline Side pick_from_scores(double score_a, double score_b, bool a_shown_first) {
  if (score_a > score_b) return Side::A;
  if (score_b > score_a) return Side::B;
  return a_shown_first ? Side::A : Side::B;
}

struct ProxyCalibration {
  double fluency_scale = 0.5;  // log-likelihood units per Likert point, per token
};

inline double clamp_likert(double v) { return std::clamp(v, 1.0, 10.0); }

/// Deterministic stand-in judge.
///   faithfulness = 1 + 4.5 (cos_target + 1)
///   rarity       = faithfulness * (1 - universal_share)
///   fluency      = 10 - (ll_ref - gen_loglik) / fluency_scale
/// each clamped to [1, 10].
inline JudgeScore proxy_judge(std::span<const double> response, const std::string& target,
                              const PrototypeSet& protos, double gen_loglik, double ll_ref,
                              double universal_share = 0.0, const ProxyCalibration& cal = {}) {
  const auto b = bias_score(response, protos);
  const double cos_target = b.cosine[protos.slot(target)];
  JudgeScore s;
  s.faithfulness = clamp_likert(1.0 + 4.5 * (cos_target + 1.0));
  s.rarity = clamp_likert(s.faithfulness * (1.0 - std::clamp(universal_share, 0.0, 1.0)));
  s.fluency = clamp_likert(10.0 - (ll_ref - gen_loglik) / cal.fluency_scale);
  return s;
}

class ProxyJudge : public Judge {
 public:
  ProxyJudge(std::string name, const PrototypeSet& protos, double ll_ref, ProxyCalibration cal = {})
      : name_(std::move(name)), protos_(protos), ll_ref_(ll_ref), cal_(cal) {}

  std::string name() const override { return name_; }

  JudgeScore score(const JudgedResponse& r, const std::string& target) const override {
    return proxy_judge(r.cue, target, protos_, r.mean_loglik, ll_ref_, r.universal_share, cal_);
  }

 private:
  std::string name_;
  const PrototypeSet& protos_;
  double ll_ref_;
  ProxyCalibration cal_;
};

struct WinTieLoss {
  std::string condition_a;
  std::string condition_b;
  std::size_t wins = 0;  // condition_a preferred
  std::size_t ties = 0;
  std::size_t losses = 0;

  std::size_t total() const { return wins + ties + losses; }

  void add(const PairwiseOutcome& o) {
    switch (o.result) {
      case PairResult::A: ++wins; break;
      case PairResult::B: ++losses; break;
      case PairResult::tie: ++ties; break;
    }
  }
};

inline std::string win_tie_loss_csv(std::span<const WinTieLoss> rows) {
  std::string out = "condition_a,condition_b,n,win_pct,tie_pct,loss_pct\n";
  for (const auto& r : rows) {
    const double n = r.total() ? static_cast<double>(r.total()) : 1.0;
    out += concat(r.condition_a, ",", r.condition_b, ",", r.total(), ",", 100.0 * r.wins / n, ",",
                  100.0 * r.ties / n, ",", 100.0 * r.losses / n, "\n");
  }
  return out;
}

}  // namespace cue
