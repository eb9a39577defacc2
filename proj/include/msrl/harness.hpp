#pragma once

#include <map>
#include <string>
#include <vector>

#include "msrl/curriculum.hpp"
#include "msrl/policy.hpp"

namespace msrl {

struct EvalReport {
  double overall_accuracy = 0.0;
  std::map<TaskKind, double> per_task;           // tasks present in the corpus
  std::map<TaskKind, std::size_t> per_task_n;
  std::size_t n_examples = 0;
  int voting_k = 1;
  double format_rate = 0.0;    // parseable rollouts / all rollouts
  double task_tag_rate = 0.0;  // rollouts whose <type> names the true task
};

// Majority voting over k samples per example. Unparseable rollouts abstain;
// an example where every rollout abstains scores as wrong; vote ties pick A.
// k = 1 is plain single-sample evaluation.
EvalReport evaluate(const PolicyParameters& params, const std::vector<PreferenceExample>& corpus,
                    StageFormat stage_format, Channel channel, int k, std::uint64_t seed);

std::string report_render_text(const EvalReport& report);
std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& json_text);

// One stage-2 training run per mixing ratio from a shared stage-1 result,
// evaluated on a caption-based held-out set and on a textual held-out set
// (the forgetting probe).
struct SweepRow {
  int ratio_new = 1;
  int ratio_replay = 0;
  double caption_accuracy = 0.0;
  double textual_accuracy = 0.0;
};

struct SweepConfig {
  std::string eval_corpus;   // caption-based held-out set
  std::string probe_corpus;  // textual held-out set
  int voting_k = 1;
};

std::vector<SweepRow> ratio_sweep(const StagePlan& base_plan,
                                  const std::vector<std::pair<int, int>>& ratios,
                                  const SweepConfig& cfg, const PolicyParameters& init,
                                  std::uint64_t seed, const CorpusResolver& resolver);

std::string sweep_render_text(const std::vector<SweepRow>& rows);
std::string sweep_to_json(const std::vector<SweepRow>& rows);

// "1:0,1:1,2:1,4:1,5:1" -> pairs; throws ValidationError on malformed input.
std::vector<std::pair<int, int>> parse_ratio_list(const std::string& text);

}  // namespace msrl
