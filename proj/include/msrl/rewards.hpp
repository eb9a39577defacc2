#pragma once

#include <string_view>

#include "msrl/corpus.hpp"
#include "msrl/grammar.hpp"

namespace msrl {

// Reward components are carried in exact milli-units so compositions compare
// exactly; the double views are for reporting only.
struct RewardBreakdown {
  int format_millis = 0;    // 0 or 1000
  int accuracy_millis = 0;  // 0 or 1000
  int task_millis = 0;      // 0 or the configured bonus (default 200)
  int total_millis = 0;     // always the exact sum of the three

  double format() const { return format_millis / 1000.0; }
  double accuracy() const { return accuracy_millis / 1000.0; }
  double task() const { return task_millis / 1000.0; }
  double total() const { return total_millis / 1000.0; }
};

struct RewardConfig {
  bool use_task_reward = false;
  int task_reward_millis = 200;  // 0.2
  // A correct answer letter inside an unparseable output scores 0 when
  // gated; switch off to score the answer block on its own.
  bool gate_accuracy_on_format = true;

  static RewardConfig stage1() { return RewardConfig{false, 200, true}; }
  static RewardConfig stage23() { return RewardConfig{true, 200, true}; }
};

// Validates task_reward_millis >= 0; value is given in reward units (0.2).
RewardConfig make_reward_config(bool use_task_reward, double task_reward_value,
                                bool gate_accuracy_on_format = true);

// 1 iff parse_rationale accepts the text under the expected format.
int format_reward(std::string_view text, StageFormat expected);

// 1 iff the predicted preference token matches gold. Gated: the text must
// parse. Ungated: the first <answer> block is read on its own.
int accuracy_reward(std::string_view text, StageFormat expected, Label gold,
                    bool gate_on_format = true);

// Bonus iff a <type> element parses and names the true task; independent of
// overall format validity.
int task_reward_millis(std::string_view text, TaskKind true_task, int bonus_millis = 200);

RewardBreakdown total_reward(std::string_view text, StageFormat expected, Label gold,
                             TaskKind true_task, const RewardConfig& cfg);

// Bradley-Terry pairwise loss: -log sigmoid(s_pref - s_other).
double bt_loss(double score_a, double score_b, Label preferred);

// (d/d score_a, d/d score_b) of bt_loss.
std::pair<double, double> bt_loss_grad(double score_a, double score_b, Label preferred);

// Generative reward-model loss: -log pi(w = l | s), given the label token's
// log-probability (must be <= 0).
double gen_rm_loss(double label_logprob);

}  // namespace msrl
