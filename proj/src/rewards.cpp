#include "msrl/rewards.hpp"

#include <cmath>

#include "msrl/numeric.hpp"

namespace msrl {

RewardConfig make_reward_config(bool use_task_reward, double task_reward_value,
                                bool gate_accuracy_on_format) {
  if (!(task_reward_value >= 0.0)) {
    throw ValidationError("task_reward_value: must be >= 0");
  }
  RewardConfig cfg;
  cfg.use_task_reward = use_task_reward;
  cfg.task_reward_millis = static_cast<int>(std::llround(task_reward_value * 1000.0));
  cfg.gate_accuracy_on_format = gate_accuracy_on_format;
  return cfg;
}

int format_reward(std::string_view text, StageFormat expected) {
  return parse_ok(parse_rationale(text, expected)) ? 1 : 0;
}

int accuracy_reward(std::string_view text, StageFormat expected, Label gold, bool gate_on_format) {
  if (gate_on_format) {
    const ParseResult r = parse_rationale(text, expected);
    if (!parse_ok(r)) return 0;
    return std::get<Rationale>(r).answer == gold ? 1 : 0;
  }
  const auto answer = extract_answer_lenient(text);
  return answer && *answer == gold ? 1 : 0;
}

int task_reward_millis(std::string_view text, TaskKind true_task, int bonus_millis) {
  const auto tag = extract_type_tag(text);
  if (!tag) return 0;
  const auto named = task_from_prose(*tag);
  return named && *named == true_task ? bonus_millis : 0;
}

RewardBreakdown total_reward(std::string_view text, StageFormat expected, Label gold,
                             TaskKind true_task, const RewardConfig& cfg) {
  RewardBreakdown b;
  b.format_millis = 1000 * format_reward(text, expected);
  b.accuracy_millis = 1000 * accuracy_reward(text, expected, gold, cfg.gate_accuracy_on_format);
  b.task_millis =
      cfg.use_task_reward ? task_reward_millis(text, true_task, cfg.task_reward_millis) : 0;
  b.total_millis = b.format_millis + b.accuracy_millis + b.task_millis;
  return b;
}

double bt_loss(double score_a, double score_b, Label preferred) {
  if (!std::isfinite(score_a) || !std::isfinite(score_b)) {
    throw ValidationError("bt_loss: scores must be finite");
  }
  const double margin =
      preferred == Label::A ? score_a - score_b : score_b - score_a;
  return neg_log_sigmoid(margin);
}

std::pair<double, double> bt_loss_grad(double score_a, double score_b, Label preferred) {
  if (!std::isfinite(score_a) || !std::isfinite(score_b)) {
    throw ValidationError("bt_loss_grad: scores must be finite");
  }
  const double margin =
      preferred == Label::A ? score_a - score_b : score_b - score_a;
  const double d_margin = sigmoid(margin) - 1.0;  // d/d margin of -log sigmoid
  return preferred == Label::A ? std::make_pair(d_margin, -d_margin)
                               : std::make_pair(-d_margin, d_margin);
}

double gen_rm_loss(double label_logprob) {
  if (!(label_logprob <= 0.0)) {
    throw ValidationError("gen_rm_loss: label_logprob must be <= 0");
  }
  return -label_logprob;
}

}  // namespace msrl
