#pragma once

#include <string>
#include <vector>

#include "msrl/policy.hpp"
#include "msrl/rewards.hpp"

namespace msrl {

enum class ZeroStdPolicy { ZeroAdvantages, SkipGroup };

struct GrpoConfig {
  int group_size = 8;        // G rollouts per prompt
  double kl_beta = 0.0;
  double clip_eps = 0.2;
  double learning_rate = 1e-2;  // tuned for the 32-action policy; 1e-6 is the
                                // large-model preset and is honored as given
  int batch_prompts = 128;
  ZeroStdPolicy zero_std_policy = ZeroStdPolicy::ZeroAdvantages;
  bool clip_enabled = true;  // false = plain importance-weighted REINFORCE

  // The settings used for billion-parameter backbones: sampling size 8,
  // lr 1e-6, batch 128. Far too small a step for the toy head, kept as a
  // named preset.
  static GrpoConfig large_scale() {
    GrpoConfig cfg;
    cfg.group_size = 8;
    cfg.learning_rate = 1e-6;
    cfg.batch_prompts = 128;
    return cfg;
  }
};

void validate_grpo_config(const GrpoConfig& cfg);  // throws ValidationError

struct Rollout {
  StructuredAction action;
  std::string text;
  double logprob_old = 0.0;  // under the snapshot the rollout was drawn from
  RewardBreakdown reward;
  double advantage = 0.0;
};

struct RolloutGroup {
  PreferenceExample example;
  StageFormat stage_format = StageFormat::ThinkAnswer;
  Channel channel = Channel::TextOnly;
  std::vector<Rollout> rollouts;
};

struct StepStats {
  double mean_reward = 0.0;
  double mean_format = 0.0;
  double mean_accuracy = 0.0;
  double mean_task = 0.0;
  double mean_abs_advantage = 0.0;
  double kl = 0.0;         // mean exact KL to the snapshot after the update
  double clip_frac = 0.0;  // fraction of rollouts hitting the clip range
  int groups_used = 0;
  int groups_skipped = 0;
};

// Group-relative normalization: (r - mean) / population std. A zero-variance
// group yields all-zero advantages or is flagged for skipping, per policy.
std::vector<double> compute_advantages(const std::vector<double>& rewards,
                                       ZeroStdPolicy zero_std_policy);

bool group_has_reward_variance(const std::vector<double>& rewards);

// Draws G rollouts per example under `snapshot`, scores them, and fills in
// group-relative advantages.
std::vector<RolloutGroup> collect_rollout_groups(
    const PolicySnapshot& snapshot, const std::vector<PreferenceExample>& batch,
    StageFormat stage_format, Channel channel, const RewardConfig& reward_cfg,
    const GrpoConfig& cfg, std::uint64_t seed);

// One ascent step on the clipped importance-ratio surrogate minus beta times
// the exact KL to `snapshot`. The importance ratios use the logprob_old
// stored in the rollouts, so the KL target may be an older fixed reference.
// Frozen entries stay bit-identical.
std::pair<PolicyParameters, StepStats> grpo_step(const PolicyParameters& params,
                                                 const PolicySnapshot& snapshot,
                                                 const std::vector<RolloutGroup>& groups,
                                                 const GrpoConfig& cfg);

struct SftPair {
  PreferenceExample example;
  StructuredAction target;
  Channel channel = Channel::TextOnly;
};

// One descent step on -sum(action_logprob(target)); the gradient is exactly
// the summed grad_logprob, negated. Frozen entries stay bit-identical.
PolicyParameters sft_step(const PolicyParameters& params, const std::vector<SftPair>& batch,
                          StageFormat stage_format, double learning_rate);

}  // namespace msrl
