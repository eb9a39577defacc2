#include "msrl/optimizer.hpp"

#include <cmath>

#include "msrl/rng.hpp"

namespace msrl {

void validate_grpo_config(const GrpoConfig& cfg) {
  if (cfg.group_size < 2) throw ValidationError("grpo.group_size: must be >= 2");
  if (cfg.batch_prompts < 1) throw ValidationError("grpo.batch_prompts: must be >= 1");
  if (!(cfg.kl_beta >= 0.0)) throw ValidationError("grpo.kl_beta: must be >= 0");
  if (!(cfg.clip_eps > 0.0)) throw ValidationError("grpo.clip_eps: must be > 0");
  if (!(cfg.learning_rate > 0.0)) throw ValidationError("grpo.learning_rate: must be > 0");
}

bool group_has_reward_variance(const std::vector<double>& rewards) {
  for (std::size_t i = 1; i < rewards.size(); ++i) {
    if (rewards[i] != rewards[0]) return true;
  }
  return false;
}

std::vector<double> compute_advantages(const std::vector<double>& rewards,
                                       ZeroStdPolicy zero_std_policy) {
  const std::size_t g = rewards.size();
  if (g < 2) throw ValidationError("compute_advantages: needs at least 2 rewards");
  if (!group_has_reward_variance(rewards)) {
    (void)zero_std_policy;  // SkipGroup is resolved by the caller; values are zero either way
    return std::vector<double>(g, 0.0);
  }
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(g);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(g);  // population variance
  const double std_dev = std::sqrt(var);
  std::vector<double> adv(g);
  for (std::size_t i = 0; i < g; ++i) adv[i] = (rewards[i] - mean) / std_dev;
  return adv;
}

std::vector<RolloutGroup> collect_rollout_groups(
    const PolicySnapshot& snapshot, const std::vector<PreferenceExample>& batch,
    StageFormat stage_format, Channel channel, const RewardConfig& reward_cfg,
    const GrpoConfig& cfg, std::uint64_t seed) {
  std::vector<RolloutGroup> groups;
  groups.reserve(batch.size());
  Rng rng = Rng(seed).fork("rollouts");
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const PreferenceExample& ex = batch[i];
    RolloutGroup group;
    group.example = ex;
    group.stage_format = stage_format;
    group.channel = effective_channel(ex, channel);
    std::vector<double> rewards;
    rewards.reserve(static_cast<std::size_t>(cfg.group_size));
    for (int g = 0; g < cfg.group_size; ++g) {
      const std::uint64_t draw_seed = rng.fork("draw", i * 1024 + static_cast<std::size_t>(g)).seed();
      SampleResult s = sample_action(snapshot, ex, stage_format, group.channel, draw_seed);
      Rollout rollout;
      rollout.action = s.action;
      rollout.text = std::move(s.text);
      rollout.logprob_old = s.logprob;
      rollout.reward = total_reward(rollout.text, stage_format, ex.label, ex.task, reward_cfg);
      rewards.push_back(rollout.reward.total());
      group.rollouts.push_back(std::move(rollout));
    }
    const std::vector<double> adv = compute_advantages(rewards, cfg.zero_std_policy);
    for (std::size_t g = 0; g < adv.size(); ++g) group.rollouts[g].advantage = adv[g];
    groups.push_back(std::move(group));
  }
  return groups;
}

namespace {

void accumulate(HeadSet& acc, const HeadSet& g, double scale) {
  for (HeadId id : kAllHeads) {
    head(acc, id) += scale * head(g, id);
  }
}

// Applies an ascent step and restores frozen entries bit-for-bit.
PolicyParameters apply_ascent(const PolicyParameters& params, const HeadSet& grad, double lr) {
  PolicyParameters next = params;
  for (HeadId id : kAllHeads) {
    Eigen::MatrixXd updated = head(params.heads, id) + lr * head(grad, id);
    head(next.heads, id) = mask(params.freeze, id).select(head(params.heads, id), updated);
  }
  return next;
}

void check_finite(const HeadSet& grad, const std::string& context) {
  for (HeadId id : kAllHeads) {
    if (!head(grad, id).allFinite()) {
      throw ValidationError("non-finite gradient in " + context);
    }
  }
}

}  // namespace

std::pair<PolicyParameters, StepStats> grpo_step(const PolicyParameters& params,
                                                 const PolicySnapshot& snapshot,
                                                 const std::vector<RolloutGroup>& groups,
                                                 const GrpoConfig& cfg) {
  validate_grpo_config(cfg);
  HeadSet total_grad = zero_heads(params.layout);
  StepStats stats;

  std::size_t n_rollouts = 0;
  std::size_t n_clipped = 0;
  double sum_reward = 0.0, sum_format = 0.0, sum_accuracy = 0.0, sum_task = 0.0, sum_abs_adv = 0.0;

  std::vector<const RolloutGroup*> used;
  for (const RolloutGroup& group : groups) {
    std::vector<double> rewards;
    rewards.reserve(group.rollouts.size());
    for (const Rollout& r : group.rollouts) rewards.push_back(r.reward.total());
    if (cfg.zero_std_policy == ZeroStdPolicy::SkipGroup && !group_has_reward_variance(rewards)) {
      ++stats.groups_skipped;
      continue;
    }
    used.push_back(&group);
    n_rollouts += group.rollouts.size();
  }
  if (used.empty()) {
    stats.groups_used = 0;
    return {params, stats};
  }

  const double rollout_scale = 1.0 / static_cast<double>(n_rollouts);
  for (const RolloutGroup* group : used) {
    HeadSet group_grad = zero_heads(params.layout);
    for (const Rollout& r : group->rollouts) {
      sum_reward += r.reward.total();
      sum_format += r.reward.format();
      sum_accuracy += r.reward.accuracy();
      sum_task += r.reward.task();
      sum_abs_adv += std::abs(r.advantage);
      const double lp_new = action_logprob(params, group->example, r.action, group->stage_format,
                                           group->channel);
      const double ratio = std::exp(lp_new - r.logprob_old);
      bool clipped = false;
      if (cfg.clip_enabled) {
        clipped = (r.advantage > 0.0 && ratio > 1.0 + cfg.clip_eps) ||
                  (r.advantage < 0.0 && ratio < 1.0 - cfg.clip_eps);
      }
      if (clipped) {
        ++n_clipped;
        continue;  // clipped branch of min() is constant in theta
      }
      if (r.advantage == 0.0) continue;
      const HeadSet g = grad_logprob(params, group->example, r.action, group->stage_format,
                                     group->channel);
      accumulate(group_grad, g, r.advantage * ratio * rollout_scale);
    }
    if (cfg.kl_beta > 0.0) {
      const HeadSet gkl = grad_kl(params, snapshot, group->example, group->stage_format,
                                  group->channel);
      accumulate(group_grad, gkl, -cfg.kl_beta / static_cast<double>(used.size()));
    }
    check_finite(group_grad, "group for example " + group->example.id);
    accumulate(total_grad, group_grad, 1.0);
  }

  PolicyParameters next = apply_ascent(params, total_grad, cfg.learning_rate);

  stats.groups_used = static_cast<int>(used.size());
  stats.mean_reward = sum_reward * rollout_scale;
  stats.mean_format = sum_format * rollout_scale;
  stats.mean_accuracy = sum_accuracy * rollout_scale;
  stats.mean_task = sum_task * rollout_scale;
  stats.mean_abs_advantage = sum_abs_adv * rollout_scale;
  stats.clip_frac = static_cast<double>(n_clipped) * rollout_scale;
  double kl = 0.0;
  for (const RolloutGroup* group : used) {
    kl += kl_divergence(next, snapshot, group->example, group->stage_format, group->channel);
  }
  stats.kl = kl / static_cast<double>(used.size());
  return {next, stats};
}

PolicyParameters sft_step(const PolicyParameters& params, const std::vector<SftPair>& batch,
                          StageFormat stage_format, double learning_rate) {
  if (!(learning_rate >= 0.0)) throw ValidationError("sft.learning_rate: must be >= 0");
  HeadSet total_grad = zero_heads(params.layout);
  for (const SftPair& pair : batch) {
    const Channel channel = effective_channel(pair.example, pair.channel);
    const HeadSet g = grad_logprob(params, pair.example, pair.target, stage_format, channel);
    accumulate(total_grad, g, 1.0);
  }
  check_finite(total_grad, "sft batch");
  // descending -sum logprob ascends +sum logprob
  return apply_ascent(params, total_grad, learning_rate);
}

}  // namespace msrl
