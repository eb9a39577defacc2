#include "msrl/curriculum.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "msrl/rng.hpp"

namespace msrl {

using ordered_json = nlohmann::ordered_json;

RewardConfig StageSpec::reward_config() const {
  return make_reward_config(use_task_reward, task_reward_value, gate_accuracy_on_format);
}

// ---------------------------------------------------------------------------
// Plan validation
// ---------------------------------------------------------------------------

void validate_plan(const StagePlan& plan) {
  if (plan.layout.media_bits == 0 || plan.layout.prompt_buckets == 0) {
    throw ValidationError("plan.layout: media_bits and prompt_buckets must be positive");
  }
  if (plan.stages.empty()) throw ValidationError("plan.stages: must be non-empty");
  int prev_stage = 0;
  for (std::size_t i = 0; i < plan.stages.size(); ++i) {
    const StageSpec& s = plan.stages[i];
    const std::string where = "plan.stages[" + std::to_string(i) + "]";
    if (s.stage_id < 1 || s.stage_id > 3) throw ValidationError(where + ".stage_id: must be 1..3");
    if (s.stage_id < prev_stage) {
      throw ValidationError(where + ".stage_id: stages must run in order");
    }
    prev_stage = s.stage_id;
    if (s.steps < 0) throw ValidationError(where + ".steps: must be >= 0");
    if (s.corpus.empty()) throw ValidationError(where + ".corpus: must be set");
    if (s.stage_id == 1) {
      if (!s.freeze_visual) throw ValidationError(where + ": stage 1 requires freeze_visual");
      if (s.use_task_reward) {
        throw ValidationError(where + ": stage 1 does not use the task reward");
      }
    } else {
      if (s.freeze_visual) {
        throw ValidationError(where + ": stages 2-3 train with the visual rows unfrozen");
      }
      if (!s.use_task_reward) {
        throw ValidationError(where + ": stages 2-3 use the task reward");
      }
    }
    if (s.cmkd && s.stage_id != 2) {
      throw ValidationError(where + ".cmkd: distillation belongs to stage 2");
    }
    if (s.cmkd) {
      if (s.cmkd->spec.n_samples < 1) throw ValidationError(where + ".cmkd.n_samples: must be >= 1");
      if (s.cmkd->spec.tie_break != "a_then_lowest_index") {
        throw ValidationError(where + ".cmkd.tie_break: unknown rule id");
      }
      if (s.cmkd->visual_corpus.empty()) {
        throw ValidationError(where + ".cmkd.visual_corpus: must be set");
      }
    }
    if (s.replay) {
      if (s.phase != StagePhase::Rlvr) {
        throw ValidationError(where + ".replay: replay mixes into RL batches only");
      }
      const int rn = s.replay->ratio_new;
      const int rr = s.replay->ratio_replay;
      if (rn < 0 || rr < 0 || (rn == 0 && rr == 0)) {
        throw ValidationError(where + ".replay: ratio components must be >= 0, not both 0");
      }
      if (rr > 0 && s.grpo.batch_prompts % (rn + rr) != 0) {
        throw ValidationError(where + ".replay: batch_prompts must divide by ratio_new + ratio_replay");
      }
      if (s.replay->capacity == 0) throw ValidationError(where + ".replay.capacity: must be positive");
    }
    if (s.phase == StagePhase::Rlvr) validate_grpo_config(s.grpo);
    if (s.phase == StagePhase::Sft && !(s.sft_lr >= 0.0)) {
      throw ValidationError(where + ".sft_lr: must be >= 0");
    }
  }
}

// ---------------------------------------------------------------------------
// Plan JSON
// ---------------------------------------------------------------------------

namespace {

std::string phase_name(StagePhase p) { return p == StagePhase::Sft ? "sft" : "rlvr"; }

StagePhase phase_from_name(const std::string& s) {
  if (s == "sft") return StagePhase::Sft;
  if (s == "rlvr") return StagePhase::Rlvr;
  throw ValidationError("plan.phase: \"" + s + "\" must be sft or rlvr");
}

GrpoConfig grpo_from_json(const ordered_json& j) {
  GrpoConfig cfg;
  cfg.group_size = j.value("group_size", cfg.group_size);
  cfg.kl_beta = j.value("kl_beta", cfg.kl_beta);
  cfg.clip_eps = j.value("clip_eps", cfg.clip_eps);
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.batch_prompts = j.value("batch_prompts", cfg.batch_prompts);
  cfg.clip_enabled = j.value("clip_enabled", cfg.clip_enabled);
  const std::string zs = j.value("zero_std_policy", std::string("zero_advantages"));
  if (zs == "zero_advantages") {
    cfg.zero_std_policy = ZeroStdPolicy::ZeroAdvantages;
  } else if (zs == "skip_group") {
    cfg.zero_std_policy = ZeroStdPolicy::SkipGroup;
  } else {
    throw ValidationError("grpo.zero_std_policy: \"" + zs + "\" unknown");
  }
  return cfg;
}

ordered_json grpo_to_json(const GrpoConfig& cfg) {
  ordered_json j;
  j["group_size"] = cfg.group_size;
  j["kl_beta"] = cfg.kl_beta;
  j["clip_eps"] = cfg.clip_eps;
  j["learning_rate"] = cfg.learning_rate;
  j["batch_prompts"] = cfg.batch_prompts;
  j["zero_std_policy"] =
      cfg.zero_std_policy == ZeroStdPolicy::ZeroAdvantages ? "zero_advantages" : "skip_group";
  j["clip_enabled"] = cfg.clip_enabled;
  return j;
}

}  // namespace

StagePlan parse_plan(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const std::exception& e) {
    throw IoError(std::string("plan: malformed JSON: ") + e.what());
  }
  StagePlan plan;
  plan.layout.media_bits = j.at("layout").at("media_bits").get<std::size_t>();
  plan.layout.prompt_buckets = j.at("layout").at("prompt_buckets").get<std::size_t>();
  for (const ordered_json& js : j.at("stages")) {
    StageSpec s;
    s.stage_id = js.at("stage_id").get<int>();
    s.phase = phase_from_name(js.at("phase").get<std::string>());
    s.corpus = js.at("corpus").get<std::string>();
    const std::string ch = js.at("channel").get<std::string>();
    const auto channel = channel_from_name(ch);
    if (!channel) throw ValidationError("plan.channel: \"" + ch + "\" unknown");
    s.channel = *channel;
    const std::string fmt = js.at("stage_format").get<std::string>();
    const auto format = stage_format_from_name(fmt);
    if (!format) throw ValidationError("plan.stage_format: \"" + fmt + "\" unknown");
    s.stage_format = *format;
    s.use_task_reward = js.at("use_task_reward").get<bool>();
    s.fixed_reference = js.value("fixed_reference", false);
    s.task_reward_value = js.value("task_reward_value", 0.2);
    s.gate_accuracy_on_format = js.value("gate_accuracy_on_format", true);
    s.freeze_visual = js.at("freeze_visual").get<bool>();
    s.steps = js.at("steps").get<int>();
    if (js.contains("grpo")) s.grpo = grpo_from_json(js.at("grpo"));
    if (js.contains("sft")) {
      s.sft_lr = js.at("sft").value("learning_rate", s.sft_lr);
      s.sft_batch = js.at("sft").value("batch", s.sft_batch);
    }
    if (js.contains("replay")) {
      const ordered_json& jr = js.at("replay");
      ReplaySpec r;
      r.buffer_source = jr.value("buffer_source", std::string("stage1"));
      r.ratio_new = jr.at("ratio_new").get<int>();
      r.ratio_replay = jr.at("ratio_replay").get<int>();
      r.capacity = jr.value("capacity", r.capacity);
      const std::string adm = jr.value("admission", std::string("high_reward_only"));
      if (adm == "all") {
        r.admission.kind = ReplayAdmission::Kind::All;
      } else if (adm == "high_reward_only") {
        r.admission.kind = ReplayAdmission::Kind::HighRewardOnly;
      } else {
        throw ValidationError("plan.replay.admission: \"" + adm + "\" unknown");
      }
      r.admission.threshold_millis =
          static_cast<int>(std::llround(jr.value("threshold", 2.0) * 1000.0));
      s.replay = r;
    }
    if (js.contains("cmkd")) {
      const ordered_json& jc = js.at("cmkd");
      CmkdPlanBlock c;
      c.spec.n_samples = jc.value("n_samples", c.spec.n_samples);
      const std::string conf = jc.value("confidence", std::string("mean_logprob"));
      if (conf == "mean_logprob") {
        c.spec.confidence = CmkdConfidence::MeanLogProb;
      } else if (conf == "sequence_logprob") {
        c.spec.confidence = CmkdConfidence::SequenceLogProb;
      } else {
        throw ValidationError("plan.cmkd.confidence: \"" + conf + "\" unknown");
      }
      c.spec.tie_break = jc.value("tie_break", c.spec.tie_break);
      c.caption_corpus = jc.value("caption_corpus", std::string());
      c.visual_corpus = jc.value("visual_corpus", std::string());
      c.sft_steps = jc.value("sft_steps", c.sft_steps);
      c.sft_batch = jc.value("sft_batch", c.sft_batch);
      c.sft_lr = jc.value("sft_lr", c.sft_lr);
      s.cmkd = c;
    }
    s.heldout_corpus = js.value("heldout_corpus", std::string());
    s.eval_every = js.value("eval_every", 0);
    plan.stages.push_back(std::move(s));
  }
  validate_plan(plan);
  return plan;
}

std::string plan_to_json(const StagePlan& plan) {
  ordered_json j;
  j["layout"] = {{"media_bits", plan.layout.media_bits},
                 {"prompt_buckets", plan.layout.prompt_buckets}};
  ordered_json stages = ordered_json::array();
  for (const StageSpec& s : plan.stages) {
    ordered_json js;
    js["stage_id"] = s.stage_id;
    js["phase"] = phase_name(s.phase);
    js["corpus"] = s.corpus;
    js["channel"] = channel_name(s.channel);
    js["stage_format"] = stage_format_name(s.stage_format);
    js["use_task_reward"] = s.use_task_reward;
    js["task_reward_value"] = s.task_reward_value;
    js["gate_accuracy_on_format"] = s.gate_accuracy_on_format;
    js["freeze_visual"] = s.freeze_visual;
    js["fixed_reference"] = s.fixed_reference;
    js["steps"] = s.steps;
    if (s.phase == StagePhase::Rlvr) js["grpo"] = grpo_to_json(s.grpo);
    if (s.phase == StagePhase::Sft) {
      js["sft"] = {{"learning_rate", s.sft_lr}, {"batch", s.sft_batch}};
    }
    if (s.replay) {
      js["replay"] = {
          {"buffer_source", s.replay->buffer_source},
          {"ratio_new", s.replay->ratio_new},
          {"ratio_replay", s.replay->ratio_replay},
          {"capacity", s.replay->capacity},
          {"admission",
           s.replay->admission.kind == ReplayAdmission::Kind::All ? "all" : "high_reward_only"},
          {"threshold", s.replay->admission.threshold_millis / 1000.0}};
    }
    if (s.cmkd) {
      js["cmkd"] = {
          {"n_samples", s.cmkd->spec.n_samples},
          {"confidence",
           s.cmkd->spec.confidence == CmkdConfidence::MeanLogProb ? "mean_logprob"
                                                                  : "sequence_logprob"},
          {"tie_break", s.cmkd->spec.tie_break},
          {"caption_corpus", s.cmkd->caption_corpus},
          {"visual_corpus", s.cmkd->visual_corpus},
          {"sft_steps", s.cmkd->sft_steps},
          {"sft_batch", s.cmkd->sft_batch},
          {"sft_lr", s.cmkd->sft_lr}};
    }
    if (!s.heldout_corpus.empty()) {
      js["heldout_corpus"] = s.heldout_corpus;
      js["eval_every"] = s.eval_every;
    }
    stages.push_back(std::move(js));
  }
  j["stages"] = std::move(stages);
  return j.dump(2);
}

StagePlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open for reading");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_plan(text);
}

// ---------------------------------------------------------------------------
// CMKD
// ---------------------------------------------------------------------------

std::optional<CmkdSelection> cmkd_select(const std::vector<CmkdRollout>& rollouts) {
  // step 1: pseudo-label by majority vote over extractable answers
  std::size_t votes_a = 0, votes_b = 0;
  for (const CmkdRollout& r : rollouts) {
    if (!r.vote_label) continue;
    (*r.vote_label == Label::A ? votes_a : votes_b) += 1;
  }
  if (votes_a + votes_b == 0) return std::nullopt;
  const Label pseudo = votes_a >= votes_b ? Label::A : Label::B;  // tie -> A

  // steps 2+3: keep majority-label, format-conforming rollouts
  // step 4: highest confidence, ties to the lowest index
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const CmkdRollout& r = rollouts[i];
    if (!r.vote_label || *r.vote_label != pseudo || !r.format_ok) continue;
    if (!best || r.confidence > rollouts[*best].confidence) best = i;
  }
  if (!best) return std::nullopt;
  return CmkdSelection{*best, pseudo};
}

std::vector<DistilledPair> cmkd_distill(const PolicyParameters& params_text,
                                        const std::vector<PreferenceExample>& caption_corpus,
                                        const CmkdSpec& spec, StageFormat stage_format,
                                        std::uint64_t seed) {
  if (spec.n_samples < 1) throw ValidationError("cmkd.n_samples: must be >= 1");
  std::vector<DistilledPair> pairs;
  Rng rng = Rng(seed).fork("cmkd");
  for (std::size_t i = 0; i < caption_corpus.size(); ++i) {
    const PreferenceExample& ex = caption_corpus[i];
    std::vector<CmkdRollout> rollouts;
    std::vector<std::string> texts;
    for (int n = 0; n < spec.n_samples; ++n) {
      const std::uint64_t draw_seed =
          rng.fork("draw", i * 1024 + static_cast<std::size_t>(n)).seed();
      SampleResult s = sample_action(params_text, ex, stage_format, Channel::Caption, draw_seed);
      CmkdRollout r;
      r.vote_label = extract_answer_lenient(s.text);
      r.format_ok = parse_ok(parse_rationale(s.text, stage_format));
      r.confidence = spec.confidence == CmkdConfidence::MeanLogProb
                         ? s.logprob / n_active_heads(stage_format)
                         : s.logprob;
      rollouts.push_back(r);
      texts.push_back(std::move(s.text));
    }
    const auto selection = cmkd_select(rollouts);
    if (!selection) continue;  // no consensus: dropped, not retried
    const ParseResult parsed = parse_rationale(texts[selection->index], stage_format);
    DistilledPair pair;
    pair.example_id = ex.id;
    pair.caption = ex.gold_caption ? *ex.gold_caption : faithful_caption_text(ex);
    pair.rationale = std::get<Rationale>(parsed);
    pair.pseudo_label = selection->pseudo_label;
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Freezing
// ---------------------------------------------------------------------------

PolicyParameters apply_freeze(const PolicyParameters& params, const StageSpec& stage) {
  PolicyParameters out = params;
  out.freeze = stage.freeze_visual ? visual_freeze_mask(params.layout)
                                   : empty_freeze_mask(params.layout);
  return out;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

CorpusResolver file_resolver() {
  return [](const std::string& path) { return load_corpus(path); };
}

std::string log_entry_json(const StageLogEntry& e) {
  ordered_json j;
  j["step"] = e.step;
  j["stage"] = e.stage_id;
  j["mean_reward"] = e.stats.mean_reward;
  j["mean_format"] = e.stats.mean_format;
  j["mean_accuracy"] = e.stats.mean_accuracy;
  j["mean_task"] = e.stats.mean_task;
  j["kl"] = e.stats.kl;
  j["clip_frac"] = e.stats.clip_frac;
  if (e.heldout_acc) j["heldout_acc"] = *e.heldout_acc;
  return j.dump();
}

namespace {

// Endless deterministic pass over a corpus: shuffled epochs, batches never
// reshuffled mid-epoch.
class BatchStream {
 public:
  BatchStream(const std::vector<PreferenceExample>& corpus, Rng rng)
      : corpus_(&corpus), rng_(rng) {
    reshuffle();
  }

  std::vector<PreferenceExample> take(std::size_t n) {
    std::vector<PreferenceExample> batch;
    batch.reserve(n);
    while (batch.size() < n) {
      if (cursor_ >= order_.size()) reshuffle();
      batch.push_back((*corpus_)[order_[cursor_++]]);
    }
    return batch;
  }

 private:
  void reshuffle() {
    order_.resize(corpus_->size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng epoch_rng = rng_.fork("epoch", epoch_++);
    epoch_rng.shuffle(order_);
    cursor_ = 0;
  }

  const std::vector<PreferenceExample>* corpus_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::uint64_t epoch_ = 0;
};

StructuredAction gold_action(const PreferenceExample& ex) {
  StructuredAction a;
  a.answer = ex.label;
  a.task_tag = ex.task;
  a.well_formed = true;
  a.caption_faithful = true;
  return a;
}

StructuredAction sft_target(const PreferenceExample& ex, StageFormat format) {
  if (ex.source_rationale) {
    const ParseResult r = parse_rationale(*ex.source_rationale, format);
    if (parse_ok(r)) return action_from_rationale(ex, std::get<Rationale>(r));
  }
  return gold_action(ex);
}

std::optional<double> maybe_probe(const RunHooks& hooks, const StageSpec& spec,
                                  const PolicyParameters& params, int step) {
  if (!hooks.heldout || spec.heldout_corpus.empty() || spec.eval_every <= 0) return std::nullopt;
  if ((step + 1) % spec.eval_every != 0) return std::nullopt;
  return hooks.heldout(params, spec);
}

}  // namespace

RunResult run_plan(const StagePlan& plan, const PolicyParameters& init, std::uint64_t seed,
                   const CorpusResolver& resolver, const std::string& out_dir,
                   const RunHooks& hooks, const ReplayBuffer* preload_stage1_buffer) {
  validate_plan(plan);
  if (!(init.layout == plan.layout)) {
    throw ValidationError("plan.layout: does not match the initial parameters");
  }

  // The stage-1 buffer feeds replay specs with buffer_source "stage1"; its
  // shape comes from the first such spec.
  ReplayBuffer stage1_buffer;
  bool wants_stage1_buffer = false;
  if (hooks.collect_stage1_admission) {
    stage1_buffer = ReplayBuffer(hooks.collect_stage1_capacity, *hooks.collect_stage1_admission);
    wants_stage1_buffer = true;
  }
  for (const StageSpec& s : plan.stages) {
    if (s.replay && s.replay->buffer_source == "stage1" && s.replay->ratio_replay > 0) {
      if (!wants_stage1_buffer) {
        stage1_buffer = ReplayBuffer(s.replay->capacity, s.replay->admission);
        wants_stage1_buffer = true;
      }
      break;
    }
  }
  if (preload_stage1_buffer) stage1_buffer = *preload_stage1_buffer;

  PolicyParameters params = init;
  RunResult result;
  for (std::size_t spec_index = 0; spec_index < plan.stages.size(); ++spec_index) {
    const StageSpec& spec = plan.stages[spec_index];
    params = apply_freeze(params, spec);
    std::vector<PreferenceExample> corpus;
    try {
      corpus = resolver(spec.corpus);
    } catch (const std::exception& e) {
      throw IoError("stage " + std::to_string(spec.stage_id) + ": corpus \"" + spec.corpus +
                    "\": " + e.what());
    }
    if (corpus.empty()) {
      throw ValidationError("stage " + std::to_string(spec.stage_id) + ": corpus \"" +
                            spec.corpus + "\" is empty");
    }

    Rng stage_rng = Rng(seed).fork("stage", spec_index);
    std::vector<StageLogEntry> log;

    if (spec.phase == StagePhase::Sft) {
      BatchStream stream(corpus, stage_rng.fork("batches"));
      for (int step = 0; step < spec.steps; ++step) {
        const auto batch = stream.take(static_cast<std::size_t>(spec.sft_batch));
        std::vector<SftPair> pairs;
        pairs.reserve(batch.size());
        for (const PreferenceExample& ex : batch) {
          pairs.push_back({ex, sft_target(ex, spec.stage_format), spec.channel});
        }
        params = sft_step(params, pairs, spec.stage_format, spec.sft_lr);
        StageLogEntry entry;
        entry.step = step;
        entry.stage_id = spec.stage_id;
        entry.phase = spec.phase;
        entry.heldout_acc = maybe_probe(hooks, spec, params, step);
        log.push_back(std::move(entry));
      }
    } else {
      const RewardConfig reward_cfg = spec.reward_config();

      // Replay buffer for this spec, when configured.
      const ReplayBuffer* replay_buffer = nullptr;
      ReplayBuffer local_buffer;
      if (spec.replay && spec.replay->ratio_replay > 0) {
        if (spec.replay->buffer_source == "stage1") {
          replay_buffer = &stage1_buffer;
        } else {
          std::vector<PreferenceExample> source = resolver(spec.replay->buffer_source);
          local_buffer = ReplayBuffer(spec.replay->capacity,
                                      {ReplayAdmission::Kind::All, 0});
          for (const PreferenceExample& ex : source) local_buffer.offer(ex, 0);
          replay_buffer = &local_buffer;
        }
        if (replay_buffer->empty()) {
          throw ValidationError("stage " + std::to_string(spec.stage_id) +
                                ": replay buffer is empty but ratio_replay > 0");
        }
      }

      const PolicySnapshot stage_reference = params;  // for fixed_reference KL
      BatchStream stream(corpus, stage_rng.fork("batches"));
      std::optional<ReplayMixer> mixer;
      std::uint64_t mixer_epoch = 0;
      const auto next_batch = [&]() -> std::vector<PreferenceExample> {
        if (!spec.replay) return stream.take(static_cast<std::size_t>(spec.grpo.batch_prompts));
        while (true) {
          if (!mixer) {
            // one epoch of new items per mixer instance
            std::vector<PreferenceExample> epoch_items = corpus;
            Rng epoch_rng = stage_rng.fork("replay-epoch", mixer_epoch);
            epoch_rng.shuffle(epoch_items);
            mixer.emplace(std::move(epoch_items), *replay_buffer,
                          std::make_pair(spec.replay->ratio_new, spec.replay->ratio_replay),
                          static_cast<std::size_t>(spec.grpo.batch_prompts),
                          stage_rng.fork("mixer", mixer_epoch).seed());
            ++mixer_epoch;
          }
          if (auto batch = mixer->next()) return std::move(*batch);
          mixer.reset();
        }
      };

      for (int step = 0; step < spec.steps; ++step) {
        const std::vector<PreferenceExample> batch = next_batch();
        const PolicySnapshot snapshot = params;  // refreshed every outer iteration
        const std::uint64_t step_seed = stage_rng.fork("step", static_cast<std::uint64_t>(step)).seed();
        const std::vector<RolloutGroup> groups = collect_rollout_groups(
            snapshot, batch, spec.stage_format, spec.channel, reward_cfg, spec.grpo, step_seed);
        StepStats stats;
        const PolicySnapshot& kl_target = spec.fixed_reference ? stage_reference : snapshot;
        try {
          std::tie(params, stats) = grpo_step(params, kl_target, groups, spec.grpo);
        } catch (const std::exception& e) {
          throw ValidationError("stage " + std::to_string(spec.stage_id) + " step " +
                                std::to_string(step) + ": " + e.what());
        }
        if (wants_stage1_buffer && spec.stage_id == 1 && !preload_stage1_buffer) {
          for (const RolloutGroup& group : groups) {
            int best = 0;
            for (const Rollout& r : group.rollouts) best = std::max(best, r.reward.total_millis);
            stage1_buffer.offer(group.example, best);
          }
        }
        StageLogEntry entry;
        entry.step = step;
        entry.stage_id = spec.stage_id;
        entry.phase = spec.phase;
        entry.stats = stats;
        entry.heldout_acc = maybe_probe(hooks, spec, params, step);
        log.push_back(std::move(entry));
      }

      if (spec.cmkd) {
        const std::string caption_path =
            spec.cmkd->caption_corpus.empty() ? spec.corpus : spec.cmkd->caption_corpus;
        const std::vector<PreferenceExample> caption_corpus = resolver(caption_path);
        const std::vector<PreferenceExample> visual_corpus = resolver(spec.cmkd->visual_corpus);
        std::map<std::string, const PreferenceExample*> by_id;
        for (const PreferenceExample& ex : visual_corpus) by_id[ex.id] = &ex;

        const std::uint64_t kd_seed = stage_rng.fork("cmkd").seed();
        const std::vector<DistilledPair> distilled =
            cmkd_distill(params, caption_corpus, spec.cmkd->spec, spec.stage_format, kd_seed);
        std::vector<SftPair> kd_pairs;
        kd_pairs.reserve(distilled.size());
        for (const DistilledPair& pair : distilled) {
          const auto it = by_id.find(pair.example_id);
          if (it == by_id.end()) {
            throw ValidationError("stage 2 cmkd: example " + pair.example_id +
                                  " missing from visual corpus");
          }
          kd_pairs.push_back({*it->second, action_from_rationale(*it->second, pair.rationale),
                              Channel::Visual});
        }
        if (!kd_pairs.empty()) {
          Rng kd_rng = stage_rng.fork("cmkd-sft");
          for (int step = 0; step < spec.cmkd->sft_steps; ++step) {
            std::vector<SftPair> batch;
            const std::size_t want =
                std::min<std::size_t>(kd_pairs.size(), static_cast<std::size_t>(spec.cmkd->sft_batch));
            // sample without replacement per step
            std::vector<std::size_t> idx(kd_pairs.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            Rng draw = kd_rng.fork("step", static_cast<std::uint64_t>(step));
            for (std::size_t k = 0; k < want; ++k) {
              const std::size_t j = k + static_cast<std::size_t>(draw.below(idx.size() - k));
              std::swap(idx[k], idx[j]);
              batch.push_back(kd_pairs[idx[k]]);
            }
            params = sft_step(params, batch, spec.stage_format, spec.cmkd->sft_lr);
          }
        }
      }
    }

    result.stage_logs.push_back(log);
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      const std::string base = out_dir + "/stage" + std::to_string(spec.stage_id);
      save_checkpoint(base + ".ckpt", params);
      std::ofstream log_out(base + "_log.jsonl", std::ios::app);
      if (!log_out) throw IoError(base + "_log.jsonl: cannot open for writing");
      for (const StageLogEntry& entry : log) log_out << log_entry_json(entry) << '\n';
    }
  }

  result.params = std::move(params);
  result.stage1_buffer = std::move(stage1_buffer);
  return result;
}

}  // namespace msrl
