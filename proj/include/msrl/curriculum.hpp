#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msrl/corpus.hpp"
#include "msrl/optimizer.hpp"
#include "msrl/policy.hpp"

namespace msrl {

// ---------------------------------------------------------------------------
// Plan
// ---------------------------------------------------------------------------

enum class StagePhase { Sft, Rlvr };

enum class CmkdConfidence { MeanLogProb, SequenceLogProb };

struct CmkdSpec {
  int n_samples = 8;
  CmkdConfidence confidence = CmkdConfidence::MeanLogProb;
  // Vote ties pick A before B; confidence ties pick the lowest rollout index.
  std::string tie_break = "a_then_lowest_index";
};

// Where the distillation corpora live and how the student is fitted.
struct CmkdPlanBlock {
  CmkdSpec spec;
  std::string caption_corpus;  // empty = the stage's own corpus
  std::string visual_corpus;   // same examples in visual form, joined by id
  int sft_steps = 20;
  int sft_batch = 64;
  double sft_lr = 0.05;
};

struct ReplaySpec {
  std::string buffer_source = "stage1";  // "stage1" or a corpus path
  int ratio_new = 5;
  int ratio_replay = 1;
  std::size_t capacity = 1024;
  ReplayAdmission admission;
};

struct StageSpec {
  int stage_id = 1;  // 1..3
  StagePhase phase = StagePhase::Rlvr;
  std::string corpus;
  Channel channel = Channel::TextOnly;
  StageFormat stage_format = StageFormat::ThinkAnswer;
  bool use_task_reward = false;
  double task_reward_value = 0.2;
  bool gate_accuracy_on_format = true;
  bool freeze_visual = false;
  std::optional<ReplaySpec> replay;
  std::optional<CmkdPlanBlock> cmkd;
  int steps = 0;
  // KL target: refreshed every step by default, or pinned to the stage-start
  // parameters when fixed_reference is set.
  bool fixed_reference = false;
  GrpoConfig grpo;      // Rlvr phase
  double sft_lr = 0.05; // Sft phase
  int sft_batch = 128;
  std::string heldout_corpus;  // optional accuracy probe for the log
  int eval_every = 0;          // 0 = never

  RewardConfig reward_config() const;
};

struct StagePlan {
  FeatureLayout layout;
  std::vector<StageSpec> stages;
};

// Enforces the curriculum contract before any training: stage 1 freezes the
// visual rows and uses no task reward, stages 2-3 unfreeze and use it, CMKD
// appears only in stage 2, stage ids never decrease, replay is an RL-phase
// mechanism, and ratios are well-formed.
void validate_plan(const StagePlan& plan);

StagePlan parse_plan(const std::string& json_text);
std::string plan_to_json(const StagePlan& plan);
StagePlan load_plan(const std::string& path);

// ---------------------------------------------------------------------------
// CMKD
// ---------------------------------------------------------------------------

struct DistilledPair {
  std::string example_id;
  std::string caption;   // c: the example-level caption the teacher saw
  Rationale rationale;   // o*: the selected teacher output
  Label pseudo_label = Label::A;
};

// One teacher rollout reduced to what the selection procedure reads.
struct CmkdRollout {
  std::optional<Label> vote_label;  // leniently extracted answer, if any
  bool format_ok = false;
  double confidence = 0.0;
};

struct CmkdSelection {
  std::size_t index = 0;  // winning rollout
  Label pseudo_label = Label::A;
};

// The three-step selection: majority vote over extractable labels (ties to
// A), drop label mismatches, drop format failures, keep the most confident
// survivor (ties to the lowest index). nullopt = no consensus.
std::optional<CmkdSelection> cmkd_select(const std::vector<CmkdRollout>& rollouts);

std::vector<DistilledPair> cmkd_distill(const PolicyParameters& params_text,
                                        const std::vector<PreferenceExample>& caption_corpus,
                                        const CmkdSpec& spec, StageFormat stage_format,
                                        std::uint64_t seed);

// ---------------------------------------------------------------------------
// Freezing
// ---------------------------------------------------------------------------

// Stage 1 masks the visual-bit rows of every head; later stages clear the
// mask. Parameter values are untouched.
PolicyParameters apply_freeze(const PolicyParameters& params, const StageSpec& stage);

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

using CorpusResolver = std::function<std::vector<PreferenceExample>(const std::string&)>;

// Resolver that loads JSONL files from disk.
CorpusResolver file_resolver();

struct StageLogEntry {
  int step = 0;
  int stage_id = 1;
  StagePhase phase = StagePhase::Rlvr;
  StepStats stats;
  std::optional<double> heldout_acc;
};

std::string log_entry_json(const StageLogEntry& entry);

struct RunHooks {
  // Heldout probe for the training log; invoked when a stage requests it.
  std::function<double(const PolicyParameters&, const StageSpec&)> heldout;
  // Collect the stage-1 replay buffer even when no stage of this plan reads
  // it; the ratio sweep trains stage 2 in separate runs.
  std::optional<ReplayAdmission> collect_stage1_admission;
  std::size_t collect_stage1_capacity = 1024;
};

struct RunResult {
  PolicyParameters params;
  std::vector<std::vector<StageLogEntry>> stage_logs;  // one vector per StageSpec
  ReplayBuffer stage1_buffer;
};

// Executes the stages in order, each consuming the previous parameters.
// Deterministic in (plan, seed). When out_dir is non-empty, writes
// stage{1,2,3}.ckpt and stage{1,2,3}_log.jsonl as stages complete. A
// preloaded stage-1 buffer substitutes for running stage 1 again (used by
// the ratio sweep).
RunResult run_plan(const StagePlan& plan, const PolicyParameters& init, std::uint64_t seed,
                   const CorpusResolver& resolver, const std::string& out_dir = {},
                   const RunHooks& hooks = {},
                   const ReplayBuffer* preload_stage1_buffer = nullptr);

}  // namespace msrl
