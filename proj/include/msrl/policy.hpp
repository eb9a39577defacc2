#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "msrl/corpus.hpp"
#include "msrl/grammar.hpp"

namespace msrl {

// ---------------------------------------------------------------------------
// Featurization
// ---------------------------------------------------------------------------

// Feature vector layout (all entries 0/1):
//   [0, 2d)            media bit blocks, candidate A then candidate B
//   [2d, 2d+4)         task one-hot
//   [2d+4, 2d+4+nb)    prompt hash-bucket one-hot
struct FeatureLayout {
  std::size_t media_bits = 8;     // d: bits per media descriptor
  std::size_t prompt_buckets = 4;

  std::size_t dim() const { return 2 * media_bits + kNumTasks + prompt_buckets; }
  std::size_t visual_block() const { return 2 * media_bits; }
};

bool operator==(const FeatureLayout& a, const FeatureLayout& b);

// Input channel. Visual reads media bits directly; Caption recovers the bits
// from the caption text (a faithful caption reproduces the visual block
// exactly, an unparseable caption hashes to a pseudo-random block); TextOnly
// leaves the media block at zero.
enum class Channel { Visual, Caption, TextOnly };

std::string channel_name(Channel c);
std::optional<Channel> channel_from_name(const std::string& s);

// Media-absent examples can only be featurized text-only.
Channel effective_channel(const PreferenceExample& ex, Channel stage_channel);

Eigen::VectorXd featurize(const PreferenceExample& ex, Channel channel,
                          const FeatureLayout& layout);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

// One D x K logit matrix per decision.
struct HeadSet {
  Eigen::MatrixXd answer;   // D x 2, {A, B}
  Eigen::MatrixXd task;     // D x 4, TaskKind order
  Eigen::MatrixXd format;   // D x 2, {WellFormed, Malformed}
  Eigen::MatrixXd caption;  // D x 2, {EmitGoldCaption, EmitCorruptCaption}
};

struct FreezeMask {
  BoolMatrix answer, task, format, caption;  // true = entry is not updated
};

enum class HeadId { Answer, Task, Format, Caption };
inline constexpr HeadId kAllHeads[] = {HeadId::Answer, HeadId::Task, HeadId::Format,
                                       HeadId::Caption};

struct PolicyParameters {
  FeatureLayout layout;
  HeadSet heads;
  FreezeMask freeze;

  static PolicyParameters zeros(const FeatureLayout& layout);
};

// A frozen copy of the parameters taken before an update round.
using PolicySnapshot = PolicyParameters;

const Eigen::MatrixXd& head(const HeadSet& h, HeadId id);
Eigen::MatrixXd& head(HeadSet& h, HeadId id);
const BoolMatrix& mask(const FreezeMask& m, HeadId id);
BoolMatrix& mask(FreezeMask& m, HeadId id);

HeadSet zero_heads(const FeatureLayout& layout);
FreezeMask empty_freeze_mask(const FeatureLayout& layout);
// Freezes the rows reading the media bit block of every head; the desk-scale
// counterpart of keeping the vision encoder fixed during text-only training.
FreezeMask visual_freeze_mask(const FeatureLayout& layout);

void save_checkpoint(const std::string& path, const PolicyParameters& params);
PolicyParameters load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

// Everything learnable about one rollout. The rendered text is a pure
// function of (example, action, stage format).
struct StructuredAction {
  Label answer = Label::A;
  TaskKind task_tag = TaskKind::ImageUnderstanding;
  bool well_formed = true;
  bool caption_faithful = true;
};

bool operator==(const StructuredAction& a, const StructuredAction& b);

// Heads sampled for a stage format, in sampling order. Task and caption
// heads only participate in TypedThinkAnswer.
std::vector<HeadId> active_head_ids(StageFormat format);
int n_active_heads(StageFormat format);

// Deterministic enumeration of the action space (4 actions for ThinkAnswer,
// 32 for TypedThinkAnswer). Inactive decision fields take fixed defaults:
// task_tag = example.task, caption_faithful = true.
std::vector<StructuredAction> enumerate_actions(StageFormat format,
                                                const PreferenceExample& ex);

// Caption body carried by a faithful rollout (per-media captions joined),
// and its corrupted counterpart (every media bit flipped).
std::string faithful_caption_text(const PreferenceExample& ex);
std::string corrupt_caption_text(const PreferenceExample& ex);

// Canonical rendering of an action; malformed actions drop the </think> line.
std::string render_action_text(const PreferenceExample& ex, const StructuredAction& action,
                               StageFormat format);

// Reconstructs the action that renders to this rationale (used when fitting
// distilled teacher outputs).
StructuredAction action_from_rationale(const PreferenceExample& ex, const Rationale& r);

// ---------------------------------------------------------------------------
// Policy evaluation
// ---------------------------------------------------------------------------

struct SampleResult {
  StructuredAction action;
  std::string text;
  double logprob = 0.0;
};

SampleResult sample_action(const PolicyParameters& params, const PreferenceExample& ex,
                           StageFormat format, Channel channel, std::uint64_t seed);

// Exact log-probability of the action: sum of the active heads' categorical
// log-probabilities.
double action_logprob(const PolicyParameters& params, const PreferenceExample& ex,
                      const StructuredAction& action, StageFormat format, Channel channel);

// Exact softmax-categorical gradient of action_logprob, zero at frozen
// entries and at inactive heads.
HeadSet grad_logprob(const PolicyParameters& params, const PreferenceExample& ex,
                     const StructuredAction& action, StageFormat format, Channel channel);

// Exact KL(params || snapshot) on this example, summed over active heads.
double kl_divergence(const PolicyParameters& params, const PolicySnapshot& snapshot,
                     const PreferenceExample& ex, StageFormat format, Channel channel);

// Gradient of kl_divergence with respect to params, zero at frozen entries.
HeadSet grad_kl(const PolicyParameters& params, const PolicySnapshot& snapshot,
                const PreferenceExample& ex, StageFormat format, Channel channel);

}  // namespace msrl
