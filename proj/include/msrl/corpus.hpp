#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msrl/error.hpp"
#include "msrl/rng.hpp"

namespace msrl {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

enum class TaskKind { ImageUnderstanding, ImageGeneration, VideoUnderstanding, VideoGeneration };
inline constexpr int kNumTasks = 4;

enum class Label : std::uint8_t { A, B };

enum class MediaKind { Image, Video, None };

bool is_generation(TaskKind task);

// "image_understanding" etc. (wire form) and "image understanding" etc.
// (prose form used in templates and <type> tags).
std::string task_wire_name(TaskKind task);
std::string task_prose_name(TaskKind task);
std::optional<TaskKind> task_from_wire(const std::string& s);
std::optional<TaskKind> task_from_prose(const std::string& s);  // case-insensitive

// Stand-in for pixel content: a fixed-width bit pattern plus an optional
// caption. kind None means the media has been replaced by its caption.
struct MediaDescriptor {
  MediaKind kind = MediaKind::None;
  std::vector<std::uint8_t> feature_bits;  // values 0/1, length = corpus feature_dim
  std::optional<std::string> caption;
};

struct PreferenceExample {
  std::string id;
  TaskKind task = TaskKind::ImageUnderstanding;
  std::string prompt;
  // 1 descriptor for understanding tasks, 2 for generation tasks,
  // 0 for text-only preference examples (no visual content at all).
  std::vector<MediaDescriptor> media;
  std::optional<std::string> response_a;
  std::optional<std::string> response_b;
  Label label = Label::A;
  std::optional<std::string> gold_caption;
  std::optional<std::string> source_rationale;
};

bool operator==(const MediaDescriptor& a, const MediaDescriptor& b);
bool operator==(const PreferenceExample& a, const PreferenceExample& b);

// Throws ValidationError naming the example id and field on violation.
// feature_dim 0 means "infer from the example itself".
void validate_example(const PreferenceExample& ex, std::size_t feature_dim = 0);

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

// Label rule classes. LinearBits thresholds an integer-weighted sum of the
// media bit block; LinearPrompt does the same over the task one-hot plus the
// prompt hash bucket one-hot (the only informative features of text-only
// examples). Weights derive deterministically from the corpus seed and the
// threshold is offset by 0.5 so the rule never ties.
enum class LabelRuleKind { LinearBits, LinearPrompt };

struct CorpusSpec {
  std::size_t n_examples = 0;
  std::size_t feature_dim = 8;  // d: bits per media descriptor
  std::map<TaskKind, double> task_mix;
  LabelRuleKind label_rule = LabelRuleKind::LinearBits;
  double noise_rate = 0.0;
  std::uint64_t seed = 0;
  bool textual = false;           // emit media-free text-only examples
  std::size_t prompt_buckets = 4; // bucket count for LinearPrompt / featurization
};

void validate_spec(const CorpusSpec& spec);  // throws ValidationError

// Materialized label rule, exposed so tests can re-apply it independently
// of the synthesis path.
struct LabelRule {
  LabelRuleKind kind = LabelRuleKind::LinearBits;
  std::vector<int> weights;  // LinearBits: 2d entries; LinearPrompt: 4 + buckets
  // score = sum(w_i * x_i) - 0.5; label A iff score > 0
  Label apply(const PreferenceExample& ex, const CorpusSpec& spec) const;
};

// Stable hash bucket for a prompt string; shared by the label rule and the
// policy featurizer.
std::size_t prompt_bucket(const std::string& prompt, std::size_t buckets);

LabelRule derive_label_rule(const CorpusSpec& spec);

std::vector<PreferenceExample> synth_corpus(const CorpusSpec& spec);

// Deterministic rendering of a bit pattern as caption text. The bit string
// is embedded verbatim so the caption carries the full media content.
std::string caption_for_bits(const std::vector<std::uint8_t>& bits, MediaKind kind);

// Recover the embedded bit string from a caption produced by
// caption_for_bits; nullopt when the caption does not carry expected_dim bits.
std::optional<std::vector<std::uint8_t>> parse_caption_bits(const std::string& caption,
                                                            std::size_t expected_dim);

// The example-level caption c: per-media captions joined in candidate order.
std::string join_media_captions(const std::vector<std::string>& captions);

// ---------------------------------------------------------------------------
// Caption substitution (media -> caption form)
// ---------------------------------------------------------------------------

// Replaces each media descriptor's visual content with its caption:
// kind becomes None, caption must be available (from the descriptor itself,
// or from gold_caption for single-media examples). Idempotent; label, task,
// prompt and responses are untouched.
PreferenceExample to_caption_based(const PreferenceExample& ex);

std::vector<PreferenceExample> to_caption_based(const std::vector<PreferenceExample>& corpus);

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

std::string to_jsonl_line(const PreferenceExample& ex);  // canonical, no newline
PreferenceExample from_jsonl_line(const std::string& line);

std::vector<PreferenceExample> load_corpus(const std::string& path);
void save_corpus(const std::string& path, const std::vector<PreferenceExample>& corpus);

// ---------------------------------------------------------------------------
// Experience replay
// ---------------------------------------------------------------------------

struct ReplayAdmission {
  enum class Kind { All, HighRewardOnly };
  Kind kind = Kind::HighRewardOnly;
  int threshold_millis = 2000;  // full format+accuracy reward
};

// FIFO buffer of earlier-stage examples. Single-writer.
class ReplayBuffer {
 public:
  ReplayBuffer() = default;
  ReplayBuffer(std::size_t capacity, ReplayAdmission admission)
      : capacity_(capacity), admission_(admission) {}

  // reward_millis is the best verifiable reward observed for the example.
  void offer(const PreferenceExample& ex, int reward_millis);

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  const std::deque<PreferenceExample>& items() const { return items_; }

 private:
  std::size_t capacity_ = 1024;
  ReplayAdmission admission_;
  std::deque<PreferenceExample> items_;
};

// Emits batches holding exactly batch_size*new/(new+replay) fresh items and
// batch_size*replay/(new+replay) buffer items. Replay items are drawn without
// replacement within a batch, with replacement across batches. Ratio r:0
// degenerates to pass-through of the new items (trailing partial batch kept).
class ReplayMixer {
 public:
  ReplayMixer(std::vector<PreferenceExample> new_items, const ReplayBuffer& buffer,
              std::pair<int, int> ratio_new_to_replay, std::size_t batch_size,
              std::uint64_t seed);

  std::optional<std::vector<PreferenceExample>> next();

 private:
  std::vector<PreferenceExample> new_items_;
  const ReplayBuffer* buffer_;
  std::size_t new_per_batch_ = 0;
  std::size_t replay_per_batch_ = 0;
  std::size_t batch_size_ = 0;
  std::size_t cursor_ = 0;
  std::uint64_t batch_index_ = 0;
  Rng rng_;
};

// Convenience wrapper collecting every batch.
std::vector<std::vector<PreferenceExample>> replay_mix(
    std::vector<PreferenceExample> new_items, const ReplayBuffer& buffer,
    std::pair<int, int> ratio_new_to_replay, std::size_t batch_size, std::uint64_t seed);

}  // namespace msrl
