#include "msrl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace msrl {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Task names
// ---------------------------------------------------------------------------

bool is_generation(TaskKind task) {
  return task == TaskKind::ImageGeneration || task == TaskKind::VideoGeneration;
}

std::string task_wire_name(TaskKind task) {
  switch (task) {
    case TaskKind::ImageUnderstanding: return "image_understanding";
    case TaskKind::ImageGeneration: return "image_generation";
    case TaskKind::VideoUnderstanding: return "video_understanding";
    case TaskKind::VideoGeneration: return "video_generation";
  }
  return "image_understanding";
}

std::string task_prose_name(TaskKind task) {
  switch (task) {
    case TaskKind::ImageUnderstanding: return "image understanding";
    case TaskKind::ImageGeneration: return "image generation";
    case TaskKind::VideoUnderstanding: return "video understanding";
    case TaskKind::VideoGeneration: return "video generation";
  }
  return "image understanding";
}

namespace {

constexpr TaskKind kAllTasks[] = {TaskKind::ImageUnderstanding, TaskKind::ImageGeneration,
                                  TaskKind::VideoUnderstanding, TaskKind::VideoGeneration};

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::optional<TaskKind> task_from_wire(const std::string& s) {
  for (TaskKind t : kAllTasks) {
    if (task_wire_name(t) == s) return t;
  }
  return std::nullopt;
}

std::optional<TaskKind> task_from_prose(const std::string& s) {
  const std::string needle = lower(trim(s));
  for (TaskKind t : kAllTasks) {
    if (task_prose_name(t) == needle) return t;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Equality and validation
// ---------------------------------------------------------------------------

bool operator==(const MediaDescriptor& a, const MediaDescriptor& b) {
  return a.kind == b.kind && a.feature_bits == b.feature_bits && a.caption == b.caption;
}

bool operator==(const PreferenceExample& a, const PreferenceExample& b) {
  return a.id == b.id && a.task == b.task && a.prompt == b.prompt && a.media == b.media &&
         a.response_a == b.response_a && a.response_b == b.response_b && a.label == b.label &&
         a.gold_caption == b.gold_caption && a.source_rationale == b.source_rationale;
}

void validate_example(const PreferenceExample& ex, std::size_t feature_dim) {
  const auto fail = [&](const std::string& field, const std::string& why) {
    throw ValidationError("example " + ex.id + ": " + field + " " + why);
  };
  if (ex.id.empty()) fail("id", "must be non-empty");
  if (is_generation(ex.task)) {
    if (ex.media.size() != 2) fail("media", "generation tasks carry exactly two descriptors");
    if (ex.response_a || ex.response_b) {
      fail("response_a/response_b", "generation tasks carry no textual responses");
    }
  } else {
    if (ex.media.size() > 1) fail("media", "understanding tasks carry at most one descriptor");
    if (!ex.response_a || !ex.response_b) {
      fail("response_a/response_b", "understanding tasks carry two textual responses");
    }
  }
  std::size_t dim = feature_dim;
  for (std::size_t i = 0; i < ex.media.size(); ++i) {
    const MediaDescriptor& m = ex.media[i];
    const std::string field = "media[" + std::to_string(i) + "]";
    if (m.kind == MediaKind::None && !m.caption) {
      fail(field + ".caption", "required when kind is none");
    }
    for (std::uint8_t b : m.feature_bits) {
      if (b > 1) fail(field + ".feature_bits", "entries must be 0 or 1");
    }
    if (dim == 0) dim = m.feature_bits.size();
    if (m.feature_bits.size() != dim) {
      fail(field + ".feature_bits",
           "length " + std::to_string(m.feature_bits.size()) + " differs from corpus dimension " +
               std::to_string(dim));
    }
  }
}

void validate_spec(const CorpusSpec& spec) {
  if (spec.feature_dim == 0) throw ValidationError("spec.feature_dim: must be positive");
  if (spec.prompt_buckets == 0) throw ValidationError("spec.prompt_buckets: must be positive");
  if (spec.noise_rate < 0.0 || spec.noise_rate > 1.0) {
    throw ValidationError("spec.noise_rate: must lie in [0, 1]");
  }
  if (spec.task_mix.empty()) throw ValidationError("spec.task_mix: must be non-empty");
  double sum = 0.0;
  for (const auto& [task, p] : spec.task_mix) {
    if (p < 0.0) throw ValidationError("spec.task_mix: proportions must be nonnegative");
    if (spec.textual && is_generation(task) && p > 0.0) {
      throw ValidationError("spec.task_mix: textual corpora admit understanding tasks only");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-12) {
    throw ValidationError("spec.task_mix: proportions sum to " + std::to_string(sum) +
                          ", expected 1");
  }
  if (spec.textual && spec.label_rule == LabelRuleKind::LinearBits) {
    throw ValidationError("spec.label_rule: textual corpora have no bits; use linear_prompt");
  }
}

// ---------------------------------------------------------------------------
// Label rule
// ---------------------------------------------------------------------------

std::size_t prompt_bucket(const std::string& prompt, std::size_t buckets) {
  return static_cast<std::size_t>(fnv1a64(prompt) % buckets);
}

LabelRule derive_label_rule(const CorpusSpec& spec) {
  LabelRule rule;
  rule.kind = spec.label_rule;
  const std::size_t n = rule.kind == LabelRuleKind::LinearBits
                            ? 2 * spec.feature_dim
                            : kNumTasks + spec.prompt_buckets;
  Rng rng = Rng(spec.seed).fork("label-rule");
  rule.weights.resize(n);
  // nonzero integer weights so every coordinate is informative
  static constexpr int kChoices[] = {-2, -1, 1, 2};
  for (std::size_t i = 0; i < n; ++i) {
    rule.weights[i] = kChoices[rng.below(4)];
  }
  return rule;
}

Label LabelRule::apply(const PreferenceExample& ex, const CorpusSpec& spec) const {
  long score2 = 0;  // twice the weighted sum, so the -0.5 offset stays integral
  if (kind == LabelRuleKind::LinearBits) {
    for (std::size_t m = 0; m < 2; ++m) {
      if (m >= ex.media.size()) continue;
      const auto& bits = ex.media[m].feature_bits;
      for (std::size_t i = 0; i < bits.size(); ++i) {
        score2 += 2L * weights.at(m * spec.feature_dim + i) * bits[i];
      }
    }
  } else {
    score2 += 2L * weights.at(static_cast<std::size_t>(ex.task));
    score2 += 2L * weights.at(kNumTasks + prompt_bucket(ex.prompt, spec.prompt_buckets));
  }
  return (score2 - 1) > 0 ? Label::A : Label::B;
}

// ---------------------------------------------------------------------------
// Captions
// ---------------------------------------------------------------------------

std::string caption_for_bits(const std::vector<std::uint8_t>& bits, MediaKind kind) {
  std::string pattern;
  pattern.reserve(bits.size());
  int active = 0;
  for (std::uint8_t b : bits) {
    pattern.push_back(b ? '1' : '0');
    active += b;
  }
  const char* noun = kind == MediaKind::Video ? "video" : kind == MediaKind::Image ? "image" : "scene";
  return "bits: " + pattern + ". A synthetic " + noun + " with " + std::to_string(active) +
         " active elements.";
}

std::optional<std::vector<std::uint8_t>> parse_caption_bits(const std::string& caption,
                                                            std::size_t expected_dim) {
  const auto pos = caption.find("bits: ");
  if (pos == std::string::npos) return std::nullopt;
  std::vector<std::uint8_t> bits;
  bits.reserve(expected_dim);
  for (std::size_t i = pos + 6; i < caption.size(); ++i) {
    const char c = caption[i];
    if (c != '0' && c != '1') break;
    bits.push_back(c == '1' ? 1 : 0);
  }
  if (bits.size() != expected_dim) return std::nullopt;
  return bits;
}

std::string join_media_captions(const std::vector<std::string>& captions) {
  if (captions.size() == 1) return captions[0];
  std::string joined;
  static constexpr const char* kSides[] = {"A", "B"};
  for (std::size_t i = 0; i < captions.size(); ++i) {
    if (i > 0) joined += "\n";
    joined += "Candidate " + std::string(kSides[i % 2]) + ": " + captions[i];
  }
  return joined;
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

namespace {

// Largest-remainder apportionment of n across the mix, deterministic order.
std::vector<std::pair<TaskKind, std::size_t>> apportion(const CorpusSpec& spec) {
  struct Cell {
    TaskKind task;
    double exact;
    std::size_t count;
  };
  std::vector<Cell> cells;
  for (const auto& [task, p] : spec.task_mix) {
    const double exact = p * static_cast<double>(spec.n_examples);
    cells.push_back({task, exact, static_cast<std::size_t>(std::floor(exact))});
  }
  std::size_t assigned = 0;
  for (const Cell& c : cells) assigned += c.count;
  std::vector<std::size_t> order(cells.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return (cells[a].exact - std::floor(cells[a].exact)) >
           (cells[b].exact - std::floor(cells[b].exact));
  });
  for (std::size_t k = 0; assigned < spec.n_examples; ++k) {
    cells[order[k % order.size()]].count += 1;
    ++assigned;
  }
  std::vector<std::pair<TaskKind, std::size_t>> out;
  for (const Cell& c : cells) out.emplace_back(c.task, c.count);
  return out;
}

std::vector<std::uint8_t> random_bits(Rng& rng, std::size_t d) {
  std::vector<std::uint8_t> bits(d);
  for (auto& b : bits) b = static_cast<std::uint8_t>(rng.below(2));
  return bits;
}

MediaKind media_kind_for(TaskKind task) {
  switch (task) {
    case TaskKind::ImageUnderstanding:
    case TaskKind::ImageGeneration: return MediaKind::Image;
    default: return MediaKind::Video;
  }
}

}  // namespace

std::vector<PreferenceExample> synth_corpus(const CorpusSpec& spec) {
  validate_spec(spec);
  const LabelRule rule = derive_label_rule(spec);

  std::vector<TaskKind> tasks;
  tasks.reserve(spec.n_examples);
  for (const auto& [task, count] : apportion(spec)) {
    tasks.insert(tasks.end(), count, task);
  }
  Rng order_rng = Rng(spec.seed).fork("task-order");
  order_rng.shuffle(tasks);

  Rng bits_rng = Rng(spec.seed).fork("bits");
  Rng noise_rng = Rng(spec.seed).fork("noise");

  std::vector<PreferenceExample> corpus;
  corpus.reserve(spec.n_examples);
  for (std::size_t i = 0; i < spec.n_examples; ++i) {
    PreferenceExample ex;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "ex-%06zu", i);
    ex.id = idbuf;
    ex.task = tasks[i];

    const std::string scene = "s" + std::to_string(mix64(spec.seed ^ (i + 1)) % 100000);
    if (is_generation(ex.task)) {
      const char* noun = ex.task == TaskKind::ImageGeneration ? "image" : "video";
      ex.prompt = "Generate a synthetic " + std::string(noun) + " matching specification " +
                  scene + ".";
      for (int m = 0; m < 2; ++m) {
        MediaDescriptor md;
        md.kind = media_kind_for(ex.task);
        md.feature_bits = random_bits(bits_rng, spec.feature_dim);
        md.caption = caption_for_bits(md.feature_bits, md.kind);
        ex.media.push_back(std::move(md));
      }
    } else {
      const char* noun = ex.task == TaskKind::ImageUnderstanding ? "image" : "video";
      ex.prompt = spec.textual
                      ? "Question " + scene + ": which reply handles the request better?"
                      : "Question " + scene + ": what stands out in the synthetic " + noun + "?";
      if (!spec.textual) {
        MediaDescriptor md;
        md.kind = media_kind_for(ex.task);
        md.feature_bits = random_bits(bits_rng, spec.feature_dim);
        md.caption = caption_for_bits(md.feature_bits, md.kind);
        ex.media.push_back(std::move(md));
      }
      ex.response_a = "Reply A for " + scene + ": a direct reading of the content.";
      ex.response_b = "Reply B for " + scene + ": an alternative reading of the content.";
    }

    if (!ex.media.empty()) {
      std::vector<std::string> caps;
      for (const MediaDescriptor& m : ex.media) caps.push_back(*m.caption);
      ex.gold_caption = join_media_captions(caps);
    }

    Label label = rule.apply(ex, spec);
    if (noise_rng.bernoulli(spec.noise_rate)) {
      label = label == Label::A ? Label::B : Label::A;
    }
    ex.label = label;

    validate_example(ex, spec.feature_dim);
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Caption substitution
// ---------------------------------------------------------------------------

PreferenceExample to_caption_based(const PreferenceExample& ex) {
  PreferenceExample out = ex;
  for (std::size_t i = 0; i < out.media.size(); ++i) {
    MediaDescriptor& m = out.media[i];
    if (!m.caption) {
      if (out.media.size() == 1 && ex.gold_caption) {
        m.caption = *ex.gold_caption;
      } else {
        throw ValidationError("example " + ex.id + ": media[" + std::to_string(i) +
                              "].caption missing gold caption for substitution");
      }
    }
    m.kind = MediaKind::None;
  }
  if (!out.gold_caption && !out.media.empty()) {
    std::vector<std::string> caps;
    for (const MediaDescriptor& m : out.media) caps.push_back(*m.caption);
    out.gold_caption = join_media_captions(caps);
  }
  return out;
}

std::vector<PreferenceExample> to_caption_based(const std::vector<PreferenceExample>& corpus) {
  std::vector<PreferenceExample> out;
  out.reserve(corpus.size());
  for (const PreferenceExample& ex : corpus) out.push_back(to_caption_based(ex));
  return out;
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

namespace {

std::string bits_to_string(const std::vector<std::uint8_t>& bits) {
  std::string s;
  s.reserve(bits.size());
  for (std::uint8_t b : bits) s.push_back(b ? '1' : '0');
  return s;
}

std::vector<std::uint8_t> bits_from_string(const std::string& s) {
  std::vector<std::uint8_t> bits;
  bits.reserve(s.size());
  for (char c : s) {
    if (c != '0' && c != '1') throw ValidationError("feature_bits must be a 0|1 string");
    bits.push_back(c == '1' ? 1 : 0);
  }
  return bits;
}

ordered_json opt_str(const std::optional<std::string>& v) {
  if (v) return *v;
  return nullptr;
}

std::optional<std::string> str_or_null(const ordered_json& j, const std::string& key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<std::string>();
}

}  // namespace

std::string to_jsonl_line(const PreferenceExample& ex) {
  ordered_json j;
  j["id"] = ex.id;
  j["task"] = task_wire_name(ex.task);
  j["prompt"] = ex.prompt;
  ordered_json media = ordered_json::array();
  for (const MediaDescriptor& m : ex.media) {
    ordered_json jm;
    jm["kind"] = m.kind == MediaKind::Image ? "image" : m.kind == MediaKind::Video ? "video" : "none";
    jm["feature_bits"] = bits_to_string(m.feature_bits);
    jm["caption"] = opt_str(m.caption);
    media.push_back(std::move(jm));
  }
  j["media"] = std::move(media);
  j["response_a"] = opt_str(ex.response_a);
  j["response_b"] = opt_str(ex.response_b);
  j["label"] = ex.label == Label::A ? "A" : "B";
  j["gold_caption"] = opt_str(ex.gold_caption);
  j["source_rationale"] = opt_str(ex.source_rationale);
  return j.dump();
}

PreferenceExample from_jsonl_line(const std::string& line) {
  const ordered_json j = ordered_json::parse(line);
  PreferenceExample ex;
  ex.id = j.at("id").get<std::string>();
  const std::string task = j.at("task").get<std::string>();
  const auto t = task_from_wire(task);
  if (!t) throw ValidationError("example " + ex.id + ": task \"" + task + "\" unknown");
  ex.task = *t;
  ex.prompt = j.at("prompt").get<std::string>();
  for (const ordered_json& jm : j.at("media")) {
    MediaDescriptor m;
    const std::string kind = jm.at("kind").get<std::string>();
    if (kind == "image") {
      m.kind = MediaKind::Image;
    } else if (kind == "video") {
      m.kind = MediaKind::Video;
    } else if (kind == "none") {
      m.kind = MediaKind::None;
    } else {
      throw ValidationError("example " + ex.id + ": media.kind \"" + kind + "\" unknown");
    }
    m.feature_bits = bits_from_string(jm.at("feature_bits").get<std::string>());
    m.caption = str_or_null(jm, "caption");
    ex.media.push_back(std::move(m));
  }
  ex.response_a = str_or_null(j, "response_a");
  ex.response_b = str_or_null(j, "response_b");
  const std::string label = j.at("label").get<std::string>();
  if (label == "A") {
    ex.label = Label::A;
  } else if (label == "B") {
    ex.label = Label::B;
  } else {
    throw ValidationError("example " + ex.id + ": label \"" + label + "\" must be A or B");
  }
  ex.gold_caption = str_or_null(j, "gold_caption");
  ex.source_rationale = str_or_null(j, "source_rationale");
  return ex;
}

std::vector<PreferenceExample> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open for reading");
  std::vector<PreferenceExample> corpus;
  std::string line;
  std::size_t lineno = 0;
  std::size_t dim = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    PreferenceExample ex;
    try {
      ex = from_jsonl_line(line);
      validate_example(ex, dim);
    } catch (const ValidationError& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const std::exception& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
    if (dim == 0 && !ex.media.empty()) dim = ex.media.front().feature_bits.size();
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

void save_corpus(const std::string& path, const std::vector<PreferenceExample>& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot open for writing");
  for (const PreferenceExample& ex : corpus) {
    out << to_jsonl_line(ex) << '\n';
  }
  if (!out) throw IoError(path + ": write failed");
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

void ReplayBuffer::offer(const PreferenceExample& ex, int reward_millis) {
  if (admission_.kind == ReplayAdmission::Kind::HighRewardOnly &&
      reward_millis < admission_.threshold_millis) {
    return;
  }
  items_.push_back(ex);
  while (items_.size() > capacity_) items_.pop_front();
}

ReplayMixer::ReplayMixer(std::vector<PreferenceExample> new_items, const ReplayBuffer& buffer,
                         std::pair<int, int> ratio, std::size_t batch_size, std::uint64_t seed)
    : new_items_(std::move(new_items)), buffer_(&buffer), batch_size_(batch_size),
      rng_(Rng(seed).fork("replay-mix")) {
  const auto [rn, rr] = ratio;
  if (rn < 0 || rr < 0 || (rn == 0 && rr == 0)) {
    throw ValidationError("ratio_new_to_replay: components must be >= 0 and not both 0");
  }
  if (batch_size == 0) throw ValidationError("batch_size: must be positive");
  if (rr > 0) {
    const std::size_t parts = static_cast<std::size_t>(rn + rr);
    if (batch_size % parts != 0) {
      throw ValidationError("batch_size: must be divisible by ratio_new + ratio_replay");
    }
    new_per_batch_ = batch_size / parts * static_cast<std::size_t>(rn);
    replay_per_batch_ = batch_size / parts * static_cast<std::size_t>(rr);
    if (buffer.empty()) throw ValidationError("replay buffer is empty but ratio_replay > 0");
    if (buffer.size() < replay_per_batch_) {
      throw ValidationError("replay buffer holds " + std::to_string(buffer.size()) +
                            " items, need " + std::to_string(replay_per_batch_) + " per batch");
    }
  } else {
    new_per_batch_ = batch_size;
    replay_per_batch_ = 0;
  }
}

std::optional<std::vector<PreferenceExample>> ReplayMixer::next() {
  if (cursor_ >= new_items_.size()) return std::nullopt;
  std::vector<PreferenceExample> batch;
  if (replay_per_batch_ == 0) {
    // pass-through: trailing partial batch is kept
    const std::size_t take = std::min(new_per_batch_, new_items_.size() - cursor_);
    batch.insert(batch.end(), new_items_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                 new_items_.begin() + static_cast<std::ptrdiff_t>(cursor_ + take));
    cursor_ += take;
    ++batch_index_;
    return batch;
  }
  if (new_items_.size() - cursor_ < new_per_batch_) return std::nullopt;
  batch.insert(batch.end(), new_items_.begin() + static_cast<std::ptrdiff_t>(cursor_),
               new_items_.begin() + static_cast<std::ptrdiff_t>(cursor_ + new_per_batch_));
  cursor_ += new_per_batch_;

  // partial Fisher-Yates over buffer indices: without replacement in-batch
  Rng draw = rng_.fork("batch", batch_index_);
  std::vector<std::size_t> idx(buffer_->size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t k = 0; k < replay_per_batch_; ++k) {
    const std::size_t j = k + static_cast<std::size_t>(draw.below(idx.size() - k));
    std::swap(idx[k], idx[j]);
    batch.push_back(buffer_->items()[idx[k]]);
  }
  ++batch_index_;
  return batch;
}

std::vector<std::vector<PreferenceExample>> replay_mix(
    std::vector<PreferenceExample> new_items, const ReplayBuffer& buffer,
    std::pair<int, int> ratio, std::size_t batch_size, std::uint64_t seed) {
  ReplayMixer mixer(std::move(new_items), buffer, ratio, batch_size, seed);
  std::vector<std::vector<PreferenceExample>> batches;
  while (auto b = mixer.next()) batches.push_back(std::move(*b));
  return batches;
}

}  // namespace msrl
