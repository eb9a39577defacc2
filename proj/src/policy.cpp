#include "msrl/policy.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "msrl/numeric.hpp"
#include "msrl/rng.hpp"

namespace msrl {

// ---------------------------------------------------------------------------
// Featurization
// ---------------------------------------------------------------------------

bool operator==(const FeatureLayout& a, const FeatureLayout& b) {
  return a.media_bits == b.media_bits && a.prompt_buckets == b.prompt_buckets;
}

std::string channel_name(Channel c) {
  switch (c) {
    case Channel::Visual: return "visual";
    case Channel::Caption: return "caption";
    case Channel::TextOnly: return "text_only";
  }
  return "visual";
}

std::optional<Channel> channel_from_name(const std::string& s) {
  if (s == "visual") return Channel::Visual;
  if (s == "caption") return Channel::Caption;
  if (s == "text_only") return Channel::TextOnly;
  return std::nullopt;
}

Channel effective_channel(const PreferenceExample& ex, Channel stage_channel) {
  return ex.media.empty() ? Channel::TextOnly : stage_channel;
}

namespace {

std::vector<std::uint8_t> hash_bits(const std::string& text, std::size_t d) {
  const std::uint64_t base = fnv1a64(text);
  std::vector<std::uint8_t> bits(d);
  for (std::size_t i = 0; i < d; ++i) {
    bits[i] = static_cast<std::uint8_t>(mix64(base ^ (i + 1)) & 1u);
  }
  return bits;
}

std::vector<std::uint8_t> media_block_bits(const PreferenceExample& ex, std::size_t index,
                                           Channel channel, const FeatureLayout& layout) {
  const MediaDescriptor& m = ex.media.at(index);
  if (channel == Channel::Visual) {
    if (m.kind == MediaKind::None) {
      throw ValidationError("example " + ex.id + ": visual channel requires media content");
    }
    if (m.feature_bits.size() != layout.media_bits) {
      throw ValidationError("example " + ex.id + ": feature_bits length " +
                            std::to_string(m.feature_bits.size()) + " != layout.media_bits " +
                            std::to_string(layout.media_bits));
    }
    return m.feature_bits;
  }
  if (!m.caption) {
    throw ValidationError("example " + ex.id + ": caption channel requires a caption");
  }
  if (auto bits = parse_caption_bits(*m.caption, layout.media_bits)) return *bits;
  return hash_bits(*m.caption, layout.media_bits);
}

}  // namespace

Eigen::VectorXd featurize(const PreferenceExample& ex, Channel channel,
                          const FeatureLayout& layout) {
  Eigen::VectorXd f = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout.dim()));
  if (channel != Channel::TextOnly) {
    if (ex.media.empty()) {
      throw ValidationError("example " + ex.id + ": " + channel_name(channel) +
                            " channel requires media");
    }
    for (std::size_t m = 0; m < ex.media.size() && m < 2; ++m) {
      const auto bits = media_block_bits(ex, m, channel, layout);
      for (std::size_t i = 0; i < bits.size(); ++i) {
        f[static_cast<Eigen::Index>(m * layout.media_bits + i)] = bits[i];
      }
    }
  }
  f[static_cast<Eigen::Index>(layout.visual_block() + static_cast<std::size_t>(ex.task))] = 1.0;
  const std::size_t bucket = prompt_bucket(ex.prompt, layout.prompt_buckets);
  f[static_cast<Eigen::Index>(layout.visual_block() + kNumTasks + bucket)] = 1.0;
  return f;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

const Eigen::MatrixXd& head(const HeadSet& h, HeadId id) {
  switch (id) {
    case HeadId::Answer: return h.answer;
    case HeadId::Task: return h.task;
    case HeadId::Format: return h.format;
    case HeadId::Caption: return h.caption;
  }
  return h.answer;
}

Eigen::MatrixXd& head(HeadSet& h, HeadId id) {
  return const_cast<Eigen::MatrixXd&>(head(static_cast<const HeadSet&>(h), id));
}

const BoolMatrix& mask(const FreezeMask& m, HeadId id) {
  switch (id) {
    case HeadId::Answer: return m.answer;
    case HeadId::Task: return m.task;
    case HeadId::Format: return m.format;
    case HeadId::Caption: return m.caption;
  }
  return m.answer;
}

BoolMatrix& mask(FreezeMask& m, HeadId id) {
  return const_cast<BoolMatrix&>(mask(static_cast<const FreezeMask&>(m), id));
}

namespace {

int head_arity(HeadId id) { return id == HeadId::Task ? kNumTasks : 2; }

}  // namespace

HeadSet zero_heads(const FeatureLayout& layout) {
  const auto d = static_cast<Eigen::Index>(layout.dim());
  HeadSet h;
  h.answer = Eigen::MatrixXd::Zero(d, 2);
  h.task = Eigen::MatrixXd::Zero(d, kNumTasks);
  h.format = Eigen::MatrixXd::Zero(d, 2);
  h.caption = Eigen::MatrixXd::Zero(d, 2);
  return h;
}

FreezeMask empty_freeze_mask(const FeatureLayout& layout) {
  const auto d = static_cast<Eigen::Index>(layout.dim());
  FreezeMask m;
  m.answer = BoolMatrix::Constant(d, 2, false);
  m.task = BoolMatrix::Constant(d, kNumTasks, false);
  m.format = BoolMatrix::Constant(d, 2, false);
  m.caption = BoolMatrix::Constant(d, 2, false);
  return m;
}

FreezeMask visual_freeze_mask(const FeatureLayout& layout) {
  FreezeMask m = empty_freeze_mask(layout);
  const auto rows = static_cast<Eigen::Index>(layout.visual_block());
  for (HeadId id : kAllHeads) {
    mask(m, id).topRows(rows).setConstant(true);
  }
  return m;
}

PolicyParameters PolicyParameters::zeros(const FeatureLayout& layout) {
  return PolicyParameters{layout, zero_heads(layout), empty_freeze_mask(layout)};
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  if (static_cast<Eigen::Index>(j.size()) != rows) {
    throw ValidationError("checkpoint: head row count mismatch");
  }
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j.at(static_cast<std::size_t>(r));
    if (static_cast<Eigen::Index>(row.size()) != cols) {
      throw ValidationError("checkpoint: head column count mismatch");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

nlohmann::json bools_to_json(const BoolMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c) ? 1 : 0);
    rows.push_back(std::move(row));
  }
  return rows;
}

BoolMatrix bools_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  BoolMatrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = j.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<int>() != 0;
    }
  }
  return m;
}

const char* head_key(HeadId id) {
  switch (id) {
    case HeadId::Answer: return "answer";
    case HeadId::Task: return "task";
    case HeadId::Format: return "format";
    case HeadId::Caption: return "caption";
  }
  return "answer";
}

}  // namespace

void save_checkpoint(const std::string& path, const PolicyParameters& params) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["layout"] = {{"media_bits", params.layout.media_bits},
                 {"prompt_buckets", params.layout.prompt_buckets}};
  for (HeadId id : kAllHeads) {
    j["heads"][head_key(id)] = matrix_to_json(head(params.heads, id));
    j["freeze"][head_key(id)] = bools_to_json(mask(params.freeze, id));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << j.dump() << '\n';
  if (!out) throw IoError(path + ": write failed");
}

PolicyParameters load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open for reading");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError(path + ": malformed checkpoint: " + e.what());
  }
  if (j.value("format_version", 0) != 1) {
    throw ValidationError("checkpoint: unsupported format_version");
  }
  FeatureLayout layout;
  layout.media_bits = j.at("layout").at("media_bits").get<std::size_t>();
  layout.prompt_buckets = j.at("layout").at("prompt_buckets").get<std::size_t>();
  PolicyParameters params = PolicyParameters::zeros(layout);
  const auto dim = static_cast<Eigen::Index>(layout.dim());
  for (HeadId id : kAllHeads) {
    head(params.heads, id) = matrix_from_json(j.at("heads").at(head_key(id)), dim, head_arity(id));
    mask(params.freeze, id) = bools_from_json(j.at("freeze").at(head_key(id)), dim, head_arity(id));
  }
  return params;
}

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

bool operator==(const StructuredAction& a, const StructuredAction& b) {
  return a.answer == b.answer && a.task_tag == b.task_tag && a.well_formed == b.well_formed &&
         a.caption_faithful == b.caption_faithful;
}

std::vector<HeadId> active_head_ids(StageFormat format) {
  if (format == StageFormat::ThinkAnswer) return {HeadId::Format, HeadId::Answer};
  return {HeadId::Task, HeadId::Caption, HeadId::Format, HeadId::Answer};
}

int n_active_heads(StageFormat format) { return format == StageFormat::ThinkAnswer ? 2 : 4; }

std::vector<StructuredAction> enumerate_actions(StageFormat format, const PreferenceExample& ex) {
  std::vector<StructuredAction> actions;
  const bool typed = format == StageFormat::TypedThinkAnswer;
  const int n_tasks = typed ? kNumTasks : 1;
  const int n_caption = typed ? 2 : 1;
  for (int t = 0; t < n_tasks; ++t) {
    for (int c = 0; c < n_caption; ++c) {
      for (int f = 0; f < 2; ++f) {
        for (int a = 0; a < 2; ++a) {
          StructuredAction act;
          act.task_tag = typed ? static_cast<TaskKind>(t) : ex.task;
          act.caption_faithful = typed ? c == 0 : true;
          act.well_formed = f == 0;
          act.answer = a == 0 ? Label::A : Label::B;
          actions.push_back(act);
        }
      }
    }
  }
  return actions;
}

std::string faithful_caption_text(const PreferenceExample& ex) {
  if (ex.media.empty()) return "A textual conversation without visual content.";
  std::vector<std::string> caps;
  for (const MediaDescriptor& m : ex.media) {
    caps.push_back(m.caption ? *m.caption : caption_for_bits(m.feature_bits, m.kind));
  }
  return join_media_captions(caps);
}

std::string corrupt_caption_text(const PreferenceExample& ex) {
  if (ex.media.empty()) return "A textual conversation without visual content.";
  std::vector<std::string> caps;
  for (const MediaDescriptor& m : ex.media) {
    std::vector<std::uint8_t> flipped = m.feature_bits;
    for (auto& b : flipped) b = static_cast<std::uint8_t>(1 - b);
    caps.push_back(caption_for_bits(flipped, m.kind));
  }
  return join_media_captions(caps);
}

namespace {

// Rationale body filler; the rewards never read body semantics.
Rationale rationale_for_action(const PreferenceExample& ex, const StructuredAction& action,
                               StageFormat format) {
  const char side = action.answer == Label::A ? 'A' : 'B';
  Rationale r;
  r.stage_format = format;
  if (format == StageFormat::TypedThinkAnswer) {
    r.task_tag = action.task_tag;
    r.caption_text =
        action.caption_faithful ? faithful_caption_text(ex) : corrupt_caption_text(ex);
  }
  r.feedback = "Both candidates are assessed against the provided content.";
  r.comparison = std::string("Candidate ") + side + " aligns better with the provided content.";
  r.conclusion = std::string("Candidate ") + side + " is preferred.";
  r.answer = action.answer;
  return r;
}

}  // namespace

std::string render_action_text(const PreferenceExample& ex, const StructuredAction& action,
                               StageFormat format) {
  Rationale r = rationale_for_action(ex, action, format);
  std::string text = render_rationale(r);
  if (!action.well_formed) {
    // deterministic corruption: drop the closing think tag line
    const std::size_t pos = text.find("</think>\n");
    text.erase(pos, 9);
  }
  return text;
}

StructuredAction action_from_rationale(const PreferenceExample& ex, const Rationale& r) {
  StructuredAction action;
  action.answer = r.answer;
  action.task_tag = r.task_tag.value_or(ex.task);
  action.well_formed = true;
  action.caption_faithful = !r.caption_text || *r.caption_text == faithful_caption_text(ex);
  return action;
}

// ---------------------------------------------------------------------------
// Policy evaluation
// ---------------------------------------------------------------------------

namespace {

int head_choice(const StructuredAction& action, HeadId id) {
  switch (id) {
    case HeadId::Answer: return action.answer == Label::A ? 0 : 1;
    case HeadId::Task: return static_cast<int>(action.task_tag);
    case HeadId::Format: return action.well_formed ? 0 : 1;
    case HeadId::Caption: return action.caption_faithful ? 0 : 1;
  }
  return 0;
}

void set_head_choice(StructuredAction& action, HeadId id, int choice) {
  switch (id) {
    case HeadId::Answer: action.answer = choice == 0 ? Label::A : Label::B; break;
    case HeadId::Task: action.task_tag = static_cast<TaskKind>(choice); break;
    case HeadId::Format: action.well_formed = choice == 0; break;
    case HeadId::Caption: action.caption_faithful = choice == 0; break;
  }
}

Eigen::VectorXd head_logits(const PolicyParameters& params, HeadId id, const Eigen::VectorXd& f) {
  return head(params.heads, id).transpose() * f;
}

}  // namespace

SampleResult sample_action(const PolicyParameters& params, const PreferenceExample& ex,
                           StageFormat format, Channel channel, std::uint64_t seed) {
  const Eigen::VectorXd f = featurize(ex, effective_channel(ex, channel), params.layout);
  Rng rng = Rng(seed).fork("action");
  StructuredAction action;
  action.task_tag = ex.task;
  double logprob = 0.0;
  for (HeadId id : active_head_ids(format)) {
    const Eigen::VectorXd lp = log_softmax(head_logits(params, id, f));
    const Eigen::VectorXd p = lp.array().exp();
    const std::vector<double> probs(p.data(), p.data() + p.size());
    const auto choice = static_cast<int>(rng.categorical(probs));
    set_head_choice(action, id, choice);
    logprob += lp[choice];
  }
  SampleResult out;
  out.action = action;
  out.text = render_action_text(ex, action, format);
  out.logprob = logprob;
  return out;
}

double action_logprob(const PolicyParameters& params, const PreferenceExample& ex,
                      const StructuredAction& action, StageFormat format, Channel channel) {
  const Eigen::VectorXd f = featurize(ex, effective_channel(ex, channel), params.layout);
  double logprob = 0.0;
  for (HeadId id : active_head_ids(format)) {
    const Eigen::VectorXd lp = log_softmax(head_logits(params, id, f));
    logprob += lp[head_choice(action, id)];
  }
  return logprob;
}

HeadSet grad_logprob(const PolicyParameters& params, const PreferenceExample& ex,
                     const StructuredAction& action, StageFormat format, Channel channel) {
  const Eigen::VectorXd f = featurize(ex, effective_channel(ex, channel), params.layout);
  HeadSet grads = zero_heads(params.layout);
  for (HeadId id : active_head_ids(format)) {
    const Eigen::VectorXd p = softmax(head_logits(params, id, f));
    Eigen::VectorXd onehot = Eigen::VectorXd::Zero(p.size());
    onehot[head_choice(action, id)] = 1.0;
    Eigen::MatrixXd g = f * (onehot - p).transpose();
    g = mask(params.freeze, id).select(0.0, g);
    head(grads, id) = std::move(g);
  }
  return grads;
}

double kl_divergence(const PolicyParameters& params, const PolicySnapshot& snapshot,
                     const PreferenceExample& ex, StageFormat format, Channel channel) {
  const Eigen::VectorXd f = featurize(ex, effective_channel(ex, channel), params.layout);
  double kl = 0.0;
  for (HeadId id : active_head_ids(format)) {
    kl += categorical_kl_from_logits(head_logits(params, id, f), head_logits(snapshot, id, f));
  }
  return kl;
}

HeadSet grad_kl(const PolicyParameters& params, const PolicySnapshot& snapshot,
                const PreferenceExample& ex, StageFormat format, Channel channel) {
  const Eigen::VectorXd f = featurize(ex, effective_channel(ex, channel), params.layout);
  HeadSet grads = zero_heads(params.layout);
  for (HeadId id : active_head_ids(format)) {
    const Eigen::VectorXd lp = log_softmax(head_logits(params, id, f));
    const Eigen::VectorXd lq = log_softmax(head_logits(snapshot, id, f));
    const Eigen::VectorXd p = lp.array().exp();
    const Eigen::VectorXd diff = lp - lq;
    const double kl = (p.array() * diff.array()).sum();
    // d KL / d logit_k = p_k * ((lp_k - lq_k) - KL)
    const Eigen::VectorXd dlogits = p.array() * (diff.array() - kl);
    Eigen::MatrixXd g = f * dlogits.transpose();
    g = mask(params.freeze, id).select(0.0, g);
    head(grads, id) = std::move(g);
  }
  return grads;
}

}  // namespace msrl
