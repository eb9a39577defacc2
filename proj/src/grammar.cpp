#include "msrl/grammar.hpp"

#include <algorithm>
#include <array>
#include <cctype>

namespace msrl {

// ---------------------------------------------------------------------------
// Names
// ---------------------------------------------------------------------------

std::string stage_format_name(StageFormat f) {
  return f == StageFormat::ThinkAnswer ? "think_answer" : "typed_think_answer";
}

std::optional<StageFormat> stage_format_from_name(const std::string& s) {
  if (s == "think_answer") return StageFormat::ThinkAnswer;
  if (s == "typed_think_answer") return StageFormat::TypedThinkAnswer;
  return std::nullopt;
}

std::string violation_name(FormatViolation v) {
  switch (v) {
    case FormatViolation::MissingTag: return "MissingTag";
    case FormatViolation::TagOrder: return "TagOrder";
    case FormatViolation::MissingSection: return "MissingSection";
    case FormatViolation::BadAnswerToken: return "BadAnswerToken";
    case FormatViolation::TrailingContent: return "TrailingContent";
  }
  return "MissingTag";
}

// Structural equality; raw_text is derived and not compared.
bool operator==(const Rationale& a, const Rationale& b) {
  return a.stage_format == b.stage_format && a.task_tag == b.task_tag &&
         a.caption_text == b.caption_text && a.feedback == b.feedback &&
         a.comparison == b.comparison && a.conclusion == b.conclusion && a.answer == b.answer;
}

std::string comparison_heading_for(std::optional<TaskKind> task) {
  // The understanding templates spell the heading "Comparision"; the
  // generation templates spell it "Comparison". Both parse.
  if (task && is_generation(*task)) return "Comparison";
  return "Comparision";
}

// ---------------------------------------------------------------------------
// Line scanner
// ---------------------------------------------------------------------------

namespace {

std::string_view ltrim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r' ||
                        s.front() == '\n')) {
    s.remove_prefix(1);
  }
  return s;
}

std::string_view rtrim(std::string_view s) {
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' ||
                        s.back() == '\n')) {
    s.remove_suffix(1);
  }
  return s;
}

std::string_view trim_view(std::string_view s) { return rtrim(ltrim(s)); }

enum class LineKind { Blank, ThinkOpen, ThinkClose, AnswerOpen, AnswerClose, TypeElement, Heading, Text };

// Sections in required order; Comparision/Comparison share index 2.
enum Section { kCaption = 0, kFeedback = 1, kComparison = 2, kConclusion = 3 };

constexpr std::array<const char*, 5> kHeadingTokens = {"Caption:", "Feedback:", "Comparision:",
                                                       "Comparison:", "Conclusion:"};

constexpr int heading_section(std::size_t token_index) {
  return token_index <= 1 ? static_cast<int>(token_index)
                          : (token_index <= 3 ? kComparison : kConclusion);
}

struct LineInfo {
  LineKind kind = LineKind::Text;
  int section = -1;               // valid when kind == Heading
  std::string_view inline_body;   // heading line content after the token
  std::string_view type_content;  // inside <type>...</type>
  std::string_view raw;
};

LineInfo classify(std::string_view line) {
  LineInfo info;
  info.raw = line;
  const std::string_view t = trim_view(line);
  if (t.empty()) {
    info.kind = LineKind::Blank;
    return info;
  }
  if (t == "<think>") { info.kind = LineKind::ThinkOpen; return info; }
  if (t == "</think>") { info.kind = LineKind::ThinkClose; return info; }
  if (t == "<answer>") { info.kind = LineKind::AnswerOpen; return info; }
  if (t == "</answer>") { info.kind = LineKind::AnswerClose; return info; }
  if (t.starts_with("<type>") && t.ends_with("</type>") && t.size() >= 13) {
    info.kind = LineKind::TypeElement;
    info.type_content = t.substr(6, t.size() - 13);
    return info;
  }
  const std::string_view lt = ltrim(line);
  for (std::size_t i = 0; i < kHeadingTokens.size(); ++i) {
    if (lt.starts_with(kHeadingTokens[i])) {
      info.kind = LineKind::Heading;
      info.section = heading_section(i);
      info.inline_body = trim_view(lt.substr(std::string_view(kHeadingTokens[i]).size()));
      return info;
    }
  }
  info.kind = LineKind::Text;
  return info;
}

bool is_structural(const LineInfo& info) {
  return info.kind != LineKind::Blank && info.kind != LineKind::Text;
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

const char* section_name(int section) {
  switch (section) {
    case kCaption: return "Caption";
    case kFeedback: return "Feedback";
    case kComparison: return "Comparison";
    default: return "Conclusion";
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

namespace {

class RationaleParser {
 public:
  RationaleParser(std::string_view text, StageFormat expected) : expected_(expected) {
    for (std::string_view line : split_lines(text)) lines_.push_back(classify(line));
    raw_ = text;
  }

  ParseResult run() {
    Rationale r;
    r.stage_format = expected_;
    r.raw_text = std::string(raw_);

    if (auto err = expect_tag(LineKind::ThinkOpen, "<think>")) return *err;

    if (expected_ == StageFormat::TypedThinkAnswer) {
      skip_blanks();
      if (pos_ >= lines_.size() || lines_[pos_].kind != LineKind::TypeElement) {
        return tag_mismatch(LineKind::TypeElement, "<type>");
      }
      const auto task = task_from_prose(std::string(trim_view(lines_[pos_].type_content)));
      if (!task) {
        return FormatError{FormatViolation::MissingTag,
                           "<type> content does not name a task"};
      }
      r.task_tag = *task;
      ++pos_;

      std::string caption;
      if (auto err = expect_section(kCaption, &caption)) return *err;
      if (trim_view(caption).empty()) {
        return FormatError{FormatViolation::MissingSection, "Caption section is empty"};
      }
      r.caption_text = std::move(caption);
    }

    if (auto err = expect_section(kFeedback, &r.feedback)) return *err;
    if (auto err = expect_section(kComparison, &r.comparison)) return *err;
    if (auto err = expect_section(kConclusion, &r.conclusion)) return *err;

    if (auto err = expect_tag(LineKind::ThinkClose, "</think>")) return *err;
    if (auto err = expect_tag(LineKind::AnswerOpen, "<answer>")) return *err;

    std::string token;
    while (pos_ < lines_.size() && lines_[pos_].kind != LineKind::AnswerClose) {
      if (!token.empty()) token += "\n";
      token += std::string(lines_[pos_].raw);
      ++pos_;
    }
    if (pos_ >= lines_.size()) {
      return FormatError{FormatViolation::MissingTag, "</answer> not found"};
    }
    ++pos_;  // consume </answer>
    const std::string_view t = trim_view(token);
    if (t == "A") {
      r.answer = Label::A;
    } else if (t == "B") {
      r.answer = Label::B;
    } else {
      return FormatError{FormatViolation::BadAnswerToken,
                         "answer token must be exactly A or B"};
    }

    for (; pos_ < lines_.size(); ++pos_) {
      if (lines_[pos_].kind != LineKind::Blank) {
        return FormatError{FormatViolation::TrailingContent,
                           "content after </answer>"};
      }
    }
    return r;
  }

 private:
  void skip_blanks() {
    while (pos_ < lines_.size() && lines_[pos_].kind == LineKind::Blank) ++pos_;
  }

  bool appears_later(LineKind kind) const {
    for (std::size_t i = pos_; i < lines_.size(); ++i) {
      if (lines_[i].kind == kind) return true;
    }
    return false;
  }

  // Expected tag absent at this position: TagOrder when it shows up later in
  // the text, MissingTag when it never does.
  FormatError tag_mismatch(LineKind kind, const char* name) const {
    if (appears_later(kind)) {
      return FormatError{FormatViolation::TagOrder, std::string(name) + " out of order"};
    }
    return FormatError{FormatViolation::MissingTag, std::string(name) + " not found"};
  }

  std::optional<FormatError> expect_tag(LineKind kind, const char* name) {
    skip_blanks();
    if (pos_ >= lines_.size() || lines_[pos_].kind != kind) return tag_mismatch(kind, name);
    ++pos_;
    return std::nullopt;
  }

  std::optional<FormatError> expect_section(int section, std::string* body) {
    skip_blanks();
    if (pos_ >= lines_.size() || lines_[pos_].kind != LineKind::Heading ||
        lines_[pos_].section != section) {
      return FormatError{FormatViolation::MissingSection,
                         std::string(section_name(section)) + " section not at its position"};
    }
    std::vector<std::string> collected;
    if (!lines_[pos_].inline_body.empty()) collected.emplace_back(lines_[pos_].inline_body);
    ++pos_;
    while (pos_ < lines_.size() && !is_structural(lines_[pos_])) {
      collected.emplace_back(lines_[pos_].raw);
      ++pos_;
    }
    // strip leading/trailing blank lines; interior blanks are body content
    std::size_t lo = 0, hi = collected.size();
    const auto blank = [](const std::string& s) { return trim_view(s).empty(); };
    while (lo < hi && blank(collected[lo])) ++lo;
    while (hi > lo && blank(collected[hi - 1])) --hi;
    std::string out;
    for (std::size_t i = lo; i < hi; ++i) {
      if (!out.empty()) out += "\n";
      out += collected[i];
    }
    *body = std::move(out);
    return std::nullopt;
  }

  StageFormat expected_;
  std::vector<LineInfo> lines_;
  std::string_view raw_;
  std::size_t pos_ = 0;
};

}  // namespace

ParseResult parse_rationale(std::string_view text, StageFormat expected) {
  return RationaleParser(text, expected).run();
}

// ---------------------------------------------------------------------------
// Renderer
// ---------------------------------------------------------------------------

namespace {

void check_body_safe(const std::string& body, const char* field) {
  const auto lines = split_lines(body);
  if (!lines.empty()) {
    if (trim_view(lines.front()).empty() && !body.empty()) {
      throw ValidationError(std::string(field) + ": body must not start with a blank line");
    }
    if (trim_view(lines.back()).empty() && !body.empty()) {
      throw ValidationError(std::string(field) + ": body must not end with a blank line");
    }
  }
  for (std::string_view line : lines) {
    if (is_structural(classify(line))) {
      throw ValidationError(std::string(field) +
                            ": body line collides with a structural token: " + std::string(line));
    }
  }
}

}  // namespace

std::string render_rationale(const Rationale& r) {
  const bool typed = r.stage_format == StageFormat::TypedThinkAnswer;
  if (typed) {
    if (!r.task_tag) throw ValidationError("rationale.task_tag: required for typed format");
    if (!r.caption_text || trim_view(*r.caption_text).empty()) {
      throw ValidationError("rationale.caption_text: required non-empty for typed format");
    }
    check_body_safe(*r.caption_text, "rationale.caption_text");
  } else {
    if (r.task_tag) throw ValidationError("rationale.task_tag: not allowed in think_answer format");
    if (r.caption_text) {
      throw ValidationError("rationale.caption_text: not allowed in think_answer format");
    }
  }
  check_body_safe(r.feedback, "rationale.feedback");
  check_body_safe(r.comparison, "rationale.comparison");
  check_body_safe(r.conclusion, "rationale.conclusion");

  std::string out = "<think>\n";
  const auto section = [&out](const std::string& heading, const std::string& body, bool last) {
    out += heading;
    out += ":\n";
    if (!body.empty()) {
      out += body;
      out += "\n";
    }
    if (!last) out += "\n";
  };
  if (typed) {
    out += "<type>" + task_prose_name(*r.task_tag) + "</type>\n";
    section("Caption", *r.caption_text, false);
  }
  section("Feedback", r.feedback, false);
  section(comparison_heading_for(r.task_tag), r.comparison, false);
  section("Conclusion", r.conclusion, true);
  out += "</think>\n<answer>\n";
  out += r.answer == Label::A ? "A" : "B";
  out += "\n</answer>";
  return out;
}

// ---------------------------------------------------------------------------
// Lenient scans
// ---------------------------------------------------------------------------

std::optional<std::string> extract_type_tag(std::string_view text) {
  const std::size_t open = text.find("<type>");
  if (open == std::string_view::npos) return std::nullopt;
  const std::size_t close = text.find("</type>", open + 6);
  if (close == std::string_view::npos) return std::nullopt;
  return std::string(trim_view(text.substr(open + 6, close - open - 6)));
}

std::optional<Label> extract_answer_lenient(std::string_view text) {
  const std::size_t open = text.find("<answer>");
  if (open == std::string_view::npos) return std::nullopt;
  const std::size_t close = text.find("</answer>", open + 8);
  if (close == std::string_view::npos) return std::nullopt;
  const std::string_view token = trim_view(text.substr(open + 8, close - open - 8));
  if (token == "A") return Label::A;
  if (token == "B") return Label::B;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kImageUnderstandingTemplate =
    R"(You are a helpful multimodal assistant tasked with evaluating the quality of responses generated for a given set of instructions and images. Your goal is to determine which response better addresses the user's question. Choose either Response A or Response B as the better option.

Do NOT say both / neither are good.

Here are some rules of the evaluation:
(1) If the instruction and image do not contain harmful content, you should prioritize evaluating whether the output honestly/precisely/closely executes the instruction and image, then consider its helpfulness, accuracy, level of detail, harmlessness, etc.
(2) If the instruction and image contain harmful content, prioritize the harmlessness and safety of the response.
(3) Responses should NOT contain more/less than what the instruction asks for, as such responses do NOT precisely execute the instruction and image.
(4) You should avoid any potential bias, and your judgment should be as objective as possible. Here are some potential sources of bias:
- The order in which the responses were presented should NOT affect your judgment, as Response A and Response B are **equally likely** to be the better.
- The length of the responses should NOT affect your judgement, as a longer response does not necessarily correspond to a better response. When making your decision, evaluate if the response length is appropriate for the given instruction.

Your reply should strictly follow this format:
<think>
Follow this format:
<type>choose a task type: image understanding, image generation, video understanding, or video generation.<type>
Caption:
<provide a detailed description for the given image>

Feedback:
<provide free-text feedback on the overall helpfulness of the assistant response>

Comparision:
<give a brief analysis on which is better>

Conclusion:
<make your conclusion>
</think>
<answer>
A or B
</answer>

Here is the data.

[Client Question]
{user_question}

[Image]
{media_0}

[The Start of Chatbot A's Response]
{response_a}
[The End of Chatbot A's Response]

[The Start of Chatbot B's Response]
{response_b}
[The End of Chatbot B's Response])";

constexpr const char* kImageGenerationTemplate =
    R"(You are a helpful multimodal assistant tasked with evaluating the quality of images generated for a given input caption (a textual description of the image). Your goal is to determine which image better matches the caption. Choose either Image A or Image B as the better option.

Do NOT say both / neither are good.

Here are some rules for the evaluation:
(1) If the caption does not contain harmful content, prioritize evaluating whether the image faithfully and precisely reflects the caption, then consider its helpfulness, accuracy, level of detail, harmlessness, realism, and overall visual quality.
(2) If the caption contains harmful content, prioritize the harmlessness and safety of the image.
(3) The image should NOT include elements that are irrelevant to or missing from the caption, as such outputs do NOT precisely execute the instruction.
(4) You should avoid any potential bias, and your judgment should be as objective as possible. Here are some potential sources of bias:
- The order in which the images are presented should NOT affect your judgment, as Image A and Image B are equally likely to be better.
- The rendering style (e.g., realistic, cartoonish) should NOT affect your judgment unless explicitly specified in the caption.
- Do not assume that a more visually complex image is necessarily better; evaluate whether the complexity is appropriate for the given caption.

Your reply should strictly follow this format:
<think>
<type>choose a task type: image understanding, image generation, video understanding, or video generation.<type>
Caption:
<provide a detailed description for this two images>

Feedback:
<provide free-text feedback on the overall helpfulness and quality of the image>

Comparison:
<give a brief analysis on which image is better>

Conclusion:
<make your conclusion>
</think>
<answer>
A or B
</answer>

Here is the data.

[Client Prompt]
{user_input}

[The Start of Chatbot A's Generated Image]
{media_0}

[The End of Chatbot A's Generated Image]

[The Start of Chatbot B's Generated Image]
{media_1}

[The End of Chatbot B's Generated Image])";

constexpr const char* kVideoUnderstandingTemplate =
    R"(You are a helpful multimodal assistant tasked with evaluating the quality of responses generated for a given user question and video. Your goal is to determine which response better addresses the user's question. Choose either Response A or Response B as the better option.

Do NOT say both / neither are good.

Here are some rules of the evaluation:
(1) If the question and video do not contain harmful content, you should prioritize evaluating whether the response honestly, precisely, and closely executes the instruction and video, then consider its helpfulness, accuracy, level of detail, harmlessness, etc.
(2) If the question and video contain harmful content, prioritize the harmlessness and safety of the response.
(3) Responses should NOT contain more/less than what the instruction and video ask for, as such responses do NOT precisely execute the given input.
(4) You should avoid any potential bias, and your judgment should be as objective as possible. Here are some potential sources of bias:
- The order in which the responses are presented should NOT affect your judgment, as Response A and Response B are **equally likely** to be the better.
- The length of the responses should NOT affect your judgment, as a longer response does not necessarily correspond to a better response. When making your decision, evaluate whether the response length is appropriate for the given input.

Your reply should strictly follow this format:
<think>
<type>choose a task type: image understanding, image generation, video understanding, or video generation.<type>
Caption:
<provide a detailed description for the given video>

Feedback:
<provide free-text feedback on the overall helpfulness of the assistant response>

Comparision:
<give a brief analysis on which is better>

Conclusion:
<make your conclusion>
</think>
<answer>
A or B
</answer>

Here is the data.

[Client Question]
{user_question}

[Video]
{media_0}

[The Start of Chatbot A's Response]
{response_a}
[The End of Chatbot A's Response]

[The Start of Chatbot B's Response]
{response_b}
[The End of Chatbot B's Response])";

constexpr const char* kVideoGenerationTemplate =
    R"(You are a helpful multimodal assistant tasked with evaluating the quality of videos generated for a given input caption (a textual description of the video). Your goal is to determine which video better matches the caption. Choose either Video A or Video B as the better option.

Do NOT say both / neither are good.

Here are some rules for the evaluation:
(1) If the caption does not contain harmful content, prioritize evaluating whether the video faithfully and precisely reflects the caption, then consider its helpfulness, accuracy, level of detail, harmlessness, realism, motion consistency, and overall visual quality.
(2) If the caption contains harmful content, prioritize the harmlessness and safety of the video.
(3) The video should NOT include elements that are irrelevant to or missing from the caption, as such outputs do NOT precisely execute the instruction.
(4) You should avoid any potential bias, and your judgment should be as objective as possible. Here are some potential sources of bias:
- The order in which the videos are presented should NOT affect your judgment, as Video A and Video B are equally likely to be better.
- The rendering style (e.g., realistic, cartoonish, cinematic) should NOT affect your judgment unless explicitly specified in the caption.
- Do not assume that a more visually complex video is necessarily better; evaluate whether the complexity and motion quality are appropriate for the given caption.

Your reply should strictly follow this format:
<think>
<type>choose a task type: image understanding, image generation, video understanding, or video generation.<type>
Caption:
<provide a detailed description for this two videos>

Feedback:
<provide free-text feedback on the overall helpfulness and quality of the video>

Comparison:
<give a brief analysis on which video is better>

Conclusion:
<make your conclusion>
</think>
<answer>
A or B
</answer>

Here is the data.

[Client Prompt]
{user_input}

[The Start of Chatbot A's Generated Video]
{media_0}

[The End of Chatbot A's Generated Video]

[The Start of Chatbot B's Generated Video]
{media_1}

[The End of Chatbot B's Generated Video])";

std::string media_slot(const PreferenceExample& ex, std::size_t index) {
  const MediaDescriptor& m = ex.media.at(index);
  switch (m.kind) {
    case MediaKind::Image: return "<image>";
    case MediaKind::Video: return "<video>";
    case MediaKind::None: return *m.caption;
  }
  return "<image>";
}

// Single pass over the template; slot markers in substituted content are
// not re-expanded.
std::string fill_slots(std::string_view tpl,
                       const std::vector<std::pair<std::string_view, std::string>>& slots) {
  std::string out;
  out.reserve(tpl.size() + 256);
  std::size_t i = 0;
  while (i < tpl.size()) {
    if (tpl[i] == '{') {
      bool matched = false;
      for (const auto& [key, value] : slots) {
        if (tpl.substr(i).starts_with(key)) {
          out += value;
          i += key.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    out.push_back(tpl[i]);
    ++i;
  }
  return out;
}

}  // namespace

PromptBundle render_prompt(const PreferenceExample& ex) {
  validate_example(ex);
  std::string tpl;
  std::vector<std::pair<std::string_view, std::string>> slots;
  switch (ex.task) {
    case TaskKind::ImageUnderstanding:
    case TaskKind::VideoUnderstanding: {
      tpl = ex.task == TaskKind::ImageUnderstanding ? kImageUnderstandingTemplate
                                                    : kVideoUnderstandingTemplate;
      if (ex.media.empty()) {
        // text-only preference example: no media block
        const std::string block = ex.task == TaskKind::ImageUnderstanding
                                      ? "[Image]\n{media_0}\n\n"
                                      : "[Video]\n{media_0}\n\n";
        const std::size_t pos = tpl.find(block);
        tpl.erase(pos, block.size());
      } else {
        slots.emplace_back("{media_0}", media_slot(ex, 0));
      }
      slots.emplace_back("{user_question}", ex.prompt);
      slots.emplace_back("{response_a}", *ex.response_a);
      slots.emplace_back("{response_b}", *ex.response_b);
      break;
    }
    case TaskKind::ImageGeneration:
    case TaskKind::VideoGeneration: {
      tpl = ex.task == TaskKind::ImageGeneration ? kImageGenerationTemplate
                                                 : kVideoGenerationTemplate;
      slots.emplace_back("{user_input}", ex.prompt);
      slots.emplace_back("{media_0}", media_slot(ex, 0));
      slots.emplace_back("{media_1}", media_slot(ex, 1));
      break;
    }
  }
  PromptBundle bundle;
  bundle.template_text = fill_slots(tpl, slots);
  bundle.example_ref = ex.id;
  return bundle;
}

}  // namespace msrl
