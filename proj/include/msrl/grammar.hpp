#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <variant>

#include "msrl/corpus.hpp"

namespace msrl {

// Stage output formats. ThinkAnswer is the bare chain-of-thought wrapper;
// TypedThinkAnswer prepends a <type> task tag and a Caption section.
enum class StageFormat { ThinkAnswer, TypedThinkAnswer };

std::string stage_format_name(StageFormat f);  // "think_answer" / "typed_think_answer"
std::optional<StageFormat> stage_format_from_name(const std::string& s);

// Parsed structured model output.
struct Rationale {
  StageFormat stage_format = StageFormat::ThinkAnswer;
  std::optional<TaskKind> task_tag;         // present iff TypedThinkAnswer
  std::optional<std::string> caption_text;  // present and non-empty iff TypedThinkAnswer
  std::string feedback;
  std::string comparison;
  std::string conclusion;
  Label answer = Label::A;
  std::string raw_text;  // the text this was parsed from / rendered to
};

bool operator==(const Rationale& a, const Rationale& b);

enum class FormatViolation { MissingTag, TagOrder, MissingSection, BadAnswerToken, TrailingContent };

struct FormatError {
  FormatViolation kind = FormatViolation::MissingTag;
  std::string detail;
};

std::string violation_name(FormatViolation v);

using ParseResult = std::variant<Rationale, FormatError>;

inline bool parse_ok(const ParseResult& r) { return std::holds_alternative<Rationale>(r); }

// Fully instantiated task prompt.
struct PromptBundle {
  std::string template_text;
  std::string example_ref;
};

// Instantiates the task template for the example: evaluation rules, the
// required reply format, then the prompt, media and candidate blocks. Media
// slots render as <image>/<video> placeholders, or as the caption text once
// the media has been substituted (kind none). Text-only examples omit the
// media block.
PromptBundle render_prompt(const PreferenceExample& example);

// Canonical byte-deterministic rendering. Throws ValidationError when the
// rationale violates its invariants (missing task tag or caption under
// TypedThinkAnswer, or body text that would collide with the grammar's
// structural lines and break re-parsing).
std::string render_rationale(const Rationale& r);

// Total over arbitrary bytes; never throws. Accepts iff the text matches the
// expected stage format exactly: balanced, ordered tags, required section
// headings in order, answer token exactly A or B after trimming. The
// "Comparision" spelling from the understanding templates and the
// "Comparison" spelling from the generation templates are both accepted.
ParseResult parse_rationale(std::string_view text, StageFormat expected);

// Lenient scans used by the reward side; these do not validate structure.
// extract_type_tag: content of the first <type>...</type> element, if any.
// extract_answer_lenient: trimmed content of the first <answer>...</answer>
// block when it is exactly A or B.
std::optional<std::string> extract_type_tag(std::string_view text);
std::optional<Label> extract_answer_lenient(std::string_view text);

// Spelling of the comparison heading emitted for a task's own template:
// understanding tasks use the original "Comparision", generation tasks
// "Comparison". ThinkAnswer renderings follow the image-understanding
// template.
std::string comparison_heading_for(std::optional<TaskKind> task);

}  // namespace msrl
