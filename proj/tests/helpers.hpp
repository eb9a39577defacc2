// Shared test-side oracles and generators. The reference validator below is
// an independent reimplementation of the rationale grammar used to cross
// check the production parser; keep it structurally different (global
// sequence extraction rather than an incremental state machine).
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "msrl/corpus.hpp"
#include "msrl/grammar.hpp"
#include "msrl/rng.hpp"

namespace msrl::testing {

// ---------------------------------------------------------------------------
// Reference grammar validator
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim_copy(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> to_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string current;
  for (char c : text) {
    if (c == '\n') {
      lines.push_back(current);
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  lines.push_back(current);
  return lines;
}

enum class RefKind { Think, EndThink, Answer, EndAnswer, Type, Caption, Feedback, Comparison, Conclusion };

struct RefItem {
  RefKind kind;
  std::size_t line;
  bool inline_body = false;  // heading line carried content after the token
  bool type_names_task = false;
};

inline std::optional<RefItem> ref_classify(const std::string& line, std::size_t index) {
  const std::string t = trim_copy(line);
  if (t == "<think>") return RefItem{RefKind::Think, index};
  if (t == "</think>") return RefItem{RefKind::EndThink, index};
  if (t == "<answer>") return RefItem{RefKind::Answer, index};
  if (t == "</answer>") return RefItem{RefKind::EndAnswer, index};
  if (t.size() >= 13 && t.rfind("<type>", 0) == 0 && t.size() >= 7 &&
      t.compare(t.size() - 7, 7, "</type>") == 0) {
    RefItem item{RefKind::Type, index};
    const std::string content = trim_copy(t.substr(6, t.size() - 13));
    item.type_names_task = task_from_prose(content).has_value();
    return item;
  }
  std::string lt = line;
  lt.erase(0, lt.find_first_not_of(" \t\r") == std::string::npos ? lt.size()
                                                                 : lt.find_first_not_of(" \t\r"));
  const auto heading = [&](const char* token, RefKind kind) -> std::optional<RefItem> {
    const std::string tok(token);
    if (lt.rfind(tok, 0) != 0) return std::nullopt;
    RefItem item{kind, index};
    item.inline_body = !trim_copy(lt.substr(tok.size())).empty();
    return item;
  };
  if (auto h = heading("Caption:", RefKind::Caption)) return h;
  if (auto h = heading("Feedback:", RefKind::Feedback)) return h;
  if (auto h = heading("Comparision:", RefKind::Comparison)) return h;
  if (auto h = heading("Comparison:", RefKind::Comparison)) return h;
  if (auto h = heading("Conclusion:", RefKind::Conclusion)) return h;
  return std::nullopt;
}

}  // namespace detail

// Accept/reject decision for the structured rationale grammar.
inline bool reference_accepts(const std::string& text, StageFormat format) {
  using namespace detail;
  const std::vector<std::string> lines = to_lines(text);
  std::vector<RefItem> items;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (auto item = ref_classify(lines[i], i)) items.push_back(*item);
  }

  std::vector<RefKind> expected;
  expected.push_back(RefKind::Think);
  if (format == StageFormat::TypedThinkAnswer) {
    expected.push_back(RefKind::Type);
    expected.push_back(RefKind::Caption);
  }
  expected.push_back(RefKind::Feedback);
  expected.push_back(RefKind::Comparison);
  expected.push_back(RefKind::Conclusion);
  expected.push_back(RefKind::EndThink);
  expected.push_back(RefKind::Answer);
  expected.push_back(RefKind::EndAnswer);

  if (items.size() != expected.size()) return false;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].kind != expected[i]) return false;
  }

  const auto blank_between = [&](std::size_t after, std::size_t before) {
    for (std::size_t i = after + 1; i < before; ++i) {
      if (!trim_copy(lines[i]).empty()) return false;
    }
    return true;
  };
  const auto nonblank_between = [&](std::size_t after, std::size_t before) {
    for (std::size_t i = after + 1; i < before; ++i) {
      if (!trim_copy(lines[i]).empty()) return true;
    }
    return false;
  };

  std::size_t at = 0;
  const RefItem& think = items.at(at++);
  // only blanks before <think>
  for (std::size_t i = 0; i < think.line; ++i) {
    if (!trim_copy(lines[i]).empty()) return false;
  }
  if (format == StageFormat::TypedThinkAnswer) {
    const RefItem& type = items.at(at++);
    if (!type.type_names_task) return false;
    if (!blank_between(think.line, type.line)) return false;
    const RefItem& caption = items.at(at);
    if (!blank_between(type.line, caption.line)) return false;
    // caption body must not be empty
    const RefItem& next = items.at(at + 1);
    if (!caption.inline_body && !nonblank_between(caption.line, next.line)) return false;
    at++;  // caption consumed; feedback is next
  } else {
    const RefItem& feedback = items.at(at);
    if (!blank_between(think.line, feedback.line)) return false;
  }
  // section bodies are free text; nothing to check until </think>

  const RefItem& end_think = items.at(items.size() - 3);
  const RefItem& answer = items.at(items.size() - 2);
  const RefItem& end_answer = items.at(items.size() - 1);
  if (!blank_between(end_think.line, answer.line)) return false;

  std::string token;
  for (std::size_t i = answer.line + 1; i < end_answer.line; ++i) {
    if (!token.empty()) token += "\n";
    token += lines[i];
  }
  const std::string trimmed = trim_copy(token);
  if (trimmed != "A" && trimmed != "B") return false;

  for (std::size_t i = end_answer.line + 1; i < lines.size(); ++i) {
    if (!trim_copy(lines[i]).empty()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

inline std::string random_body(Rng& rng, int max_lines = 3) {
  static const char* kWords[] = {"the", "candidate", "response", "closely", "matches",
                                 "the", "request", "with", "minor", "omissions"};
  const int n_lines = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_lines + 1)));
  std::string body;
  for (int l = 0; l < n_lines; ++l) {
    if (l > 0) body += rng.bernoulli(0.2) ? "\n\n" : "\n";
    const int n_words = 2 + static_cast<int>(rng.below(6));
    for (int w = 0; w < n_words; ++w) {
      if (w > 0) body += " ";
      body += kWords[rng.below(10)];
    }
    body += ".";
  }
  return body;
}

inline Rationale random_rationale(Rng& rng, StageFormat format) {
  Rationale r;
  r.stage_format = format;
  if (format == StageFormat::TypedThinkAnswer) {
    r.task_tag = static_cast<TaskKind>(rng.below(4));
    r.caption_text = "a scene with " + std::to_string(rng.below(10)) + " salient elements";
  }
  r.feedback = random_body(rng);
  r.comparison = random_body(rng);
  r.conclusion = random_body(rng);
  r.answer = rng.bernoulli(0.5) ? Label::A : Label::B;
  return r;
}

// One randomized corruption of a valid rendering. Some mutations are
// harmless (extra blank lines, heading spelling swap); the reference
// validator arbitrates.
inline std::string mutate_rendering(const std::string& valid, Rng& rng) {
  std::string text = valid;
  const auto lines = detail::to_lines(text);
  const auto rejoin = [](const std::vector<std::string>& ls) {
    std::string out;
    for (std::size_t i = 0; i < ls.size(); ++i) {
      if (i > 0) out += "\n";
      out += ls[i];
    }
    return out;
  };
  switch (rng.below(12)) {
    case 0: {  // delete a line
      auto ls = lines;
      ls.erase(ls.begin() + static_cast<std::ptrdiff_t>(rng.below(ls.size())));
      return rejoin(ls);
    }
    case 1: {  // duplicate a line
      auto ls = lines;
      const std::size_t i = rng.below(ls.size());
      ls.insert(ls.begin() + static_cast<std::ptrdiff_t>(i), ls[i]);
      return rejoin(ls);
    }
    case 2: {  // swap two lines
      auto ls = lines;
      const std::size_t i = rng.below(ls.size());
      const std::size_t j = rng.below(ls.size());
      std::swap(ls[i], ls[j]);
      return rejoin(ls);
    }
    case 3: {  // delete a tag occurrence
      static const char* kTags[] = {"<think>", "</think>", "<answer>", "</answer>", "</type>"};
      const std::string tag = kTags[rng.below(5)];
      const auto pos = text.find(tag);
      if (pos != std::string::npos) text.erase(pos, tag.size());
      return text;
    }
    case 4: {  // corrupt the answer token
      static const char* kTokens[] = {"both", "neither", "A and B", "a", "b", "C", ""};
      const std::string token = kTokens[rng.below(7)];
      for (const char* old : {"\nA\n</answer>", "\nB\n</answer>"}) {
        const auto pos = text.find(old);
        if (pos != std::string::npos) {
          text.replace(pos, std::string(old).size(), "\n" + token + "\n</answer>");
          break;
        }
      }
      return text;
    }
    case 5: {  // insert a stray line
      static const char* kStray[] = {"stray content", "Feedback:", "<answer>", "Conclusion: early"};
      auto ls = lines;
      ls.insert(ls.begin() + static_cast<std::ptrdiff_t>(rng.below(ls.size() + 1)),
                kStray[rng.below(4)]);
      return rejoin(ls);
    }
    case 6:  // trailing content
      return text + "\npostscript";
    case 7: {  // heading spelling swap (harmless)
      for (const auto& [from, to] : {std::pair{"Comparision:", "Comparison:"},
                                     std::pair{"Comparison:", "Comparision:"}}) {
        const auto pos = text.find(from);
        if (pos != std::string::npos) {
          text.replace(pos, std::string(from).size(), to);
          break;
        }
      }
      return text;
    }
    case 8: {  // lowercase a heading
      const auto pos = text.find("Feedback:");
      if (pos != std::string::npos) text.replace(pos, 9, "feedback:");
      return text;
    }
    case 9: {  // flip a random byte
      if (!text.empty()) {
        const std::size_t i = rng.below(text.size());
        text[i] = static_cast<char>(rng.below(256));
      }
      return text;
    }
    case 10:  // leading blank lines (harmless)
      return "\n\n" + text;
    default:  // whitespace padding around a line (harmless)
      return " \t" + text;
  }
}

// ---------------------------------------------------------------------------
// Example builders
// ---------------------------------------------------------------------------

inline PreferenceExample make_understanding_example(
    const std::string& id = "ex-000000", TaskKind task = TaskKind::ImageUnderstanding,
    std::vector<std::uint8_t> bits = {1, 0, 1, 1, 0, 0, 1, 0}, Label label = Label::A) {
  PreferenceExample ex;
  ex.id = id;
  ex.task = task;
  ex.prompt = "Question q1: what stands out?";
  MediaDescriptor m;
  m.kind = task == TaskKind::VideoUnderstanding ? MediaKind::Video : MediaKind::Image;
  m.feature_bits = std::move(bits);
  m.caption = caption_for_bits(m.feature_bits, m.kind);
  ex.media.push_back(m);
  ex.gold_caption = *ex.media[0].caption;
  ex.response_a = "Reply A.";
  ex.response_b = "Reply B.";
  ex.label = label;
  return ex;
}

inline PreferenceExample make_generation_example(
    const std::string& id = "ex-000001", TaskKind task = TaskKind::ImageGeneration,
    std::vector<std::uint8_t> bits_a = {1, 0, 1, 1, 0, 0, 1, 0},
    std::vector<std::uint8_t> bits_b = {0, 1, 0, 0, 1, 1, 0, 1}, Label label = Label::B) {
  PreferenceExample ex;
  ex.id = id;
  ex.task = task;
  ex.prompt = "Generate a synthetic scene matching specification s1.";
  for (auto* bits : {&bits_a, &bits_b}) {
    MediaDescriptor m;
    m.kind = task == TaskKind::VideoGeneration ? MediaKind::Video : MediaKind::Image;
    m.feature_bits = *bits;
    m.caption = caption_for_bits(m.feature_bits, m.kind);
    ex.media.push_back(m);
  }
  ex.gold_caption = join_media_captions({*ex.media[0].caption, *ex.media[1].caption});
  ex.label = label;
  return ex;
}

inline PreferenceExample make_textual_example(const std::string& id = "ex-000002",
                                              Label label = Label::A,
                                              const std::string& prompt = "Question t1: better reply?") {
  PreferenceExample ex;
  ex.id = id;
  ex.task = TaskKind::ImageUnderstanding;
  ex.prompt = prompt;
  ex.response_a = "Reply A.";
  ex.response_b = "Reply B.";
  ex.label = label;
  return ex;
}

}  // namespace msrl::testing
