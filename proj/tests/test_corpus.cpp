#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "helpers.hpp"
#include "msrl/corpus.hpp"

using namespace msrl;
using namespace msrl::testing;

namespace {

CorpusSpec small_spec() {
  CorpusSpec spec;
  spec.n_examples = 4;
  spec.feature_dim = 8;
  spec.task_mix = {{TaskKind::ImageUnderstanding, 1.0}};
  spec.noise_rate = 0.0;
  spec.seed = 7;
  return spec;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) {
    path = (std::filesystem::temp_directory_path() / name).string();
  }
  ~TempFile() { std::remove(path.c_str()); }
};

// independent reapplication of the linear-threshold rule
Label oracle_linear_bits(const PreferenceExample& ex, const LabelRule& rule, std::size_t d) {
  double score = 0.0;
  for (std::size_t m = 0; m < ex.media.size(); ++m) {
    for (std::size_t i = 0; i < ex.media[m].feature_bits.size(); ++i) {
      score += rule.weights[m * d + i] * static_cast<double>(ex.media[m].feature_bits[i]);
    }
  }
  return score - 0.5 > 0.0 ? Label::A : Label::B;
}

}  // namespace

TEST_CASE("synthesis is deterministic in the seed") {
  const auto a = synth_corpus(small_spec());
  const auto b = synth_corpus(small_spec());
  REQUIRE(a.size() == 4);
  CHECK(a == b);
  for (const auto& ex : a) CHECK(ex.task == TaskKind::ImageUnderstanding);

  CorpusSpec other = small_spec();
  other.seed = 8;
  CHECK_FALSE(synth_corpus(other) == a);
}

TEST_CASE("noise-free labels reproduce the linear rule over the emitted bits") {
  CorpusSpec spec;
  spec.n_examples = 1000;
  spec.feature_dim = 8;
  spec.task_mix = {{TaskKind::ImageUnderstanding, 0.4},
                   {TaskKind::ImageGeneration, 0.3},
                   {TaskKind::VideoUnderstanding, 0.2},
                   {TaskKind::VideoGeneration, 0.1}};
  spec.noise_rate = 0.0;
  spec.seed = 21;
  const auto corpus = synth_corpus(spec);
  const LabelRule rule = derive_label_rule(spec);
  for (const auto& ex : corpus) {
    CHECK(ex.label == oracle_linear_bits(ex, rule, spec.feature_dim));
  }
}

TEST_CASE("noise_rate 1 flips every label") {
  CorpusSpec spec = small_spec();
  spec.n_examples = 200;
  spec.noise_rate = 1.0;
  const auto noisy = synth_corpus(spec);
  spec.noise_rate = 0.0;
  const auto clean = synth_corpus(spec);
  REQUIRE(noisy.size() == clean.size());
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    CHECK(noisy[i].label != clean[i].label);
  }
}

TEST_CASE("task proportions are apportioned within one example of exact") {
  CorpusSpec spec;
  spec.n_examples = 997;
  spec.feature_dim = 8;
  spec.task_mix = {{TaskKind::ImageUnderstanding, 0.35},
                   {TaskKind::ImageGeneration, 0.25},
                   {TaskKind::VideoUnderstanding, 0.25},
                   {TaskKind::VideoGeneration, 0.15}};
  spec.seed = 3;
  const auto corpus = synth_corpus(spec);
  std::map<TaskKind, double> counts;
  for (const auto& ex : corpus) counts[ex.task] += 1.0;
  for (const auto& [task, p] : spec.task_mix) {
    CHECK(std::abs(counts[task] - p * 997.0) <= 1.0);
  }
}

TEST_CASE("spec validation names the offending field") {
  CorpusSpec spec = small_spec();
  spec.task_mix[TaskKind::ImageUnderstanding] = 0.9;
  CHECK_THROWS_WITH_AS(synth_corpus(spec), doctest::Contains("task_mix"), ValidationError);
  spec = small_spec();
  spec.noise_rate = 1.5;
  CHECK_THROWS_WITH_AS(synth_corpus(spec), doctest::Contains("noise_rate"), ValidationError);
  spec = small_spec();
  spec.textual = true;  // textual corpora need the prompt rule
  CHECK_THROWS_WITH_AS(synth_corpus(spec), doctest::Contains("label_rule"), ValidationError);
}

TEST_CASE("textual corpora carry no media and follow the prompt rule") {
  CorpusSpec spec;
  spec.n_examples = 300;
  spec.feature_dim = 8;
  spec.task_mix = {{TaskKind::ImageUnderstanding, 1.0}};
  spec.label_rule = LabelRuleKind::LinearPrompt;
  spec.textual = true;
  spec.seed = 5;
  const auto corpus = synth_corpus(spec);
  const LabelRule rule = derive_label_rule(spec);
  for (const auto& ex : corpus) {
    CHECK(ex.media.empty());
    CHECK_FALSE(ex.gold_caption);
    const std::size_t bucket = prompt_bucket(ex.prompt, spec.prompt_buckets);
    const double score =
        rule.weights[static_cast<std::size_t>(ex.task)] + rule.weights[kNumTasks + bucket];
    CHECK(ex.label == (score - 0.5 > 0.0 ? Label::A : Label::B));
  }
}

TEST_CASE("jsonl round trip preserves every field and byte") {
  CorpusSpec spec;
  spec.n_examples = 50;
  spec.feature_dim = 8;
  spec.task_mix = {{TaskKind::ImageUnderstanding, 0.5}, {TaskKind::VideoGeneration, 0.5}};
  spec.seed = 11;
  const auto corpus = synth_corpus(spec);

  TempFile f1("msrl_corpus_rt1.jsonl");
  TempFile f2("msrl_corpus_rt2.jsonl");
  save_corpus(f1.path, corpus);
  const auto loaded = load_corpus(f1.path);
  CHECK(loaded == corpus);

  save_corpus(f2.path, loaded);
  std::ifstream a(f1.path, std::ios::binary), b(f2.path, std::ios::binary);
  const std::string bytes_a((std::istreambuf_iterator<char>(a)), {});
  const std::string bytes_b((std::istreambuf_iterator<char>(b)), {});
  CHECK(bytes_a == bytes_b);
}

TEST_CASE("malformed lines and invariant violations cite the line") {
  TempFile f("msrl_corpus_bad.jsonl");
  {
    std::ofstream out(f.path);
    out << to_jsonl_line(make_understanding_example("ex-ok")) << "\n";
    out << "{not json}\n";
  }
  CHECK_THROWS_WITH_AS(load_corpus(f.path), doctest::Contains(":2"), IoError);

  {
    std::ofstream out(f.path);
    std::string line = to_jsonl_line(make_understanding_example("ex-bad"));
    const auto pos = line.find("\"label\":\"A\"");
    REQUIRE(pos != std::string::npos);
    line.replace(pos, 11, "\"label\":\"C\"");
    out << line << "\n";
  }
  CHECK_THROWS_WITH_AS(load_corpus(f.path), doctest::Contains(":1"), ValidationError);
  CHECK_THROWS_WITH_AS(load_corpus(f.path), doctest::Contains("label"), ValidationError);
}

TEST_CASE("caption substitution rewrites media kind and keeps everything else") {
  CorpusSpec spec;
  spec.n_examples = 1000;
  spec.feature_dim = 8;
  spec.task_mix = {{TaskKind::ImageUnderstanding, 0.25},
                   {TaskKind::ImageGeneration, 0.25},
                   {TaskKind::VideoUnderstanding, 0.25},
                   {TaskKind::VideoGeneration, 0.25}};
  spec.seed = 13;
  const auto corpus = synth_corpus(spec);
  const auto substituted = to_caption_based(corpus);
  REQUIRE(substituted.size() == corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& before = corpus[i];
    const auto& after = substituted[i];
    CHECK(after.label == before.label);
    CHECK(after.task == before.task);
    CHECK(after.prompt == before.prompt);
    CHECK(after.response_a == before.response_a);
    CHECK(after.response_b == before.response_b);
    CHECK(after.gold_caption == before.gold_caption);
    for (std::size_t m = 0; m < after.media.size(); ++m) {
      CHECK(after.media[m].kind == MediaKind::None);
      CHECK(after.media[m].caption == before.media[m].caption);
      CHECK(after.media[m].feature_bits == before.media[m].feature_bits);
    }
  }
  // idempotent
  CHECK(to_caption_based(substituted) == substituted);
}

TEST_CASE("caption substitution flows the gold caption into the descriptor") {
  PreferenceExample ex = make_understanding_example();
  ex.media[0].caption.reset();
  ex.gold_caption = "a yellow kayaker";
  const PreferenceExample out = to_caption_based(ex);
  CHECK(out.media[0].kind == MediaKind::None);
  CHECK(out.media[0].caption == "a yellow kayaker");

  ex.gold_caption.reset();
  CHECK_THROWS_WITH_AS(to_caption_based(ex), doctest::Contains("caption"), ValidationError);
}

TEST_CASE("caption text embeds the bit pattern recoverably") {
  const std::vector<std::uint8_t> bits = {1, 0, 1, 1, 0, 0, 1, 0};
  const std::string caption = caption_for_bits(bits, MediaKind::Image);
  CHECK(parse_caption_bits(caption, bits.size()) == bits);
  CHECK_FALSE(parse_caption_bits("a yellow kayaker", bits.size()));
  CHECK_FALSE(parse_caption_bits(caption, bits.size() + 1));
}

TEST_CASE("replay buffer admits by reward and evicts fifo") {
  ReplayBuffer buffer(3, {ReplayAdmission::Kind::HighRewardOnly, 2000});
  buffer.offer(make_textual_example("low"), 1200);
  CHECK(buffer.size() == 0);
  for (int i = 0; i < 5; ++i) {
    buffer.offer(make_textual_example("hi-" + std::to_string(i)), 2000);
  }
  REQUIRE(buffer.size() == 3);
  CHECK(buffer.items()[0].id == "hi-2");
  CHECK(buffer.items()[2].id == "hi-4");

  ReplayBuffer all(2, {ReplayAdmission::Kind::All, 0});
  all.offer(make_textual_example("any"), 0);
  CHECK(all.size() == 1);
}

TEST_CASE("replay mixing emits the exact configured composition") {
  std::vector<PreferenceExample> fresh;
  for (int i = 0; i < 600; ++i) fresh.push_back(make_textual_example("new-" + std::to_string(i)));
  ReplayBuffer buffer(64, {ReplayAdmission::Kind::All, 0});
  for (int i = 0; i < 40; ++i) buffer.offer(make_textual_example("old-" + std::to_string(i)), 0);

  const auto batches = replay_mix(fresh, buffer, {5, 1}, 120, 99);
  REQUIRE(batches.size() == 6);
  for (const auto& batch : batches) {
    REQUIRE(batch.size() == 120);
    int fresh_count = 0, replay_count = 0;
    std::set<std::string> replay_ids;
    for (const auto& ex : batch) {
      if (ex.id.starts_with("new-")) {
        ++fresh_count;
      } else {
        ++replay_count;
        replay_ids.insert(ex.id);
      }
    }
    CHECK(fresh_count == 100);
    CHECK(replay_count == 20);
    CHECK(replay_ids.size() == 20);  // without replacement within the batch
  }
}

TEST_CASE("composition holds in every one of ten thousand batches") {
  std::vector<PreferenceExample> fresh;
  for (int i = 0; i < 80000; ++i) fresh.push_back(make_textual_example("new-" + std::to_string(i)));
  ReplayBuffer buffer(8, {ReplayAdmission::Kind::All, 0});
  for (int i = 0; i < 8; ++i) buffer.offer(make_textual_example("old-" + std::to_string(i)), 0);

  ReplayMixer mixer(fresh, buffer, {4, 1}, 10, 1234);
  std::size_t n_batches = 0;
  while (auto batch = mixer.next()) {
    ++n_batches;
    int fresh_count = 0;
    for (const auto& ex : *batch) fresh_count += ex.id.starts_with("new-") ? 1 : 0;
    REQUIRE(batch->size() == 10);
    REQUIRE(fresh_count == 8);
  }
  CHECK(n_batches == 10000);
}

TEST_CASE("pass-through ratio preserves order and keeps the tail") {
  std::vector<PreferenceExample> fresh;
  for (int i = 0; i < 25; ++i) fresh.push_back(make_textual_example("new-" + std::to_string(i)));
  ReplayBuffer buffer;
  const auto batches = replay_mix(fresh, buffer, {1, 0}, 10, 5);
  REQUIRE(batches.size() == 3);
  CHECK(batches[2].size() == 5);
  int k = 0;
  for (const auto& batch : batches) {
    for (const auto& ex : batch) {
      CHECK(ex.id == "new-" + std::to_string(k++));
    }
  }
}

TEST_CASE("replay mixing validates its inputs") {
  std::vector<PreferenceExample> fresh = {make_textual_example()};
  ReplayBuffer empty_buffer;
  CHECK_THROWS_AS(replay_mix(fresh, empty_buffer, {5, 1}, 120, 1), ValidationError);
  ReplayBuffer buffer(8, {ReplayAdmission::Kind::All, 0});
  buffer.offer(make_textual_example("x"), 0);
  CHECK_THROWS_AS(replay_mix(fresh, buffer, {5, 1}, 100, 1), ValidationError);  // 100 % 6 != 0
  CHECK_THROWS_AS(replay_mix(fresh, buffer, {0, 0}, 12, 1), ValidationError);
}

TEST_CASE("mixing is reproducible for a fixed seed") {
  std::vector<PreferenceExample> fresh;
  for (int i = 0; i < 60; ++i) fresh.push_back(make_textual_example("new-" + std::to_string(i)));
  ReplayBuffer buffer(32, {ReplayAdmission::Kind::All, 0});
  for (int i = 0; i < 20; ++i) buffer.offer(make_textual_example("old-" + std::to_string(i)), 0);
  const auto a = replay_mix(fresh, buffer, {2, 1}, 12, 77);
  const auto b = replay_mix(fresh, buffer, {2, 1}, 12, 77);
  CHECK(a == b);
  const auto c = replay_mix(fresh, buffer, {2, 1}, 12, 78);
  CHECK_FALSE(a == c);
}
