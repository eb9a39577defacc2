#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "msrl/numeric.hpp"
#include "msrl/policy.hpp"
#include "msrl/rewards.hpp"

using namespace msrl;
using namespace msrl::testing;

TEST_CASE("format reward is the parser's accept bit") {
  Rng rng(3);
  const Rationale r = random_rationale(rng, StageFormat::ThinkAnswer);
  const std::string text = render_rationale(r);
  CHECK(format_reward(text, StageFormat::ThinkAnswer) == 1);

  std::string broken = text;
  broken.erase(broken.find("</think>\n"), 9);
  CHECK(format_reward(broken, StageFormat::ThinkAnswer) == 0);
  CHECK(format_reward("garbage", StageFormat::ThinkAnswer) == 0);
}

TEST_CASE("format reward agrees with the reference validator under fuzz") {
  Rng rng(31);
  for (int i = 0; i < 3000; ++i) {
    const StageFormat format =
        rng.bernoulli(0.5) ? StageFormat::ThinkAnswer : StageFormat::TypedThinkAnswer;
    std::string text = render_rationale(random_rationale(rng, format));
    text = mutate_rendering(text, rng);
    REQUIRE(format_reward(text, format) == (reference_accepts(text, format) ? 1 : 0));
  }
}

TEST_CASE("accuracy reward matches the parsed answer against gold") {
  Rng rng(5);
  Rationale r = random_rationale(rng, StageFormat::ThinkAnswer);
  r.answer = Label::A;
  const std::string text = render_rationale(r);
  CHECK(accuracy_reward(text, StageFormat::ThinkAnswer, Label::A) == 1);
  CHECK(accuracy_reward(text, StageFormat::ThinkAnswer, Label::B) == 0);

  std::string broken = text;
  broken.erase(broken.find("</think>\n"), 9);
  // gated: a correct letter inside a malformed output scores 0
  CHECK(accuracy_reward(broken, StageFormat::ThinkAnswer, Label::A) == 1 - 1);
  // ungated: the answer block is scored on its own
  CHECK(accuracy_reward(broken, StageFormat::ThinkAnswer, Label::A, false) == 1);
  CHECK(accuracy_reward(broken, StageFormat::ThinkAnswer, Label::B, false) == 0);
}

TEST_CASE("task reward needs a type element naming the true task") {
  CHECK(task_reward_millis("<type>image understanding</type>", TaskKind::ImageUnderstanding) ==
        200);
  CHECK(task_reward_millis("<type>Image Understanding</type>", TaskKind::ImageUnderstanding) ==
        200);
  CHECK(task_reward_millis("<type>video generation</type>", TaskKind::ImageUnderstanding) == 0);
  CHECK(task_reward_millis("no tag at all", TaskKind::ImageUnderstanding) == 0);
  CHECK(task_reward_millis("<type>gibberish</type>", TaskKind::ImageUnderstanding) == 0);
  // granted even when the surrounding format is broken
  const PreferenceExample ex = make_understanding_example();
  StructuredAction action;
  action.task_tag = ex.task;
  action.well_formed = false;
  const std::string text = render_action_text(ex, action, StageFormat::TypedThinkAnswer);
  CHECK(format_reward(text, StageFormat::TypedThinkAnswer) == 0);
  CHECK(task_reward_millis(text, ex.task) == 200);
}

TEST_CASE("total reward composes exactly") {
  const PreferenceExample ex = make_understanding_example();
  StructuredAction gold;
  gold.answer = ex.label;
  gold.task_tag = ex.task;

  const std::string stage2 = render_action_text(ex, gold, StageFormat::TypedThinkAnswer);
  const RewardBreakdown perfect2 =
      total_reward(stage2, StageFormat::TypedThinkAnswer, ex.label, ex.task, RewardConfig::stage23());
  CHECK(perfect2.format_millis == 1000);
  CHECK(perfect2.accuracy_millis == 1000);
  CHECK(perfect2.task_millis == 200);
  CHECK(perfect2.total_millis == 2200);
  CHECK(perfect2.total() == 2.2);

  const std::string stage1 = render_action_text(ex, gold, StageFormat::ThinkAnswer);
  const RewardBreakdown perfect1 =
      total_reward(stage1, StageFormat::ThinkAnswer, ex.label, ex.task, RewardConfig::stage1());
  CHECK(perfect1.total_millis == 2000);

  const RewardBreakdown nothing =
      total_reward("\x01garbage\xff", StageFormat::ThinkAnswer, ex.label, ex.task,
                   RewardConfig::stage1());
  CHECK(nothing.total_millis == 0);
}

TEST_CASE("totals live on the exact value lattice") {
  const PreferenceExample ex = make_understanding_example();
  const std::set<int> allowed = {0, 200, 1000, 1200, 2000, 2200};
  for (const StructuredAction& action : enumerate_actions(StageFormat::TypedThinkAnswer, ex)) {
    const std::string text = render_action_text(ex, action, StageFormat::TypedThinkAnswer);
    for (TaskKind true_task :
         {TaskKind::ImageUnderstanding, TaskKind::ImageGeneration, TaskKind::VideoUnderstanding,
          TaskKind::VideoGeneration}) {
      const RewardBreakdown b = total_reward(text, StageFormat::TypedThinkAnswer, ex.label,
                                             true_task, RewardConfig::stage23());
      CHECK(b.total_millis == b.format_millis + b.accuracy_millis + b.task_millis);
      CHECK(allowed.count(b.total_millis) == 1);
      CHECK((b.accuracy_millis == 0 || b.format_millis == 1000));  // gated
      CHECK(b.task_millis == ((action.task_tag == true_task) ? 200 : 0));
    }
  }
}

TEST_CASE("single corrupting mutations never raise the total reward") {
  Rng rng(41);
  const PreferenceExample ex = make_understanding_example();
  const RewardConfig cfg = RewardConfig::stage23();
  int considered = 0;
  for (int i = 0; i < 1000; ++i) {
    StructuredAction action;
    action.answer = ex.label;  // start from gold so mutations can only hurt
    action.task_tag = ex.task;
    action.caption_faithful = rng.bernoulli(0.5);
    const std::string text = render_action_text(ex, action, StageFormat::TypedThinkAnswer);
    const int base = total_reward(text, StageFormat::TypedThinkAnswer, ex.label, ex.task, cfg)
                         .total_millis;

    std::string mutated = text;
    switch (rng.below(3)) {
      case 0: {  // tag deletion
        static const char* kTags[] = {"<think>", "</think>", "<answer>", "</answer>", "</type>"};
        const std::string tag = kTags[rng.below(5)];
        const auto pos = mutated.find(tag);
        if (pos != std::string::npos) mutated.erase(pos, tag.size());
        break;
      }
      case 1: {  // answer flip away from gold
        const std::string old = ex.label == Label::A ? "\nA\n</answer>" : "\nB\n</answer>";
        const std::string flipped = ex.label == Label::A ? "\nB\n</answer>" : "\nA\n</answer>";
        mutated.replace(mutated.find(old), old.size(), flipped);
        break;
      }
      default: {  // type tag corruption
        const auto pos = mutated.find("<type>");
        if (pos != std::string::npos) mutated.replace(pos, 6, "<type>not ");
        break;
      }
    }
    const int after = total_reward(mutated, StageFormat::TypedThinkAnswer, ex.label, ex.task, cfg)
                          .total_millis;
    REQUIRE(after <= base);
    ++considered;
  }
  CHECK(considered == 1000);
}

TEST_CASE("bt loss hits ln 2 at equal scores and is swap symmetric") {
  CHECK(std::abs(bt_loss(1.7, 1.7, Label::A) - std::log(2.0)) <= 1e-12);
  Rng rng(51);
  for (int i = 0; i < 200; ++i) {
    const double a = rng.uniform01() * 8.0 - 4.0;
    const double b = rng.uniform01() * 8.0 - 4.0;
    CHECK(bt_loss(a, b, Label::A) == bt_loss(b, a, Label::B));
    CHECK(bt_loss(a, b, Label::A) > 0.0);
  }
  CHECK(bt_loss(40.0, 0.0, Label::A) < 1e-12);
  CHECK_THROWS_AS(bt_loss(std::nan(""), 0.0, Label::A), ValidationError);
}

TEST_CASE("bt loss gradient matches central finite differences") {
  Rng rng(61);
  const double h = 1e-5;
  for (int i = 0; i < 100; ++i) {
    const double a = rng.uniform01() * 10.0 - 5.0;
    const double b = rng.uniform01() * 10.0 - 5.0;
    const Label pref = rng.bernoulli(0.5) ? Label::A : Label::B;
    const auto [ga, gb] = bt_loss_grad(a, b, pref);
    const double fa = (bt_loss(a + h, b, pref) - bt_loss(a - h, b, pref)) / (2 * h);
    const double fb = (bt_loss(a, b + h, pref) - bt_loss(a, b - h, pref)) / (2 * h);
    CHECK(std::abs(ga - fa) <= 1e-6 * std::max(1.0, std::abs(fa)));
    CHECK(std::abs(gb - fb) <= 1e-6 * std::max(1.0, std::abs(fb)));
  }
}

TEST_CASE("generative loss is the negated label log-probability") {
  CHECK(gen_rm_loss(0.0) == 0.0);
  CHECK(gen_rm_loss(std::log(0.5)) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK_THROWS_AS(gen_rm_loss(0.1), ValidationError);
  // coincides with the BT loss when the label distribution is the sigmoid of
  // the score difference
  Rng rng(71);
  for (int i = 0; i < 100; ++i) {
    const double a = rng.uniform01() * 8.0 - 4.0;
    const double b = rng.uniform01() * 8.0 - 4.0;
    const double p_a = sigmoid(a - b);
    CHECK(gen_rm_loss(std::log(p_a)) == doctest::Approx(bt_loss(a, b, Label::A)).epsilon(1e-9));
  }
}

TEST_CASE("reward config validates the bonus value") {
  CHECK_THROWS_AS(make_reward_config(true, -0.1), ValidationError);
  const RewardConfig cfg = make_reward_config(true, 0.35);
  CHECK(cfg.task_reward_millis == 350);
}
