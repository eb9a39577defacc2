#include "msrl/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

#include "msrl/rewards.hpp"
#include "msrl/rng.hpp"

namespace msrl {

using ordered_json = nlohmann::ordered_json;

EvalReport evaluate(const PolicyParameters& params, const std::vector<PreferenceExample>& corpus,
                    StageFormat stage_format, Channel channel, int k, std::uint64_t seed) {
  if (corpus.empty()) throw ValidationError("evaluate: corpus is empty");
  if (k < 1) throw ValidationError("evaluate: k must be >= 1");

  Rng rng = Rng(seed).fork("eval");
  std::map<TaskKind, std::size_t> correct_by_task, n_by_task;
  std::size_t parseable = 0, tag_correct = 0, correct = 0;

  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const PreferenceExample& ex = corpus[i];
    const Channel ch = effective_channel(ex, channel);
    std::size_t votes_a = 0, votes_b = 0;
    for (int j = 0; j < k; ++j) {
      const std::uint64_t draw_seed =
          rng.fork("vote", i).fork("draw", static_cast<std::uint64_t>(j)).seed();
      const SampleResult s = sample_action(params, ex, stage_format, ch, draw_seed);
      const ParseResult parsed = parse_rationale(s.text, stage_format);
      if (parse_ok(parsed)) {
        ++parseable;
        (std::get<Rationale>(parsed).answer == Label::A ? votes_a : votes_b) += 1;
      }
      if (task_reward_millis(s.text, ex.task) > 0) ++tag_correct;
    }
    n_by_task[ex.task] += 1;
    if (votes_a + votes_b == 0) continue;  // every rollout abstained: wrong
    const Label voted = votes_a >= votes_b ? Label::A : Label::B;  // tie -> A
    if (voted == ex.label) {
      ++correct;
      correct_by_task[ex.task] += 1;
    }
  }

  EvalReport report;
  report.n_examples = corpus.size();
  report.voting_k = k;
  report.overall_accuracy = static_cast<double>(correct) / static_cast<double>(corpus.size());
  for (const auto& [task, n] : n_by_task) {
    report.per_task_n[task] = n;
    report.per_task[task] =
        static_cast<double>(correct_by_task[task]) / static_cast<double>(n);
  }
  const double n_rollouts = static_cast<double>(corpus.size()) * static_cast<double>(k);
  report.format_rate = static_cast<double>(parseable) / n_rollouts;
  report.task_tag_rate = static_cast<double>(tag_correct) / n_rollouts;
  return report;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", v * 100.0);
  return buf;
}

}  // namespace

std::string report_render_text(const EvalReport& report) {
  std::ostringstream out;
  const auto row = [&out](const std::string& name, const std::string& value) {
    out << name;
    for (std::size_t i = name.size(); i < 24; ++i) out << ' ';
    out << value << '\n';
  };
  row("metric", "value");
  row("overall accuracy", pct(report.overall_accuracy));
  for (TaskKind task : {TaskKind::ImageUnderstanding, TaskKind::ImageGeneration,
                        TaskKind::VideoUnderstanding, TaskKind::VideoGeneration}) {
    const auto it = report.per_task.find(task);
    row(task_prose_name(task), it == report.per_task.end() ? "–" : pct(it->second));
  }
  row("format rate", pct(report.format_rate));
  row("task tag rate", pct(report.task_tag_rate));
  row("n_examples", std::to_string(report.n_examples));
  row("voting_k", std::to_string(report.voting_k));
  return out.str();
}

std::string report_to_json(const EvalReport& report) {
  ordered_json j;
  j["overall_accuracy"] = report.overall_accuracy;
  ordered_json per_task = ordered_json::object();
  ordered_json per_task_n = ordered_json::object();
  for (const auto& [task, acc] : report.per_task) {
    per_task[task_wire_name(task)] = acc;
    per_task_n[task_wire_name(task)] = report.per_task_n.at(task);
  }
  j["per_task"] = std::move(per_task);
  j["per_task_n"] = std::move(per_task_n);
  j["n_examples"] = report.n_examples;
  j["voting_k"] = report.voting_k;
  j["format_rate"] = report.format_rate;
  j["task_tag_rate"] = report.task_tag_rate;
  return j.dump();
}

EvalReport report_from_json(const std::string& json_text) {
  const ordered_json j = ordered_json::parse(json_text);
  EvalReport report;
  report.overall_accuracy = j.at("overall_accuracy").get<double>();
  for (const auto& [key, value] : j.at("per_task").items()) {
    const auto task = task_from_wire(key);
    if (!task) throw ValidationError("report.per_task: task \"" + key + "\" unknown");
    report.per_task[*task] = value.get<double>();
  }
  for (const auto& [key, value] : j.at("per_task_n").items()) {
    const auto task = task_from_wire(key);
    if (!task) throw ValidationError("report.per_task_n: task \"" + key + "\" unknown");
    report.per_task_n[*task] = value.get<std::size_t>();
  }
  report.n_examples = j.at("n_examples").get<std::size_t>();
  report.voting_k = j.at("voting_k").get<int>();
  report.format_rate = j.at("format_rate").get<double>();
  report.task_tag_rate = j.at("task_tag_rate").get<double>();
  return report;
}

// ---------------------------------------------------------------------------
// Ratio sweep
// ---------------------------------------------------------------------------

std::vector<std::pair<int, int>> parse_ratio_list(const std::string& text) {
  std::vector<std::pair<int, int>> ratios;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw ValidationError("ratios: \"" + item + "\" is not of the form new:replay");
    }
    try {
      ratios.emplace_back(std::stoi(item.substr(0, colon)), std::stoi(item.substr(colon + 1)));
    } catch (const std::exception&) {
      throw ValidationError("ratios: \"" + item + "\" is not of the form new:replay");
    }
  }
  if (ratios.empty()) throw ValidationError("ratios: list is empty");
  return ratios;
}

std::vector<SweepRow> ratio_sweep(const StagePlan& base_plan,
                                  const std::vector<std::pair<int, int>>& ratios,
                                  const SweepConfig& cfg, const PolicyParameters& init,
                                  std::uint64_t seed, const CorpusResolver& resolver) {
  if (ratios.empty()) throw ValidationError("ratio_sweep: ratios must be non-empty");
  validate_plan(base_plan);

  StagePlan stage1_plan{base_plan.layout, {}};
  StagePlan stage2_plan{base_plan.layout, {}};
  for (const StageSpec& s : base_plan.stages) {
    if (s.stage_id == 1) stage1_plan.stages.push_back(s);
    if (s.stage_id == 2) stage2_plan.stages.push_back(s);
  }
  if (stage2_plan.stages.empty()) {
    throw ValidationError("ratio_sweep: the plan has no stage-2 spec to sweep");
  }
  for (const StageSpec& s : stage2_plan.stages) {
    if (s.phase == StagePhase::Rlvr && !s.replay) {
      throw ValidationError("ratio_sweep: the stage-2 RL spec needs a replay block to vary");
    }
  }

  // shared stage-1 checkpoint (and its replay buffer)
  PolicyParameters stage1_params = init;
  ReplayBuffer stage1_buffer;
  if (!stage1_plan.stages.empty()) {
    RunHooks hooks;
    for (const StageSpec& s : stage2_plan.stages) {
      if (s.replay && s.replay->buffer_source == "stage1") {
        hooks.collect_stage1_admission = s.replay->admission;
        hooks.collect_stage1_capacity = s.replay->capacity;
        break;
      }
    }
    RunResult r1 = run_plan(stage1_plan, init, seed, resolver, {}, hooks);
    stage1_params = std::move(r1.params);
    stage1_buffer = std::move(r1.stage1_buffer);
  }

  const std::vector<PreferenceExample> eval_corpus = resolver(cfg.eval_corpus);
  const std::vector<PreferenceExample> probe_corpus = resolver(cfg.probe_corpus);

  std::vector<SweepRow> rows;
  for (const auto& [rn, rr] : ratios) {
    StagePlan plan = stage2_plan;
    for (StageSpec& s : plan.stages) {
      if (s.phase != StagePhase::Rlvr || !s.replay) continue;
      s.replay->ratio_new = rn;
      s.replay->ratio_replay = rr;
    }
    validate_plan(plan);
    RunResult r2 = run_plan(plan, stage1_params, seed, resolver, {}, {}, &stage1_buffer);

    const StageSpec& eval_spec = plan.stages.back();
    SweepRow row;
    row.ratio_new = rn;
    row.ratio_replay = rr;
    row.caption_accuracy = evaluate(r2.params, eval_corpus, eval_spec.stage_format,
                                    Channel::Caption, cfg.voting_k, seed)
                               .overall_accuracy;
    row.textual_accuracy = evaluate(r2.params, probe_corpus, StageFormat::ThinkAnswer,
                                    Channel::TextOnly, cfg.voting_k, seed)
                               .overall_accuracy;
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_render_text(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "ratio    caption_acc    textual_acc\n";
  for (const SweepRow& row : rows) {
    const std::string ratio = std::to_string(row.ratio_new) + ":" + std::to_string(row.ratio_replay);
    out << ratio;
    for (std::size_t i = ratio.size(); i < 9; ++i) out << ' ';
    const std::string cap = pct(row.caption_accuracy);
    out << cap;
    for (std::size_t i = cap.size(); i < 15; ++i) out << ' ';
    out << pct(row.textual_accuracy) << '\n';
  }
  return out.str();
}

std::string sweep_to_json(const std::vector<SweepRow>& rows) {
  ordered_json arr = ordered_json::array();
  for (const SweepRow& row : rows) {
    ordered_json j;
    j["ratio_new"] = row.ratio_new;
    j["ratio_replay"] = row.ratio_replay;
    j["caption_accuracy"] = row.caption_accuracy;
    j["textual_accuracy"] = row.textual_accuracy;
    arr.push_back(std::move(j));
  }
  return arr.dump();
}

}  // namespace msrl
