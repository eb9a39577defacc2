// msrl: synthesize corpora, train the staged reward policy, distill, score
// and evaluate it. See README.md for the file formats.
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "msrl/curriculum.hpp"
#include "msrl/harness.hpp"
#include "msrl/rewards.hpp"

namespace {

using namespace msrl;
using ordered_json = nlohmann::ordered_json;

constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;
constexpr int kExitInternal = 4;

std::uint64_t default_seed() {
  if (const char* env = std::getenv("MSRL_SEED")) {
    return std::strtoull(env, nullptr, 10);
  }
  return 0;
}

CorpusSpec corpus_spec_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open for reading");
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError(path + ": malformed JSON: " + std::string(e.what()));
  }
  CorpusSpec spec;
  spec.n_examples = j.at("n_examples").get<std::size_t>();
  spec.feature_dim = j.value("feature_dim", spec.feature_dim);
  spec.prompt_buckets = j.value("prompt_buckets", spec.prompt_buckets);
  for (const auto& [key, value] : j.at("task_mix").items()) {
    const auto task = task_from_wire(key);
    if (!task) throw ValidationError("spec.task_mix: task \"" + key + "\" unknown");
    spec.task_mix[*task] = value.get<double>();
  }
  const std::string rule = j.value("label_rule", std::string("linear_bits"));
  if (rule == "linear_bits") {
    spec.label_rule = LabelRuleKind::LinearBits;
  } else if (rule == "linear_prompt") {
    spec.label_rule = LabelRuleKind::LinearPrompt;
  } else {
    throw ValidationError("spec.label_rule: \"" + rule + "\" unknown");
  }
  spec.noise_rate = j.value("noise_rate", 0.0);
  spec.seed = j.value("seed", std::uint64_t{0});
  spec.textual = j.value("textual", false);
  return spec;
}

struct ScoreRequest {
  std::string id;
  std::string output_text;
  StageFormat stage = StageFormat::ThinkAnswer;
  Label gold = Label::A;
  TaskKind task = TaskKind::ImageUnderstanding;
};

ScoreRequest score_request_from_json(const ordered_json& j) {
  ScoreRequest req;
  req.id = j.at("id").get<std::string>();
  req.output_text = j.at("output_text").get<std::string>();
  const std::string stage = j.at("stage").get<std::string>();
  const auto format = stage_format_from_name(stage);
  if (!format) throw ValidationError("score.stage: \"" + stage + "\" unknown");
  req.stage = *format;
  const std::string gold = j.at("gold").get<std::string>();
  if (gold != "A" && gold != "B") throw ValidationError("score.gold: must be A or B");
  req.gold = gold == "A" ? Label::A : Label::B;
  const std::string task = j.at("task").get<std::string>();
  const auto t = task_from_wire(task);
  if (!t) throw ValidationError("score.task: \"" + task + "\" unknown");
  req.task = *t;
  return req;
}

int run_synth(const std::string& spec_path, const std::string& out_path) {
  const CorpusSpec spec = corpus_spec_from_file(spec_path);
  save_corpus(out_path, synth_corpus(spec));
  std::cout << "wrote " << spec.n_examples << " examples to " << out_path << "\n";
  return 0;
}

int run_caption(const std::string& corpus_path, const std::string& out_path) {
  save_corpus(out_path, to_caption_based(load_corpus(corpus_path)));
  std::cout << "wrote caption-based corpus to " << out_path << "\n";
  return 0;
}

int run_train(const std::string& plan_path, std::uint64_t seed, const std::string& out_dir,
              const std::string& init_checkpoint) {
  const StagePlan plan = load_plan(plan_path);
  PolicyParameters init = init_checkpoint.empty() ? PolicyParameters::zeros(plan.layout)
                                                  : load_checkpoint(init_checkpoint);
  RunHooks hooks;
  hooks.heldout = [](const PolicyParameters& params, const StageSpec& spec) {
    const auto corpus = load_corpus(spec.heldout_corpus);
    return evaluate(params, corpus, spec.stage_format, spec.channel, 1, 0).overall_accuracy;
  };
  const RunResult result = run_plan(plan, init, seed, file_resolver(), out_dir, hooks);
  const std::string final_path = out_dir + "/final.ckpt";
  save_checkpoint(final_path, result.params);
  std::cout << "finished " << plan.stages.size() << " stage specs; final checkpoint at "
            << final_path << "\n";
  return 0;
}

int run_score(const std::string& in_path, const std::string& out_path) {
  std::ifstream in(in_path);
  if (!in) throw IoError(in_path + ": cannot open for reading");
  std::ofstream out_file;
  std::ostream* out = &std::cout;
  if (!out_path.empty()) {
    out_file.open(out_path, std::ios::binary);
    if (!out_file) throw IoError(out_path + ": cannot open for writing");
    out = &out_file;
  }
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ScoreRequest req;
    try {
      req = score_request_from_json(ordered_json::parse(line));
    } catch (const ValidationError& e) {
      throw ValidationError(in_path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const std::exception& e) {
      throw IoError(in_path + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
    const RewardConfig cfg = req.stage == StageFormat::ThinkAnswer ? RewardConfig::stage1()
                                                                   : RewardConfig::stage23();
    const RewardBreakdown b = total_reward(req.output_text, req.stage, req.gold, req.task, cfg);
    ordered_json j;
    j["id"] = req.id;
    j["format"] = b.format();
    j["accuracy"] = b.accuracy();
    j["task"] = b.task();
    j["total"] = b.total();
    (*out) << j.dump() << "\n";
  }
  return 0;
}

int run_distill(const std::string& checkpoint, const std::string& corpus_path, int n,
                const std::string& confidence, const std::string& out_path) {
  const PolicyParameters params = load_checkpoint(checkpoint);
  const auto corpus = load_corpus(corpus_path);
  CmkdSpec spec;
  spec.n_samples = n;
  if (confidence == "mean_logprob") {
    spec.confidence = CmkdConfidence::MeanLogProb;
  } else if (confidence == "sequence_logprob") {
    spec.confidence = CmkdConfidence::SequenceLogProb;
  } else {
    throw ValidationError("distill.confidence: \"" + confidence + "\" unknown");
  }
  const auto pairs =
      cmkd_distill(params, corpus, spec, StageFormat::TypedThinkAnswer, default_seed());
  std::ofstream out_file;
  std::ostream* out = &std::cout;
  if (!out_path.empty()) {
    out_file.open(out_path, std::ios::binary);
    if (!out_file) throw IoError(out_path + ": cannot open for writing");
    out = &out_file;
  }
  for (const DistilledPair& pair : pairs) {
    ordered_json j;
    j["id"] = pair.example_id;
    j["caption"] = pair.caption;
    j["pseudo_label"] = pair.pseudo_label == Label::A ? "A" : "B";
    j["rationale"] = pair.rationale.raw_text;
    (*out) << j.dump() << "\n";
  }
  std::cerr << "distilled " << pairs.size() << " of " << corpus.size() << " examples\n";
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& corpus_path, int k,
             const std::string& stage_format, const std::string& channel, std::uint64_t seed,
             const std::string& json_path) {
  const PolicyParameters params = load_checkpoint(checkpoint);
  const auto corpus = load_corpus(corpus_path);
  const auto format = stage_format_from_name(stage_format);
  if (!format) throw ValidationError("eval.stage_format: \"" + stage_format + "\" unknown");
  const auto ch = channel_from_name(channel);
  if (!ch) throw ValidationError("eval.channel: \"" + channel + "\" unknown");
  const EvalReport report = evaluate(params, corpus, *format, *ch, k, seed);
  std::cout << report_render_text(report);
  if (!json_path.empty()) {
    std::ofstream out(json_path, std::ios::binary);
    if (!out) throw IoError(json_path + ": cannot open for writing");
    out << report_to_json(report) << "\n";
  }
  return 0;
}

int run_sweep(const std::string& plan_path, const std::string& ratios_text,
              const std::string& eval_corpus, const std::string& probe_corpus,
              std::uint64_t seed, const std::string& json_path) {
  const StagePlan plan = load_plan(plan_path);
  SweepConfig cfg;
  cfg.eval_corpus = eval_corpus;
  cfg.probe_corpus = probe_corpus;
  const auto rows = ratio_sweep(plan, parse_ratio_list(ratios_text), cfg,
                                PolicyParameters::zeros(plan.layout), seed, file_resolver());
  std::cout << sweep_render_text(rows);
  if (!json_path.empty()) {
    std::ofstream out(json_path, std::ios::binary);
    if (!out) throw IoError(json_path + ": cannot open for writing");
    out << sweep_to_json(rows) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"msrl: staged RL training for a verifiable generative reward policy"};
  app.require_subcommand(1);

  std::uint64_t seed = default_seed();

  auto* synth = app.add_subcommand("synth", "synthesize a labeled preference corpus");
  std::string synth_spec, synth_out;
  synth->add_option("--spec", synth_spec, "corpus spec JSON file")->required();
  synth->add_option("--out", synth_out, "output JSONL path")->required();

  auto* caption = app.add_subcommand("caption", "replace media with captions in a corpus");
  std::string caption_corpus, caption_out;
  caption->add_option("--corpus", caption_corpus, "input corpus JSONL")->required();
  caption->add_option("--out", caption_out, "output JSONL path")->required();

  auto* train = app.add_subcommand("train", "run a staged training plan");
  std::string train_plan, train_out = "runs", train_init;
  train->add_option("--plan", train_plan, "stage plan JSON file")->required();
  train->add_option("--seed", seed, "run seed")->envname("MSRL_SEED");
  train->add_option("--out", train_out, "output directory for checkpoints and logs");
  train->add_option("--init-checkpoint", train_init, "start from an existing checkpoint");

  auto* score = app.add_subcommand("score", "score model outputs with the verifiable rewards");
  std::string score_in, score_out;
  score->add_option("--in", score_in, "JSONL of {id, output_text, stage, gold, task}")->required();
  score->add_option("--out", score_out, "output JSONL path (default stdout)");

  auto* distill = app.add_subcommand("distill", "select teacher rationales by consensus");
  std::string distill_ckpt, distill_corpus, distill_conf = "mean_logprob", distill_out;
  int distill_n = 8;
  distill->add_option("--checkpoint", distill_ckpt, "policy checkpoint")->required();
  distill->add_option("--corpus", distill_corpus, "caption-based corpus JSONL")->required();
  distill->add_option("--n", distill_n, "samples per example");
  distill->add_option("--confidence", distill_conf, "mean_logprob or sequence_logprob");
  distill->add_option("--out", distill_out, "output JSONL path (default stdout)");
  distill->add_option("--seed", seed, "sampling seed")->envname("MSRL_SEED");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint with majority voting");
  std::string eval_ckpt, eval_corpus, eval_format = "typed_think_answer", eval_channel = "visual";
  std::string eval_json;
  int eval_k = 1;
  eval->add_option("--checkpoint", eval_ckpt, "policy checkpoint")->required();
  eval->add_option("--corpus", eval_corpus, "evaluation corpus JSONL")->required();
  eval->add_option("--k", eval_k, "votes per example");
  eval->add_option("--stage-format", eval_format, "think_answer or typed_think_answer");
  eval->add_option("--channel", eval_channel, "visual, caption or text_only");
  eval->add_option("--json", eval_json, "also write the report as JSON");
  eval->add_option("--seed", seed, "sampling seed")->envname("MSRL_SEED");

  auto* sweep = app.add_subcommand("sweep", "stage-2 mixing-ratio sweep");
  std::string sweep_plan, sweep_ratios = "1:0,1:1,2:1,4:1,5:1", sweep_eval, sweep_probe;
  std::string sweep_json;
  sweep->add_option("--plan", sweep_plan, "stage plan JSON file")->required();
  sweep->add_option("--ratios", sweep_ratios, "comma-separated new:replay ratios");
  sweep->add_option("--eval-corpus", sweep_eval, "caption-based held-out JSONL")->required();
  sweep->add_option("--probe-corpus", sweep_probe, "textual held-out JSONL")->required();
  sweep->add_option("--json", sweep_json, "also write the table as JSON");
  sweep->add_option("--seed", seed, "run seed")->envname("MSRL_SEED");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return run_synth(synth_spec, synth_out);
    if (caption->parsed()) return run_caption(caption_corpus, caption_out);
    if (train->parsed()) return run_train(train_plan, seed, train_out, train_init);
    if (score->parsed()) return run_score(score_in, score_out);
    if (distill->parsed()) {
      return run_distill(distill_ckpt, distill_corpus, distill_n, distill_conf, distill_out);
    }
    if (eval->parsed()) {
      return run_eval(eval_ckpt, eval_corpus, eval_k, eval_format, eval_channel, seed, eval_json);
    }
    if (sweep->parsed()) {
      return run_sweep(sweep_plan, sweep_ratios, sweep_eval, sweep_probe, seed, sweep_json);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: validation: " << e.what() << "\n";
    return kExitValidation;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return kExitInternal;
  }
  return 0;
}
