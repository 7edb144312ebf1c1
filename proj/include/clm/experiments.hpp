#pragma once

// Orchestration: configuration file, per-stage training with cached run
// directories, downstream evaluation, and the four-way initialization matrix
// with its result tables and ordering checks.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clm/evals.hpp"
#include "clm/inference.hpp"
#include "clm/training.hpp"

namespace clm {

inline const std::vector<std::string> kInitConditions = {"no_init", "text_init", "cpt_speech", "cpt_joint"};
inline const std::vector<std::string> kDownstreamTasks = {"asr", "tts", "s2t", "s2s"};

/// The prompt templates and text vocabulary every experiment uses.
const PromptPool& standard_pool();
const TextVocab& standard_vocab();

struct MatrixSettings {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> inits = kInitConditions;
  std::vector<std::string> tasks = kDownstreamTasks;
  int eval_limit = 0;    // test samples per task (0: whole test split)
  double t_s2s = 20.0;   // S2S emergence threshold on the toy ASR-BLEU
  std::uint64_t data_seed = 0;
};

struct ExperimentConfig {
  CorpusSpec corpus;
  ModelConfig model;
  TrainConfig text_pt = TrainConfig::desk(Regime::TextPt);
  TrainConfig cpt_speech = TrainConfig::desk(Regime::CptSpeech);
  TrainConfig cpt_joint = TrainConfig::desk(Regime::CptJoint);
  TrainConfig sft = TrainConfig::desk(Regime::Sft);
  std::map<std::string, nlohmann::json> sft_task_overrides;  // task -> partial train config
  DecodeConfig decode;
  MatrixSettings matrix;

  ExperimentConfig();
  void validate() const;
  TrainConfig sft_for(const std::string& task) const;

  nlohmann::ordered_json to_json() const;
  /// Overrides defaults with the keys present; unknown keys are errors.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string digest() const;
};

/// Hex FNV-1a digest of a corpus' samples and held-out splits.
std::string corpus_digest(const Corpus& corpus);

/// Output root: $CLM_OUT_ROOT when set, else "out".
std::filesystem::path default_out_root();

struct TaskEvaluation {
  EvalReport report;
  InferenceRun run;
};

/// Decodes the (limited) test split for `task` and scores it.
TaskEvaluation evaluate_task(const std::string& task, const ParamsSet& params, const ModelConfig& cfg,
                             const Corpus& corpus, const DecodeConfig& dc, int limit);

/// Writes outputs.jsonl and eval.jsonl for an evaluation into `dir`.
void write_evaluation(const TaskEvaluation& ev, const std::filesystem::path& dir);

struct OrderingCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct MatrixResult {
  // metric name -> init -> per-seed values (NaN when the cell failed)
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  std::map<std::string, std::map<std::string, double>> medians;
  std::vector<OrderingCheck> orderings;
  std::vector<std::string> failures;
  std::string tables;

  bool orderings_ok() const;
};

/// Runs every seed: text pre-training, both CPT branches from it, SFT and
/// evaluation for every (init, task) cell, then medians, tables and checks.
/// Stage directories whose manifest matches the current config are reused.
MatrixResult run_matrix(const ExperimentConfig& cfg, const Corpus& corpus, const std::filesystem::path& out,
                        std::ostream* progress = nullptr);

}  // namespace clm
