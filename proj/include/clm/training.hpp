#pragma once

// Optimization loop for text pre-training, continual pre-training (speech-only
// and joint) and supervised fine-tuning, plus optimizer, schedule, task mixer,
// time masking and checkpoints.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clm/model.hpp"
#include "clm/rng.hpp"
#include "clm/seqfmt.hpp"
#include "clm/toyworld.hpp"

namespace clm {

enum class Regime : std::uint8_t { TextPt, CptSpeech, CptJoint, Sft };
const char* regime_name(Regime r);
Regime regime_from_name(std::string_view name);  // throws ConfigError

// ---- Task mixer ------------------------------------------------------------

enum class MixCategory : std::uint8_t {
  SpeechContinuation,
  TextLm,  // language modeling on paired transcriptions
  Asr,
  Tts,
  S2t,
  T2st,
  GeneralText,  // held-out text-only split
  MtText,       // held-out MT split
};
inline constexpr int kNumMixCategories = 8;
const char* category_name(MixCategory c);

struct MixerConfig {
  std::array<double, kNumMixCategories> weights{0.15, 0.15, 0.15, 0.15, 0.15, 0.15, 0.05, 0.05};

  void validate() const;
  static MixerConfig only(MixCategory c);
};

MixCategory sample_task(const MixerConfig& mixer, Rng& rng);

// ---- Schedule, clipping, optimizer -----------------------------------------

struct TrainConfig {
  Regime regime = Regime::CptJoint;
  TaskKind sft_task = TaskKind::SftAsr;
  int steps = 5000;
  int batch_size = 16;
  double peak_lr = 1e-3;
  double min_lr = 1e-4;
  double warmup_frac = 0.01;
  double clip_norm = 1.0;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  MixerConfig mixer;
  double mask_ratio = 0.05;
  int mask_max_span = 8;
  /// Speech-only CPT alternative: all six speech tasks, loss on speech targets only.
  bool speech_target_only = false;
  PtLossScope pt_scope = PtLossScope::Full;
  int checkpoint_every = 0;  // 0: only the final checkpoint

  void validate() const;
  /// Learning-rate settings of the original large-scale run.
  static TrainConfig full_scale();
  /// Desk-scale defaults for a regime (CPT 5000 steps, SFT 2000 steps, batch 16).
  static TrainConfig desk(Regime r);

  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
};

/// Linear warmup 0 -> peak over warmup_frac * steps, then cosine decay to min_lr at `steps`.
double lr_at(int step, const TrainConfig& cfg);

/// Scales every gradient by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the pre-clip norm. Throws NumericError naming the first
/// parameter holding a non-finite value.
double clip_global_norm(ParamsSet& grads, double max_norm);

struct OptState {
  std::vector<Tensor> m, v;
  std::int64_t step = 0;

  static OptState zeros_like(const ParamsSet& p);
  friend bool operator==(const OptState&, const OptState&) = default;
};

struct AdamW {
  double beta1 = 0.9, beta2 = 0.95, eps = 1e-8, weight_decay = 0.1;
};

/// Decoupled weight decay (p *= 1 - lr * wd) followed by a bias-corrected Adam update.
void adamw_step(ParamsSet& params, const ParamsSet& grads, OptState& state, double lr, const AdamW& hp);

// ---- Augmentation ----------------------------------------------------------

/// Replaces disjoint random spans (length uniform in [1, max_span]) with the
/// all-MASK frame until about mask_ratio of the frames are covered.
Frames time_mask(std::span<const CodecFrame> frames, double mask_ratio, int max_span, Rng& rng,
                 const CodecConfig& cfg);

// ---- Data and batches ------------------------------------------------------

struct TaskEnv {
  const TextVocab& vocab;
  const PromptPool& pool;
  CodecConfig codec;
};

struct TrainData {
  std::span<const ToySample> samples;
  std::span<const TextRecord> text;
  std::span<const MtRecord> mt;
};

/// One training sequence drawn for `cfg.regime` from its own random stream.
TaskSequence draw_sequence(const TrainConfig& cfg, const TrainData& data, const TaskEnv& env, Rng& rng);

/// The batch of step `step`: element b uses Rng(seed).derive("batch", step).derive("item", b).
std::vector<TaskSequence> assemble_batch(const TrainConfig& cfg, const TrainData& data, const TaskEnv& env,
                                         int step);

// ---- Checkpoints -----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  ParamsSet params;
  std::optional<OptState> opt;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();  // regime, step, seed, loss digest, ...
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws CorruptCheckpoint, CheckpointVersionError, or CheckpointShapeMismatch
/// (when `expected` is given and an array disagrees with it).
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

nlohmann::ordered_json model_config_to_json(const ModelConfig& m);
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

// ---- Training loop ---------------------------------------------------------

struct StepRecord {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double text_loss = 0.0;
  std::vector<double> codec_loss;
  double grad_norm = 0.0;

  nlohmann::ordered_json to_json() const;
};

struct RunOptions {
  /// Continue from a checkpoint that carries optimizer state.
  const Checkpoint* resume = nullptr;
  /// When set: writes train_log.jsonl, final.ckpt and periodic step_N.ckpt here.
  std::filesystem::path out_dir;
  /// Stop after this many total steps (< 0: run to cfg.steps).
  int stop_at = -1;
  /// Called after every step; returning false stops training.
  std::function<bool(const StepRecord&, const ParamsSet&)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepRecord> log;
  bool stopped_early = false;
};

TrainResult run_training(const TrainConfig& cfg, const ModelConfig& model_cfg, ParamsSet init,
                         const TrainData& data, const TaskEnv& env, const RunOptions& opts = {});

}  // namespace clm
