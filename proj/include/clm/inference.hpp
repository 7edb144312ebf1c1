#pragma once

// Autoregressive decoding under a modality automaton: greedy and beam search
// for text targets, per-stream top-k sampling for speech targets.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clm/model.hpp"
#include "clm/rng.hpp"
#include "clm/seqfmt.hpp"
#include "clm/toyworld.hpp"

namespace clm {

/// Which text ids may be generated and which ids close segments.
struct DecodeGrammar {
  int eos = 1;
  int text_start = 2;
  int text_end = 3;
  int speech_start = 4;
  std::vector<std::uint8_t> content;  // per text id: allowed inside a text segment
  CodecConfig codec;

  /// Only characters are content: every text target is a character string.
  static DecodeGrammar from_vocab(const TextVocab& vocab, const CodecConfig& codec);
};

struct Generation {
  std::vector<MultimodalToken> tokens;  // generated part only
  bool truncated = false;
  double logprob = 0.0;
};

/// Argmax decoding. The prefix must end with TEXT_START or SPEECH_START.
/// Text mode picks the text-head argmax over content ids and TEXT_END; speech
/// mode takes the per-stream argmax. A closed segment is followed by EOS.
Generation greedy_decode(const ParamsSet& params, const ModelConfig& cfg, std::span<const MultimodalToken> prefix,
                         int max_new, const DecodeGrammar& grammar);

struct BeamHypothesis {
  std::vector<int> ids;  // generated text ids (TEXT_END included when finished)
  double logprob = 0.0;
  bool finished = false;
  int step_finished = -1;
  double score() const { return ids.empty() ? 0.0 : logprob / static_cast<double>(ids.size()); }
};

struct BeamResult {
  Generation best;
  std::vector<BeamHypothesis> finals;  // all finished hypotheses, best first
};

/// Beam search over text-head log-probabilities restricted to the grammar.
/// Scores are mean log-probability over generated tokens. Throws
/// ContractError unless the prefix ends with TEXT_START.
BeamResult beam_search(const ParamsSet& params, const ModelConfig& cfg, std::span<const MultimodalToken> prefix,
                       int beam, int max_new, const DecodeGrammar& grammar);

/// Per-stream top-k sampling: logits / temperature, keep the k largest,
/// renormalize, sample. The segment ends when stream 0 draws END; the
/// canonical all-END frame and EOS follow. Sample j uses rng.derive("sample", j).
std::vector<Generation> topk_sample(const ParamsSet& params, const ModelConfig& cfg,
                                    std::span<const MultimodalToken> prefix, int k, double temperature,
                                    int n_samples, int max_new, const Rng& rng, const DecodeGrammar& grammar);

/// Indices kept by top-k on `logits` (ties broken toward the lower index), in
/// descending logit order.
std::vector<int> topk_indices(std::span<const float> logits, int k);

// ---- Task-level inference --------------------------------------------------

struct DecodeConfig {
  int beam = 8;
  int topk = 30;
  double temperature = 1.5;
  int n_samples = 5;
  int max_new = -1;  // < 0: task default
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static DecodeConfig from_json(const nlohmann::json& j, DecodeConfig base);
};

struct InferenceRecord {
  std::string id;
  std::string task;
  std::string text_out;               // text targets
  std::vector<Frames> frames_out;     // speech targets: one entry per sample
  std::vector<bool> sample_truncated;
  bool truncated = false;
  double logprob = 0.0;
  int speaker_prompt = -1;  // speaker of the prompt used (tts)

  nlohmann::ordered_json to_json() const;
  static InferenceRecord from_json(const nlohmann::json& j, const CodecConfig& cfg);
};

struct InferenceRun {
  std::vector<InferenceRecord> records;
  std::vector<std::string> errors;  // one line per skipped sample
  int skipped = 0;
};

/// Downstream task name ("asr", "tts", "s2t", "s2s") to its fine-tuning kind.
TaskKind downstream_kind(std::string_view task);

/// Builds the condition and an SFT prompt for every sample and decodes with
/// beam search (text targets) or top-k sampling (speech targets).
InferenceRun run_task_inference(std::string_view task, const ParamsSet& params, const ModelConfig& cfg,
                                std::span<const ToySample> samples, std::span<const ToySample> speaker_pool,
                                const TextVocab& vocab, const PromptPool& pool, const CodecConfig& codec,
                                const DecodeConfig& dc);

}  // namespace clm
