#pragma once

// Metrics: edit distance, WER/CER, corpus BLEU, perplexity, oracle ASR-BLEU
// for speech-to-speech output, and toy TTS metrics.

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "clm/model.hpp"
#include "clm/seqfmt.hpp"
#include "clm/toyworld.hpp"

namespace clm {

struct EditCounts {
  int distance = 0;
  int substitutions = 0;
  int insertions = 0;
  int deletions = 0;
  friend bool operator==(const EditCounts&, const EditCounts&) = default;
};

/// Unit-cost Levenshtein distance; the counts come from one backtrace that
/// prefers substitution, then deletion, then insertion.
EditCounts edit_distance(std::span<const std::string> ref, std::span<const std::string> hyp);

enum class ErrorUnit { Word, Char };

std::vector<std::string> tokenize(std::string_view s, ErrorUnit unit);

struct RateResult {
  double rate = 0.0;
  int errors = 0;
  int ref_length = 0;
  int empty_refs = 0;  // references that were empty (flagged)
};

/// Sum of edit distances over the sum of reference lengths. An empty
/// reference contributes max(1, 0) = 1 to the denominator and is flagged.
RateResult error_rate(std::span<const std::string> refs, std::span<const std::string> hyps, ErrorUnit unit);
double wer(std::span<const std::string> refs, std::span<const std::string> hyps);
double cer(std::span<const std::string> refs, std::span<const std::string> hyps);

struct BleuResult {
  double score = 0.0;  // 0..100
  std::vector<double> precisions;
  double brevity_penalty = 1.0;
  int hyp_length = 0;
  int ref_length = 0;
};

/// Corpus BLEU over whitespace tokens with add-one smoothing for n >= 2.
BleuResult bleu(std::span<const std::string> refs, std::span<const std::string> hyps, int max_n = 4);

/// exp(mean text-head cross-entropy over all positions of text-only sequences).
double perplexity(const ParamsSet& params, const ModelConfig& cfg, std::span<const TaskSequence> seqs);

/// Held-out text as plain text-LM sequences (no prompt), for perplexity.
std::vector<TaskSequence> text_eval_sequences(std::span<const TextRecord> texts, const TextVocab& vocab,
                                              const PromptPool& pool);

struct S2sSample {
  std::string decoded;
  int lang = 0;
  bool wrong_lang = false;
  double consistency = 0.0;
};

struct S2sResult {
  double bleu = 0.0;
  double consistency = 0.0;
  int wrong_lang = 0;
  bool all_empty = false;
  std::vector<S2sSample> per_sample;
};

/// Decodes each output with the codec oracle and scores BLEU against the
/// target-language references.
S2sResult s2s_asr_bleu(std::span<const Frames> outputs, std::span<const std::string> refs_tgt,
                       std::span<const int> langs_tgt, const CodecConfig& cfg);

struct TtsScore {
  double decode_wer = 0.0;  // CER of the decoded text
  double spk_sim = 0.0;     // stream-1 speaker agreement with the prompt speaker
  double consistency = 0.0;
};

/// Averages over the samples generated for one instance.
TtsScore tts_eval(std::span<const Frames> samples, std::string_view ref_text, int prompt_speaker,
                  const CodecConfig& cfg);

/// Per-sample records plus one aggregate record.
struct EvalReport {
  std::string task;
  std::map<std::string, double> metrics;
  std::vector<nlohmann::ordered_json> per_sample;
  std::string config_digest;
  std::vector<std::uint64_t> seeds;

  /// JSONL: one line per sample, then {"aggregate": ...}.
  std::string to_jsonl() const;
};

/// Aligned plain-text table: first column row labels, then one column per header.
std::string render_table(const std::string& title, const std::vector<std::string>& headers,
                         const std::vector<std::pair<std::string, std::vector<std::string>>>& rows);

}  // namespace clm
