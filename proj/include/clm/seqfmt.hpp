#pragma once

// Text vocabulary, multimodal tokens, and the (Condition)(Prompt)(Target)
// task-sequence grammar shared by training and decoding.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "clm/toyworld.hpp"

namespace clm {

struct TextToken {
  int id = 0;
  friend bool operator==(TextToken, TextToken) = default;
};

/// Either a text-vocabulary id or a full codec frame; the other modality's
/// components are implicitly null.
using MultimodalToken = std::variant<TextToken, CodecFrame>;

inline bool is_speech(const MultimodalToken& t) { return std::holds_alternative<CodecFrame>(t); }
inline int text_id(const MultimodalToken& t) { return std::get<TextToken>(t).id; }
inline const CodecFrame& frame_of(const MultimodalToken& t) { return std::get<CodecFrame>(t); }

enum class Modality : std::uint8_t { Text, Speech };
enum class Phase : std::uint8_t { PT, SFT };

enum class TaskKind : std::uint8_t {
  SpeechContinuation,
  TextLm,
  Asr,
  Tts,
  S2t,
  T2st,
  SftAsr,
  SftTts,
  SftS2t,
  SftS2s,
};

inline constexpr int kNumTaskKinds = 10;

const char* task_name(TaskKind k);
TaskKind task_from_name(std::string_view name);  // throws ConfigError
const char* phase_name(Phase p);

/// Task whose layout and prompt pool `k` uses (sft_X -> X).
TaskKind base_task(TaskKind k);
/// Modality of the target segment.
Modality target_modality(TaskKind k);

/// Prompt families; MT covers the text-only translation pairs used in CPT.
enum class PromptFamily : std::uint8_t { Asr, Tts, S2t, T2st, S2s, Mt };
inline constexpr int kNumPromptFamilies = 6;

/// Fixed natural-language templates per family. The first 80% of each list
/// is used in pre-training, the remaining 20% only in fine-tuning.
struct PromptPool {
  std::vector<std::vector<std::string>> templates;  // indexed by PromptFamily

  static PromptPool standard();
  const std::vector<std::string>& of(PromptFamily f) const { return templates[static_cast<std::size_t>(f)]; }
  /// Templates usable in `phase` for family `f`.
  std::vector<std::string> partition(PromptFamily f, Phase phase) const;
};

std::optional<PromptFamily> prompt_family(TaskKind k);

struct TextVocab {
  int bos = 0, eos = 1, text_start = 2, text_end = 3, speech_start = 4;
  int cond = 5, prompt = 6, target = 7, lang0 = 8, lang1 = 9;
  int char_base = 10;  // ids char_base .. char_base + 26
  std::vector<std::string> names;
  std::map<std::string, int, std::less<>> index;

  int size() const { return static_cast<int>(names.size()); }
  int char_token(char c) const { return char_base + char_id(c); }
  int lang_token(int lang) const { return lang == 0 ? lang0 : lang1; }
  int word(std::string_view w) const;  // throws ConfigError when absent
  bool is_char(int id) const { return id >= char_base && id < char_base + kAlphabetSize; }
  bool is_structural(int id) const { return id < char_base && id != lang0 && id != lang1; }
  /// Renders a text id list: characters concatenated, other tokens by name.
  std::string render(std::span<const int> ids) const;
  std::vector<int> encode_chars(std::string_view text) const;
};

TextVocab build_vocab(const PromptPool& pool);
std::string vocab_manifest(const TextVocab& vocab);

struct Span {
  int begin = 0;
  int end = 0;  // exclusive
  int size() const { return end - begin; }
  bool contains(int t) const { return t >= begin && t < end; }
  friend bool operator==(Span, Span) = default;
};

struct TaskSequence {
  TaskKind kind = TaskKind::Asr;
  Phase phase = Phase::PT;
  std::vector<MultimodalToken> tokens;
  std::vector<std::uint8_t> loss_mask;
  std::vector<Modality> modality;
  Span condition, prompt, target;  // contents between section markers

  int length() const { return static_cast<int>(tokens.size()); }
};

enum class PtLossScope : std::uint8_t { Full, TargetOnly };

struct BuildOptions {
  /// Speaker-prompt frames for tts/t2st conditions.
  std::span<const CodecFrame> speaker_prompt{};
  PtLossScope pt_scope = PtLossScope::Full;
};

TaskSequence build_sequence(TaskKind kind, const ToySample& sample, int prompt_id, Phase phase,
                            const TextVocab& vocab, const PromptPool& pool, const CodecConfig& cfg,
                            const BuildOptions& opts = {});

/// Text-to-text sequence (text_lm layout) for held-out text and MT pairs.
/// `prompt_id < 0` means no prompt; otherwise an MT template from `phase`'s partition.
TaskSequence build_text_pair(std::string_view cond_text, std::string_view target_text, int prompt_id,
                             Phase phase, const TextVocab& vocab, const PromptPool& pool,
                             PtLossScope scope = PtLossScope::Full);

/// Plain text-LM sequence splitting `text` at 60% of its characters.
TaskSequence build_text_lm(std::string_view text, Phase phase, const TextVocab& vocab, const PromptPool& pool,
                           PtLossScope scope = PtLossScope::Full);

enum class Section : std::uint8_t { Condition, Prompt, Target };

struct Segment {
  Section section = Section::Condition;
  Modality modality = Modality::Text;
  std::vector<int> text;  // text segment contents
  Frames frames;          // speech segment contents (without the END frame)
  Span span;              // including boundary tokens
  friend bool operator==(const Segment&, const Segment&) = default;
};

struct ParsedSequence {
  Span condition, prompt, target;
  std::vector<Segment> segments;
  std::vector<Modality> modality;
};

/// Parses a full sequence (BOS ... EOS). Throws MalformedSequence.
ParsedSequence parse_sequence(std::span<const MultimodalToken> tokens, const TextVocab& vocab,
                              const CodecConfig& cfg);

/// Rebuilds the token stream from parsed segments.
std::vector<MultimodalToken> assemble(const ParsedSequence& parsed, const TextVocab& vocab, const CodecConfig& cfg);

std::vector<std::uint8_t> loss_mask_for(const TaskSequence& seq, Phase phase,
                                        PtLossScope scope = PtLossScope::Full);

/// Condition + prompt + TARGET + opening boundary of the target segment.
std::vector<MultimodalToken> decode_prefix(const TaskSequence& seq);

CodecFrame end_frame(const CodecConfig& cfg);
CodecFrame mask_frame(const CodecConfig& cfg);
bool is_end_frame(const CodecFrame& f, const CodecConfig& cfg);

std::string sequence_to_json(const TaskSequence& seq);
std::vector<MultimodalToken> tokens_from_json(std::string_view line);

}  // namespace clm
