#pragma once

// Deterministic bilingual toy world: a symbolic, exactly invertible codec and
// a seeded paired corpus of (speech, transcription, translation, speech).

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace clm {

inline constexpr int kMaxStreams = 8;
inline constexpr int kAlphabetSize = 27;  // a..z plus space
inline constexpr int kSpaceId = 26;
inline constexpr int kNumSpeakers = 8;

struct CodecConfig {
  int n_streams_total = 3;  // L
  int n_streams_used = 3;   // L'
  int codebook_size = 64;
  int frames_per_char = 2;
  int end_index = 60;
  int mask_index = 61;

  void validate() const;
  /// One past the largest stream-0 index used by content frames.
  int content_limit() const { return frames_per_char * kAlphabetSize; }
};

/// One codec frame: L' codebook indices stored inline.
struct CodecFrame {
  std::array<std::int16_t, kMaxStreams> idx{};
  std::uint8_t n = 0;

  CodecFrame() = default;
  CodecFrame(std::initializer_list<int> values);
  static CodecFrame filled(int n_streams, int value);

  int operator[](int s) const { return idx[static_cast<std::size_t>(s)]; }
  void set(int s, int v) { idx[static_cast<std::size_t>(s)] = static_cast<std::int16_t>(v); }
  int size() const { return n; }

  friend bool operator==(const CodecFrame& a, const CodecFrame& b) {
    if (a.n != b.n) return false;
    for (int s = 0; s < a.n; ++s)
      if (a[s] != b[s]) return false;
    return true;
  }
};

using Frames = std::vector<CodecFrame>;

int char_id(char c);  // throws InputError outside the alphabet
char id_char(int id);

/// Encodes toy-alphabet text as codec frames. Frame p of character c at
/// sub-frame f carries: stream0 = F*c + f, stream1 = speaker/phase mix,
/// stream2 = language/position mix.
Frames toy_encode(std::string_view text, int speaker_id, int lang_id, const CodecConfig& cfg);

struct DecodeDiagnostics {
  double consistency = 0.0;  // fraction of frames agreeing with the voted char and lang
  bool truncated_at_end = false;
  bool partial_slot = false;  // frame count not a multiple of frames_per_char
  int out_of_range = 0;       // stream0 beyond the content range (not reserved)
  int masked = 0;             // stream0 == MASK
  int n_frames = 0;           // content frames considered
};

struct DecodeResult {
  std::string text;
  int lang_id = 0;
  DecodeDiagnostics diag;
};

DecodeResult toy_decode(std::span<const CodecFrame> frames, const CodecConfig& cfg);

/// Reverses characters within each word and reverses word order.
std::string translate(std::string_view text_src);

struct SpeakerEstimate {
  int speaker_id = 0;
  double agreement = 0.0;
};

SpeakerEstimate speaker_of(std::span<const CodecFrame> frames, const CodecConfig& cfg);

/// Fraction of content frames whose stream1 speaker field equals `speaker_id`.
double speaker_agreement(std::span<const CodecFrame> frames, int speaker_id, const CodecConfig& cfg);

enum class Split { Train, Dev, Test };
const char* split_name(Split s);
Split split_of(std::string_view id);

struct ToySample {
  std::string id;
  int speaker_id = 0;
  int lang_src = 0;
  int lang_tgt = 1;
  std::string text_src;
  std::string text_tgt;
  Frames speech_src;
  Frames speech_tgt;
};

struct TextRecord {
  std::string id;
  std::string text;
};

struct MtRecord {
  std::string id;
  std::string src;
  std::string tgt;
};

struct CorpusSpec {
  std::uint64_t seed = 0;
  int n_samples = 100;
  CodecConfig codec;
  int lexicon_size = 64;
  std::pair<int, int> sentence_words{2, 8};
  int n_text = -1;  // -1: same as n_samples
  int n_mt = -1;    // -1: n_samples / 2
};

struct Corpus {
  CorpusSpec spec;
  std::vector<std::string> lexicon;
  std::vector<ToySample> train, dev, test;
  std::vector<TextRecord> text_train, text_test;  // held-out text-only split
  std::vector<MtRecord> mt;                        // held-out MT split

  const std::vector<ToySample>& split(Split s) const;
};

Corpus gen_corpus(const CorpusSpec& spec);

/// Another utterance by the same speaker (first 6 frames), searched in
/// `pool` starting after `sample`; falls back to the sample itself when it is
/// the speaker's only utterance.
Frames speaker_prompt_for(const ToySample& sample, std::span<const ToySample> pool, int n_frames = 6);

// Corpus files: {train,dev,test}.jsonl, text.jsonl, mt.jsonl, manifest.json.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

std::string sample_to_json(const ToySample& s);
ToySample sample_from_json(std::string_view line, const CodecConfig& cfg);

}  // namespace clm
