#include "clm/seqfmt.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "clm/error.hpp"

namespace clm {

namespace {

constexpr const char* kTaskNames[kNumTaskKinds] = {
    "speech_continuation", "text_lm", "asr", "tts", "s2t", "t2st", "sft_asr", "sft_tts", "sft_s2t", "sft_s2s",
};

constexpr const char* kSpecialNames[] = {
    "<bos>", "<eos>", "<text_start>", "<text_end>", "<speech_start>",
    "<cond>", "<prompt>", "<target>", "<lang_0>", "<lang_1>",
};

std::string char_token_name(int c) { return c == kSpaceId ? "<space>" : std::string(1, id_char(c)); }

}  // namespace

const char* task_name(TaskKind k) { return kTaskNames[static_cast<int>(k)]; }

TaskKind task_from_name(std::string_view name) {
  for (int i = 0; i < kNumTaskKinds; ++i)
    if (name == kTaskNames[i]) return static_cast<TaskKind>(i);
  throw ConfigError("unknown task kind: " + std::string(name));
}

const char* phase_name(Phase p) { return p == Phase::PT ? "pt" : "sft"; }

TaskKind base_task(TaskKind k) {
  switch (k) {
    case TaskKind::SftAsr: return TaskKind::Asr;
    case TaskKind::SftTts: return TaskKind::Tts;
    case TaskKind::SftS2t: return TaskKind::S2t;
    default: return k;
  }
}

Modality target_modality(TaskKind k) {
  switch (base_task(k)) {
    case TaskKind::SpeechContinuation:
    case TaskKind::Tts:
    case TaskKind::T2st:
    case TaskKind::SftS2s: return Modality::Speech;
    default: return Modality::Text;
  }
}

std::optional<PromptFamily> prompt_family(TaskKind k) {
  switch (base_task(k)) {
    case TaskKind::Asr: return PromptFamily::Asr;
    case TaskKind::Tts: return PromptFamily::Tts;
    case TaskKind::S2t: return PromptFamily::S2t;
    case TaskKind::T2st: return PromptFamily::T2st;
    case TaskKind::SftS2s: return PromptFamily::S2s;
    default: return std::nullopt;
  }
}

PromptPool PromptPool::standard() {
  PromptPool p;
  p.templates = {
      {"transcribe the speech", "write down what is said", "convert the audio to text",
       "what does the speaker say", "give the transcript of this recording", "recognize the spoken words",
       "turn this speech into text", "produce the text of the utterance", "spell out the spoken sentence",
       "tell me the words you hear"},
      {"read the text aloud", "speak this sentence", "synthesize the speech in this voice",
       "say the words with the given voice", "generate audio for the text", "produce speech from this text",
       "voice the sentence like the prompt", "turn the text into speech", "pronounce the following words",
       "render this line as spoken audio"},
      {"translate the speech into text", "write the translation of what is said", "give the translated transcript",
       "convert the speech to translated text", "what is the translation of this audio",
       "render the spoken words in the other language", "translate the recording to written form",
       "produce the foreign text for this speech", "put the utterance into the other tongue as text",
       "tell me the translated words"},
      {"speak the translation of this text", "translate the text and say it", "read out the translated sentence",
       "voice the translation in this voice", "generate translated speech", "produce spoken translation of the text",
       "say this text in the other language", "turn the text into translated audio",
       "pronounce the sentence after translating it", "render the translation as speech"},
      {"translate the speech", "speak the translation of the audio", "convert the speech into the other language",
       "repeat this in the other tongue", "say what was said in translation",
       "produce translated speech from the recording", "give the spoken translation",
       "turn the utterance into foreign speech", "render the audio in the target language",
       "interpret the speech aloud"},
      {"translate the text", "give the translation", "write this in the other language",
       "convert the sentence to the other tongue", "what is the translation", "render the words in translation",
       "produce the foreign sentence", "turn the text into the other language", "put this sentence into translation",
       "tell me the translated sentence"},
  };
  return p;
}

std::vector<std::string> PromptPool::partition(PromptFamily f, Phase phase) const {
  const auto& all = of(f);
  const std::size_t n_pt = all.size() * 8 / 10;
  if (phase == Phase::PT) return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_pt)};
  return {all.begin() + static_cast<std::ptrdiff_t>(n_pt), all.end()};
}

int TextVocab::word(std::string_view w) const {
  auto it = index.find(w);
  if (it == index.end()) throw ConfigError("word not in vocabulary: " + std::string(w));
  return it->second;
}

std::string TextVocab::render(std::span<const int> ids) const {
  std::string out;
  bool prev_word = false;
  for (int id : ids) {
    if (is_char(id)) {
      out.push_back(id_char(id - char_base));
      prev_word = false;
    } else {
      if (prev_word || (!out.empty() && out.back() != ' ')) out.push_back(' ');
      out += (id >= 0 && id < size()) ? names[static_cast<std::size_t>(id)] : "<unk>";
      prev_word = true;
    }
  }
  return out;
}

std::vector<int> TextVocab::encode_chars(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(char_token(c));
  return ids;
}

TextVocab build_vocab(const PromptPool& pool) {
  TextVocab v;
  for (const char* s : kSpecialNames) v.names.emplace_back(s);
  for (int c = 0; c < kAlphabetSize; ++c) v.names.push_back(char_token_name(c));
  std::set<std::string> reserved(v.names.begin(), v.names.end());

  std::set<std::string> words;
  for (const auto& family : pool.templates)
    for (const auto& tmpl : family) {
      std::istringstream in(tmpl);
      std::string w;
      while (in >> w) {
        if (reserved.count(w)) throw ConfigError("template word collides with a reserved token: " + w);
        words.insert(w);
      }
    }
  v.names.insert(v.names.end(), words.begin(), words.end());
  for (std::size_t i = 0; i < v.names.size(); ++i) v.index.emplace(v.names[i], static_cast<int>(i));
  return v;
}

std::string vocab_manifest(const TextVocab& vocab) {
  std::string out;
  for (int i = 0; i < vocab.size(); ++i) out += vocab.names[static_cast<std::size_t>(i)] + "\t" + std::to_string(i) + "\n";
  return out;
}

CodecFrame end_frame(const CodecConfig& cfg) { return CodecFrame::filled(cfg.n_streams_used, cfg.end_index); }
CodecFrame mask_frame(const CodecConfig& cfg) { return CodecFrame::filled(cfg.n_streams_used, cfg.mask_index); }
bool is_end_frame(const CodecFrame& f, const CodecConfig& cfg) { return f[0] == cfg.end_index; }

// ---------------------------------------------------------------------------
// Building

namespace {

class SequenceBuilder {
 public:
  SequenceBuilder(const TextVocab& vocab, const CodecConfig& cfg) : vocab_(vocab), cfg_(cfg) {
    text(vocab.bos);
  }

  void text(int id) {
    seq_.tokens.emplace_back(TextToken{id});
    seq_.modality.push_back(Modality::Text);
  }

  void frame(const CodecFrame& f) {
    seq_.tokens.emplace_back(f);
    seq_.modality.push_back(Modality::Speech);
  }

  void text_segment(std::span<const int> ids) {
    text(vocab_.text_start);
    for (int id : ids) text(id);
    text(vocab_.text_end);
  }

  void speech_segment(std::span<const CodecFrame> frames) {
    text(vocab_.speech_start);
    for (const auto& f : frames) frame(f);
    frame(end_frame(cfg_));
  }

  void begin_condition() {
    text(vocab_.cond);
    seq_.condition.begin = pos();
  }
  void begin_prompt() {
    seq_.condition.end = pos();
    text(vocab_.prompt);
    seq_.prompt.begin = pos();
  }
  void begin_target() {
    seq_.prompt.end = pos();
    text(vocab_.target);
    seq_.target.begin = pos();
  }

  TaskSequence finish(TaskKind kind, Phase phase, PtLossScope scope) {
    text(vocab_.eos);
    seq_.target.end = pos();
    seq_.kind = kind;
    seq_.phase = phase;
    seq_.loss_mask = loss_mask_for(seq_, phase, scope);
    return std::move(seq_);
  }

 private:
  int pos() const { return static_cast<int>(seq_.tokens.size()); }

  const TextVocab& vocab_;
  const CodecConfig& cfg_;
  TaskSequence seq_;
};

std::vector<int> prompt_ids(PromptFamily family, int prompt_id, Phase phase, const TextVocab& vocab,
                            const PromptPool& pool) {
  const auto options = pool.partition(family, phase);
  if (prompt_id < 0 || prompt_id >= static_cast<int>(options.size()))
    throw ContractError("prompt id " + std::to_string(prompt_id) + " outside the " + phase_name(phase) +
                        " partition");
  std::vector<int> ids;
  std::istringstream in(options[static_cast<std::size_t>(prompt_id)]);
  std::string w;
  while (in >> w) ids.push_back(vocab.word(w));
  return ids;
}

int split_point(std::size_t n) {
  const int k = static_cast<int>(n * 6 / 10);
  return std::clamp(k, 1, static_cast<int>(n) - 1);
}

}  // namespace

TaskSequence build_sequence(TaskKind kind, const ToySample& sample, int prompt_id, Phase phase,
                            const TextVocab& vocab, const PromptPool& pool, const CodecConfig& cfg,
                            const BuildOptions& opts) {
  if (kind == TaskKind::SftS2s && phase == Phase::PT)
    throw ContractError("speech-to-speech translation is excluded from pre-training");
  if (kind == TaskKind::TextLm) {
    return build_text_lm(sample.text_src, phase, vocab, pool, opts.pt_scope);
  }

  SequenceBuilder b(vocab, cfg);
  const TaskKind base = base_task(kind);
  std::vector<int> prompt;
  if (auto fam = prompt_family(kind)) {
    prompt = prompt_ids(*fam, prompt_id, phase, vocab, pool);
    if (base == TaskKind::S2t || base == TaskKind::T2st || base == TaskKind::SftS2s)
      prompt.push_back(vocab.lang_token(sample.lang_tgt));
  }

  auto need_prompt_speech = [&] {
    if (opts.speaker_prompt.empty()) throw ContractError(std::string(task_name(kind)) + " needs a speaker prompt");
  };

  b.begin_condition();
  switch (base) {
    case TaskKind::SpeechContinuation: {
      if (sample.speech_src.size() < 2) throw ContractError("speech continuation needs at least two frames");
      const int k = split_point(sample.speech_src.size());
      b.speech_segment(std::span(sample.speech_src).first(static_cast<std::size_t>(k)));
      b.begin_prompt();
      b.begin_target();
      b.speech_segment(std::span(sample.speech_src).subspan(static_cast<std::size_t>(k)));
      break;
    }
    case TaskKind::Asr:
    case TaskKind::S2t: {
      b.speech_segment(sample.speech_src);
      b.begin_prompt();
      b.text_segment(prompt);
      b.begin_target();
      const auto& tgt = base == TaskKind::Asr ? sample.text_src : sample.text_tgt;
      if (tgt.empty()) throw ContractError("empty target text");
      b.text_segment(vocab.encode_chars(tgt));
      break;
    }
    case TaskKind::Tts:
    case TaskKind::T2st: {
      need_prompt_speech();
      b.speech_segment(opts.speaker_prompt);
      if (sample.text_src.empty()) throw ContractError("empty condition text");
      b.text_segment(vocab.encode_chars(sample.text_src));
      b.begin_prompt();
      b.text_segment(prompt);
      b.begin_target();
      const auto& tgt = base == TaskKind::Tts ? sample.speech_src : sample.speech_tgt;
      if (tgt.empty()) throw ContractError("empty target speech");
      b.speech_segment(tgt);
      break;
    }
    case TaskKind::SftS2s: {
      b.speech_segment(sample.speech_src);
      b.begin_prompt();
      b.text_segment(prompt);
      b.begin_target();
      if (sample.speech_tgt.empty()) throw ContractError("empty target speech");
      b.speech_segment(sample.speech_tgt);
      break;
    }
    default: throw ContractError("unsupported task kind");
  }
  return b.finish(kind, phase, opts.pt_scope);
}

TaskSequence build_text_pair(std::string_view cond_text, std::string_view target_text, int prompt_id, Phase phase,
                             const TextVocab& vocab, const PromptPool& pool, PtLossScope scope) {
  if (target_text.empty()) throw ContractError("empty target text");
  // Only a CodecConfig for end frames is needed by the builder; text pairs have none.
  static const CodecConfig kNoCodec;
  SequenceBuilder b(vocab, kNoCodec);
  b.begin_condition();
  if (!cond_text.empty()) b.text_segment(vocab.encode_chars(cond_text));
  b.begin_prompt();
  if (prompt_id >= 0) b.text_segment(prompt_ids(PromptFamily::Mt, prompt_id, phase, vocab, pool));
  b.begin_target();
  b.text_segment(vocab.encode_chars(target_text));
  return b.finish(TaskKind::TextLm, phase, scope);
}

TaskSequence build_text_lm(std::string_view text, Phase phase, const TextVocab& vocab, const PromptPool& pool,
                           PtLossScope scope) {
  if (text.size() < 2) throw ContractError("text LM needs at least two characters");
  const auto k = static_cast<std::size_t>(split_point(text.size()));
  return build_text_pair(text.substr(0, k), text.substr(k), -1, phase, vocab, pool, scope);
}

std::vector<std::uint8_t> loss_mask_for(const TaskSequence& seq, Phase phase, PtLossScope scope) {
  const int T = seq.length();
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(T), 0);
  const bool full = phase == Phase::PT && scope == PtLossScope::Full;
  for (int t = 0; t + 1 < T; ++t) mask[static_cast<std::size_t>(t)] = full || seq.target.contains(t + 1) ? 1 : 0;
  return mask;
}

std::vector<MultimodalToken> decode_prefix(const TaskSequence& seq) {
  // target.begin holds the opening boundary of the target segment
  return {seq.tokens.begin(), seq.tokens.begin() + seq.target.begin + 1};
}

// ---------------------------------------------------------------------------
// Parsing

ParsedSequence parse_sequence(std::span<const MultimodalToken> tokens, const TextVocab& vocab,
                              const CodecConfig& cfg) {
  ParsedSequence out;
  const int T = static_cast<int>(tokens.size());
  auto fail = [](const std::string& msg, int t) {
    throw MalformedSequence(msg + " at position " + std::to_string(t));
  };
  auto text_at = [&](int t) -> int {
    if (t >= T) fail("unexpected end of sequence", t);
    if (is_speech(tokens[static_cast<std::size_t>(t)])) fail("codec frame outside a speech segment", t);
    return text_id(tokens[static_cast<std::size_t>(t)]);
  };
  auto expect = [&](int t, int id, const char* what) {
    if (text_at(t) != id) fail(std::string("expected ") + what, t);
  };

  out.modality.resize(tokens.size());
  for (int t = 0; t < T; ++t)
    out.modality[static_cast<std::size_t>(t)] = is_speech(tokens[static_cast<std::size_t>(t)]) ? Modality::Speech : Modality::Text;

  expect(0, vocab.bos, "<bos>");
  expect(1, vocab.cond, "<cond>");
  int t = 2;
  const int markers[3] = {vocab.prompt, vocab.target, vocab.eos};
  Span* spans[3] = {&out.condition, &out.prompt, &out.target};
  for (int sec = 0; sec < 3; ++sec) {
    spans[sec]->begin = t;
    while (true) {
      const int id = text_at(t);
      if (id == markers[sec]) break;
      Segment seg;
      seg.section = static_cast<Section>(sec);
      seg.span.begin = t;
      if (id == vocab.text_start) {
        seg.modality = Modality::Text;
        ++t;
        while (true) {
          const int c = text_at(t);
          if (c == vocab.text_end) break;
          if (vocab.is_structural(c)) fail("structural token inside a text segment", t);
          seg.text.push_back(c);
          ++t;
        }
        ++t;
      } else if (id == vocab.speech_start) {
        seg.modality = Modality::Speech;
        ++t;
        while (true) {
          if (t >= T || !is_speech(tokens[static_cast<std::size_t>(t)])) fail("unterminated speech segment", t);
          const CodecFrame& f = frame_of(tokens[static_cast<std::size_t>(t)]);
          if (f.size() != cfg.n_streams_used) fail("frame has wrong stream count", t);
          ++t;
          if (is_end_frame(f, cfg)) break;
          seg.frames.push_back(f);
        }
        if (seg.frames.empty()) fail("speech segment without content frames", t - 1);
      } else {
        fail("expected a segment boundary or section marker", t);
      }
      seg.span.end = t;
      out.segments.push_back(std::move(seg));
    }
    spans[sec]->end = sec == 2 ? t + 1 : t;
    ++t;
  }
  if (t != T) fail("tokens after <eos>", t);
  return out;
}

std::vector<MultimodalToken> assemble(const ParsedSequence& parsed, const TextVocab& vocab, const CodecConfig& cfg) {
  std::vector<MultimodalToken> out;
  out.emplace_back(TextToken{vocab.bos});
  const int markers[4] = {vocab.cond, vocab.prompt, vocab.target, vocab.eos};
  for (int sec = 0; sec < 3; ++sec) {
    out.emplace_back(TextToken{markers[sec]});
    for (const auto& seg : parsed.segments) {
      if (static_cast<int>(seg.section) != sec) continue;
      if (seg.modality == Modality::Text) {
        out.emplace_back(TextToken{vocab.text_start});
        for (int id : seg.text) out.emplace_back(TextToken{id});
        out.emplace_back(TextToken{vocab.text_end});
      } else {
        out.emplace_back(TextToken{vocab.speech_start});
        for (const auto& f : seg.frames) out.emplace_back(f);
        out.emplace_back(end_frame(cfg));
      }
    }
  }
  out.emplace_back(TextToken{markers[3]});
  return out;
}

// ---------------------------------------------------------------------------
// JSON

std::string sequence_to_json(const TaskSequence& seq) {
  nlohmann::ordered_json j;
  j["task"] = task_name(seq.kind);
  j["phase"] = phase_name(seq.phase);
  auto toks = nlohmann::ordered_json::array();
  for (const auto& tok : seq.tokens) {
    if (is_speech(tok)) {
      const auto& f = frame_of(tok);
      std::vector<int> v(static_cast<std::size_t>(f.size()));
      for (int s = 0; s < f.size(); ++s) v[static_cast<std::size_t>(s)] = f[s];
      toks.push_back({{"s", v}});
    } else {
      toks.push_back({{"t", text_id(tok)}});
    }
  }
  j["tokens"] = std::move(toks);
  j["loss_mask"] = seq.loss_mask;
  j["sections"] = {{seq.condition.begin, seq.condition.end},
                   {seq.prompt.begin, seq.prompt.end},
                   {seq.target.begin, seq.target.end}};
  return j.dump();
}

std::vector<MultimodalToken> tokens_from_json(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  std::vector<MultimodalToken> out;
  for (const auto& tok : j.at("tokens")) {
    if (tok.contains("t")) {
      out.emplace_back(TextToken{tok["t"].get<int>()});
    } else {
      CodecFrame f;
      for (const auto& v : tok.at("s")) f.idx[f.n++] = static_cast<std::int16_t>(v.get<int>());
      out.emplace_back(f);
    }
  }
  return out;
}

}  // namespace clm
