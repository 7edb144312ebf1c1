#include "clm/toyworld.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "clm/error.hpp"
#include "clm/rng.hpp"

namespace clm {

using ojson = nlohmann::ordered_json;

void CodecConfig::validate() const {
  if (n_streams_used < 1 || n_streams_used > kMaxStreams)
    throw ConfigError("codec: n_streams_used must be in [1, " + std::to_string(kMaxStreams) + "]");
  if (n_streams_used > n_streams_total) throw ConfigError("codec: n_streams_used exceeds n_streams_total");
  if (n_streams_total > 3) throw ConfigError("codec: toy codec defines 3 streams");
  if (codebook_size < 64) throw ConfigError("codec: codebook_size must be >= 64");
  if (frames_per_char < 1) throw ConfigError("codec: frames_per_char must be >= 1");
  if (end_index == mask_index) throw ConfigError("codec: END and MASK must differ");
  for (int r : {end_index, mask_index}) {
    if (r < content_limit() || r >= codebook_size)
      throw ConfigError("codec: reserved index " + std::to_string(r) + " overlaps the content range");
  }
}

CodecFrame::CodecFrame(std::initializer_list<int> values) {
  for (int v : values) idx[n++] = static_cast<std::int16_t>(v);
}

CodecFrame CodecFrame::filled(int n_streams, int value) {
  CodecFrame f;
  f.n = static_cast<std::uint8_t>(n_streams);
  for (int s = 0; s < n_streams; ++s) f.set(s, value);
  return f;
}

int char_id(char c) {
  if (c >= 'a' && c <= 'z') return c - 'a';
  if (c == ' ') return kSpaceId;
  throw InputError(std::string("character outside the toy alphabet: '") + c + "'");
}

char id_char(int id) { return id == kSpaceId ? ' ' : static_cast<char>('a' + id); }

Frames toy_encode(std::string_view text, int speaker_id, int lang_id, const CodecConfig& cfg) {
  if (text.empty()) throw InputError("toy_encode: empty text");
  if (speaker_id < 0 || speaker_id >= kNumSpeakers) throw InputError("toy_encode: speaker id out of range");
  if (lang_id != 0 && lang_id != 1) throw InputError("toy_encode: language id must be 0 or 1");
  const int F = cfg.frames_per_char;
  const int K = cfg.codebook_size;
  Frames out;
  out.reserve(text.size() * static_cast<std::size_t>(F));
  int p = 0;
  for (char ch : text) {
    const int c = char_id(ch);
    for (int f = 0; f < F; ++f, ++p) {
      const int streams[3] = {
          F * c + f,
          (speaker_id * 8 + (c + f) % 8) % K,
          (lang_id * 32 + (p * 5 + c) % 32) % K,
      };
      CodecFrame fr;
      fr.n = static_cast<std::uint8_t>(cfg.n_streams_used);
      for (int s = 0; s < cfg.n_streams_used; ++s) fr.set(s, streams[s]);
      out.push_back(fr);
    }
  }
  return out;
}

namespace {

// Smallest id among the maxima; ties resolved by `tiebreak` votes when given.
int vote(const std::map<int, int>& counts, const std::map<int, int>* tiebreak = nullptr) {
  int best = -1, best_n = -1, best_t = -1;
  for (const auto& [id, n] : counts) {
    int t = 0;
    if (tiebreak) {
      auto it = tiebreak->find(id);
      t = it == tiebreak->end() ? 0 : it->second;
    }
    if (n > best_n || (n == best_n && t > best_t)) {
      best = id;
      best_n = n;
      best_t = t;
    }
  }
  return best;
}

}  // namespace

DecodeResult toy_decode(std::span<const CodecFrame> frames, const CodecConfig& cfg) {
  if (frames.empty()) throw InputError("toy_decode: no frames");
  const int F = cfg.frames_per_char;
  DecodeResult res;

  std::size_t n = frames.size();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i][0] == cfg.end_index) {
      n = i;
      res.diag.truncated_at_end = true;
      break;
    }
  }
  res.diag.n_frames = static_cast<int>(n);
  if (n == 0) return res;

  const bool has_lang = cfg.n_streams_used >= 3;
  std::vector<int> frame_char(n, -1);  // stream0 evidence, -1 for masked
  std::vector<int> frame_lang(n, 0);
  std::map<int, int> lang_votes;
  for (std::size_t p = 0; p < n; ++p) {
    const int s0 = frames[p][0];
    if (s0 == cfg.mask_index) {
      ++res.diag.masked;
    } else if (s0 >= cfg.content_limit() || s0 < 0) {
      ++res.diag.out_of_range;
      frame_char[p] = s0 < 0 ? 0 : kAlphabetSize - 1;
    } else {
      frame_char[p] = s0 / F;
    }
    if (has_lang) {
      frame_lang[p] = (frames[p][2] / 32) & 1;
      ++lang_votes[frame_lang[p]];
    }
  }
  res.lang_id = has_lang ? vote(lang_votes) : 0;

  const std::size_t n_slots = (n + static_cast<std::size_t>(F) - 1) / static_cast<std::size_t>(F);
  res.diag.partial_slot = n % static_cast<std::size_t>(F) != 0;
  std::vector<int> slot_char(n_slots, 0);
  for (std::size_t k = 0; k < n_slots; ++k) {
    std::map<int, int> primary, secondary;
    for (std::size_t p = k * F; p < std::min(n, (k + 1) * F); ++p) {
      if (frame_char[p] >= 0) ++primary[frame_char[p]];
      if (has_lang) {
        const int c2 = (((frames[p][2] % 32) - static_cast<int>(p % 32) * 5) % 32 + 32) % 32;
        if (c2 < kAlphabetSize) ++secondary[c2];
      }
    }
    if (primary.empty()) {
      // every frame of the slot was masked: fall back to stream2 evidence
      slot_char[k] = secondary.empty() ? kSpaceId : vote(secondary);
    } else {
      slot_char[k] = vote(primary, has_lang ? &secondary : nullptr);
    }
    res.text.push_back(id_char(slot_char[k]));
  }

  int agree = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const bool char_ok = frame_char[p] == slot_char[p / F];
    const bool lang_ok = !has_lang || frame_lang[p] == res.lang_id;
    if (char_ok && lang_ok) ++agree;
  }
  res.diag.consistency = static_cast<double>(agree) / static_cast<double>(n);
  return res;
}

std::string translate(std::string_view text_src) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text_src) {
    if (c == ' ') {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  std::string out;
  for (auto it = words.rbegin(); it != words.rend(); ++it) {
    if (!out.empty()) out.push_back(' ');
    out.append(it->rbegin(), it->rend());
  }
  return out;
}

namespace {

bool is_content(const CodecFrame& f, const CodecConfig& cfg) {
  return f[0] != cfg.end_index && f[0] != cfg.mask_index;
}

}  // namespace

SpeakerEstimate speaker_of(std::span<const CodecFrame> frames, const CodecConfig& cfg) {
  SpeakerEstimate est;
  if (cfg.n_streams_used < 2) return est;
  std::map<int, int> votes;
  int total = 0;
  for (const auto& f : frames) {
    if (!is_content(f, cfg)) continue;
    ++votes[f[1] / 8];
    ++total;
  }
  if (total == 0) return est;
  est.speaker_id = vote(votes);
  est.agreement = static_cast<double>(votes[est.speaker_id]) / total;
  return est;
}

double speaker_agreement(std::span<const CodecFrame> frames, int speaker_id, const CodecConfig& cfg) {
  if (cfg.n_streams_used < 2) return 0.0;
  int total = 0, hit = 0;
  for (const auto& f : frames) {
    if (!is_content(f, cfg)) continue;
    ++total;
    if (f[1] / 8 == speaker_id) ++hit;
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / total;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_of(std::string_view id) {
  switch (mix64(fnv1a(id)) % 10) {
    case 0: return Split::Test;
    case 1: return Split::Dev;
    default: return Split::Train;
  }
}

const std::vector<ToySample>& Corpus::split(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Dev: return dev;
    case Split::Test: return test;
  }
  return train;
}

namespace {

std::string make_id(char prefix, int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%c%06d", prefix, i);
  return buf;
}

std::string random_sentence(Rng& rng, const std::vector<std::string>& lexicon, std::pair<int, int> range) {
  const int n_words = static_cast<int>(rng.uniform_int(range.first, range.second));
  std::string s;
  for (int w = 0; w < n_words; ++w) {
    if (w) s.push_back(' ');
    s += lexicon[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(lexicon.size()) - 1))];
  }
  return s;
}

}  // namespace

Corpus gen_corpus(const CorpusSpec& spec) {
  if (spec.n_samples < 10) throw ConfigError("gen_corpus: n_samples must be >= 10");
  if (spec.lexicon_size < 2) throw ConfigError("gen_corpus: lexicon_size must be >= 2");
  if (spec.sentence_words.first < 1 || spec.sentence_words.second < spec.sentence_words.first)
    throw ConfigError("gen_corpus: invalid sentence length range");
  spec.codec.validate();

  Corpus corpus;
  corpus.spec = spec;
  const Rng root(spec.seed);

  // Lexicon: distinct words of 2-6 letters.
  Rng lex_rng = root.derive("lexicon");
  std::set<std::string> seen;
  while (static_cast<int>(corpus.lexicon.size()) < spec.lexicon_size) {
    const int len = static_cast<int>(lex_rng.uniform_int(2, 6));
    std::string w;
    for (int i = 0; i < len; ++i) w.push_back(static_cast<char>('a' + lex_rng.uniform_int(0, 25)));
    if (seen.insert(w).second) corpus.lexicon.push_back(w);
  }

  for (int i = 0; i < spec.n_samples; ++i) {
    Rng rng = root.derive("sample", static_cast<std::uint64_t>(i));
    ToySample s;
    s.id = make_id('s', i);
    s.text_src = random_sentence(rng, corpus.lexicon, spec.sentence_words);
    s.speaker_id = static_cast<int>(rng.uniform_int(0, kNumSpeakers - 1));
    s.lang_src = i % 2;
    s.lang_tgt = 1 - s.lang_src;
    s.text_tgt = translate(s.text_src);
    s.speech_src = toy_encode(s.text_src, s.speaker_id, s.lang_src, spec.codec);
    s.speech_tgt = toy_encode(s.text_tgt, s.speaker_id, s.lang_tgt, spec.codec);
    switch (split_of(s.id)) {
      case Split::Train: corpus.train.push_back(std::move(s)); break;
      case Split::Dev: corpus.dev.push_back(std::move(s)); break;
      case Split::Test: corpus.test.push_back(std::move(s)); break;
    }
  }

  const int n_text = spec.n_text < 0 ? spec.n_samples : spec.n_text;
  for (int i = 0; i < n_text; ++i) {
    Rng rng = root.derive("text", static_cast<std::uint64_t>(i));
    TextRecord r{make_id('t', i), random_sentence(rng, corpus.lexicon, spec.sentence_words)};
    (split_of(r.id) == Split::Test ? corpus.text_test : corpus.text_train).push_back(std::move(r));
  }
  const int n_mt = spec.n_mt < 0 ? spec.n_samples / 2 : spec.n_mt;
  for (int i = 0; i < n_mt; ++i) {
    Rng rng = root.derive("mt", static_cast<std::uint64_t>(i));
    MtRecord r;
    r.id = make_id('m', i);
    r.src = random_sentence(rng, corpus.lexicon, spec.sentence_words);
    r.tgt = translate(r.src);
    corpus.mt.push_back(std::move(r));
  }
  return corpus;
}

Frames speaker_prompt_for(const ToySample& sample, std::span<const ToySample> pool, int n_frames) {
  const ToySample* other = nullptr;
  std::size_t start = 0;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].id == sample.id) {
      start = i + 1;
      break;
    }
  }
  for (std::size_t k = 0; k < pool.size() && !other; ++k) {
    const ToySample& cand = pool[(start + k) % pool.size()];
    if (cand.speaker_id == sample.speaker_id && cand.id != sample.id) other = &cand;
  }
  const Frames& src = other ? other->speech_src : sample.speech_src;
  const std::size_t n = std::min<std::size_t>(src.size(), static_cast<std::size_t>(n_frames));
  return Frames(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(n));
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

ojson frames_to_json(const Frames& frames) {
  ojson arr = ojson::array();
  for (const auto& f : frames) {
    ojson row = ojson::array();
    for (int s = 0; s < f.size(); ++s) row.push_back(f[s]);
    arr.push_back(std::move(row));
  }
  return arr;
}

Frames frames_from_json(const ojson& arr, const CodecConfig& cfg) {
  Frames out;
  for (const auto& row : arr) {
    if (!row.is_array() || static_cast<int>(row.size()) != cfg.n_streams_used)
      throw InputError("frame has wrong number of streams");
    CodecFrame f;
    f.n = static_cast<std::uint8_t>(cfg.n_streams_used);
    for (int s = 0; s < cfg.n_streams_used; ++s) {
      const int v = row[static_cast<std::size_t>(s)].get<int>();
      if (v < 0 || v >= cfg.codebook_size) throw InputError("frame index out of range");
      f.set(s, v);
    }
    out.push_back(f);
  }
  return out;
}

ojson codec_to_json(const CodecConfig& c) {
  return ojson{{"n_streams_total", c.n_streams_total}, {"n_streams_used", c.n_streams_used},
               {"codebook_size", c.codebook_size},     {"frames_per_char", c.frames_per_char},
               {"end_index", c.end_index},             {"mask_index", c.mask_index}};
}

CodecConfig codec_from_json(const ojson& j) {
  CodecConfig c;
  c.n_streams_total = j.at("n_streams_total").get<int>();
  c.n_streams_used = j.at("n_streams_used").get<int>();
  c.codebook_size = j.at("codebook_size").get<int>();
  c.frames_per_char = j.at("frames_per_char").get<int>();
  c.end_index = j.at("end_index").get<int>();
  c.mask_index = j.at("mask_index").get<int>();
  c.validate();
  return c;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

}  // namespace

std::string sample_to_json(const ToySample& s) {
  ojson j;
  j["id"] = s.id;
  j["speaker_id"] = s.speaker_id;
  j["lang_src"] = s.lang_src;
  j["lang_tgt"] = s.lang_tgt;
  j["text_src"] = s.text_src;
  j["text_tgt"] = s.text_tgt;
  j["speech_src"] = frames_to_json(s.speech_src);
  j["speech_tgt"] = frames_to_json(s.speech_tgt);
  return j.dump();
}

ToySample sample_from_json(std::string_view line, const CodecConfig& cfg) {
  ojson j;
  try {
    j = ojson::parse(line);
  } catch (const ojson::parse_error& e) {
    throw InputError(std::string("malformed sample record: ") + e.what());
  }
  ToySample s;
  try {
    s.id = j.at("id").get<std::string>();
    s.speaker_id = j.at("speaker_id").get<int>();
    s.lang_src = j.at("lang_src").get<int>();
    s.lang_tgt = j.at("lang_tgt").get<int>();
    s.text_src = j.at("text_src").get<std::string>();
    s.text_tgt = j.at("text_tgt").get<std::string>();
    s.speech_src = frames_from_json(j.at("speech_src"), cfg);
    s.speech_tgt = frames_from_json(j.at("speech_tgt"), cfg);
  } catch (const ojson::exception& e) {
    throw InputError(std::string("malformed sample record: ") + e.what());
  }
  if (s.speaker_id < 0 || s.speaker_id >= kNumSpeakers) throw InputError("sample speaker id out of range");
  if (s.speech_src.empty() || s.speech_tgt.empty()) throw InputError("sample has empty speech");
  return s;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (Split sp : {Split::Train, Split::Dev, Split::Test}) {
    std::vector<std::string> lines;
    for (const auto& s : corpus.split(sp)) lines.push_back(sample_to_json(s));
    write_lines(dir / (std::string(split_name(sp)) + ".jsonl"), lines);
  }
  std::vector<std::string> text_lines;
  for (const auto* part : {&corpus.text_train, &corpus.text_test})
    for (const auto& r : *part) {
      ojson j;
      j["id"] = r.id;
      j["text"] = r.text;
      text_lines.push_back(j.dump());
    }
  write_lines(dir / "text.jsonl", text_lines);
  std::vector<std::string> mt_lines;
  for (const auto& r : corpus.mt) {
    ojson j;
    j["id"] = r.id;
    j["src"] = r.src;
    j["tgt"] = r.tgt;
    mt_lines.push_back(j.dump());
  }
  write_lines(dir / "mt.jsonl", mt_lines);

  const auto& sp = corpus.spec;
  ojson m;
  m["codec"] = codec_to_json(sp.codec);
  m["seed"] = sp.seed;
  m["n_samples"] = sp.n_samples;
  m["lexicon_size"] = sp.lexicon_size;
  m["sentence_words"] = {sp.sentence_words.first, sp.sentence_words.second};
  m["n_text"] = sp.n_text;
  m["n_mt"] = sp.n_mt;
  m["splits"] = {{"train", corpus.train.size()},
                 {"dev", corpus.dev.size()},
                 {"test", corpus.test.size()},
                 {"text_train", corpus.text_train.size()},
                 {"text_test", corpus.text_test.size()},
                 {"mt", corpus.mt.size()}};
  m["lexicon"] = corpus.lexicon;
  write_lines(dir / "manifest.json", {m.dump(2)});
}

Corpus read_corpus(const std::filesystem::path& dir) {
  std::ifstream min(dir / "manifest.json");
  if (!min) throw InputError("missing corpus manifest in " + dir.string());
  ojson m;
  try {
    m = ojson::parse(min);
  } catch (const ojson::parse_error& e) {
    throw InputError(std::string("corrupt corpus manifest: ") + e.what());
  }
  Corpus c;
  c.spec.codec = codec_from_json(m.at("codec"));
  c.spec.seed = m.at("seed").get<std::uint64_t>();
  c.spec.n_samples = m.at("n_samples").get<int>();
  c.spec.lexicon_size = m.at("lexicon_size").get<int>();
  c.spec.sentence_words = {m.at("sentence_words")[0].get<int>(), m.at("sentence_words")[1].get<int>()};
  c.spec.n_text = m.at("n_text").get<int>();
  c.spec.n_mt = m.at("n_mt").get<int>();
  c.lexicon = m.at("lexicon").get<std::vector<std::string>>();
  for (Split sp : {Split::Train, Split::Dev, Split::Test}) {
    auto& dst = sp == Split::Train ? c.train : sp == Split::Dev ? c.dev : c.test;
    for (const auto& l : read_lines(dir / (std::string(split_name(sp)) + ".jsonl")))
      dst.push_back(sample_from_json(l, c.spec.codec));
  }
  for (const auto& l : read_lines(dir / "text.jsonl")) {
    const auto j = ojson::parse(l);
    TextRecord r{j.at("id").get<std::string>(), j.at("text").get<std::string>()};
    (split_of(r.id) == Split::Test ? c.text_test : c.text_train).push_back(std::move(r));
  }
  for (const auto& l : read_lines(dir / "mt.jsonl")) {
    const auto j = ojson::parse(l);
    c.mt.push_back({j.at("id").get<std::string>(), j.at("src").get<std::string>(), j.at("tgt").get<std::string>()});
  }
  return c;
}

}  // namespace clm
