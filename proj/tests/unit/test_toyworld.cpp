#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "clm/error.hpp"
#include "clm/rng.hpp"
#include "clm/toyworld.hpp"

using namespace clm;

namespace {

CodecConfig cfg() { return CodecConfig{}; }

// independent re-statement of the encoding formulas
std::vector<std::array<int, 3>> ref_encode(const std::string& t, int spk, int lang, int F, int K) {
  std::vector<std::array<int, 3>> out;
  int p = 0;
  for (char ch : t) {
    const int c = ch == ' ' ? 26 : ch - 'a';
    for (int f = 0; f < F; ++f, ++p)
      out.push_back({F * c + f, (spk * 8 + (c + f) % 8) % K, (lang * 32 + (p * 5 + c) % 32) % K});
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Codec, SingleCharExample) {
  const auto fr = toy_encode("a", 2, 0, cfg());
  ASSERT_EQ(fr.size(), 2u);
  EXPECT_EQ(fr[0], (CodecFrame{0, 16, 0}));
  EXPECT_EQ(fr[1], (CodecFrame{1, 17, 5}));
}

TEST(Codec, EmptyTextRejected) { EXPECT_THROW(toy_encode("", 0, 0, cfg()), InputError); }

TEST(Codec, BadInputsRejected) {
  EXPECT_THROW(toy_encode("A", 0, 0, cfg()), InputError);
  EXPECT_THROW(toy_encode("a", 8, 0, cfg()), InputError);
  EXPECT_THROW(toy_encode("a", 0, 2, cfg()), InputError);
}

TEST(Codec, MatchesIndependentFormula) {
  const auto fr = toy_encode("ab", 0, 1, cfg());
  ASSERT_EQ(fr.size(), 4u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(fr[i][0], i);
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::string t;
    const int n = static_cast<int>(rng.uniform_int(1, 12));
    for (int i = 0; i < n; ++i) t.push_back(rng.uniform_int(0, 5) == 0 ? ' ' : static_cast<char>('a' + rng.uniform_int(0, 25)));
    const int spk = static_cast<int>(rng.uniform_int(0, 7)), lang = static_cast<int>(rng.uniform_int(0, 1));
    const auto got = toy_encode(t, spk, lang, cfg());
    const auto want = ref_encode(t, spk, lang, 2, 64);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i)
      for (int s = 0; s < 3; ++s) ASSERT_EQ(got[i][s], want[i][static_cast<std::size_t>(s)]);
  }
}

TEST(Codec, DecodeInvertsEncode) {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    std::string t;
    const int n = static_cast<int>(rng.uniform_int(1, 20));
    for (int i = 0; i < n; ++i) t.push_back(static_cast<char>('a' + rng.uniform_int(0, 25)));
    const int spk = static_cast<int>(rng.uniform_int(0, 7)), lang = static_cast<int>(rng.uniform_int(0, 1));
    const auto fr = toy_encode(t, spk, lang, cfg());
    const auto d = toy_decode(fr, cfg());
    ASSERT_EQ(d.text, t);
    ASSERT_EQ(d.lang_id, lang);
    ASSERT_DOUBLE_EQ(d.diag.consistency, 1.0);
    const auto sp = speaker_of(fr, cfg());
    ASSERT_EQ(sp.speaker_id, spk);
    ASSERT_DOUBLE_EQ(sp.agreement, 1.0);
    for (const auto& f : fr) {
      ASSERT_NE(f[0], cfg().end_index);
      ASSERT_NE(f[0], cfg().mask_index);
    }
  }
}

TEST(Codec, DecodeExampleFrames) {
  const Frames fr = {CodecFrame{0, 16, 0}, CodecFrame{1, 17, 5}};
  const auto d = toy_decode(fr, cfg());
  EXPECT_EQ(d.text, "a");
  EXPECT_EQ(d.lang_id, 0);
}

TEST(Codec, SingleCorruptionKeepsMajority) {
  auto fr = toy_encode("abcdefghij", 3, 0, cfg());
  // frame 5 belongs to 'c'; point it at 'x' (a neighbouring char slot would tie)
  fr[5].set(0, 2 * 23);
  const auto d = toy_decode(fr, cfg());
  EXPECT_LT(d.diag.consistency, 1.0);
  EXPECT_EQ(d.text, "abcdefghij");
}

TEST(Codec, EndInsideContentTruncates) {
  auto fr = toy_encode("abcd", 0, 0, cfg());
  fr[4].set(0, cfg().end_index);
  const auto d = toy_decode(fr, cfg());
  EXPECT_EQ(d.text, "ab");
  EXPECT_TRUE(d.diag.truncated_at_end);
}

TEST(Codec, OutOfRangeFlagged) {
  auto fr = toy_encode("ab", 0, 0, cfg());
  fr[3].set(0, 56);
  const auto d = toy_decode(fr, cfg());
  EXPECT_EQ(d.diag.out_of_range, 1);
}

TEST(Codec, ConfigValidation) {
  CodecConfig c;
  c.codebook_size = 32;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.end_index = c.mask_index;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.n_streams_used = 4;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Translate, Examples) {
  EXPECT_EQ(translate("ab cd"), "dc ba");
  EXPECT_EQ(translate("x"), "x");
  EXPECT_EQ(translate(translate("hello world toy")), "hello world toy");
  EXPECT_EQ(translate(""), "");
}

TEST(Speaker, HalfAndHalf) {
  auto a = toy_encode("abcd", 1, 0, cfg());
  const auto b = toy_encode("efgh", 6, 0, cfg());
  a.insert(a.end(), b.begin(), b.end());
  EXPECT_DOUBLE_EQ(speaker_of(a, cfg()).agreement, 0.5);
}

TEST(Corpus, DeterministicFiles) {
  CorpusSpec spec;
  spec.seed = 7;
  spec.n_samples = 100;
  const auto tmp = std::filesystem::temp_directory_path() / "clm_test_corpus";
  std::filesystem::remove_all(tmp);
  write_corpus(gen_corpus(spec), tmp / "a");
  write_corpus(gen_corpus(spec), tmp / "b");
  for (const char* f : {"train.jsonl", "dev.jsonl", "test.jsonl", "text.jsonl", "mt.jsonl", "manifest.json"})
    EXPECT_EQ(slurp(tmp / "a" / f), slurp(tmp / "b" / f)) << f;
  const Corpus back = read_corpus(tmp / "a");
  const Corpus orig = gen_corpus(spec);
  ASSERT_EQ(back.train.size(), orig.train.size());
  for (std::size_t i = 0; i < back.train.size(); ++i) {
    EXPECT_EQ(back.train[i].id, orig.train[i].id);
    EXPECT_EQ(back.train[i].speech_tgt, orig.train[i].speech_tgt);
  }
  std::filesystem::remove_all(tmp);
}

TEST(Corpus, SamplesAreConsistent) {
  CorpusSpec spec;
  spec.seed = 1;
  spec.n_samples = 200;
  const Corpus c = gen_corpus(spec);
  EXPECT_EQ(c.train.size() + c.dev.size() + c.test.size(), 200u);
  std::set<std::string> train_ids;
  for (const auto& s : c.train) train_ids.insert(s.id);
  for (const auto& s : c.test) EXPECT_FALSE(train_ids.count(s.id));
  for (const auto* split : {&c.train, &c.dev, &c.test})
    for (const auto& s : *split) {
      const auto d = toy_decode(s.speech_src, spec.codec);
      EXPECT_EQ(d.text, s.text_src);
      EXPECT_EQ(d.lang_id, s.lang_src);
      EXPECT_EQ(s.text_tgt, translate(s.text_src));
      EXPECT_EQ(toy_decode(s.speech_tgt, spec.codec).text, s.text_tgt);
      EXPECT_NE(s.lang_src, s.lang_tgt);
      EXPECT_GE(s.speaker_id, 0);
      EXPECT_LT(s.speaker_id, 8);
      int words = 1;
      for (char ch : s.text_src) words += ch == ' ';
      EXPECT_GE(words, 2);
      EXPECT_LE(words, 8);
    }
  for (const auto& w : c.lexicon) {
    EXPECT_GE(w.size(), 2u);
    EXPECT_LE(w.size(), 6u);
  }
}

TEST(Corpus, TooFewSamples) {
  CorpusSpec spec;
  spec.n_samples = 5;
  EXPECT_THROW(gen_corpus(spec), ConfigError);
}

TEST(Corpus, SpeakerPromptFromSameSpeaker) {
  CorpusSpec spec;
  spec.n_samples = 100;
  const Corpus c = gen_corpus(spec);
  for (const auto& s : c.train) {
    const auto p = speaker_prompt_for(s, c.train);
    ASSERT_EQ(p.size(), 6u);
    EXPECT_EQ(speaker_of(p, spec.codec).speaker_id, s.speaker_id);
  }
}

TEST(Corpus, JsonLineRoundTrip) {
  CorpusSpec spec;
  spec.n_samples = 20;
  const Corpus c = gen_corpus(spec);
  const auto& s = c.train.front();
  const auto line = sample_to_json(s);
  const auto back = sample_from_json(line, spec.codec);
  EXPECT_EQ(back.id, s.id);
  EXPECT_EQ(back.text_src, s.text_src);
  EXPECT_EQ(back.speech_src, s.speech_src);
  EXPECT_EQ(sample_to_json(back), line);
  for (const char* key : {"\"id\"", "\"speaker_id\"", "\"lang_src\"", "\"lang_tgt\"", "\"text_src\"", "\"text_tgt\"",
                          "\"speech_src\"", "\"speech_tgt\""})
    EXPECT_NE(line.find(key), std::string::npos) << key;
}

TEST(Codec, FewerStreamsUsed) {
  CodecConfig c;
  c.n_streams_used = 2;
  c.validate();
  const auto f = toy_encode("ab c", 3, 1, c);
  ASSERT_EQ(f.size(), 8u);
  for (const auto& fr : f) EXPECT_EQ(fr.size(), 2);
  EXPECT_EQ(toy_decode(f, c).text, "ab c");
  EXPECT_EQ(speaker_of(f, c).speaker_id, 3);
}
