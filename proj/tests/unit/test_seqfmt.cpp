#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "clm/error.hpp"
#include "clm/seqfmt.hpp"

using namespace clm;

namespace {

struct Fixture {
  PromptPool pool = PromptPool::standard();
  TextVocab vocab = build_vocab(pool);
  CodecConfig codec;
  Corpus corpus = [] {
    CorpusSpec s;
    s.n_samples = 60;
    return gen_corpus(s);
  }();
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

const TaskKind kAll[] = {TaskKind::SpeechContinuation, TaskKind::TextLm, TaskKind::Asr,    TaskKind::Tts,
                         TaskKind::S2t,                TaskKind::T2st,   TaskKind::SftAsr, TaskKind::SftTts,
                         TaskKind::SftS2t,             TaskKind::SftS2s};

TaskSequence build(TaskKind k, Phase ph, int prompt = 0, std::size_t sample = 0) {
  const auto& s = fx().corpus.train[sample];
  const auto sp = speaker_prompt_for(s, fx().corpus.train);
  BuildOptions o;
  o.speaker_prompt = sp;
  return build_sequence(k, s, prompt, ph, fx().vocab, fx().pool, fx().codec, o);
}

}  // namespace

TEST(Vocab, DeterministicAndDistinct) {
  const auto a = build_vocab(fx().pool), b = build_vocab(fx().pool);
  EXPECT_EQ(a.names, b.names);
  EXPECT_NE(a.bos, a.eos);
  std::set<std::string> names(a.names.begin(), a.names.end());
  EXPECT_EQ(names.size(), a.names.size());
  EXPECT_LT(a.size(), 300);
  // specials + alphabet + unique template words
  std::set<std::string> words;
  for (const auto& fam : fx().pool.templates)
    for (const auto& t : fam) {
      std::size_t i = 0;
      while (i < t.size()) {
        const auto j = std::min(t.find(' ', i), t.size());
        if (j > i) words.insert(t.substr(i, j - i));
        i = j + 1;
      }
    }
  EXPECT_EQ(a.size(), 10 + 27 + static_cast<int>(words.size()));
  // manifest lists one entry per id
  const auto m = vocab_manifest(a);
  EXPECT_EQ(std::count(m.begin(), m.end(), '\n'), a.size());
}

TEST(PromptPool, PtAndSftDisjoint) {
  for (int f = 0; f < kNumPromptFamilies; ++f) {
    const auto fam = static_cast<PromptFamily>(f);
    EXPECT_GE(fx().pool.of(fam).size(), 10u);
    const auto pt = fx().pool.partition(fam, Phase::PT), sft = fx().pool.partition(fam, Phase::SFT);
    for (const auto& t : sft) EXPECT_EQ(std::find(pt.begin(), pt.end(), t), pt.end());
    EXPECT_EQ(pt.size() + sft.size(), fx().pool.of(fam).size());
  }
}

TEST(Build, AsrRoundTrip) {
  const auto seq = build(TaskKind::SftAsr, Phase::SFT);
  const auto p = parse_sequence(seq.tokens, fx().vocab, fx().codec);
  EXPECT_EQ(p.condition, seq.condition);
  EXPECT_EQ(p.target, seq.target);
  const auto& tgt = p.segments.back();
  EXPECT_EQ(tgt.section, Section::Target);
  EXPECT_EQ(fx().vocab.render(tgt.text), fx().corpus.train[0].text_src);
}

TEST(Build, TtsConditionHasSixPromptFrames) {
  const auto seq = build(TaskKind::Tts, Phase::PT);
  const auto p = parse_sequence(seq.tokens, fx().vocab, fx().codec);
  std::vector<const Segment*> cond;
  for (const auto& s : p.segments)
    if (s.section == Section::Condition) cond.push_back(&s);
  ASSERT_EQ(cond.size(), 2u);
  EXPECT_EQ(cond[0]->modality, Modality::Speech);
  EXPECT_EQ(cond[0]->frames.size(), 6u);
  EXPECT_EQ(cond[1]->modality, Modality::Text);
}

TEST(Build, S2sForbiddenInPretraining) { EXPECT_THROW(build(TaskKind::SftS2s, Phase::PT), ContractError); }

TEST(Build, LayoutMarkers) {
  const auto& v = fx().vocab;
  const auto seq = build(TaskKind::SftTts, Phase::SFT);
  EXPECT_EQ(text_id(seq.tokens.front()), v.bos);
  EXPECT_EQ(text_id(seq.tokens.back()), v.eos);
  EXPECT_EQ(text_id(seq.tokens[1]), v.cond);
  EXPECT_EQ(text_id(seq.tokens[static_cast<std::size_t>(seq.condition.end)]), v.prompt);
  EXPECT_EQ(text_id(seq.tokens[static_cast<std::size_t>(seq.target.begin - 1)]), v.target);
  // speech target ends with an all-END frame, then EOS
  const auto& last = frame_of(seq.tokens[seq.tokens.size() - 2]);
  for (int s = 0; s < last.size(); ++s) EXPECT_EQ(last[s], fx().codec.end_index);
}

TEST(Build, RoundTripAllKinds) {
  int checked = 0;
  for (TaskKind k : kAll)
    for (Phase ph : {Phase::PT, Phase::SFT}) {
      if (k == TaskKind::SftS2s && ph == Phase::PT) continue;
      for (std::size_t i = 0; i < 10; ++i) {
        const auto seq = build(k, ph, static_cast<int>(i % 2), i);
        const auto p = parse_sequence(seq.tokens, fx().vocab, fx().codec);
        ASSERT_EQ(p.condition, seq.condition);
        ASSERT_EQ(p.prompt, seq.prompt);
        ASSERT_EQ(p.target, seq.target);
        ASSERT_EQ(p.modality, seq.modality);
        ASSERT_EQ(assemble(p, fx().vocab, fx().codec), seq.tokens);
        ++checked;
      }
    }
  EXPECT_EQ(checked, 190);
}

TEST(Build, ContinuationSplitsAtSixtyPercent) {
  const auto seq = build(TaskKind::SpeechContinuation, Phase::PT);
  const auto p = parse_sequence(seq.tokens, fx().vocab, fx().codec);
  std::size_t cond = 0, tgt = 0;
  for (const auto& s : p.segments) (s.section == Section::Target ? tgt : cond) += s.frames.size();
  const auto n = fx().corpus.train[0].speech_src.size() + fx().corpus.train[0].speech_tgt.size();
  // one side of the pair, split 60/40
  EXPECT_TRUE(cond + tgt == fx().corpus.train[0].speech_src.size() || cond + tgt == fx().corpus.train[0].speech_tgt.size())
      << n;
  EXPECT_NEAR(static_cast<double>(cond) / static_cast<double>(cond + tgt), 0.6, 0.05);
}

TEST(Parse, FrameAfterBosIsMalformed) {
  std::vector<MultimodalToken> toks = {TextToken{fx().vocab.bos}, toy_encode("a", 0, 0, fx().codec)[0],
                                       TextToken{fx().vocab.eos}};
  EXPECT_THROW(parse_sequence(toks, fx().vocab, fx().codec), MalformedSequence);
}

TEST(Parse, UnterminatedSpeechIsMalformed) {
  auto seq = build(TaskKind::SftTts, Phase::SFT);
  // drop the END frame
  seq.tokens.erase(seq.tokens.end() - 2);
  EXPECT_THROW(parse_sequence(seq.tokens, fx().vocab, fx().codec), MalformedSequence);
}

TEST(LossMask, SftCoversTarget) {
  for (TaskKind k : {TaskKind::SftAsr, TaskKind::SftTts, TaskKind::SftS2t, TaskKind::SftS2s}) {
    const auto seq = build(k, Phase::SFT);
    int sum = 0;
    for (auto m : seq.loss_mask) sum += m;
    // target contents plus the closing EOS
    EXPECT_EQ(sum, seq.length() - seq.target.begin) << task_name(k);
    for (int t = 0; t < seq.length(); ++t)
      if (seq.loss_mask[static_cast<std::size_t>(t)]) EXPECT_GE(t + 1, seq.target.begin);
  }
}

TEST(LossMask, PtCoversEverything) {
  for (TaskKind k : {TaskKind::Asr, TaskKind::Tts, TaskKind::TextLm, TaskKind::SpeechContinuation}) {
    const auto seq = build(k, Phase::PT);
    int sum = 0;
    for (auto m : seq.loss_mask) sum += m;
    EXPECT_EQ(sum, seq.length() - 1);
    EXPECT_EQ(seq.loss_mask.back(), 0);
  }
}

TEST(LossMask, TargetOnlyScope) {
  const auto& s = fx().corpus.train[0];
  BuildOptions o;
  o.pt_scope = PtLossScope::TargetOnly;
  const auto seq = build_sequence(TaskKind::Asr, s, 0, Phase::PT, fx().vocab, fx().pool, fx().codec, o);
  int sum = 0;
  for (auto m : seq.loss_mask) sum += m;
  EXPECT_EQ(sum, seq.length() - seq.target.begin);
}

TEST(LossMask, TextSequenceScoresText) {
  const auto seq = build_text_lm("hello there", Phase::PT, fx().vocab, fx().pool);
  for (int t = 0; t + 1 < seq.length(); ++t)
    if (seq.loss_mask[static_cast<std::size_t>(t)]) EXPECT_EQ(seq.modality[static_cast<std::size_t>(t + 1)], Modality::Text);
}

TEST(DecodePrefix, EndsAtTargetOpening) {
  const auto seq = build(TaskKind::SftAsr, Phase::SFT);
  const auto pre = decode_prefix(seq);
  EXPECT_EQ(static_cast<int>(pre.size()), seq.target.begin + 1);
  EXPECT_EQ(text_id(pre.back()), fx().vocab.text_start);
}

TEST(Json, TokensRoundTrip) {
  const auto seq = build(TaskKind::T2st, Phase::PT);
  const auto line = sequence_to_json(seq);
  EXPECT_EQ(tokens_from_json(line), seq.tokens);
}

TEST(Names, TaskNames) {
  for (TaskKind k : kAll) EXPECT_EQ(task_from_name(task_name(k)), k);
  EXPECT_THROW(task_from_name("nope"), ConfigError);
}
