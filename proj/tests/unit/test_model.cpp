#include <gtest/gtest.h>

#include <cmath>

#include "clm/error.hpp"
#include "clm/kernels.hpp"
#include "clm/model.hpp"
#include "clm/rng.hpp"

using namespace clm;

namespace {

ModelConfig tiny_cfg(int streams = 3) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_streams = streams;
  c.codebook_size = 8;
  c.text_vocab_size = 12;
  c.ffn_hidden = ModelConfig::ffn_for(16);
  c.max_seq_len = 64;
  return c;
}

struct OwnedSeq {
  std::vector<MultimodalToken> tokens;
  std::vector<std::uint8_t> mask;
  std::vector<Modality> modality;
  LossInput input() const { return {tokens, mask, modality}; }
};

OwnedSeq random_seq(Rng& rng, const ModelConfig& cfg, int len, double p_speech) {
  OwnedSeq s;
  for (int t = 0; t < len; ++t) {
    if (rng.uniform01() < p_speech) {
      CodecFrame f = CodecFrame::filled(cfg.n_streams, 0);
      for (int l = 0; l < cfg.n_streams; ++l) f.set(l, static_cast<int>(rng.uniform_int(0, cfg.codebook_size - 1)));
      s.tokens.emplace_back(f);
      s.modality.push_back(Modality::Speech);
    } else {
      s.tokens.emplace_back(TextToken{static_cast<int>(rng.uniform_int(0, cfg.text_vocab_size - 1))});
      s.modality.push_back(Modality::Text);
    }
    s.mask.push_back(t + 1 < len && rng.uniform01() < 0.8 ? 1 : 0);
  }
  return s;
}

std::vector<LossInput> inputs(const std::vector<OwnedSeq>& seqs) {
  std::vector<LossInput> in;
  for (const auto& s : seqs) in.push_back(s.input());
  return in;
}

ParamsSet64 random_params64(const ModelConfig& cfg, std::uint64_t seed, double std) {
  ParamsSet64 p = init_random(cfg, seed, std).cast<double>();
  Rng rng(seed ^ 0xabcdef);
  for (std::size_t i = 0; i < p.count(); ++i)
    if (p.name(i).ends_with("norm"))
      for (auto& v : p[i].values()) v = 1.0 + 0.1 * rng.normal();
  return p;
}

}  // namespace

TEST(ModelParams, NameSetFollowsConfig) {
  const auto cfg = tiny_cfg();
  ParamsSet p(cfg);
  EXPECT_TRUE(p.contains("blocks.1.attn.q"));
  EXPECT_TRUE(p.contains("head.codec.2"));
  EXPECT_FALSE(p.contains("head.codec.3"));
  EXPECT_EQ(p.at("embed.text").shape(), (std::vector<int>{12, 16}));
  EXPECT_EQ(p.at("head.text").shape(), (std::vector<int>{16, 12}));
  EXPECT_EQ(p.at("blocks.0.ffn.down").shape(), (std::vector<int>{40, 16}));
  EXPECT_EQ(ParamsSet(cfg).names(), p.names());
}

TEST(ModelConfigTest, FfnRounding) {
  EXPECT_EQ(ModelConfig::ffn_for(128), 344);
  EXPECT_EQ(ModelConfig::ffn_for(1024), 2728);
  ModelConfig bad = tiny_cfg();
  bad.n_heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(ModelInit, DeterministicUnitGainsAndStd) {
  ModelConfig cfg = tiny_cfg();
  cfg.text_vocab_size = 400;
  cfg.d_model = 64;
  cfg.n_heads = 4;
  const auto a = init_random(cfg, 7), b = init_random(cfg, 7), c = init_random(cfg, 8);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  for (float v : a.at("final_norm").values()) EXPECT_EQ(v, 1.0f);
  for (float v : a.at("blocks.0.attn_norm").values()) EXPECT_EQ(v, 1.0f);
  double s = 0, s2 = 0;
  const auto& t = a.at("embed.text");
  for (float v : t.values()) {
    s += v;
    s2 += double(v) * v;
  }
  const double n = static_cast<double>(t.size());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  EXPECT_GE(sd, 0.018);
  EXPECT_LE(sd, 0.022);
}

TEST(ModelInit, FromTextCopiesTextPartsOnly) {
  const auto cfg = tiny_cfg();
  const auto text = init_random(cfg, 1);
  const auto a = init_from_text(text, cfg, cfg, 10), b = init_from_text(text, cfg, cfg, 11);
  for (std::size_t i = 0; i < a.count(); ++i) {
    if (is_codec_param(a.name(i))) {
      EXPECT_FALSE(a[i] == b[i]) << a.name(i);
    } else {
      EXPECT_TRUE(a[i] == text.at(a.name(i))) << a.name(i);
      EXPECT_TRUE(a[i] == b[i]);
    }
  }
  ModelConfig other = cfg;
  other.text_vocab_size = 13;
  try {
    init_from_text(text, cfg, other, 1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("embed.text"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("head.text"), std::string::npos);
  }
}

TEST(ModelEmbed, SpeechSumsStreamTables) {
  const auto cfg = tiny_cfg();
  const auto p = init_random(cfg, 3);
  CodecFrame f{1, 5, 7};
  const std::vector<MultimodalToken> toks{TextToken{4}, f};
  const auto e = embed_sequence<float>(toks, p, cfg);
  for (int j = 0; j < cfg.d_model; ++j) {
    EXPECT_EQ(e(0, j), p.at("embed.text")[4 * 16 + j]);
    const double want = double(p.at("embed.codec.0")[1 * 16 + j]) + p.at("embed.codec.1")[5 * 16 + j] +
                        p.at("embed.codec.2")[7 * 16 + j];
    EXPECT_NEAR(e(1, j), want, 1e-6);
  }
  ParamsSet zero(cfg);
  const auto z = embed_sequence<float>(toks, zero, cfg);
  EXPECT_EQ(z.row(1).squaredNorm(), 0.0f);
  const std::vector<MultimodalToken> bad{TextToken{12}};
  EXPECT_THROW(embed_sequence<float>(bad, p, cfg), InputError);
  const std::vector<MultimodalToken> bad2{CodecFrame{1, 8, 0}};
  EXPECT_THROW(embed_sequence<float>(bad2, p, cfg), InputError);
}

TEST(ModelForward, ShapesCausalityAndOverlength) {
  auto cfg = tiny_cfg();
  const auto p = init_random(cfg, 5, 0.3);
  Rng rng(1);
  auto s = random_seq(rng, cfg, 10, 0.5);
  const auto a = forward<float>(s.tokens, p, cfg);
  EXPECT_EQ(a.hidden.rows(), 10);
  EXPECT_EQ(a.text_logits.cols(), 12);
  ASSERT_EQ(a.codec_logits.size(), 3u);
  EXPECT_EQ(a.codec_logits[2].cols(), 8);
  s.tokens[6] = is_speech(s.tokens[6]) ? MultimodalToken(TextToken{3}) : MultimodalToken(CodecFrame{1, 2, 3});
  const auto b = forward<float>(s.tokens, p, cfg);
  for (int t = 0; t < 6; ++t) {
    EXPECT_EQ(a.text_logits.row(t), b.text_logits.row(t));
    EXPECT_EQ(a.codec_logits[0].row(t), b.codec_logits[0].row(t));
  }
  EXPECT_NE(a.text_logits.row(6), b.text_logits.row(6));
  cfg.max_seq_len = 8;
  EXPECT_THROW(forward<float>(s.tokens, p, cfg), InputError);
}

TEST(ModelForward, IncrementalDecoderMatchesFullForward) {
  const auto cfg = tiny_cfg();
  const auto p = init_random(cfg, 9, 0.3);
  Rng rng(2);
  const auto s = random_seq(rng, cfg, 12, 0.5);
  const auto full = forward<float>(s.tokens, p, cfg);
  DecoderState st(p, cfg);
  for (int t = 0; t < 12; ++t) {
    st.push(s.tokens[static_cast<std::size_t>(t)]);
    const auto tl = st.text_logits();
    for (int v = 0; v < 12; ++v) EXPECT_NEAR(tl[static_cast<std::size_t>(v)], full.text_logits(t, v), 1e-4);
    const auto cl = st.codec_logits(1);
    for (int v = 0; v < 8; ++v) EXPECT_NEAR(cl[static_cast<std::size_t>(v)], full.codec_logits[1](t, v), 1e-4);
  }
}

TEST(ModelLoss, UniformLogitsGiveAnalyticValues) {
  const auto cfg = tiny_cfg();
  ParamsSet p = init_random(cfg, 4);
  p.at("head.text").fill(0);
  for (int l = 0; l < 3; ++l) p.at("head.codec." + std::to_string(l)).fill(0);
  Rng rng(3);
  auto sp = random_seq(rng, cfg, 8, 1.0);
  auto tx = random_seq(rng, cfg, 8, 0.0);
  const std::vector<LossInput> a{sp.input()}, b{tx.input()};
  EXPECT_NEAR(sequence_loss<float>(a, p, cfg).total, 3 * std::log(8.0), 1e-5);
  EXPECT_NEAR(sequence_loss<float>(b, p, cfg).total, std::log(12.0), 1e-5);
  ModelConfig mean = cfg;
  mean.stream_loss = StreamReduction::Mean;
  EXPECT_NEAR(sequence_loss<float>(a, p, mean).total, std::log(8.0), 1e-5);
}

TEST(ModelLoss, MatchesPerPositionOracle) {
  const auto cfg = tiny_cfg();
  const auto p = random_params64(cfg, 21, 0.4);
  Rng rng(4);
  std::vector<OwnedSeq> seqs{random_seq(rng, cfg, 9, 0.5), random_seq(rng, cfg, 6, 0.5), random_seq(rng, cfg, 11, 0.3)};
  const auto res = sequence_loss<double>(inputs(seqs), p, cfg);
  double sum = 0;
  int n = 0, nt = 0, ns = 0;
  for (const auto& s : seqs) {
    const auto out = forward<double>(s.tokens, p, cfg);
    for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t) {
      if (!s.mask[t]) continue;
      ++n;
      auto nll = [&](const Mat<double>& logits, int target) {
        long double mx = logits.row(t).maxCoeff(), z = 0;
        for (int v = 0; v < logits.cols(); ++v) z += std::exp((long double)logits(t, v) - mx);
        return double(-(logits(t, target) - mx - std::log(z)));
      };
      const auto& next = s.tokens[t + 1];
      if (is_speech(next)) {
        ++ns;
        for (int l = 0; l < 3; ++l) sum += nll(out.codec_logits[l], frame_of(next)[l]);
      } else {
        ++nt;
        sum += nll(out.text_logits, text_id(next));
      }
    }
  }
  EXPECT_NEAR(res.total, sum / n, 1e-10);
  EXPECT_EQ(res.n_text, nt);
  EXPECT_EQ(res.n_speech, ns);

  // additivity: batch loss is the count-weighted mean of per-sequence losses
  double acc = 0;
  for (const auto& s : seqs) {
    const std::vector<LossInput> one{s.input()};
    const auto r = sequence_loss<double>(one, p, cfg);
    acc += r.total * r.n_masked();
  }
  EXPECT_NEAR(res.total, acc / n, 1e-10);
}

TEST(ModelLoss, RejectsMaskOnFinalPosition) {
  const auto cfg = tiny_cfg();
  const auto p = init_random(cfg, 1);
  Rng rng(5);
  auto s = random_seq(rng, cfg, 5, 0.5);
  s.mask.back() = 1;
  const std::vector<LossInput> in{s.input()};
  EXPECT_THROW(sequence_loss<float>(in, p, cfg), ContractError);
}

TEST(ModelGrad, FullModelGradCheck) {
  for (auto red : {StreamReduction::Sum, StreamReduction::Mean}) {
    auto cfg = tiny_cfg();
    cfg.stream_loss = red;
    auto p = random_params64(cfg, 31, 0.3);
    Rng rng(6);
    std::vector<OwnedSeq> seqs{random_seq(rng, cfg, 9, 0.5), random_seq(rng, cfg, 7, 0.5)};
    const auto in = inputs(seqs);
    ParamsSet64 g(cfg);
    sequence_loss<double>(in, p, cfg, &g);
    std::vector<CheckedParam> cp;
    for (std::size_t i = 0; i < p.count(); ++i) cp.push_back({p.name(i), &p[i], &g[i]});
    Rng crng(7);
    const auto res = grad_check([&] { return sequence_loss<double>(in, p, cfg).total; }, cp, crng);
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst_name << "[" << res.worst_index << "] analytic "
                                       << res.worst_analytic << " numeric " << res.worst_numeric;
    EXPECT_GT(res.n_checked, 1000);
  }
}

TEST(ModelGrad, HeadIsolation) {
  const auto cfg = tiny_cfg();
  const auto p = random_params64(cfg, 41, 0.3);
  Rng rng(8);
  for (double ps : {0.0, 1.0}) {
    std::vector<OwnedSeq> seqs{random_seq(rng, cfg, 8, ps)};
    ParamsSet64 g(cfg);
    sequence_loss<double>(inputs(seqs), p, cfg, &g);
    for (std::size_t i = 0; i < g.count(); ++i) {
      const auto& n = g.name(i);
      const bool codec = is_codec_param(n), text = n == "embed.text" || n == "head.text";
      bool all_zero = true;
      for (double v : g[i].values()) all_zero = all_zero && v == 0.0;
      if ((ps == 0.0 && codec) || (ps == 1.0 && text)) {
        EXPECT_TRUE(all_zero) << n;
      }
      if (!codec && !text) {
        EXPECT_FALSE(all_zero) << n;
      }
    }
  }
}
