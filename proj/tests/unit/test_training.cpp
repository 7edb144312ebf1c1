#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "clm/error.hpp"
#include "clm/training.hpp"

using namespace clm;
namespace fs = std::filesystem;

namespace {

struct World {
  PromptPool pool = PromptPool::standard();
  TextVocab vocab = build_vocab(pool);
  Corpus corpus = [] {
    CorpusSpec s;
    s.n_samples = 40;
    s.lexicon_size = 16;
    s.sentence_words = {1, 2};
    return gen_corpus(s);
  }();
  ModelConfig model = [this] {
    ModelConfig m;
    m.d_model = 16;
    m.n_layers = 1;
    m.n_heads = 2;
    m.ffn_hidden = 40;
    m.text_vocab_size = vocab.size();
    m.max_seq_len = 256;
    return m;
  }();
  TaskEnv env() const { return {vocab, pool, corpus.spec.codec}; }
  TrainData data() const { return {corpus.train, corpus.text_train, corpus.mt}; }
};

const World& world() {
  static const World w;
  return w;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("clm_training_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

TrainConfig small(Regime r, int steps) {
  TrainConfig c = TrainConfig::desk(r);
  c.steps = steps;
  c.batch_size = 4;
  c.seed = 3;
  return c;
}

}  // namespace

// ---- schedule

TEST(Schedule, FullScaleEndpoints) {
  const TrainConfig c = TrainConfig::full_scale();
  const int warm = static_cast<int>(std::lround(c.warmup_frac * c.steps));
  EXPECT_DOUBLE_EQ(lr_at(0, c), 0.0);
  EXPECT_NEAR(lr_at(warm, c), 1e-5, 1e-18);
  EXPECT_NEAR(lr_at(c.steps, c), 1e-6, 1e-18);
  EXPECT_NEAR(lr_at(warm / 2, c), 0.5e-5, 1e-12);
  for (int s = warm; s < c.steps; s += 997) EXPECT_GE(lr_at(s, c), lr_at(s + 997 > c.steps ? c.steps : s + 997, c));
}

// ---- clipping

TEST(Clip, HalvesWhenNormIsTwo) {
  ParamsSet g(world().model);
  g[0][0] = 2.0f;
  const double pre = clip_global_norm(g, 1.0);
  EXPECT_DOUBLE_EQ(pre, 2.0);
  EXPECT_FLOAT_EQ(g[0][0], 1.0f);
}

TEST(Clip, UnderThresholdUnchanged) {
  ParamsSet g(world().model);
  g[1][3] = 0.3f;
  g[2][0] = 0.4f;
  const ParamsSet before = g;
  EXPECT_NEAR(clip_global_norm(g, 1.0), 0.5, 1e-7);
  EXPECT_EQ(g, before);
}

TEST(Clip, RandomGradsEndAtMinNorm) {
  Rng rng(4);
  for (double scale : {0.001, 0.1, 1.0, 10.0}) {
    ParamsSet g(world().model);
    for (std::size_t i = 0; i < g.count(); ++i)
      for (auto& v : g[i].values()) v = static_cast<float>(scale * rng.normal());
    const double pre = clip_global_norm(g, 1.0);
    double post = 0;
    for (std::size_t i = 0; i < g.count(); ++i)
      for (float v : g[i].values()) post += static_cast<double>(v) * v;
    EXPECT_NEAR(std::sqrt(post), std::min(pre, 1.0), 1e-6 * std::max(1.0, std::min(pre, 1.0)));
  }
}

TEST(Clip, NanNamesParameter) {
  ParamsSet g(world().model);
  const std::string name = g.name(4);
  g[4][1] = std::nanf("");
  try {
    clip_global_norm(g, 1.0);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find(name), std::string::npos) << e.what();
  }
}

// ---- AdamW

TEST(AdamW, ZeroGradNoDecayIsIdentity) {
  ParamsSet p = init_random(world().model, 1);
  const ParamsSet before = p;
  ParamsSet g(world().model);
  OptState st = OptState::zeros_like(p);
  adamw_step(p, g, st, 1e-3, AdamW{0.9, 0.95, 1e-8, 0.0});
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 1);
}

TEST(AdamW, ZeroGradDecayShrinks) {
  ParamsSet p = init_random(world().model, 1);
  const ParamsSet before = p;
  ParamsSet g(world().model);
  OptState st = OptState::zeros_like(p);
  const double lr = 1e-2, wd = 0.1;
  adamw_step(p, g, st, lr, AdamW{0.9, 0.95, 1e-8, wd});
  for (std::size_t i = 0; i < p.count(); ++i)
    for (std::size_t j = 0; j < p[i].size(); ++j)
      ASSERT_FLOAT_EQ(p[i][j], static_cast<float>(before[i][j] * (1.0 - lr * wd)));
}

TEST(AdamW, TwoStepsHandOracle) {
  ParamsSet p(world().model);
  p[0][0] = 0.5f;
  OptState st = OptState::zeros_like(p);
  const double lr = 0.1, b1 = 0.9, b2 = 0.95, eps = 1e-8, wd = 0.1;
  const double grads[2] = {0.2, -0.4};
  double x = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    ParamsSet g(world().model);
    g[0][0] = static_cast<float>(grads[t - 1]);
    adamw_step(p, g, st, lr, AdamW{b1, b2, eps, wd});
    // hand evaluation
    x *= 1 - lr * wd;
    m = b1 * m + (1 - b1) * grads[t - 1];
    v = b2 * v + (1 - b2) * grads[t - 1] * grads[t - 1];
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    x -= lr * mh / (std::sqrt(vh) + eps);
    EXPECT_NEAR(p[0][0], x, 1e-6) << "step " << t;
  }
  // step 1: x = 0.5*0.99 - 0.1*sign(0.2)
  EXPECT_EQ(st.step, 2);
}

TEST(AdamW, UpdateWithinSafetyBound) {
  ParamsSet p = init_random(world().model, 2);
  OptState st = OptState::zeros_like(p);
  Rng rng(8);
  const double lr = 1e-3, wd = 0.1, b1 = 0.9;
  for (int step = 0; step < 5; ++step) {
    ParamsSet g(world().model);
    for (std::size_t i = 0; i < g.count(); ++i)
      for (auto& v : g[i].values()) v = static_cast<float>(rng.normal());
    clip_global_norm(g, 1.0);
    const ParamsSet before = p;
    adamw_step(p, g, st, lr, AdamW{b1, 0.95, 1e-8, wd});
    for (std::size_t i = 0; i < p.count(); ++i)
      for (std::size_t j = 0; j < p[i].size(); ++j) {
        const double bound = lr * 2.0 / (1 - b1) + lr * wd * std::abs(before[i][j]) + 1e-7;
        ASSERT_LE(std::abs(p[i][j]) - std::abs(before[i][j]), bound);
      }
  }
}

// ---- mixer

TEST(Mixer, DefaultsAndValidation) {
  const MixerConfig m;
  double s = 0;
  for (double w : m.weights) s += w;
  EXPECT_NEAR(s, 1.0, 1e-12);
  for (int i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(m.weights[static_cast<std::size_t>(i)], 0.15);
  EXPECT_DOUBLE_EQ(m.weights[6], 0.05);
  EXPECT_DOUBLE_EQ(m.weights[7], 0.05);
  MixerConfig bad;
  bad.weights[0] = 0.2;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Mixer, DegenerateAlwaysSame) {
  Rng rng(1);
  const auto m = MixerConfig::only(MixCategory::Asr);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(sample_task(m, rng), MixCategory::Asr);
}

TEST(Mixer, FrequenciesAndChiSquare) {
  Rng rng(2024);
  const MixerConfig m;
  std::array<int, kNumMixCategories> counts{};
  const int N = 100000;
  for (int i = 0; i < N; ++i) ++counts[static_cast<std::size_t>(sample_task(m, rng))];
  double chi = 0;
  for (int c = 0; c < kNumMixCategories; ++c) {
    const double f = static_cast<double>(counts[static_cast<std::size_t>(c)]) / N;
    const double w = m.weights[static_cast<std::size_t>(c)];
    EXPECT_NEAR(f, w, c < 6 ? 0.005 : 0.003) << category_name(static_cast<MixCategory>(c));
    chi += std::pow(counts[static_cast<std::size_t>(c)] - N * w, 2) / (N * w);
  }
  EXPECT_LT(chi, 24.322);  // chi-square 0.999 quantile, 7 dof
}

// ---- time masking

TEST(TimeMask, ZeroRatioIsIdentity) {
  const auto fr = toy_encode("hello world", 1, 0, world().corpus.spec.codec);
  Rng rng(1);
  EXPECT_EQ(time_mask(fr, 0.0, 8, rng, world().corpus.spec.codec), fr);
}

TEST(TimeMask, TenPercentOfHundredFrames) {
  const auto& cc = world().corpus.spec.codec;
  const auto fr = toy_encode(std::string(50, 'q'), 1, 0, cc);
  ASSERT_EQ(fr.size(), 100u);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto out = time_mask(fr, 0.1, 8, rng, cc);
    int masked = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (out[i] == fr[i]) continue;
      ++masked;
      for (int s = 0; s < out[i].size(); ++s) ASSERT_EQ(out[i][s], cc.mask_index);
    }
    EXPECT_GE(masked, 8);
    EXPECT_LE(masked, 12);
  }
}

TEST(TimeMask, Deterministic) {
  const auto& cc = world().corpus.spec.codec;
  const auto fr = toy_encode("some words here", 2, 1, cc);
  Rng a(9), b(9);
  EXPECT_EQ(time_mask(fr, 0.2, 4, a, cc), time_mask(fr, 0.2, 4, b, cc));
}

// ---- configs

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.min_lr = 2 * c.peak_lr;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.clip_norm = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.mask_ratio = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(TrainConfig::from_json(nlohmann::json{{"stepz", 3}}, TrainConfig{}), ConfigError);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c = TrainConfig::desk(Regime::Sft);
  c.sft_task = TaskKind::SftTts;
  c.mixer = MixerConfig::only(MixCategory::T2st);
  c.seed = 77;
  const auto j = c.to_json();
  const auto back = TrainConfig::from_json(nlohmann::json::parse(j.dump()), TrainConfig{});
  EXPECT_EQ(back.to_json(), j);
}

TEST(TrainConfig, FullScalePreset) {
  const auto c = TrainConfig::full_scale();
  EXPECT_DOUBLE_EQ(c.peak_lr, 1e-5);
  EXPECT_DOUBLE_EQ(c.min_lr, 1e-6);
  EXPECT_DOUBLE_EQ(c.clip_norm, 1.0);
  EXPECT_EQ(TrainConfig::desk(Regime::Sft).steps, 2000);
  EXPECT_EQ(TrainConfig::desk(Regime::CptJoint).steps, 5000);
  EXPECT_EQ(TrainConfig::desk(Regime::CptJoint).batch_size, 16);
}

// ---- data selection per regime

TEST(Data, RegimesSelectTheirTasks) {
  const auto& w = world();
  auto kinds = [&](const TrainConfig& c) {
    std::map<TaskKind, int> k;
    for (int step = 0; step < 50; ++step)
      for (const auto& s : assemble_batch(c, w.data(), w.env(), step)) ++k[s.kind];
    return k;
  };
  const auto sp = kinds(small(Regime::CptSpeech, 10));
  ASSERT_EQ(sp.size(), 1u);
  EXPECT_EQ(sp.begin()->first, TaskKind::SpeechContinuation);
  const auto tx = kinds(small(Regime::TextPt, 10));
  ASSERT_EQ(tx.size(), 1u);
  EXPECT_EQ(tx.begin()->first, TaskKind::TextLm);
  const auto jt = kinds(small(Regime::CptJoint, 10));
  EXPECT_EQ(jt.count(TaskKind::SftS2s), 0u);
  EXPECT_GE(jt.size(), 6u);
  auto sft = small(Regime::Sft, 10);
  sft.sft_task = TaskKind::SftS2s;
  const auto s2s = kinds(sft);
  ASSERT_EQ(s2s.size(), 1u);
  EXPECT_EQ(s2s.begin()->first, TaskKind::SftS2s);
}

TEST(Data, SftAsrConditionIsMasked) {
  const auto& w = world();
  auto c = small(Regime::Sft, 10);
  c.mask_ratio = 0.2;
  int masked = 0, total = 0;
  for (int step = 0; step < 5; ++step)
    for (const auto& s : assemble_batch(c, w.data(), w.env(), step))
      for (int t = s.condition.begin; t < s.condition.end; ++t) {
        const auto& tok = s.tokens[static_cast<std::size_t>(t)];
        if (!is_speech(tok)) continue;
        ++total;
        masked += frame_of(tok)[0] == w.corpus.spec.codec.mask_index;
      }
  EXPECT_GT(masked, 0);
  EXPECT_LT(masked, total);
}

TEST(Data, BatchIsPureFunctionOfStep) {
  const auto& w = world();
  const auto c = small(Regime::CptJoint, 10);
  const auto a = assemble_batch(c, w.data(), w.env(), 7), b = assemble_batch(c, w.data(), w.env(), 7);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tokens, b[i].tokens);
}

TEST(Data, SpeechCptLeavesTextCharsUntouched) {
  const auto& w = world();
  const auto c = small(Regime::CptSpeech, 10);
  const ParamsSet p = init_random(w.model, 5);
  ParamsSet g(w.model);
  for (int step = 0; step < 10; ++step) sequence_loss<float>(assemble_batch(c, w.data(), w.env(), step), p, w.model, &g);
  const auto& emb = g.at("embed.text");
  const int d = w.model.d_model;
  double char_mass = 0, struct_mass = 0;
  for (int id = 0; id < w.vocab.size(); ++id)
    for (int k = 0; k < d; ++k) {
      const double v = std::abs(emb[static_cast<std::size_t>(id * d + k)]);
      (w.vocab.is_structural(id) ? struct_mass : char_mass) += v;
    }
  EXPECT_EQ(char_mass, 0.0);
  EXPECT_GT(struct_mass, 0.0);
}

// ---- checkpoints

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = scratch("ckpt");
  Checkpoint c;
  c.model = world().model;
  c.params = init_random(c.model, 9);
  c.opt = OptState::zeros_like(c.params);
  c.opt->m[0][0] = 0.25f;
  c.opt->step = 12;
  c.meta = nlohmann::ordered_json{{"step", 12}, {"regime", "sft"}, {"loss_digest", "00ff"}};
  save_checkpoint(c, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt", &c.model);
  EXPECT_EQ(back.params, c.params);
  ASSERT_TRUE(back.opt);
  EXPECT_EQ(*back.opt, *c.opt);
  EXPECT_EQ(back.model, c.model);
  save_checkpoint(back, dir / "b.ckpt");
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_EQ(slurp(dir / "a.ckpt").substr(0, 4), "CLMK");
}

TEST(Checkpoint, DistinctErrors) {
  const auto dir = scratch("ckpt_err");
  Checkpoint c;
  c.model = world().model;
  c.params = init_random(c.model, 9);
  save_checkpoint(c, dir / "a.ckpt");
  const std::string bytes = slurp(dir / "a.ckpt");
  {
    std::ofstream f(dir / "trunc.ckpt", std::ios::binary);
    f << bytes.substr(0, bytes.size() / 2);
  }
  EXPECT_THROW(load_checkpoint(dir / "trunc.ckpt"), CorruptCheckpoint);
  {
    std::string v = bytes;
    v[4] = 9;
    std::ofstream f(dir / "ver.ckpt", std::ios::binary);
    f << v;
  }
  EXPECT_THROW(load_checkpoint(dir / "ver.ckpt"), CheckpointVersionError);
  ModelConfig other = c.model;
  other.d_model = 32;
  other.ffn_hidden = 88;
  try {
    load_checkpoint(dir / "a.ckpt", &other);
    FAIL() << "expected a shape mismatch";
  } catch (const CheckpointShapeMismatch& e) {
    EXPECT_NE(std::string(e.what()).find(c.params.name(0)), std::string::npos) << e.what();
  }
}

// ---- the loop

TEST(Loop, DeterministicAndResumable) {
  const auto& w = world();
  const auto cfg = small(Regime::CptJoint, 20);
  const ParamsSet init = init_random(w.model, 1);
  const auto full = run_training(cfg, w.model, init, w.data(), w.env());
  const auto again = run_training(cfg, w.model, init, w.data(), w.env());
  ASSERT_EQ(full.log.size(), 20u);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(full.log[static_cast<std::size_t>(i)].loss, again.log[static_cast<std::size_t>(i)].loss);

  const auto dir = scratch("resume");
  RunOptions first;
  first.stop_at = 10;
  first.out_dir = dir;
  const auto half = run_training(cfg, w.model, init, w.data(), w.env(), first);
  ASSERT_EQ(half.log.size(), 10u);
  const auto ck = load_checkpoint(dir / "final.ckpt", &w.model);
  RunOptions second;
  second.resume = &ck;
  const auto rest = run_training(cfg, w.model, init, w.data(), w.env(), second);
  ASSERT_EQ(rest.log.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(rest.log[i].step, full.log[i + 10].step);
    EXPECT_EQ(rest.log[i].loss, full.log[i + 10].loss);
  }
  EXPECT_EQ(rest.checkpoint.params, full.checkpoint.params);
  EXPECT_EQ(rest.checkpoint.meta.at("loss_digest"), full.checkpoint.meta.at("loss_digest"));
}

TEST(Loop, WritesLogAndCheckpoints) {
  const auto& w = world();
  auto cfg = small(Regime::Sft, 6);
  cfg.checkpoint_every = 3;
  const auto dir = scratch("log");
  RunOptions o;
  o.out_dir = dir;
  run_training(cfg, w.model, init_random(w.model, 2), w.data(), w.env(), o);
  EXPECT_TRUE(fs::exists(dir / "step_3.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "step_6.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "final.ckpt"));
  std::ifstream f(dir / "train_log.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(f, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"step", "lr", "loss", "text_loss", "codec_loss_per_stream", "grad_norm"})
      EXPECT_TRUE(j.contains(k)) << k;
    ++n;
  }
  EXPECT_EQ(n, 6);
}

TEST(Loop, LossDecreasesOnTinyRun) {
  const auto& w = world();
  auto cfg = small(Regime::TextPt, 60);
  cfg.peak_lr = 3e-3;
  const auto r = run_training(cfg, w.model, init_random(w.model, 3), w.data(), w.env());
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) {
    first += r.log[static_cast<std::size_t>(i)].loss;
    last += r.log[r.log.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  EXPECT_LT(last, first);
}
