#include "clm/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>

#include "clm/error.hpp"
#include "clm/rng.hpp"

#ifndef CLM_SOURCE_REVISION
#define CLM_SOURCE_REVISION "unknown"
#endif

namespace clm {

using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

const PromptPool& standard_pool() {
  static const PromptPool pool = PromptPool::standard();
  return pool;
}

const TextVocab& standard_vocab() {
  static const TextVocab vocab = build_vocab(standard_pool());
  return vocab;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (const char* key : keys) ok = ok || k == key;
    if (!ok) throw ConfigError("unknown key " + where + "." + k);
  }
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write " + p.string());
  f << s;
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) return {};
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

ExperimentConfig::ExperimentConfig() {
  model = ModelConfig::desk(standard_vocab().size(), corpus.codec);
  sft.sft_task = TaskKind::SftAsr;
}

void ExperimentConfig::validate() const {
  corpus.codec.validate();
  model.validate();
  if (model.n_streams != corpus.codec.n_streams_used) throw ConfigError("model n_streams must equal codec n_streams_used");
  if (model.codebook_size != corpus.codec.codebook_size) throw ConfigError("model codebook_size must match the codec");
  if (model.text_vocab_size != standard_vocab().size()) throw ConfigError("model text_vocab_size must match the vocabulary");
  for (const auto* t : {&text_pt, &cpt_speech, &cpt_joint, &sft}) t->validate();
  for (const auto& task : matrix.tasks) {
    downstream_kind(task);
    sft_for(task).validate();
  }
  for (const auto& i : matrix.inits)
    if (std::find(kInitConditions.begin(), kInitConditions.end(), i) == kInitConditions.end())
      throw ConfigError("unknown init condition: " + i);
  if (matrix.seeds.empty()) throw ConfigError("matrix needs at least one seed");
  decode.validate();
}

TrainConfig ExperimentConfig::sft_for(const std::string& task) const {
  TrainConfig c = sft;
  if (auto it = sft_task_overrides.find(task); it != sft_task_overrides.end()) c = TrainConfig::from_json(it->second, c);
  c.regime = Regime::Sft;
  c.sft_task = downstream_kind(task);
  return c;
}

ojson ExperimentConfig::to_json() const {
  const auto& cc = corpus.codec;
  ojson train{{"text_pt", text_pt.to_json()},
              {"cpt_speech", cpt_speech.to_json()},
              {"cpt_joint", cpt_joint.to_json()},
              {"sft", sft.to_json()}};
  ojson over = ojson::object();
  for (const auto& [k, v] : sft_task_overrides) over[k] = v;
  train["sft_tasks"] = over;
  auto m = model_config_to_json(model);
  return ojson{
      {"codec", ojson{{"n_streams_total", cc.n_streams_total},
                      {"n_streams_used", cc.n_streams_used},
                      {"codebook_size", cc.codebook_size},
                      {"frames_per_char", cc.frames_per_char},
                      {"end_index", cc.end_index},
                      {"mask_index", cc.mask_index}}},
      {"vocab", ojson{{"lexicon_size", corpus.lexicon_size},
                      {"min_words", corpus.sentence_words.first},
                      {"max_words", corpus.sentence_words.second}}},
      {"model", m},
      {"train", train},
      {"decode", decode.to_json()},
      {"matrix", ojson{{"seeds", matrix.seeds},
                       {"inits", matrix.inits},
                       {"tasks", matrix.tasks},
                       {"eval_limit", matrix.eval_limit},
                       {"t_s2s", matrix.t_s2s},
                       {"data_seed", matrix.data_seed},
                       {"n_samples", corpus.n_samples},
                       {"n_text", corpus.n_text},
                       {"n_mt", corpus.n_mt}}}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  check_keys(j, {"codec", "vocab", "model", "train", "decode", "matrix"}, "config");
  try {
    if (j.contains("codec")) {
      const auto& s = j["codec"];
      check_keys(s, {"n_streams_total", "n_streams_used", "codebook_size", "frames_per_char", "end_index", "mask_index"},
                 "codec");
      auto& cc = c.corpus.codec;
      cc.n_streams_total = s.value("n_streams_total", cc.n_streams_total);
      cc.n_streams_used = s.value("n_streams_used", cc.n_streams_used);
      cc.codebook_size = s.value("codebook_size", cc.codebook_size);
      cc.frames_per_char = s.value("frames_per_char", cc.frames_per_char);
      cc.end_index = s.value("end_index", cc.end_index);
      cc.mask_index = s.value("mask_index", cc.mask_index);
      c.model.n_streams = cc.n_streams_used;
      c.model.codebook_size = cc.codebook_size;
    }
    if (j.contains("vocab")) {
      const auto& s = j["vocab"];
      check_keys(s, {"lexicon_size", "min_words", "max_words"}, "vocab");
      c.corpus.lexicon_size = s.value("lexicon_size", c.corpus.lexicon_size);
      c.corpus.sentence_words.first = s.value("min_words", c.corpus.sentence_words.first);
      c.corpus.sentence_words.second = s.value("max_words", c.corpus.sentence_words.second);
    }
    if (j.contains("model")) {
      const auto& s = j["model"];
      check_keys(s, {"d_model", "n_layers", "n_heads", "n_streams", "codebook_size", "text_vocab_size", "max_seq_len",
                     "ffn_hidden", "rope_base", "norm_eps", "stream_loss"},
                 "model");
      const int d_before = c.model.d_model;
      c.model = model_config_from_json(s, c.model);
      if (!s.contains("ffn_hidden") && c.model.d_model != d_before) c.model.ffn_hidden = ModelConfig::ffn_for(c.model.d_model);
    }
    if (j.contains("train")) {
      const auto& s = j["train"];
      check_keys(s, {"text_pt", "cpt_speech", "cpt_joint", "sft", "sft_tasks"}, "train");
      if (s.contains("text_pt")) c.text_pt = TrainConfig::from_json(s["text_pt"], c.text_pt);
      if (s.contains("cpt_speech")) c.cpt_speech = TrainConfig::from_json(s["cpt_speech"], c.cpt_speech);
      if (s.contains("cpt_joint")) c.cpt_joint = TrainConfig::from_json(s["cpt_joint"], c.cpt_joint);
      if (s.contains("sft")) c.sft = TrainConfig::from_json(s["sft"], c.sft);
      if (s.contains("sft_tasks"))
        for (const auto& [k, v] : s["sft_tasks"].items()) {
          downstream_kind(k);
          c.sft_task_overrides[k] = v;
        }
    }
    if (j.contains("decode")) c.decode = DecodeConfig::from_json(j["decode"], c.decode);
    if (j.contains("matrix")) {
      const auto& s = j["matrix"];
      check_keys(s, {"seeds", "inits", "tasks", "eval_limit", "t_s2s", "data_seed", "n_samples", "n_text", "n_mt"},
                 "matrix");
      c.matrix.seeds = s.value("seeds", c.matrix.seeds);
      c.matrix.inits = s.value("inits", c.matrix.inits);
      c.matrix.tasks = s.value("tasks", c.matrix.tasks);
      c.matrix.eval_limit = s.value("eval_limit", c.matrix.eval_limit);
      c.matrix.t_s2s = s.value("t_s2s", c.matrix.t_s2s);
      c.matrix.data_seed = s.value("data_seed", c.matrix.data_seed);
      c.corpus.n_samples = s.value("n_samples", c.corpus.n_samples);
      c.corpus.n_text = s.value("n_text", c.corpus.n_text);
      c.corpus.n_mt = s.value("n_mt", c.corpus.n_mt);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  // the regime of each stage section is fixed by its name
  c.text_pt.regime = Regime::TextPt;
  c.cpt_speech.regime = Regime::CptSpeech;
  c.cpt_joint.regime = Regime::CptJoint;
  c.sft.regime = Regime::Sft;
  c.corpus.seed = c.matrix.data_seed;
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string ExperimentConfig::digest() const { return hex64(fnv1a(to_json().dump())); }

std::string corpus_digest(const Corpus& corpus) {
  std::uint64_t h = fnv1a("corpus");
  auto add = [&](std::string_view s) { h = mix64(h ^ fnv1a(s)); };
  for (const auto* split : {&corpus.train, &corpus.dev, &corpus.test})
    for (const auto& s : *split) add(sample_to_json(s));
  for (const auto& t : corpus.text_train) add(t.text);
  for (const auto& t : corpus.text_test) add(t.text);
  for (const auto& m : corpus.mt) add(m.src + "|" + m.tgt);
  return hex64(h);
}

fs::path default_out_root() {
  if (const char* env = std::getenv("CLM_OUT_ROOT"); env && *env) return env;
  return "out";
}

// ---------------------------------------------------------------------------
// Evaluation

TaskEvaluation evaluate_task(const std::string& task, const ParamsSet& params, const ModelConfig& cfg,
                             const Corpus& corpus, const DecodeConfig& dc, int limit) {
  const auto& vocab = standard_vocab();
  const auto& pool = standard_pool();
  const CodecConfig& codec = corpus.spec.codec;
  std::span<const ToySample> test = corpus.test;
  if (limit > 0 && static_cast<std::size_t>(limit) < test.size()) test = test.first(static_cast<std::size_t>(limit));

  TaskEvaluation ev;
  ev.run = run_task_inference(task, params, cfg, test, corpus.train, vocab, pool, codec, dc);
  auto& rep = ev.report;
  rep.task = task;
  rep.seeds = {dc.seed};
  std::map<std::string, const ToySample*> by_id;
  for (const auto& s : test) by_id[s.id] = &s;

  const TaskKind kind = downstream_kind(task);
  if (kind == TaskKind::SftAsr || kind == TaskKind::SftS2t) {
    std::vector<std::string> refs, hyps;
    for (const auto& r : ev.run.records) {
      const ToySample& s = *by_id.at(r.id);
      const std::string& ref = kind == TaskKind::SftAsr ? s.text_src : s.text_tgt;
      refs.push_back(ref);
      hyps.push_back(r.text_out);
      const std::string one_r[1] = {ref}, one_h[1] = {r.text_out};
      const auto e = edit_distance(tokenize(ref, ErrorUnit::Word), tokenize(r.text_out, ErrorUnit::Word));
      rep.per_sample.push_back(ojson{{"id", r.id},
                                     {"ref", ref},
                                     {"hyp", r.text_out},
                                     {"word_errors", e.distance},
                                     {"ref_words", static_cast<int>(tokenize(ref, ErrorUnit::Word).size())},
                                     {"cer", cer(one_r, one_h)},
                                     {"truncated", r.truncated}});
    }
    if (kind == TaskKind::SftAsr) {
      rep.metrics["wer"] = refs.empty() ? 1.0 : wer(refs, hyps);
      rep.metrics["cer"] = refs.empty() ? 1.0 : cer(refs, hyps);
    } else {
      rep.metrics["bleu"] = refs.empty() ? 0.0 : bleu(refs, hyps).score;
    }
  } else if (kind == TaskKind::SftTts) {
    double w = 0, spk = 0, cons = 0;
    for (const auto& r : ev.run.records) {
      const ToySample& s = *by_id.at(r.id);
      const auto sc = tts_eval(r.frames_out, s.text_src, r.speaker_prompt, codec);
      w += sc.decode_wer;
      spk += sc.spk_sim;
      cons += sc.consistency;
      rep.per_sample.push_back(ojson{{"id", r.id},
                                     {"ref", s.text_src},
                                     {"prompt_speaker", r.speaker_prompt},
                                     {"decode_wer", sc.decode_wer},
                                     {"spk_sim", sc.spk_sim},
                                     {"consistency", sc.consistency}});
    }
    const double n = std::max<std::size_t>(1, ev.run.records.size());
    rep.metrics["decode_wer"] = ev.run.records.empty() ? 1.0 : w / n;
    rep.metrics["spk_sim"] = spk / n;
    rep.metrics["consistency"] = cons / n;
  } else {
    // every sample contributes all of its generated candidates to the corpus BLEU
    std::vector<Frames> outs;
    std::vector<std::string> refs;
    std::vector<int> langs;
    for (const auto& r : ev.run.records) {
      const ToySample& s = *by_id.at(r.id);
      for (const auto& f : r.frames_out) {
        outs.push_back(f);
        refs.push_back(s.text_tgt);
        langs.push_back(s.lang_tgt);
      }
    }
    const auto res = s2s_asr_bleu(outs, refs, langs, codec);
    std::size_t k = 0;
    for (const auto& r : ev.run.records) {
      ojson decoded = ojson::array(), wrong = ojson::array();
      for (std::size_t j = 0; j < r.frames_out.size(); ++j, ++k) {
        decoded.push_back(res.per_sample[k].decoded);
        wrong.push_back(res.per_sample[k].wrong_lang);
      }
      rep.per_sample.push_back(
          ojson{{"id", r.id}, {"ref", by_id.at(r.id)->text_tgt}, {"decoded", decoded}, {"wrong_lang", wrong}});
    }
    rep.metrics["asr_bleu"] = res.bleu;
    rep.metrics["consistency"] = res.consistency;
    rep.metrics["wrong_lang_rate"] = outs.empty() ? 1.0 : static_cast<double>(res.wrong_lang) / outs.size();
    rep.metrics["all_empty"] = res.all_empty ? 1.0 : 0.0;
  }
  rep.metrics["skipped"] = ev.run.skipped;
  rep.metrics["n"] = static_cast<double>(ev.run.records.size());
  return ev;
}

void write_evaluation(const TaskEvaluation& ev, const fs::path& dir) {
  fs::create_directories(dir);
  std::string outs;
  for (const auto& r : ev.run.records) outs += r.to_json().dump() + "\n";
  write_text(dir / "outputs.jsonl", outs);
  write_text(dir / "eval.jsonl", ev.report.to_jsonl());
  if (!ev.run.errors.empty()) {
    std::string errs;
    for (const auto& e : ev.run.errors) errs += e + "\n";
    write_text(dir / "errors.log", errs);
  }
}

// ---------------------------------------------------------------------------
// Matrix

bool MatrixResult::orderings_ok() const {
  return std::all_of(orderings.begin(), orderings.end(), [](const OrderingCheck& o) { return o.passed; });
}

namespace {

struct StageContext {
  const ExperimentConfig& cfg;
  const Corpus& corpus;
  std::string digest;  // model + corpus; each stage key also chains its parent's key
  std::ostream* progress;
};

void say(const StageContext& ctx, const std::string& msg) {
  if (ctx.progress) *ctx.progress << msg << std::endl;
}

std::string stage_key(const StageContext& ctx, const std::string& what) {
  return hex64(fnv1a(ctx.digest + "/" + what));
}

bool stage_done(const fs::path& dir, const std::string& key) {
  const auto text = read_text(dir / "manifest.json");
  if (text.empty()) return false;
  try {
    const auto j = nlohmann::json::parse(text);
    return j.value("status", "") == "done" && j.value("stage_key", "") == key;
  } catch (const nlohmann::json::exception&) {
    return false;
  }
}

void write_manifest(const fs::path& dir, const StageContext& ctx, const std::string& key, ojson extra,
                    double seconds) {
  ojson m{{"status", "done"},
          {"stage_key", key},
          {"config_digest", ctx.cfg.digest()},
          {"corpus_digest", corpus_digest(ctx.corpus)},
          {"source_revision", CLM_SOURCE_REVISION},
          {"wall_clock_s", seconds}};
  for (auto& [k, v] : extra.items()) m[k] = v;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

std::uint64_t derived_seed(std::uint64_t seed, const std::string& label) { return Rng(seed).derive(label).seed(); }

/// Trains one stage into `dir`, or loads it when a matching manifest exists.
Checkpoint train_stage(const StageContext& ctx, const fs::path& dir, TrainConfig tc, const ParamsSet& init,
                       const TrainData& data, const std::string& label, const std::string& key) {
  if (stage_done(dir, key) && fs::exists(dir / "final.ckpt")) {
    say(ctx, "  reuse " + label);
    return load_checkpoint(dir / "final.ckpt", &ctx.cfg.model);
  }
  say(ctx, "  train " + label + " (" + std::to_string(tc.steps) + " steps)");
  const auto t0 = std::chrono::steady_clock::now();
  TaskEnv env{standard_vocab(), standard_pool(), ctx.corpus.spec.codec};
  RunOptions opts;
  opts.out_dir = dir;
  auto res = run_training(tc, ctx.cfg.model, init, data, env, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(dir, ctx, key,
                 ojson{{"stage", label},
                       {"checkpoint", (dir / "final.ckpt").string()},
                       {"train_log", (dir / "train_log.jsonl").string()},
                       {"final_loss", res.log.empty() ? 0.0 : res.log.back().loss},
                       {"train", tc.to_json()}},
                 secs);
  return res.checkpoint;
}

double median(std::vector<double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return std::numeric_limits<double>::quiet_NaN();
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v, int prec = 2) {
  if (!std::isfinite(v)) return "FAILED";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

const std::map<std::string, std::string>& row_labels() {
  static const std::map<std::string, std::string> m = {{"no_init", "No Initialization"},
                                                        {"text_init", "Text LLM Initialization"},
                                                        {"cpt_speech", "Speech CPT"},
                                                        {"cpt_joint", "Speech & Text CPT"}};
  return m;
}

}  // namespace

MatrixResult run_matrix(const ExperimentConfig& cfg, const Corpus& corpus, const fs::path& out, std::ostream* progress) {
  cfg.validate();
  if (corpus.train.empty() || corpus.test.empty()) throw ConfigError("matrix needs non-empty train and test splits");
  const StageContext ctx{cfg, corpus, model_config_to_json(cfg.model).dump() + corpus_digest(corpus), progress};
  fs::create_directories(out);
  write_text(out / "config.json", cfg.to_json().dump(2) + "\n");
  const auto t_start = std::chrono::steady_clock::now();

  MatrixResult res;
  const TrainData text_data{corpus.train, corpus.text_train, {}};
  const TrainData speech_data{corpus.train, {}, {}};
  const TrainData joint_data{corpus.train, corpus.text_train, corpus.mt};
  const TrainData sft_data{corpus.train, {}, {}};
  const auto ppl_seqs = text_eval_sequences(corpus.text_test, standard_vocab(), standard_pool());

  auto record = [&](const std::string& metric, const std::string& init, std::size_t seed_idx, double v) {
    auto& vec = res.values[metric][init];
    vec.resize(cfg.matrix.seeds.size(), std::numeric_limits<double>::quiet_NaN());
    vec[seed_idx] = v;
  };

  for (std::size_t si = 0; si < cfg.matrix.seeds.size(); ++si) {
    const std::uint64_t seed = cfg.matrix.seeds[si];
    const fs::path sdir = out / std::to_string(seed);
    say(ctx, "seed " + std::to_string(seed));
    std::map<std::string, std::optional<ParamsSet>> inits;
    std::map<std::string, std::string> keys;

    auto stage_cfg = [&](TrainConfig tc, const std::string& label) {
      tc.seed = derived_seed(seed, "train/" + label);
      return tc;
    };

    try {
      ParamsSet fresh = init_random(cfg.model, derived_seed(seed, "init/no_init"));
      const fs::path ndir = sdir / "no_init";
      const std::string key = stage_key(ctx, "no_init/" + std::to_string(seed));
      if (!stage_done(ndir, key)) {
        Checkpoint c;
        c.model = cfg.model;
        c.params = fresh;
        c.meta = ojson{{"regime", "none"}, {"step", 0}, {"seed", seed}};
        save_checkpoint(c, ndir / "final.ckpt");
        write_manifest(ndir, ctx, key, ojson{{"stage", "no_init"}, {"checkpoint", (ndir / "final.ckpt").string()}}, 0);
      }
      inits["no_init"] = std::move(fresh);
      keys["no_init"] = key;
    } catch (const std::exception& e) {
      res.failures.push_back("seed " + std::to_string(seed) + " no_init: " + e.what());
    }

    try {
      const auto ttc = stage_cfg(cfg.text_pt, "text_init");
      keys["text_init"] = stage_key(ctx, "text_init/" + std::to_string(seed) + "/" + ttc.to_json().dump());
      const auto text = train_stage(ctx, sdir / "text_init", ttc,
                                    init_random(cfg.model, derived_seed(seed, "init/text_init")), text_data,
                                    "text_init", keys["text_init"]);
      inits["text_init"] = text.params;
      for (const std::string branch : {"cpt_speech", "cpt_joint"}) {
        try {
          const TrainConfig& base = branch == "cpt_speech" ? cfg.cpt_speech : cfg.cpt_joint;
          const ParamsSet start =
              init_from_text(text.params, cfg.model, cfg.model, derived_seed(seed, "init/" + branch));
          const auto btc = stage_cfg(base, branch);
          const auto bkey = stage_key(ctx, branch + "/" + keys["text_init"] + "/" + btc.to_json().dump());
          const auto ck = train_stage(ctx, sdir / branch, btc, start,
                                      branch == "cpt_speech" ? speech_data : joint_data, branch, bkey);
          keys[branch] = bkey;
          inits[branch] = ck.params;
        } catch (const std::exception& e) {
          res.failures.push_back("seed " + std::to_string(seed) + " " + branch + ": " + e.what());
        }
      }
    } catch (const std::exception& e) {
      res.failures.push_back("seed " + std::to_string(seed) + " text_init: " + e.what());
    }

    // forgetting probe
    ojson forgetting = ojson::object();
    for (const std::string stage : {"text_init", "cpt_speech", "cpt_joint"}) {
      double v = std::numeric_limits<double>::quiet_NaN();
      if (inits.count(stage) && inits[stage]) v = perplexity(*inits[stage], cfg.model, ppl_seqs);
      record("text_ppl", stage, si, v);
      forgetting[stage] = std::isfinite(v) ? ojson(v) : ojson(nullptr);
    }
    write_text(sdir / "forgetting.json", forgetting.dump(2) + "\n");

    for (const auto& init : cfg.matrix.inits) {
      for (const auto& task : cfg.matrix.tasks) {
        const fs::path cdir = sdir / init / task;
        const std::string cell = "seed " + std::to_string(seed) + " " + init + "/" + task;
        try {
          if (!inits.count(init) || !inits[init]) throw ContractError("initial checkpoint unavailable");
          TrainConfig tc = stage_cfg(cfg.sft_for(task), init + "/" + task);
          const auto skey = stage_key(ctx, init + "/" + task + "/" + keys[init] + "/" + tc.to_json().dump());
          const auto ck = train_stage(ctx, cdir, tc, *inits[init], sft_data, init + "/" + task, skey);
          DecodeConfig dc = cfg.decode;
          dc.seed = derived_seed(seed ^ cfg.decode.seed, "decode/" + init + "/" + task);
          const std::string ekey = stage_key(ctx, "eval/" + skey + "/" + dc.to_json().dump() + "/" +
                                                      std::to_string(cfg.matrix.eval_limit));
          std::map<std::string, double> metrics;
          const auto eval_text = read_text(cdir / "eval.jsonl");
          bool reused = false;
          if (!eval_text.empty() && read_text(cdir / "eval.key") == ekey) {
            std::istringstream in(eval_text);
            std::string line, last;
            while (std::getline(in, line))
              if (!line.empty()) last = line;
            const auto agg = nlohmann::json::parse(last).at("aggregate").at("metrics");
            for (const auto& [k, v] : agg.items()) metrics[k] = v.get<double>();
            reused = true;
          }
          if (!reused) {
            say(ctx, "  eval " + init + "/" + task);
            auto ev = evaluate_task(task, ck.params, cfg.model, corpus, dc, cfg.matrix.eval_limit);
            ev.report.config_digest = cfg.digest();
            write_evaluation(ev, cdir);
            write_text(cdir / "eval.key", ekey);
            metrics = ev.report.metrics;
            if (ev.run.skipped * 100 > static_cast<int>(ev.run.records.size() + ev.run.skipped))
              throw InputError("more than 1% of test samples were skipped");
          }
          for (const auto& [k, v] : metrics) record(task + "." + k, init, si, v);
        } catch (const std::exception& e) {
          res.failures.push_back(cell + ": " + e.what());
          say(ctx, "  FAILED " + cell + ": " + e.what());
        }
      }
    }
  }

  // make every metric vector full length so failed cells read as NaN
  for (auto& [metric, by_init] : res.values)
    for (const auto& init : kInitConditions) by_init[init].resize(cfg.matrix.seeds.size(), std::numeric_limits<double>::quiet_NaN());
  for (const auto& [metric, by_init] : res.values)
    for (const auto& [init, vals] : by_init) res.medians[metric][init] = median(vals);

  auto med = [&](const std::string& metric, const std::string& init) {
    auto it = res.medians.find(metric);
    if (it == res.medians.end() || !it->second.count(init)) return std::numeric_limits<double>::quiet_NaN();
    return it->second.at(init);
  };
  auto has_task = [&](const std::string& t) {
    return std::find(cfg.matrix.tasks.begin(), cfg.matrix.tasks.end(), t) != cfg.matrix.tasks.end();
  };

  // ---- ordering checks
  const double T = cfg.matrix.t_s2s;
  if (has_task("s2s")) {
    const double j = med("s2s.asr_bleu", "cpt_joint"), s = med("s2s.asr_bleu", "cpt_speech"),
                 n = med("s2s.asr_bleu", "no_init");
    res.orderings.push_back({"s2s_emergence", j >= s && s > T && n < T / 2,
                             "joint " + fmt(j) + " >= speech " + fmt(s) + " > T " + fmt(T) + "; no_init " + fmt(n) +
                                 " < T/2"});
  }
  if (has_task("asr")) {
    const double j = med("asr.wer", "cpt_joint"), s = med("asr.wer", "cpt_speech"), n = med("asr.wer", "no_init");
    res.orderings.push_back({"asr_understanding", j < s && j < n,
                             "joint " + fmt(j, 4) + " < speech " + fmt(s, 4) + " and < no_init " + fmt(n, 4)});
  }
  if (has_task("tts")) {
    bool ok = true;
    std::string d;
    for (const std::string m : {"tts.decode_wer", "tts.spk_sim"}) {
      const bool lower = m == "tts.decode_wer";
      for (const std::string good : {"cpt_speech", "cpt_joint"})
        for (const std::string bad : {"no_init", "text_init"}) {
          const double g = med(m, good), b = med(m, bad);
          ok = ok && (lower ? g < b : g > b);
        }
      d += (d.empty() ? "" : "; ") + m + ": speech " + fmt(med(m, "cpt_speech"), 4) + ", joint " + fmt(med(m, "cpt_joint"), 4) + ", no_init " +
           fmt(med(m, "no_init"), 4) + ", text_init " + fmt(med(m, "text_init"), 4);
    }
    res.orderings.push_back({"tts_generation", ok, d});
  }
  {
    const double s = med("text_ppl", "cpt_speech"), j = med("text_ppl", "cpt_joint"), b = med("text_ppl", "text_init");
    res.orderings.push_back(
        {"text_forgetting", s > j && j >= b, "speech " + fmt(s, 4) + " > joint " + fmt(j, 4) + " >= base " + fmt(b, 4)});
  }

  // ---- tables
  std::ostringstream tables;
  auto table = [&](const std::string& title, const std::vector<std::pair<std::string, std::string>>& cols) {
    std::vector<std::string> headers;
    for (const auto& c : cols) headers.push_back(c.second);
    std::vector<std::pair<std::string, std::vector<std::string>>> rows;
    for (const auto& init : kInitConditions) {
      std::vector<std::string> cells;
      for (const auto& c : cols) cells.push_back(fmt(med(c.first, init), c.first.ends_with("wer") ? 4 : 2));
      rows.emplace_back(row_labels().at(init), cells);
    }
    tables << render_table(title, headers, rows) << "\n";
  };
  if (has_task("s2s")) table("S2S translation (toy ASR-BLEU)", {{"s2s.asr_bleu", "ASR-BLEU"}, {"s2s.consistency", "Consistency"}});
  if (has_task("asr")) table("ASR", {{"asr.wer", "WER"}, {"asr.cer", "CER"}});
  if (has_task("tts"))
    table("TTS", {{"tts.decode_wer", "Decode-WER"}, {"tts.spk_sim", "SPK-SIM"}, {"tts.consistency", "Consistency"}});
  if (has_task("s2t")) table("S2T translation", {{"s2t.bleu", "BLEU"}});
  {
    std::vector<std::pair<std::string, std::vector<std::string>>> rows;
    for (const std::string stage : {"text_init", "cpt_speech", "cpt_joint"})
      rows.emplace_back(row_labels().at(stage), std::vector<std::string>{fmt(med("text_ppl", stage), 4)});
    tables << render_table("Held-out text perplexity (forgetting)", {"PPL"}, rows) << "\n";
  }
  tables << "Ordering checks\n";
  for (const auto& o : res.orderings) tables << (o.passed ? "  PASS " : "  FAIL ") << o.name << ": " << o.detail << "\n";
  res.tables = tables.str();

  // ---- result files
  ojson values = ojson::object();
  for (const auto& [metric, by_init] : res.values) {
    ojson m = ojson::object();
    for (const auto& [init, vals] : by_init) {
      ojson arr = ojson::array();
      for (double v : vals) arr.push_back(std::isfinite(v) ? ojson(v) : ojson(nullptr));
      m[init] = ojson{{"per_seed", arr},
                      {"median", std::isfinite(res.medians[metric][init]) ? ojson(res.medians[metric][init]) : ojson(nullptr)}};
    }
    values[metric] = m;
  }
  ojson ord = ojson::array();
  for (const auto& o : res.orderings) ord.push_back(ojson{{"name", o.name}, {"passed", o.passed}, {"detail", o.detail}});
  ojson results{{"config_digest", cfg.digest()},
                {"corpus_digest", corpus_digest(corpus)},
                {"seeds", cfg.matrix.seeds},
                {"metrics", values},
                {"orderings", ord},
                {"failures", res.failures}};
  write_text(out / "results.json", results.dump(2) + "\n");
  write_text(out / "tables.txt", res.tables);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  write_text(out / "manifest.json", ojson{{"config_digest", cfg.digest()},
                                          {"corpus_digest", corpus_digest(corpus)},
                                          {"source_revision", CLM_SOURCE_REVISION},
                                          {"results", (out / "results.json").string()},
                                          {"tables", (out / "tables.txt").string()},
                                          {"cpt_task_sets", ojson{{"cpt_speech", {"speech_continuation"}},
                                                                  {"cpt_joint", {"speech_continuation", "text_lm", "asr",
                                                                                 "tts", "s2t", "t2st", "general_text",
                                                                                 "mt_text"}}}},
                                          {"wall_clock_s", secs}}
                                         .dump(2) + "\n");
  return res;
}

}  // namespace clm
