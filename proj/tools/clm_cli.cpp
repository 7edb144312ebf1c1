// clm: data generation, training, decoding, evaluation and the init matrix.
//
// exit codes: 0 ok, 1 usage/config error, 2 ordering check failed, 3 stage failure

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "clm/error.hpp"
#include "clm/experiments.hpp"

#ifndef CLM_SOURCE_REVISION
#define CLM_SOURCE_REVISION "unknown"
#endif

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using namespace clm;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitOrdering = 2;
constexpr int kExitStage = 3;

void write_file(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write " + p.string());
  f << s;
}

fs::path resolve_out(const std::string& out, const std::string& fallback) {
  if (!out.empty()) return out;
  return default_out_root() / fallback;
}

ExperimentConfig load_config(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : ExperimentConfig::load(path);
}

Corpus load_corpus(const std::string& dir) {
  if (dir.empty()) throw ConfigError("a corpus directory is required");
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw InputError("no corpus at " + dir);
  return read_corpus(dir);
}

void check_codec(const Corpus& corpus, const ExperimentConfig& cfg) {
  const auto& a = corpus.spec.codec;
  const auto& b = cfg.corpus.codec;
  if (a.n_streams_used != b.n_streams_used || a.codebook_size != b.codebook_size ||
      a.frames_per_char != b.frames_per_char)
    throw ConfigError("corpus codec settings differ from the config's codec section");
}

// ---- gen-data

struct GenArgs {
  std::uint64_t seed = 0;
  int n = 100;
  std::string out, config;
};

int cmd_gen_data(const GenArgs& a) {
  ExperimentConfig cfg = load_config(a.config);
  CorpusSpec spec = cfg.corpus;
  spec.seed = a.seed;
  spec.n_samples = a.n;
  const fs::path out = resolve_out(a.out, "corpus");
  const Corpus corpus = gen_corpus(spec);
  write_corpus(corpus, out);
  std::cout << "wrote " << corpus.train.size() << "/" << corpus.dev.size() << "/" << corpus.test.size()
            << " samples to " << out.string() << "\n";
  return 0;
}

// ---- train

struct TrainArgs {
  std::string regime, task, init_ckpt, config, corpus, out, resume;
  bool random = false;
  int steps = -1;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  const ExperimentConfig cfg = load_config(a.config);
  const Regime regime = regime_from_name(a.regime);
  if (!a.init_ckpt.empty() && a.random) throw ConfigError("--init-ckpt and --random are exclusive");
  if (regime != Regime::TextPt && a.init_ckpt.empty() && !a.random && a.resume.empty())
    throw ConfigError(a.regime + " needs --init-ckpt or --random");

  TrainConfig tc;
  switch (regime) {
    case Regime::TextPt: tc = cfg.text_pt; break;
    case Regime::CptSpeech: tc = cfg.cpt_speech; break;
    case Regime::CptJoint: tc = cfg.cpt_joint; break;
    case Regime::Sft:
      if (a.task.empty()) throw ConfigError("sft needs --task");
      tc = cfg.sft_for(a.task);
      break;
  }
  if (a.steps > 0) tc.steps = a.steps;
  if (a.seed) tc.seed = *a.seed;
  tc.validate();

  const Corpus corpus = load_corpus(a.corpus);
  check_codec(corpus, cfg);
  const fs::path out = resolve_out(a.out, "train/" + a.regime);

  ParamsSet init;
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    resume = load_checkpoint(a.resume, &cfg.model);
    init = resume->params;
  } else if (!a.init_ckpt.empty()) {
    const Checkpoint src = load_checkpoint(a.init_ckpt);
    const bool from_text = src.meta.value("regime", "") == "text_pt";
    if ((regime == Regime::CptSpeech || regime == Regime::CptJoint) && from_text)
      init = init_from_text(src.params, src.model, cfg.model, Rng(tc.seed).derive("init").seed());
    else if (model_config_to_json(src.model) != model_config_to_json(cfg.model))
      throw CheckpointShapeMismatch("checkpoint model differs from the config's model section");
    else
      init = src.params;
  } else {
    init = init_random(cfg.model, Rng(tc.seed).derive("init").seed());
  }

  const TrainData data{corpus.train, regime == Regime::CptSpeech || regime == Regime::Sft
                                         ? std::span<const TextRecord>{}
                                         : std::span<const TextRecord>(corpus.text_train),
                       regime == Regime::CptJoint ? std::span<const MtRecord>(corpus.mt) : std::span<const MtRecord>{}};
  const TaskEnv env{standard_vocab(), standard_pool(), corpus.spec.codec};
  RunOptions opts;
  opts.out_dir = out;
  if (resume) opts.resume = &*resume;
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = run_training(tc, cfg.model, std::move(init), data, env, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_file(out / "manifest.json",
             ojson{{"regime", a.regime},
                   {"task", a.task},
                   {"init_ckpt", a.init_ckpt},
                   {"random_init", a.random || (a.init_ckpt.empty() && a.resume.empty())},
                   {"corpus", a.corpus},
                   {"config_digest", cfg.digest()},
                   {"corpus_digest", corpus_digest(corpus)},
                   {"source_revision", CLM_SOURCE_REVISION},
                   {"checkpoint", (out / "final.ckpt").string()},
                   {"train", tc.to_json()},
                   {"final_loss", res.log.empty() ? 0.0 : res.log.back().loss},
                   {"wall_clock_s", secs}}
                     .dump(2) +
                 "\n");
  std::cout << "trained " << a.regime << " for " << res.log.size() << " steps, final loss "
            << (res.log.empty() ? 0.0 : res.log.back().loss) << "\n";
  return 0;
}

// ---- infer / eval

struct DecodeArgs {
  std::string task, ckpt, test, out, config;
  int limit = 0;
  std::optional<int> beam, topk, n_samples, max_new;
  std::optional<double> temperature;
  std::optional<std::uint64_t> seed;
};

DecodeConfig decode_from(const DecodeArgs& a, const ExperimentConfig& cfg) {
  DecodeConfig dc = cfg.decode;
  if (a.beam) dc.beam = *a.beam;
  if (a.topk) dc.topk = *a.topk;
  if (a.temperature) dc.temperature = *a.temperature;
  if (a.n_samples) dc.n_samples = *a.n_samples;
  if (a.max_new) dc.max_new = *a.max_new;
  if (a.seed) dc.seed = *a.seed;
  dc.validate();
  return dc;
}

int cmd_decode(const DecodeArgs& a, bool score) {
  const ExperimentConfig cfg = load_config(a.config);
  downstream_kind(a.task);
  const DecodeConfig dc = decode_from(a, cfg);
  const Corpus corpus = load_corpus(a.test);
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const fs::path out = resolve_out(a.out, std::string(score ? "eval/" : "infer/") + a.task);
  const auto ev = evaluate_task(a.task, ck.params, ck.model, corpus, dc, a.limit);
  auto report = ev.report;
  report.config_digest = cfg.digest();
  std::string outs;
  for (const auto& r : ev.run.records) outs += r.to_json().dump() + "\n";
  write_file(out / "outputs.jsonl", outs);
  if (score) write_file(out / "eval.jsonl", report.to_jsonl());
  if (!ev.run.errors.empty()) {
    std::string errs;
    for (const auto& e : ev.run.errors) errs += e + "\n";
    write_file(out / "errors.log", errs);
  }
  ojson metrics = ojson::object();
  for (const auto& [k, v] : report.metrics) metrics[k] = v;
  write_file(out / "manifest.json", ojson{{"task", a.task},
                                          {"checkpoint", a.ckpt},
                                          {"test", a.test},
                                          {"limit", a.limit},
                                          {"decode", dc.to_json()},
                                          {"source_revision", CLM_SOURCE_REVISION}}
                                            .dump(2) +
                                        "\n");
  if (score) std::cout << metrics.dump() << "\n";
  else std::cout << "decoded " << ev.run.records.size() << " samples (" << ev.run.skipped << " skipped)\n";
  return ev.run.skipped * 100 > static_cast<int>(ev.run.records.size()) + ev.run.skipped ? kExitStage : 0;
}

// ---- matrix

struct MatrixArgs {
  std::string config, out, corpus;
  std::vector<std::uint64_t> seeds;
  int eval_limit = -1;
};

int cmd_matrix(const MatrixArgs& a) {
  ExperimentConfig cfg = load_config(a.config);
  if (!a.seeds.empty()) cfg.matrix.seeds = a.seeds;
  if (a.eval_limit >= 0) cfg.matrix.eval_limit = a.eval_limit;
  cfg.validate();
  const fs::path out = resolve_out(a.out, "matrix");
  Corpus corpus;
  if (a.corpus.empty()) {
    corpus = gen_corpus(cfg.corpus);
    write_corpus(corpus, out / "corpus");
  } else {
    corpus = load_corpus(a.corpus);
    check_codec(corpus, cfg);
  }
  const auto res = run_matrix(cfg, corpus, out, &std::cerr);
  std::cout << res.tables;
  if (!res.failures.empty()) {
    for (const auto& f : res.failures) std::cerr << "FAILED " << f << "\n";
    return kExitStage;
  }
  return res.orderings_ok() ? 0 : kExitOrdering;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy speech-text language model: data, training, decoding, evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(CLM_SOURCE_REVISION));

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate a toy corpus");
  g->add_option("--seed", gen.seed, "corpus seed");
  g->add_option("--n", gen.n, "number of paired samples");
  g->add_option("--out", gen.out, "output directory");
  g->add_option("--config", gen.config, "config file (codec and vocab sections)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "run one training stage");
  t->add_option("--regime", tr.regime, "text_pt | cpt_speech | cpt_joint | sft")->required();
  t->add_option("--task", tr.task, "sft task: asr | tts | s2t | s2s");
  t->add_option("--init-ckpt", tr.init_ckpt, "initial checkpoint");
  t->add_flag("--random", tr.random, "start from random weights");
  t->add_option("--resume", tr.resume, "continue from a checkpoint with optimizer state");
  t->add_option("--config", tr.config, "config file");
  t->add_option("--corpus", tr.corpus, "corpus directory")->required();
  t->add_option("--out", tr.out, "run directory");
  t->add_option("--steps", tr.steps, "override the step count");
  t->add_option("--seed", tr.seed, "override the training seed");

  DecodeArgs inf, ev;
  auto add_decode = [](CLI::App* sub, DecodeArgs& d) {
    sub->add_option("--task", d.task, "asr | tts | s2t | s2s")->required();
    sub->add_option("--ckpt", d.ckpt, "checkpoint")->required();
    sub->add_option("--test", d.test, "corpus directory (its test split is decoded)")->required();
    sub->add_option("--out", d.out, "output directory");
    sub->add_option("--config", d.config, "config file (decode section)");
    sub->add_option("--limit", d.limit, "decode only the first N test samples");
    sub->add_option("--beam", d.beam, "beam size for text targets");
    sub->add_option("--topk", d.topk, "top-k for speech targets");
    sub->add_option("--temperature", d.temperature, "sampling temperature");
    sub->add_option("--n-samples", d.n_samples, "samples per speech target");
    sub->add_option("--max-new", d.max_new, "token budget (default: per task)");
    sub->add_option("--seed", d.seed, "decode seed");
  };
  auto* i = app.add_subcommand("infer", "decode a test split");
  add_decode(i, inf);
  auto* e = app.add_subcommand("eval", "decode and score a test split");
  add_decode(e, ev);

  MatrixArgs mx;
  auto* m = app.add_subcommand("matrix", "run the initialization x task matrix");
  m->add_option("--config", mx.config, "config file");
  m->add_option("--seeds", mx.seeds, "seeds (overrides the config)")->delimiter(',');
  m->add_option("--out", mx.out, "output root for this matrix");
  m->add_option("--corpus", mx.corpus, "existing corpus directory (default: generate from the config)");
  m->add_option("--eval-limit", mx.eval_limit, "test samples per task (overrides the config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*i) return cmd_decode(inf, false);
    if (*e) return cmd_decode(ev, true);
    if (*m) return cmd_matrix(mx);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitStage;
  }
  return kExitConfig;
}
