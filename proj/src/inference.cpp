#include "clm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "clm/error.hpp"

namespace clm {

using ojson = nlohmann::ordered_json;

DecodeGrammar DecodeGrammar::from_vocab(const TextVocab& vocab, const CodecConfig& codec) {
  DecodeGrammar g;
  g.eos = vocab.eos;
  g.text_start = vocab.text_start;
  g.text_end = vocab.text_end;
  g.speech_start = vocab.speech_start;
  g.codec = codec;
  g.content.assign(static_cast<std::size_t>(vocab.size()), 0);
  for (int id = 0; id < vocab.size(); ++id) g.content[static_cast<std::size_t>(id)] = vocab.is_char(id) ? 1 : 0;
  return g;
}

namespace {

enum class Mode { Text, Speech };

Mode entry_mode(std::span<const MultimodalToken> prefix, const DecodeGrammar& g) {
  if (prefix.empty() || is_speech(prefix.back())) throw ContractError("decode prefix must end with a segment opener");
  const int last = text_id(prefix.back());
  if (last == g.text_start) return Mode::Text;
  if (last == g.speech_start) return Mode::Speech;
  throw ContractError("decode prefix must end with TEXT_START or SPEECH_START");
}

bool text_allowed(int id, const DecodeGrammar& g) {
  return id == g.text_end || (id >= 0 && static_cast<std::size_t>(id) < g.content.size() &&
                              g.content[static_cast<std::size_t>(id)]);
}

/// Log-probabilities renormalized over the allowed text ids (others -inf).
std::vector<double> masked_text_logprobs(std::span<const float> logits, const DecodeGrammar& g) {
  std::vector<double> out(logits.size(), -std::numeric_limits<double>::infinity());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (text_allowed(static_cast<int>(i), g)) mx = std::max(mx, static_cast<double>(logits[i]));
  double z = 0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (text_allowed(static_cast<int>(i), g)) z += std::exp(logits[i] - mx);
  const double lz = mx + std::log(z);
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (text_allowed(static_cast<int>(i), g)) out[i] = logits[i] - lz;
  return out;
}

/// Stream-0 indices that may not be generated at this frame.
bool stream0_forbidden(int idx, bool first_frame, const CodecConfig& c) {
  return idx == c.mask_index || (first_frame && idx == c.end_index);
}

/// Logits of stream `l` with forbidden entries set to -inf, divided by temperature.
std::vector<float> stream_logits(const DecoderState& st, int l, bool first_frame, double temperature,
                                 const CodecConfig& c) {
  std::vector<float> lg = st.codec_logits(l);
  for (std::size_t i = 0; i < lg.size(); ++i) {
    lg[i] = static_cast<float>(lg[i] / temperature);
    if (l == 0 && stream0_forbidden(static_cast<int>(i), first_frame, c))
      lg[i] = -std::numeric_limits<float>::infinity();
  }
  return lg;
}

double log_softmax_at(std::span<const float> lg, int idx) {
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : lg) mx = std::max(mx, static_cast<double>(v));
  double z = 0;
  for (float v : lg) z += std::exp(v - mx);
  return lg[static_cast<std::size_t>(idx)] - mx - std::log(z);
}

/// Speech segment generation shared by greedy (k = 1) and sampling.
Generation speech_generate(DecoderState st, int k, double temperature, int max_new, Rng* rng,
                           const DecodeGrammar& g, const ModelConfig& cfg) {
  Generation out;
  const CodecConfig& c = g.codec;
  for (int n = 0; n < max_new; ++n) {
    CodecFrame frame = CodecFrame::filled(cfg.n_streams, 0);
    bool end = false;
    for (int l = 0; l < cfg.n_streams; ++l) {
      const auto lg = stream_logits(st, l, n == 0, temperature, c);
      const auto keep = topk_indices(lg, k);
      int pick = keep[0];
      if (keep.size() > 1 && rng) {
        const double mx = lg[static_cast<std::size_t>(keep[0])];
        std::vector<double> w(keep.size());
        double z = 0;
        for (std::size_t i = 0; i < keep.size(); ++i) {
          const float v = lg[static_cast<std::size_t>(keep[i])];
          w[i] = std::isinf(v) ? 0.0 : std::exp(v - mx);
          z += w[i];
        }
        const double u = rng->uniform01() * z;
        double acc = 0;
        pick = keep.back();
        for (std::size_t i = 0; i < keep.size(); ++i) {
          acc += w[i];
          if (u < acc && w[i] > 0) {
            pick = keep[i];
            break;
          }
        }
        out.logprob += std::log(w[std::find(keep.begin(), keep.end(), pick) - keep.begin()] / z);
      } else {
        out.logprob += log_softmax_at(lg, pick);
      }
      if (l == 0 && pick == c.end_index) {
        end = true;
        break;
      }
      frame.set(l, pick);
    }
    if (end) {
      out.tokens.emplace_back(CodecFrame::filled(cfg.n_streams, c.end_index));
      out.tokens.emplace_back(TextToken{g.eos});
      return out;
    }
    out.tokens.emplace_back(frame);
    st.push(out.tokens.back());
  }
  out.truncated = true;
  return out;
}

}  // namespace

std::vector<int> topk_indices(std::span<const float> logits, int k) {
  if (k <= 0) throw ConfigError("top-k needs k > 0");
  std::vector<int> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(), [&](int a, int b) {
    const float la = logits[static_cast<std::size_t>(a)], lb = logits[static_cast<std::size_t>(b)];
    return la != lb ? la > lb : a < b;
  });
  idx.resize(kk);
  return idx;
}

Generation greedy_decode(const ParamsSet& params, const ModelConfig& cfg, std::span<const MultimodalToken> prefix,
                         int max_new, const DecodeGrammar& g) {
  const Mode mode = entry_mode(prefix, g);
  DecoderState st(params, cfg);
  st.push(prefix);
  if (mode == Mode::Speech) return speech_generate(std::move(st), 1, 1.0, max_new, nullptr, g, cfg);
  Generation out;
  for (int n = 0; n < max_new; ++n) {
    const auto lp = masked_text_logprobs(st.text_logits(), g);
    const int pick = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    out.logprob += lp[static_cast<std::size_t>(pick)];
    out.tokens.emplace_back(TextToken{pick});
    if (pick == g.text_end) {
      out.tokens.emplace_back(TextToken{g.eos});
      return out;
    }
    st.push(out.tokens.back());
  }
  out.truncated = true;
  return out;
}

BeamResult beam_search(const ParamsSet& params, const ModelConfig& cfg, std::span<const MultimodalToken> prefix,
                       int beam, int max_new, const DecodeGrammar& g) {
  if (beam < 1) throw ConfigError("beam size must be positive");
  if (entry_mode(prefix, g) != Mode::Text) throw ContractError("beam search needs a text target");

  struct Live {
    BeamHypothesis hyp;
    DecoderState state;
  };
  DecoderState root(params, cfg);
  root.push(prefix);
  std::vector<Live> live;
  live.push_back({BeamHypothesis{}, std::move(root)});
  std::vector<BeamHypothesis> finished;

  auto better_final = [](const BeamHypothesis& a, const BeamHypothesis& b) {
    if (a.score() != b.score()) return a.score() > b.score();
    if (a.step_finished != b.step_finished) return a.step_finished < b.step_finished;
    return a.ids < b.ids;
  };

  for (int n = 0; n < max_new && !live.empty(); ++n) {
    struct Cand {
      std::size_t parent;
      int id;
      double logprob;
    };
    std::vector<Cand> cands;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto lp = masked_text_logprobs(live[h].state.text_logits(), g);
      for (std::size_t v = 0; v < lp.size(); ++v)
        if (std::isfinite(lp[v])) cands.push_back({h, static_cast<int>(v), live[h].hyp.logprob + lp[v]});
    }
    const auto kk = std::min<std::size_t>(static_cast<std::size_t>(beam), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(kk), cands.end(),
                      [&](const Cand& a, const Cand& b) {
                        if (a.logprob != b.logprob) return a.logprob > b.logprob;
                        const auto& ia = live[a.parent].hyp.ids;
                        const auto& ib = live[b.parent].hyp.ids;
                        if (ia != ib) return ia < ib;
                        return a.id < b.id;
                      });
    cands.resize(kk);

    std::vector<Live> next;
    for (const auto& c : cands) {
      BeamHypothesis h = live[c.parent].hyp;
      h.ids.push_back(c.id);
      h.logprob = c.logprob;
      if (c.id == g.text_end) {
        h.finished = true;
        h.step_finished = n;
        finished.push_back(std::move(h));
        continue;
      }
      DecoderState st = live[c.parent].state;
      st.push(MultimodalToken(TextToken{c.id}));
      next.push_back({std::move(h), std::move(st)});
    }
    live = std::move(next);

    // Extending only lowers the cumulative log-probability (<= 0), so the best
    // reachable mean is attained at the longest remaining length.
    if (!finished.empty() && !live.empty()) {
      double best = -std::numeric_limits<double>::infinity();
      for (const auto& f : finished) best = std::max(best, f.score());
      bool can_improve = false;
      for (const auto& l : live) {
        const double bound = l.hyp.logprob / static_cast<double>(max_new);
        if (bound > best) can_improve = true;
      }
      if (!can_improve) live.clear();
    }
  }

  BeamResult res;
  std::sort(finished.begin(), finished.end(), better_final);
  res.finals = finished;
  if (!finished.empty()) {
    const auto& b = finished.front();
    for (int id : b.ids) res.best.tokens.emplace_back(TextToken{id});
    res.best.tokens.emplace_back(TextToken{g.eos});
    res.best.logprob = b.logprob;
  } else if (!live.empty()) {
    const auto& b = live.front().hyp;
    for (int id : b.ids) res.best.tokens.emplace_back(TextToken{id});
    res.best.logprob = b.logprob;
    res.best.truncated = true;
  } else {
    res.best.truncated = true;
  }
  return res;
}

std::vector<Generation> topk_sample(const ParamsSet& params, const ModelConfig& cfg,
                                    std::span<const MultimodalToken> prefix, int k, double temperature,
                                    int n_samples, int max_new, const Rng& rng, const DecodeGrammar& g) {
  if (k <= 0) throw ConfigError("top-k needs k > 0");
  if (k > cfg.codebook_size) throw ConfigError("top-k exceeds the codebook size");
  if (!(temperature > 0)) throw ConfigError("temperature must be positive");
  if (entry_mode(prefix, g) != Mode::Speech) throw ContractError("top-k sampling needs a speech target");
  DecoderState st(params, cfg);
  st.push(prefix);
  std::vector<Generation> out;
  for (int j = 0; j < n_samples; ++j) {
    Rng r = rng.derive("sample", static_cast<std::uint64_t>(j));
    out.push_back(speech_generate(st, k, temperature, max_new, &r, g, cfg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Task-level inference

void DecodeConfig::validate() const {
  if (beam < 1) throw ConfigError("decode: beam must be positive");
  if (topk < 1) throw ConfigError("decode: topk must be positive");
  if (!(temperature > 0)) throw ConfigError("decode: temperature must be positive");
  if (n_samples < 1) throw ConfigError("decode: n_samples must be positive");
}

ojson DecodeConfig::to_json() const {
  return ojson{{"beam", beam},          {"topk", topk},       {"temperature", temperature},
               {"n_samples", n_samples}, {"max_new", max_new}, {"seed", seed}};
}

DecodeConfig DecodeConfig::from_json(const nlohmann::json& j, DecodeConfig d) {
  static const std::vector<std::string> kKeys = {"beam", "topk", "temperature", "n_samples", "max_new", "seed"};
  for (const auto& [k, _] : j.items())
    if (std::find(kKeys.begin(), kKeys.end(), k) == kKeys.end()) throw ConfigError("unknown decode key: " + k);
  try {
    d.beam = j.value("beam", d.beam);
    d.topk = j.value("topk", d.topk);
    d.temperature = j.value("temperature", d.temperature);
    d.n_samples = j.value("n_samples", d.n_samples);
    d.max_new = j.value("max_new", d.max_new);
    d.seed = j.value("seed", d.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("decode config: ") + e.what());
  }
  d.validate();
  return d;
}

namespace {

ojson frames_json(const Frames& fs) {
  ojson a = ojson::array();
  for (const auto& f : fs) {
    ojson row = ojson::array();
    for (int l = 0; l < f.size(); ++l) row.push_back(f[l]);
    a.push_back(std::move(row));
  }
  return a;
}

Frames frames_from(const nlohmann::json& a) {
  Frames out;
  for (const auto& row : a) {
    CodecFrame f = CodecFrame::filled(static_cast<int>(row.size()), 0);
    for (std::size_t l = 0; l < row.size(); ++l) f.set(static_cast<int>(l), row[l].get<int>());
    out.push_back(f);
  }
  return out;
}

}  // namespace

ojson InferenceRecord::to_json() const {
  ojson j{{"id", id}, {"task", task}};
  if (frames_out.empty()) {
    j["text_out"] = text_out;
  } else {
    ojson arr = ojson::array();
    for (const auto& f : frames_out) arr.push_back(frames_json(f));
    j["frames_out"] = std::move(arr);
    j["sample_truncated"] = sample_truncated;
    j["speaker_prompt"] = speaker_prompt;
  }
  j["truncated"] = truncated;
  j["logprob"] = logprob;
  return j;
}

InferenceRecord InferenceRecord::from_json(const nlohmann::json& j, const CodecConfig&) {
  InferenceRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.task = j.at("task").get<std::string>();
    r.text_out = j.value("text_out", std::string());
    if (j.contains("frames_out"))
      for (const auto& f : j["frames_out"]) r.frames_out.push_back(frames_from(f));
    if (j.contains("sample_truncated")) r.sample_truncated = j["sample_truncated"].get<std::vector<bool>>();
    r.speaker_prompt = j.value("speaker_prompt", -1);
    r.truncated = j.at("truncated").get<bool>();
    r.logprob = j.at("logprob").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed output record: ") + e.what());
  }
  return r;
}

TaskKind downstream_kind(std::string_view task) {
  if (task == "asr") return TaskKind::SftAsr;
  if (task == "tts") return TaskKind::SftTts;
  if (task == "s2t") return TaskKind::SftS2t;
  if (task == "s2s") return TaskKind::SftS2s;
  throw ConfigError("unknown downstream task: " + std::string(task));
}

InferenceRun run_task_inference(std::string_view task, const ParamsSet& params, const ModelConfig& cfg,
                                std::span<const ToySample> samples, std::span<const ToySample> speaker_pool,
                                const TextVocab& vocab, const PromptPool& pool, const CodecConfig& codec,
                                const DecodeConfig& dc) {
  dc.validate();
  const TaskKind kind = downstream_kind(task);
  const bool speech_target = target_modality(kind) == Modality::Speech;
  const auto grammar = DecodeGrammar::from_vocab(vocab, codec);
  const auto n_prompts = pool.partition(*prompt_family(kind), Phase::SFT).size();
  const Rng root(dc.seed);

  InferenceRun run;
  for (const auto& s : samples) {
    try {
      const int prompt_id = static_cast<int>(mix64(fnv1a(s.id)) % n_prompts);
      BuildOptions opts;
      Frames speaker;
      if (kind == TaskKind::SftTts) {
        speaker = speaker_prompt_for(s, speaker_pool);
        opts.speaker_prompt = speaker;
      }
      const auto seq = build_sequence(kind, s, prompt_id, Phase::SFT, vocab, pool, codec, opts);
      const auto prefix = decode_prefix(seq);
      InferenceRecord rec;
      rec.id = s.id;
      rec.task = std::string(task);
      if (speech_target) {
        const int cond_frames =
            kind == TaskKind::SftTts ? codec.frames_per_char * static_cast<int>(s.text_src.size())
                                     : static_cast<int>(s.speech_src.size());
        const int max_new = dc.max_new > 0 ? dc.max_new : 4 * cond_frames;
        const auto gens = topk_sample(params, cfg, prefix, dc.topk, dc.temperature, dc.n_samples, max_new,
                                      root.derive(s.id), grammar);
        for (const auto& gen : gens) {
          Frames fs;
          for (const auto& t : gen.tokens)
            if (is_speech(t) && !is_end_frame(frame_of(t), codec)) fs.push_back(frame_of(t));
          rec.frames_out.push_back(std::move(fs));
          rec.sample_truncated.push_back(gen.truncated);
          rec.truncated = rec.truncated || gen.truncated;
          rec.logprob += gen.logprob / static_cast<double>(gens.size());
        }
        if (kind == TaskKind::SftTts && !speaker.empty()) rec.speaker_prompt = speaker_of(speaker, codec).speaker_id;
      } else {
        const int expected = static_cast<int>(s.speech_src.size()) / codec.frames_per_char;
        const int max_new = dc.max_new > 0 ? dc.max_new : 2 * expected + 2;
        Generation gen = dc.beam == 1 ? greedy_decode(params, cfg, prefix, max_new, grammar)
                                      : beam_search(params, cfg, prefix, dc.beam, max_new, grammar).best;
        std::string text;
        for (const auto& t : gen.tokens) {
          const int id = text_id(t);
          if (vocab.is_char(id)) text.push_back(id_char(id - vocab.char_base));
        }
        rec.text_out = std::move(text);
        rec.truncated = gen.truncated;
        rec.logprob = gen.logprob;
      }
      run.records.push_back(std::move(rec));
    } catch (const std::exception& e) {
      ++run.skipped;
      run.errors.push_back(s.id + ": " + e.what());
    }
  }
  return run;
}

}  // namespace clm
