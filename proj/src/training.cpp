#include "clm/training.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "clm/error.hpp"

namespace clm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using ojson = nlohmann::ordered_json;

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::TextPt: return "text_pt";
    case Regime::CptSpeech: return "cpt_speech";
    case Regime::CptJoint: return "cpt_joint";
    case Regime::Sft: return "sft";
  }
  return "?";
}

Regime regime_from_name(std::string_view name) {
  for (Regime r : {Regime::TextPt, Regime::CptSpeech, Regime::CptJoint, Regime::Sft})
    if (name == regime_name(r)) return r;
  throw ConfigError("unknown regime: " + std::string(name));
}

const char* category_name(MixCategory c) {
  static constexpr const char* kNames[] = {"speech_continuation", "text_lm", "asr", "tts", "s2t", "t2st",
                                           "general_text", "mt_text"};
  return kNames[static_cast<int>(c)];
}

void MixerConfig::validate() const {
  double sum = 0;
  for (double w : weights) {
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("mixer weights must lie in [0, 1]");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("mixer weights must sum to 1");
}

MixerConfig MixerConfig::only(MixCategory c) {
  MixerConfig m;
  m.weights.fill(0.0);
  m.weights[static_cast<std::size_t>(c)] = 1.0;
  return m;
}

MixCategory sample_task(const MixerConfig& mixer, Rng& rng) {
  const double u = rng.uniform01();
  double acc = 0;
  int last = 0;
  for (int i = 0; i < kNumMixCategories; ++i) {
    const double w = mixer.weights[static_cast<std::size_t>(i)];
    if (w <= 0) continue;
    last = i;
    acc += w;
    if (u < acc) return static_cast<MixCategory>(i);
  }
  return static_cast<MixCategory>(last);
}

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (steps < 1 || batch_size < 1) throw ConfigError("train: steps and batch_size must be positive");
  if (!(min_lr > 0) || peak_lr < min_lr) throw ConfigError("train: need peak_lr >= min_lr > 0");
  if (!(clip_norm > 0)) throw ConfigError("train: clip_norm must be positive");
  if (warmup_frac < 0 || warmup_frac > 1) throw ConfigError("train: warmup_frac must lie in [0, 1]");
  if (mask_ratio < 0 || mask_ratio > 0.3) throw ConfigError("train: mask_ratio must lie in [0, 0.3]");
  if (mask_max_span < 1) throw ConfigError("train: mask_max_span must be positive");
  const bool sft_kind = sft_task == TaskKind::SftAsr || sft_task == TaskKind::SftTts ||
                        sft_task == TaskKind::SftS2t || sft_task == TaskKind::SftS2s;
  if (regime == Regime::Sft && !sft_kind)
    throw ConfigError(std::string("train: not a fine-tuning task: ") + task_name(sft_task));
  mixer.validate();
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.steps = 40000;
  c.batch_size = 640;
  c.peak_lr = 1e-5;
  c.min_lr = 1e-6;
  return c;
}

TrainConfig TrainConfig::desk(Regime r) {
  TrainConfig c;
  c.regime = r;
  c.steps = r == Regime::Sft ? 2000 : 5000;
  return c;
}

ojson TrainConfig::to_json() const {
  ojson mix = ojson::object();
  for (int i = 0; i < kNumMixCategories; ++i)
    mix[category_name(static_cast<MixCategory>(i))] = mixer.weights[static_cast<std::size_t>(i)];
  return ojson{{"regime", regime_name(regime)},
               {"sft_task", task_name(sft_task)},
               {"steps", steps},
               {"batch_size", batch_size},
               {"peak_lr", peak_lr},
               {"min_lr", min_lr},
               {"warmup_frac", warmup_frac},
               {"clip_norm", clip_norm},
               {"weight_decay", weight_decay},
               {"beta1", beta1},
               {"beta2", beta2},
               {"adam_eps", adam_eps},
               {"seed", seed},
               {"mixer", mix},
               {"mask_ratio", mask_ratio},
               {"mask_max_span", mask_max_span},
               {"speech_target_only", speech_target_only},
               {"pt_scope", pt_scope == PtLossScope::Full ? "full" : "target_only"},
               {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
  static const std::vector<std::string> kKeys = {
      "regime",      "sft_task", "steps",      "batch_size", "peak_lr",           "min_lr",
      "warmup_frac", "clip_norm", "weight_decay", "beta1",    "beta2",             "adam_eps",
      "seed",        "mixer",    "mask_ratio", "mask_max_span", "speech_target_only", "pt_scope",
      "checkpoint_every"};
  if (!j.is_object()) throw ConfigError("train config must be an object");
  for (const auto& [k, _] : j.items())
    if (std::find(kKeys.begin(), kKeys.end(), k) == kKeys.end()) throw ConfigError("unknown train key: " + k);
  try {
    if (j.contains("regime")) c.regime = regime_from_name(j["regime"].get<std::string>());
    if (j.contains("sft_task")) c.sft_task = task_from_name(j["sft_task"].get<std::string>());
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.min_lr = j.value("min_lr", c.min_lr);
    c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.seed = j.value("seed", c.seed);
    c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
    c.mask_max_span = j.value("mask_max_span", c.mask_max_span);
    c.speech_target_only = j.value("speech_target_only", c.speech_target_only);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    if (j.contains("pt_scope")) {
      const auto s = j["pt_scope"].get<std::string>();
      if (s == "full") c.pt_scope = PtLossScope::Full;
      else if (s == "target_only") c.pt_scope = PtLossScope::TargetOnly;
      else throw ConfigError("pt_scope must be full or target_only");
    }
    if (j.contains("mixer")) {
      MixerConfig m;
      m.weights.fill(0.0);
      for (const auto& [k, v] : j["mixer"].items()) {
        int idx = -1;
        for (int i = 0; i < kNumMixCategories; ++i)
          if (k == category_name(static_cast<MixCategory>(i))) idx = i;
        if (idx < 0) throw ConfigError("unknown mixer category: " + k);
        m.weights[static_cast<std::size_t>(idx)] = v.get<double>();
      }
      c.mixer = m;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Schedule, clipping, optimizer

double lr_at(int step, const TrainConfig& cfg) {
  int warm = static_cast<int>(std::lround(cfg.warmup_frac * cfg.steps));
  if (cfg.warmup_frac > 0) warm = std::max(warm, 1);
  step = std::clamp(step, 0, cfg.steps);
  if (step < warm) return cfg.peak_lr * step / warm;
  if (cfg.steps == warm) return cfg.peak_lr;
  const double progress = static_cast<double>(step - warm) / (cfg.steps - warm);
  return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_global_norm(ParamsSet& grads, double max_norm) {
  double sq = 0;
  for (std::size_t i = 0; i < grads.count(); ++i) {
    double s = 0;
    for (float v : grads[i].values()) s += static_cast<double>(v) * v;
    if (!std::isfinite(s)) throw NumericError("non-finite gradient in parameter " + grads.name(i));
    sq += s;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / norm);
    for (std::size_t i = 0; i < grads.count(); ++i)
      for (float& v : grads[i].values()) v *= scale;
  }
  return norm;
}

OptState OptState::zeros_like(const ParamsSet& p) {
  OptState s;
  for (std::size_t i = 0; i < p.count(); ++i) {
    s.m.emplace_back(p[i].shape());
    s.v.emplace_back(p[i].shape());
  }
  return s;
}

void adamw_step(ParamsSet& params, const ParamsSet& grads, OptState& state, double lr, const AdamW& hp) {
  if (state.m.size() != params.count()) throw ContractError("optimizer state does not match parameters");
  const std::int64_t t = ++state.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
  const double decay = 1.0 - lr * hp.weight_decay;
  for (std::size_t i = 0; i < params.count(); ++i) {
    float* p = params[i].data();
    const float* g = grads[i].data();
    float* m = state.m[i].data();
    float* v = state.v[i].data();
    const std::size_t n = params[i].size();
    for (std::size_t j = 0; j < n; ++j) {
      const double gj = g[j];
      const double mj = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
      const double vj = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double upd = (mj / bc1) / (std::sqrt(vj / bc2) + hp.eps);
      p[j] = static_cast<float>(p[j] * decay - lr * upd);
    }
  }
}

// ---------------------------------------------------------------------------
// Time masking

Frames time_mask(std::span<const CodecFrame> frames, double mask_ratio, int max_span, Rng& rng,
                 const CodecConfig& cfg) {
  if (mask_ratio < 0 || mask_ratio > 0.3) throw ConfigError("time_mask: mask_ratio must lie in [0, 0.3]");
  if (max_span < 1) throw ConfigError("time_mask: max_span must be positive");
  Frames out(frames.begin(), frames.end());
  const int n = static_cast<int>(frames.size());
  const int target = static_cast<int>(std::lround(mask_ratio * n));
  if (target == 0) return out;
  std::vector<std::uint8_t> covered(static_cast<std::size_t>(n), 0);
  int total = 0;
  for (int attempts = 0; total < target && attempts < 64 * n; ++attempts) {
    const int len = std::min(static_cast<int>(rng.uniform_int(1, max_span)), target - total);
    const int start = static_cast<int>(rng.uniform_int(0, n - len));
    bool free = true;
    for (int t = start; t < start + len && free; ++t) free = !covered[static_cast<std::size_t>(t)];
    if (!free) continue;
    for (int t = start; t < start + len; ++t) covered[static_cast<std::size_t>(t)] = 1;
    total += len;
  }
  const CodecFrame m = mask_frame(cfg);
  for (int t = 0; t < n; ++t)
    if (covered[static_cast<std::size_t>(t)]) out[static_cast<std::size_t>(t)] = m;
  return out;
}

// ---------------------------------------------------------------------------
// Batches

namespace {

int pick_prompt(PromptFamily f, Phase phase, const PromptPool& pool, Rng& rng) {
  const auto n = static_cast<std::int64_t>(pool.partition(f, phase).size());
  return static_cast<int>(rng.uniform_int(0, n - 1));
}

template <typename C>
const typename C::value_type& pick(const C& c, Rng& rng, const char* what) {
  if (c.empty()) throw ConfigError(std::string("training data has no ") + what);
  return c[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(c.size()) - 1))];
}

ToySample target_side(const ToySample& s) {
  ToySample t = s;
  std::swap(t.text_src, t.text_tgt);
  std::swap(t.speech_src, t.speech_tgt);
  std::swap(t.lang_src, t.lang_tgt);
  return t;
}

TaskKind kind_of(MixCategory c) {
  switch (c) {
    case MixCategory::SpeechContinuation: return TaskKind::SpeechContinuation;
    case MixCategory::TextLm: return TaskKind::TextLm;
    case MixCategory::Asr: return TaskKind::Asr;
    case MixCategory::Tts: return TaskKind::Tts;
    case MixCategory::S2t: return TaskKind::S2t;
    case MixCategory::T2st: return TaskKind::T2st;
    default: throw ContractError("not a paired-data category");
  }
}

TaskSequence build_paired(TaskKind kind, Phase phase, const ToySample& chosen, const TrainConfig& cfg,
                          const TrainData& data, const TaskEnv& env, Rng& rng) {
  ToySample s = chosen;
  if (kind == TaskKind::SpeechContinuation && rng.uniform01() < 0.5) s = target_side(s);
  if (kind == TaskKind::SftAsr && cfg.mask_ratio > 0) {
    Rng mrng = rng.derive("time_mask");
    s.speech_src = time_mask(s.speech_src, cfg.mask_ratio, cfg.mask_max_span, mrng, env.codec);
  }
  int prompt_id = 0;
  if (auto fam = prompt_family(kind)) prompt_id = pick_prompt(*fam, phase, env.pool, rng);
  BuildOptions opts;
  opts.pt_scope = cfg.pt_scope;
  Frames speaker;
  const TaskKind base = base_task(kind);
  if (base == TaskKind::Tts || base == TaskKind::T2st) {
    speaker = speaker_prompt_for(chosen, data.samples);
    opts.speaker_prompt = speaker;
  }
  return build_sequence(kind, s, prompt_id, phase, env.vocab, env.pool, env.codec, opts);
}

void restrict_to_speech_targets(TaskSequence& seq) {
  for (std::size_t t = 0; t + 1 < seq.tokens.size(); ++t)
    if (!is_speech(seq.tokens[t + 1])) seq.loss_mask[t] = 0;
}

}  // namespace

TaskSequence draw_sequence(const TrainConfig& cfg, const TrainData& data, const TaskEnv& env, Rng& rng) {
  switch (cfg.regime) {
    case Regime::TextPt: {
      if (!data.text.empty()) return build_text_lm(pick(data.text, rng, "text").text, Phase::PT, env.vocab, env.pool,
                                                   cfg.pt_scope);
      return build_text_lm(pick(data.samples, rng, "samples").text_src, Phase::PT, env.vocab, env.pool,
                           cfg.pt_scope);
    }
    case Regime::CptSpeech: {
      if (!cfg.speech_target_only)
        return build_paired(TaskKind::SpeechContinuation, Phase::PT, pick(data.samples, rng, "samples"), cfg, data,
                            env, rng);
      MixerConfig m = cfg.mixer;
      double sum = 0;
      for (int i = 0; i < 6; ++i) sum += m.weights[static_cast<std::size_t>(i)];
      m.weights[6] = m.weights[7] = 0;
      for (int i = 0; i < 6; ++i) m.weights[static_cast<std::size_t>(i)] /= sum;
      const MixCategory c = sample_task(m, rng);
      auto seq = build_paired(kind_of(c), Phase::PT, pick(data.samples, rng, "samples"), cfg, data, env, rng);
      restrict_to_speech_targets(seq);
      return seq;
    }
    case Regime::CptJoint: {
      const MixCategory c = sample_task(cfg.mixer, rng);
      if (c == MixCategory::GeneralText)
        return build_text_lm(pick(data.text, rng, "text").text, Phase::PT, env.vocab, env.pool, cfg.pt_scope);
      if (c == MixCategory::MtText) {
        const auto& r = pick(data.mt, rng, "MT pairs");
        const int pid = pick_prompt(PromptFamily::Mt, Phase::PT, env.pool, rng);
        return build_text_pair(r.src, r.tgt, pid, Phase::PT, env.vocab, env.pool, cfg.pt_scope);
      }
      return build_paired(kind_of(c), Phase::PT, pick(data.samples, rng, "samples"), cfg, data, env, rng);
    }
    case Regime::Sft:
      return build_paired(cfg.sft_task, Phase::SFT, pick(data.samples, rng, "samples"), cfg, data, env, rng);
  }
  throw ContractError("unknown regime");
}

std::vector<TaskSequence> assemble_batch(const TrainConfig& cfg, const TrainData& data, const TaskEnv& env,
                                         int step) {
  const Rng base = Rng(cfg.seed).derive("batch", static_cast<std::uint64_t>(step));
  std::vector<TaskSequence> out;
  out.reserve(static_cast<std::size_t>(cfg.batch_size));
  for (int b = 0; b < cfg.batch_size; ++b) {
    Rng rng = base.derive("item", static_cast<std::uint64_t>(b));
    out.push_back(draw_sequence(cfg, data, env, rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

ojson model_config_to_json(const ModelConfig& m) {
  return ojson{{"d_model", m.d_model},
               {"n_layers", m.n_layers},
               {"n_heads", m.n_heads},
               {"n_streams", m.n_streams},
               {"codebook_size", m.codebook_size},
               {"text_vocab_size", m.text_vocab_size},
               {"max_seq_len", m.max_seq_len},
               {"ffn_hidden", m.ffn_hidden},
               {"rope_base", m.rope_base},
               {"norm_eps", m.norm_eps},
               {"stream_loss", m.stream_loss == StreamReduction::Sum ? "sum" : "mean"}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig m) {
  try {
    m.d_model = j.value("d_model", m.d_model);
    m.n_layers = j.value("n_layers", m.n_layers);
    m.n_heads = j.value("n_heads", m.n_heads);
    m.n_streams = j.value("n_streams", m.n_streams);
    m.codebook_size = j.value("codebook_size", m.codebook_size);
    m.text_vocab_size = j.value("text_vocab_size", m.text_vocab_size);
    m.max_seq_len = j.value("max_seq_len", m.max_seq_len);
    m.ffn_hidden = j.value("ffn_hidden", m.ffn_hidden);
    m.rope_base = j.value("rope_base", m.rope_base);
    m.norm_eps = j.value("norm_eps", m.norm_eps);
    if (j.contains("stream_loss")) {
      const auto s = j["stream_loss"].get<std::string>();
      if (s != "sum" && s != "mean") throw ConfigError("stream_loss must be sum or mean");
      m.stream_loss = s == "sum" ? StreamReduction::Sum : StreamReduction::Mean;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return m;
}

namespace {

constexpr char kMagic[4] = {'C', 'L', 'M', 'K'};

struct ArrayRef {
  std::string name;
  const Tensor* tensor;
};

std::vector<ArrayRef> arrays_of(const Checkpoint& c) {
  std::vector<ArrayRef> out;
  for (std::size_t i = 0; i < c.params.count(); ++i) out.push_back({c.params.name(i), &c.params[i]});
  if (c.opt) {
    for (std::size_t i = 0; i < c.params.count(); ++i) out.push_back({"opt.m." + c.params.name(i), &c.opt->m[i]});
    for (std::size_t i = 0; i < c.params.count(); ++i) out.push_back({"opt.v." + c.params.name(i), &c.opt->v[i]});
  }
  return out;
}

template <typename T>
void put(std::string& buf, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  buf.append(b, sizeof(T));
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto arrays = arrays_of(ckpt);
  ojson manifest = ojson::array();
  std::uint64_t offset = 0;
  for (const auto& a : arrays) {
    const std::uint64_t len = a.tensor->size() * sizeof(float);
    manifest.push_back(ojson{{"name", a.name},
                             {"shape", a.tensor->shape()},
                             {"dtype", "f32"},
                             {"offset", offset},
                             {"length", len}});
    offset += len;
  }
  ojson header{{"model", model_config_to_json(ckpt.model)},
               {"meta", ckpt.meta},
               {"has_opt", ckpt.opt.has_value()},
               {"opt_step", ckpt.opt ? ckpt.opt->step : 0},
               {"arrays", manifest}};
  const std::string hdr = header.dump();
  std::string buf(kMagic, 4);
  put<std::uint32_t>(buf, kCheckpointVersion);
  put<std::uint64_t>(buf, hdr.size());
  buf += hdr;
  for (const auto& a : arrays)
    buf.append(reinterpret_cast<const char*>(a.tensor->data()), a.tensor->size() * sizeof(float));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint: " + path.string());
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw CheckpointError("failed writing checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint: " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 16 || std::memcmp(buf.data(), kMagic, 4) != 0) throw CorruptCheckpoint("not a checkpoint file");
  std::uint32_t version;
  std::uint64_t hlen;
  std::memcpy(&version, buf.data() + 4, 4);
  std::memcpy(&hlen, buf.data() + 8, 8);
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version));
  if (hlen > buf.size() - 16) throw CorruptCheckpoint("truncated checkpoint header");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("unreadable checkpoint manifest: ") + e.what());
  }
  const std::size_t data_start = 16 + hlen;

  Checkpoint c;
  try {
    c.model = model_config_from_json(header.at("model"));
    c.model.validate();
    c.meta = header.at("meta");
    const bool has_opt = header.at("has_opt").get<bool>();
    c.params = ParamsSet(c.model);
    if (has_opt) {
      c.opt = OptState::zeros_like(c.params);
      c.opt->step = header.at("opt_step").get<std::int64_t>();
    }
    const auto arrays = arrays_of(c);
    const auto& manifest = header.at("arrays");
    if (manifest.size() != arrays.size()) throw CorruptCheckpoint("checkpoint manifest has the wrong array count");
    for (std::size_t i = 0; i < arrays.size(); ++i) {
      const auto& e = manifest[i];
      const auto name = e.at("name").get<std::string>();
      if (name != arrays[i].name) throw CorruptCheckpoint("unexpected array " + name + " in checkpoint manifest");
      if (e.at("shape").get<std::vector<int>>() != arrays[i].tensor->shape())
        throw CheckpointShapeMismatch("array " + name + " does not match the embedded model config");
      const auto off = e.at("offset").get<std::uint64_t>(), len = e.at("length").get<std::uint64_t>();
      if (len != arrays[i].tensor->size() * sizeof(float) || e.at("dtype").get<std::string>() != "f32")
        throw CorruptCheckpoint("bad length or dtype for " + name);
      if (off > buf.size() - data_start || len > buf.size() - data_start - off)
        throw CorruptCheckpoint("checkpoint is truncated at array " + name);
      std::memcpy(const_cast<Tensor*>(arrays[i].tensor)->data(), buf.data() + data_start + off, len);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("malformed checkpoint manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw CorruptCheckpoint(std::string("invalid model config in checkpoint: ") + e.what());
  }

  if (expected) {
    const ParamsSet want(*expected);
    for (std::size_t i = 0; i < c.params.count(); ++i) {
      const auto& n = c.params.name(i);
      if (!want.contains(n) || want.at(n).shape() != c.params[i].shape())
        throw CheckpointShapeMismatch("checkpoint array " + n + " does not match the requested model config");
    }
    for (const auto& n : want.names())
      if (!c.params.contains(n)) throw CheckpointShapeMismatch("checkpoint lacks array " + n);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Training loop

ojson StepRecord::to_json() const {
  return ojson{{"step", step},           {"lr", lr},
               {"loss", loss},           {"text_loss", text_loss},
               {"codec_loss_per_stream", codec_loss}, {"grad_norm", grad_norm}};
}

namespace {

std::uint64_t digest_loss(std::uint64_t h, double loss) {
  std::uint64_t bits;
  std::memcpy(&bits, &loss, sizeof bits);
  return mix64(h ^ bits);
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

}  // namespace

TrainResult run_training(const TrainConfig& cfg, const ModelConfig& model_cfg, ParamsSet init,
                         const TrainData& data, const TaskEnv& env, const RunOptions& opts) {
  cfg.validate();
  model_cfg.validate();
  if (data.samples.empty() && !(cfg.regime == Regime::TextPt && !data.text.empty()))
    throw ConfigError("training corpus is empty");
  const ParamsSet shape_ref(model_cfg);
  for (std::size_t i = 0; i < shape_ref.count(); ++i)
    if (i >= init.count() || init.name(i) != shape_ref.name(i) || init[i].shape() != shape_ref[i].shape())
      throw ConfigError("initial parameters do not match the model config at " + shape_ref.name(i));

  TrainResult res;
  ParamsSet params = std::move(init);
  OptState opt = OptState::zeros_like(params);
  int step = 0;
  std::uint64_t digest = 0;
  if (opts.resume) {
    if (!opts.resume->opt) throw ConfigError("resume checkpoint has no optimizer state");
    params = opts.resume->params;
    opt = *opts.resume->opt;
    step = opts.resume->meta.at("step").get<int>();
    digest = std::stoull(opts.resume->meta.at("loss_digest").get<std::string>(), nullptr, 16);
  }
  const int end = opts.stop_at >= 0 ? std::min(opts.stop_at, cfg.steps) : cfg.steps;
  const AdamW hp{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay};

  std::ofstream log;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log.open(opts.out_dir / "train_log.jsonl", opts.resume ? std::ios::app : std::ios::trunc);
  }

  auto make_ckpt = [&](int at) {
    Checkpoint c;
    c.model = model_cfg;
    c.params = params;
    c.opt = opt;
    c.meta = ojson{{"regime", regime_name(cfg.regime)},
                   {"task", cfg.regime == Regime::Sft ? task_name(cfg.sft_task) : ""},
                   {"step", at},
                   {"seed", cfg.seed},
                   {"loss_digest", hex(digest)},
                   {"train", cfg.to_json()}};
    return c;
  };

  ParamsSet grads(model_cfg);
  for (; step < end; ++step) {
    const auto batch = assemble_batch(cfg, data, env, step);
    grads.zero();
    const LossBreakdown lb = sequence_loss<float>(batch, params, model_cfg, &grads);
    if (!std::isfinite(lb.total)) {
      if (!opts.out_dir.empty()) save_checkpoint(make_ckpt(step), opts.out_dir / "last_good.ckpt");
      throw NumericError("loss became non-finite at step " + std::to_string(step));
    }
    double norm;
    try {
      norm = clip_global_norm(grads, cfg.clip_norm);
    } catch (const NumericError&) {
      if (!opts.out_dir.empty()) save_checkpoint(make_ckpt(step), opts.out_dir / "last_good.ckpt");
      throw;
    }
    const double lr = lr_at(step + 1, cfg);
    adamw_step(params, grads, opt, lr, hp);
    digest = digest_loss(digest, lb.total);

    StepRecord rec{step + 1, lr, lb.total, lb.text_loss, lb.stream_loss, norm};
    if (log.is_open()) log << rec.to_json().dump() << '\n';
    res.log.push_back(rec);
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && !opts.out_dir.empty())
      save_checkpoint(make_ckpt(step + 1), opts.out_dir / ("step_" + std::to_string(step + 1) + ".ckpt"));
    if (opts.on_step && !opts.on_step(rec, params)) {
      ++step;
      res.stopped_early = true;
      break;
    }
  }
  res.checkpoint = make_ckpt(step);
  if (!opts.out_dir.empty()) save_checkpoint(res.checkpoint, opts.out_dir / "final.ckpt");
  return res;
}

}  // namespace clm
