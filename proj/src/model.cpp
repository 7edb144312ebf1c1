#include "clm/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "clm/error.hpp"
#include "clm/kernels.hpp"
#include "clm/rng.hpp"

namespace clm {

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0) throw ConfigError("model: dimensions must be positive");
  if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) throw ConfigError("model: head dimension must be even for rotary positions");
  if (n_streams < 1 || n_streams > kMaxStreams) throw ConfigError("model: n_streams out of range");
  if (codebook_size < 1 || text_vocab_size < 1) throw ConfigError("model: vocabulary sizes must be positive");
  if (max_seq_len < 2 || ffn_hidden < 1) throw ConfigError("model: invalid max_seq_len or ffn_hidden");
}

int ModelConfig::ffn_for(int d_model) {
  return static_cast<int>(std::lround(d_model * 8.0 / 3.0 / 8.0)) * 8;
}

ModelConfig ModelConfig::desk(int text_vocab_size, const CodecConfig& codec) {
  ModelConfig m;
  m.text_vocab_size = text_vocab_size;
  m.n_streams = codec.n_streams_used;
  m.codebook_size = codec.codebook_size;
  return m;
}

ModelConfig ModelConfig::full_scale(const CodecConfig& codec) {
  ModelConfig m;
  m.d_model = 1024;
  m.n_layers = 24;
  m.n_heads = 16;
  m.ffn_hidden = 2816;
  m.max_seq_len = 4096;
  m.text_vocab_size = 155012;
  m.n_streams = codec.n_streams_used;
  m.codebook_size = codec.codebook_size;
  return m;
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
void BasicParams<T>::add(std::string name, std::vector<int> shape) {
  index_.emplace(name, names_.size());
  names_.push_back(std::move(name));
  tensors_.emplace_back(std::move(shape));
}

template <typename T>
BasicParams<T>::BasicParams(const ModelConfig& cfg) {
  cfg.validate();
  const int D = cfg.d_model, V = cfg.text_vocab_size, K = cfg.codebook_size, H = cfg.ffn_hidden;
  auto next = [this] { return names_.size(); };
  layout_.text_embed = next();
  add("embed.text", {V, D});
  for (int l = 0; l < cfg.n_streams; ++l) {
    layout_.codec_embed.push_back(next());
    add("embed.codec." + std::to_string(l), {K, D});
  }
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    ParamLayout::Block b{};
    b.attn_norm = next();
    add(p + "attn_norm", {D});
    b.q = next();
    add(p + "attn.q", {D, D});
    b.k = next();
    add(p + "attn.k", {D, D});
    b.v = next();
    add(p + "attn.v", {D, D});
    b.o = next();
    add(p + "attn.o", {D, D});
    b.ffn_norm = next();
    add(p + "ffn_norm", {D});
    b.gate = next();
    add(p + "ffn.gate", {D, H});
    b.up = next();
    add(p + "ffn.up", {D, H});
    b.down = next();
    add(p + "ffn.down", {H, D});
    layout_.blocks.push_back(b);
  }
  layout_.final_norm = next();
  add("final_norm", {D});
  layout_.text_head = next();
  add("head.text", {D, V});
  for (int l = 0; l < cfg.n_streams; ++l) {
    layout_.codec_head.push_back(next());
    add("head.codec." + std::to_string(l), {D, K});
  }
}

template <typename T>
BasicTensor<T>& BasicParams<T>::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
  return tensors_[it->second];
}

template <typename T>
const BasicTensor<T>& BasicParams<T>::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
  return tensors_[it->second];
}

template <typename T>
std::size_t BasicParams<T>::total_elements() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

template <typename T>
void BasicParams<T>::zero() {
  for (auto& t : tensors_) t.fill(T(0));
}

template <typename T>
template <typename U>
BasicParams<U> BasicParams<T>::cast() const {
  BasicParams<U> out;
  out.names_ = names_;
  out.index_ = index_;
  out.layout_ = layout_;
  for (const auto& t : tensors_) out.tensors_.push_back(cast_tensor<U>(t));
  return out;
}

template class BasicParams<float>;
template class BasicParams<double>;
template BasicParams<double> BasicParams<float>::cast<double>() const;
template BasicParams<float> BasicParams<double>::cast<float>() const;
template BasicParams<float> BasicParams<float>::cast<float>() const;

bool is_codec_param(std::string_view name) {
  return name.starts_with("embed.codec.") || name.starts_with("head.codec.");
}

namespace {

bool is_gain(std::string_view name) { return name.ends_with("norm"); }

}  // namespace

ParamsSet init_random(const ModelConfig& cfg, std::uint64_t seed, double stddev) {
  ParamsSet p(cfg);
  const Rng root(seed);
  for (std::size_t i = 0; i < p.count(); ++i) {
    auto& t = p[i];
    if (is_gain(p.name(i))) {
      t.fill(1.0f);
      continue;
    }
    Rng rng = root.derive(p.name(i));
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = static_cast<float>(stddev * rng.normal());
  }
  return p;
}

ParamsSet init_from_text(const ParamsSet& text_params, const ModelConfig& text_cfg, const ModelConfig& cfg,
                         std::uint64_t seed) {
  ParamsSet out = init_random(cfg, seed);
  std::vector<std::string> bad;
  for (std::size_t i = 0; i < out.count(); ++i) {
    const auto& name = out.name(i);
    if (is_codec_param(name)) continue;
    if (!text_params.contains(name) || text_params.at(name).shape() != out[i].shape()) bad.push_back(name);
  }
  if (!bad.empty() || text_cfg.d_model != cfg.d_model || text_cfg.n_heads != cfg.n_heads) {
    std::ostringstream msg;
    msg << "text checkpoint does not match the model config; mismatched:";
    for (const auto& n : bad) msg << ' ' << n;
    if (bad.empty()) msg << " (head layout)";
    throw ConfigError(msg.str());
  }
  for (std::size_t i = 0; i < out.count(); ++i)
    if (!is_codec_param(out.name(i))) out[i] = text_params.at(out.name(i));
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <typename T>
ConstMatMap<T> weight(const BasicParams<T>& p, std::size_t i) {
  return as_matrix(p[i]);
}

template <typename T>
void check_token(const MultimodalToken& tok, const ModelConfig& cfg) {
  if (is_speech(tok)) {
    const auto& f = frame_of(tok);
    if (f.size() != cfg.n_streams) throw InputError("frame stream count does not match the model");
    for (int l = 0; l < cfg.n_streams; ++l)
      if (f[l] < 0 || f[l] >= cfg.codebook_size) throw InputError("codec index out of range");
  } else {
    const int id = text_id(tok);
    if (id < 0 || id >= cfg.text_vocab_size) throw InputError("text id out of range: " + std::to_string(id));
  }
}

template <typename T>
void embed_into(const MultimodalToken& tok, const BasicParams<T>& p, const ModelConfig& cfg, T* out) {
  const auto& lay = p.layout();
  const int D = cfg.d_model;
  if (is_speech(tok)) {
    const auto& f = frame_of(tok);
    std::fill(out, out + D, T(0));
    for (int l = 0; l < cfg.n_streams; ++l) {
      const T* row = p[lay.codec_embed[static_cast<std::size_t>(l)]].data() + static_cast<std::size_t>(f[l]) * D;
      for (int j = 0; j < D; ++j) out[j] += row[j];
    }
  } else {
    const T* row = p[lay.text_embed].data() + static_cast<std::size_t>(text_id(tok)) * D;
    std::copy(row, row + D, out);
  }
}

template <typename T>
struct LayerActs {
  Mat<T> x_in, h1, q, k, v, attn, x_mid, h2, gate, up, act;
  Vec<T> inv1, inv2;
  std::vector<std::vector<Mat<T>>> probs;  // [segment][head]
};

template <typename T>
struct PackedPass {
  std::vector<int> offsets;    // segment starts, plus total
  std::vector<int> positions;  // position of each row within its segment
  std::vector<LayerActs<T>> layers;
  Mat<T> x_final, hidden;
  Vec<T> inv_final;
};

template <typename T>
void run_forward(std::span<const std::span<const MultimodalToken>> seqs, const BasicParams<T>& p,
                 const ModelConfig& cfg, PackedPass<T>& pass) {
  const int D = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
  const auto& lay = p.layout();
  pass.offsets.assign(1, 0);
  pass.positions.clear();
  for (const auto& s : seqs) {
    if (static_cast<int>(s.size()) > cfg.max_seq_len)
      throw InputError("sequence length " + std::to_string(s.size()) + " exceeds max_seq_len");
    for (std::size_t t = 0; t < s.size(); ++t) pass.positions.push_back(static_cast<int>(t));
    pass.offsets.push_back(pass.offsets.back() + static_cast<int>(s.size()));
  }
  const int N = pass.offsets.back();
  Mat<T> x(N, D);
  {
    int r = 0;
    for (const auto& s : seqs)
      for (const auto& tok : s) {
        check_token<T>(tok, cfg);
        embed_into(tok, p, cfg, x.row(r++).data());
      }
  }

  pass.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (int li = 0; li < cfg.n_layers; ++li) {
    const auto& b = lay.blocks[static_cast<std::size_t>(li)];
    LayerActs<T>& L = pass.layers[static_cast<std::size_t>(li)];
    L.x_in = x;
    rmsnorm_forward<T>(x, p[b.attn_norm].data(), cfg.norm_eps, L.h1, L.inv1);
    L.q.noalias() = L.h1 * weight(p, b.q);
    L.k.noalias() = L.h1 * weight(p, b.k);
    L.v.noalias() = L.h1 * weight(p, b.v);
    rope_apply(L.q.data(), N, H, dh, pass.positions, cfg.rope_base);
    rope_apply(L.k.data(), N, H, dh, pass.positions, cfg.rope_base);
    L.attn.resize(N, D);
    L.probs.resize(seqs.size());
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      const int off = pass.offsets[s], n = pass.offsets[s + 1] - off;
      if (n == 0) continue;
      attention_forward<T>(L.q.middleRows(off, n), L.k.middleRows(off, n), L.v.middleRows(off, n), H,
                           L.attn.middleRows(off, n), L.probs[s]);
    }
    x.noalias() += L.attn * weight(p, b.o);
    L.x_mid = x;
    rmsnorm_forward<T>(x, p[b.ffn_norm].data(), cfg.norm_eps, L.h2, L.inv2);
    L.gate.noalias() = L.h2 * weight(p, b.gate);
    L.up.noalias() = L.h2 * weight(p, b.up);
    L.act = L.gate.unaryExpr([](T g) { return silu(g); }).cwiseProduct(L.up);
    x.noalias() += L.act * weight(p, b.down);
  }
  pass.x_final = std::move(x);
  rmsnorm_forward<T>(pass.x_final, p[lay.final_norm].data(), cfg.norm_eps, pass.hidden, pass.inv_final);
}

template <typename T>
void accumulate(BasicParams<T>& g, std::size_t i, const Mat<T>& a, const Mat<T>& dy) {
  as_matrix(g[i]).noalias() += a.transpose() * dy;
}

template <typename T>
void run_backward(std::span<const std::span<const MultimodalToken>> seqs, const BasicParams<T>& p,
                  const ModelConfig& cfg, const PackedPass<T>& pass, const Mat<T>& dhidden, BasicParams<T>& g) {
  const int D = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
  const auto& lay = p.layout();
  const int N = pass.offsets.back();
  Mat<T> dx = Mat<T>::Zero(N, D);
  rmsnorm_backward<T>(pass.x_final, p[lay.final_norm].data(), pass.inv_final, dhidden, dx, g[lay.final_norm].data());

  Mat<T> dact, dgate, dup, dh2, dattn, dq, dk, dv, dh1;
  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const auto& b = lay.blocks[static_cast<std::size_t>(li)];
    const LayerActs<T>& L = pass.layers[static_cast<std::size_t>(li)];

    accumulate(g, b.down, L.act, dx);
    dact.noalias() = dx * weight(p, b.down).transpose();
    dgate.resize(N, cfg.ffn_hidden);
    dup.resize(N, cfg.ffn_hidden);
    for (Eigen::Index r = 0; r < N; ++r)
      for (Eigen::Index j = 0; j < cfg.ffn_hidden; ++j) {
        const T gv = L.gate(r, j);
        dgate(r, j) = dact(r, j) * L.up(r, j) * silu_grad(gv);
        dup(r, j) = dact(r, j) * silu(gv);
      }
    accumulate(g, b.gate, L.h2, dgate);
    accumulate(g, b.up, L.h2, dup);
    dh2.noalias() = dgate * weight(p, b.gate).transpose();
    dh2.noalias() += dup * weight(p, b.up).transpose();
    rmsnorm_backward<T>(L.x_mid, p[b.ffn_norm].data(), L.inv2, dh2, dx, g[b.ffn_norm].data());

    accumulate(g, b.o, L.attn, dx);
    dattn.noalias() = dx * weight(p, b.o).transpose();
    dq.setZero(N, D);
    dk.setZero(N, D);
    dv.setZero(N, D);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      const int off = pass.offsets[s], n = pass.offsets[s + 1] - off;
      if (n == 0) continue;
      attention_backward<T>(L.q.middleRows(off, n), L.k.middleRows(off, n), L.v.middleRows(off, n), H, L.probs[s],
                            dattn.middleRows(off, n), dq.middleRows(off, n), dk.middleRows(off, n),
                            dv.middleRows(off, n));
    }
    rope_apply(dq.data(), N, H, dh, pass.positions, cfg.rope_base, true);
    rope_apply(dk.data(), N, H, dh, pass.positions, cfg.rope_base, true);
    accumulate(g, b.q, L.h1, dq);
    accumulate(g, b.k, L.h1, dk);
    accumulate(g, b.v, L.h1, dv);
    dh1.noalias() = dq * weight(p, b.q).transpose();
    dh1.noalias() += dk * weight(p, b.k).transpose();
    dh1.noalias() += dv * weight(p, b.v).transpose();
    rmsnorm_backward<T>(L.x_in, p[b.attn_norm].data(), L.inv1, dh1, dx, g[b.attn_norm].data());
  }

  int r = 0;
  for (const auto& s : seqs)
    for (const auto& tok : s) {
      const T* src = dx.row(r++).data();
      if (is_speech(tok)) {
        const auto& f = frame_of(tok);
        for (int l = 0; l < cfg.n_streams; ++l) {
          T* dst = g[lay.codec_embed[static_cast<std::size_t>(l)]].data() + static_cast<std::size_t>(f[l]) * D;
          for (int j = 0; j < D; ++j) dst[j] += src[j];
        }
      } else {
        T* dst = g[lay.text_embed].data() + static_cast<std::size_t>(text_id(tok)) * D;
        for (int j = 0; j < D; ++j) dst[j] += src[j];
      }
    }
}

template <typename T>
Mat<T> gather_rows(const Mat<T>& m, const std::vector<int>& rows) {
  Mat<T> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

template <typename T>
void scatter_add_rows(Mat<T>& m, const std::vector<int>& rows, const Mat<T>& src) {
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(rows[i]) += src.row(static_cast<Eigen::Index>(i));
}

}  // namespace

template <typename T>
LossBreakdown sequence_loss(std::span<const LossInput> batch, const BasicParams<T>& params, const ModelConfig& cfg,
                            BasicParams<T>* grads) {
  const auto& lay = params.layout();
  std::vector<std::span<const MultimodalToken>> seqs;
  std::vector<int> text_rows, speech_rows, text_tgt;
  std::vector<std::vector<int>> stream_tgt(static_cast<std::size_t>(cfg.n_streams));
  int off = 0;
  for (const auto& in : batch) {
    const std::size_t T_len = in.tokens.size();
    if (in.loss_mask.size() != T_len || in.modality.size() != T_len)
      throw ContractError("sequence_loss: mask/modality length does not match tokens");
    if (T_len > 0 && in.loss_mask[T_len - 1]) throw ContractError("sequence_loss: mask selects the final position");
    for (std::size_t t = 0; t < T_len; ++t) {
      const bool sp = is_speech(in.tokens[t]);
      if (sp != (in.modality[t] == Modality::Speech))
        throw ContractError("sequence_loss: modality track disagrees with tokens");
      if (t + 1 >= T_len || !in.loss_mask[t]) continue;
      const auto& next = in.tokens[t + 1];
      if (is_speech(next)) {
        speech_rows.push_back(off + static_cast<int>(t));
        const auto& f = frame_of(next);
        for (int l = 0; l < cfg.n_streams; ++l) stream_tgt[static_cast<std::size_t>(l)].push_back(f[l]);
      } else {
        text_rows.push_back(off + static_cast<int>(t));
        text_tgt.push_back(text_id(next));
      }
    }
    seqs.push_back(in.tokens);
    off += static_cast<int>(T_len);
  }

  LossBreakdown out;
  out.n_text = static_cast<int>(text_rows.size());
  out.n_speech = static_cast<int>(speech_rows.size());
  out.stream_loss.assign(static_cast<std::size_t>(cfg.n_streams), 0.0);
  const int n_masked = out.n_masked();
  if (n_masked == 0 && !grads) return out;

  PackedPass<T> pass;
  run_forward<T>(seqs, params, cfg, pass);
  if (n_masked == 0) return out;

  const double stream_weight = cfg.stream_loss == StreamReduction::Sum ? 1.0 : 1.0 / cfg.n_streams;
  const T scale = static_cast<T>(1.0 / n_masked);
  Mat<T> dhidden;
  if (grads) dhidden.setZero(pass.hidden.rows(), pass.hidden.cols());

  double sum = 0.0;
  if (!text_rows.empty()) {
    const Mat<T> h = gather_rows(pass.hidden, text_rows);
    const Mat<T> logits = h * weight(params, lay.text_head);
    Mat<T> dlog;
    const double s = softmax_xent_rows<T>(logits, text_tgt, {}, scale, grads ? &dlog : nullptr);
    out.text_loss = s / out.n_text;
    sum += s;
    if (grads) {
      accumulate(*grads, lay.text_head, h, dlog);
      const Mat<T> dh = dlog * weight(params, lay.text_head).transpose();
      scatter_add_rows(dhidden, text_rows, dh);
    }
  }
  if (!speech_rows.empty()) {
    const Mat<T> h = gather_rows(pass.hidden, speech_rows);
    for (int l = 0; l < cfg.n_streams; ++l) {
      const std::size_t hi = lay.codec_head[static_cast<std::size_t>(l)];
      const Mat<T> logits = h * weight(params, hi);
      Mat<T> dlog;
      const double s = softmax_xent_rows<T>(logits, stream_tgt[static_cast<std::size_t>(l)], {},
                                            static_cast<T>(stream_weight) * scale, grads ? &dlog : nullptr);
      out.stream_loss[static_cast<std::size_t>(l)] = s / out.n_speech;
      sum += stream_weight * s;
      if (grads) {
        accumulate(*grads, hi, h, dlog);
        const Mat<T> dh = dlog * weight(params, hi).transpose();
        scatter_add_rows(dhidden, speech_rows, dh);
      }
    }
  }
  out.total = sum / n_masked;
  if (grads) run_backward<T>(seqs, params, cfg, pass, dhidden, *grads);
  return out;
}

template <typename T>
Mat<T> embed_sequence(std::span<const MultimodalToken> tokens, const BasicParams<T>& params, const ModelConfig& cfg) {
  Mat<T> x(static_cast<Eigen::Index>(tokens.size()), cfg.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    check_token<T>(tokens[t], cfg);
    embed_into(tokens[t], params, cfg, x.row(static_cast<Eigen::Index>(t)).data());
  }
  return x;
}

template <typename T>
ForwardOutput<T> forward(std::span<const MultimodalToken> tokens, const BasicParams<T>& params,
                         const ModelConfig& cfg) {
  PackedPass<T> pass;
  const std::span<const MultimodalToken> one[1] = {tokens};
  run_forward<T>(one, params, cfg, pass);
  ForwardOutput<T> out;
  const auto& lay = params.layout();
  out.text_logits = pass.hidden * weight(params, lay.text_head);
  for (int l = 0; l < cfg.n_streams; ++l)
    out.codec_logits.push_back(pass.hidden * weight(params, lay.codec_head[static_cast<std::size_t>(l)]));
  out.hidden = std::move(pass.hidden);
  return out;
}

template LossBreakdown sequence_loss<float>(std::span<const LossInput>, const BasicParams<float>&, const ModelConfig&,
                                            BasicParams<float>*);
template LossBreakdown sequence_loss<double>(std::span<const LossInput>, const BasicParams<double>&,
                                             const ModelConfig&, BasicParams<double>*);
template Mat<float> embed_sequence<float>(std::span<const MultimodalToken>, const BasicParams<float>&,
                                          const ModelConfig&);
template Mat<double> embed_sequence<double>(std::span<const MultimodalToken>, const BasicParams<double>&,
                                            const ModelConfig&);
template ForwardOutput<float> forward<float>(std::span<const MultimodalToken>, const BasicParams<float>&,
                                             const ModelConfig&);
template ForwardOutput<double> forward<double>(std::span<const MultimodalToken>, const BasicParams<double>&,
                                               const ModelConfig&);

// ---------------------------------------------------------------------------
// Incremental decoding

DecoderState::DecoderState(const ParamsSet& params, const ModelConfig& cfg)
    : params_(&params), cfg_(&cfg), k_cache_(static_cast<std::size_t>(cfg.n_layers)),
      v_cache_(static_cast<std::size_t>(cfg.n_layers)) {}

void DecoderState::push(const MultimodalToken& token) {
  const ModelConfig& cfg = *cfg_;
  const ParamsSet& p = *params_;
  if (pos_ >= cfg.max_seq_len) throw InputError("decoder exceeded max_seq_len");
  check_token<float>(token, cfg);
  const int D = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
  const auto& lay = p.layout();
  using Row = Mat<float>;
  Row x(1, D);
  embed_into(token, p, cfg, x.data());
  Row h, q, k, v, attn(1, D), gate, up;
  Vec<float> inv;
  const int position[1] = {pos_};
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<float> scores(static_cast<std::size_t>(pos_ + 1));
  for (int li = 0; li < cfg.n_layers; ++li) {
    const auto& b = lay.blocks[static_cast<std::size_t>(li)];
    rmsnorm_forward<float>(x, p[b.attn_norm].data(), cfg.norm_eps, h, inv);
    q.noalias() = h * weight(p, b.q);
    k.noalias() = h * weight(p, b.k);
    v.noalias() = h * weight(p, b.v);
    rope_apply(q.data(), 1, H, dh, position, cfg.rope_base);
    rope_apply(k.data(), 1, H, dh, position, cfg.rope_base);
    auto& kc = k_cache_[static_cast<std::size_t>(li)];
    auto& vc = v_cache_[static_cast<std::size_t>(li)];
    kc.insert(kc.end(), k.data(), k.data() + D);
    vc.insert(vc.end(), v.data(), v.data() + D);
    const int n = pos_ + 1;
    for (int hd = 0; hd < H; ++hd) {
      const float* qh = q.data() + hd * dh;
      float mx = -INFINITY;
      for (int j = 0; j < n; ++j) {
        const float* kj = kc.data() + static_cast<std::size_t>(j) * D + hd * dh;
        float s = 0;
        for (int e = 0; e < dh; ++e) s += qh[e] * kj[e];
        scores[static_cast<std::size_t>(j)] = s * scale;
        mx = std::max(mx, s * scale);
      }
      float sum = 0;
      for (int j = 0; j < n; ++j) {
        scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
        sum += scores[static_cast<std::size_t>(j)];
      }
      float* oh = attn.data() + hd * dh;
      std::fill(oh, oh + dh, 0.0f);
      for (int j = 0; j < n; ++j) {
        const float w = scores[static_cast<std::size_t>(j)] / sum;
        const float* vj = vc.data() + static_cast<std::size_t>(j) * D + hd * dh;
        for (int e = 0; e < dh; ++e) oh[e] += w * vj[e];
      }
    }
    x.noalias() += attn * weight(p, b.o);
    rmsnorm_forward<float>(x, p[b.ffn_norm].data(), cfg.norm_eps, h, inv);
    gate.noalias() = h * weight(p, b.gate);
    up.noalias() = h * weight(p, b.up);
    const Row act = gate.unaryExpr([](float g) { return silu(g); }).cwiseProduct(up);
    x.noalias() += act * weight(p, b.down);
  }
  Row out;
  rmsnorm_forward<float>(x, p[lay.final_norm].data(), cfg.norm_eps, out, inv);
  last_ = out.row(0).transpose();
  ++pos_;
}

std::vector<float> DecoderState::text_logits() const {
  const auto w = weight(*params_, params_->layout().text_head);
  const Mat<float> r = last_.transpose() * w;
  return {r.data(), r.data() + r.size()};
}

std::vector<float> DecoderState::codec_logits(int stream) const {
  const auto w = weight(*params_, params_->layout().codec_head[static_cast<std::size_t>(stream)]);
  const Mat<float> r = last_.transpose() * w;
  return {r.data(), r.data() + r.size()};
}

}  // namespace clm
