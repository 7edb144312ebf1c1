#pragma once

// Unified codec/text decoder-only transformer: one shared embedding space
// (text table plus one table per codec stream, streams summed), pre-norm
// blocks with rotary attention and a SiLU-gated FFN, and parallel output
// heads (text head plus one head per codec stream) over the same hidden state.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "clm/seqfmt.hpp"
#include "clm/tensor.hpp"

namespace clm {

enum class StreamReduction : std::uint8_t { Sum, Mean };

struct ModelConfig {
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int n_streams = 3;  // L'
  int codebook_size = 64;
  int text_vocab_size = 0;
  int max_seq_len = 512;
  int ffn_hidden = 344;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  StreamReduction stream_loss = StreamReduction::Sum;

  void validate() const;
  int head_dim() const { return d_model / n_heads; }

  /// 8/3 * d_model rounded to the nearest multiple of 8.
  static int ffn_for(int d_model);
  static ModelConfig desk(int text_vocab_size, const CodecConfig& codec);
  /// Size of the original 0.5B backbone; recorded for reference, not runnable here.
  static ModelConfig full_scale(const CodecConfig& codec);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Indices of each parameter inside a ParamsSet, derived from the config.
struct ParamLayout {
  struct Block {
    std::size_t attn_norm, q, k, v, o, ffn_norm, gate, up, down;
  };
  std::size_t text_embed = 0;
  std::vector<std::size_t> codec_embed;
  std::vector<Block> blocks;
  std::size_t final_norm = 0;
  std::size_t text_head = 0;
  std::vector<std::size_t> codec_head;
};

/// All model parameters addressed by stable dotted names.
template <typename T>
class BasicParams {
 public:
  BasicParams() = default;
  /// Zero-filled parameters with the name set and shapes implied by `cfg`.
  explicit BasicParams(const ModelConfig& cfg);

  std::size_t count() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const std::vector<std::string>& names() const { return names_; }
  BasicTensor<T>& operator[](std::size_t i) { return tensors_[i]; }
  const BasicTensor<T>& operator[](std::size_t i) const { return tensors_[i]; }
  BasicTensor<T>& at(std::string_view name);
  const BasicTensor<T>& at(std::string_view name) const;
  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t total_elements() const;

  void zero();
  template <typename U>
  BasicParams<U> cast() const;

  friend bool operator==(const BasicParams& a, const BasicParams& b) {
    return a.names_ == b.names_ && a.tensors_ == b.tensors_;
  }

 private:
  template <typename>
  friend class BasicParams;
  void add(std::string name, std::vector<int> shape);

  std::vector<std::string> names_;
  std::vector<BasicTensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
  ParamLayout layout_;
};

using ParamsSet = BasicParams<float>;
using ParamsSet64 = BasicParams<double>;

/// True for codec embedding tables and codec heads.
bool is_codec_param(std::string_view name);

/// Gaussian(0, 0.02) matrices, unit gains; deterministic per (cfg, seed).
ParamsSet init_random(const ModelConfig& cfg, std::uint64_t seed, double stddev = 0.02);

/// Copies the transformer, final norm, text embedding and text head from a
/// text-only model; codec tables and heads are drawn fresh. Throws ConfigError
/// listing mismatched tensor names.
ParamsSet init_from_text(const ParamsSet& text_params, const ModelConfig& text_cfg, const ModelConfig& cfg,
                         std::uint64_t seed);

/// A token sequence plus its loss mask and modality track.
struct LossInput {
  std::span<const MultimodalToken> tokens;
  std::span<const std::uint8_t> loss_mask;
  std::span<const Modality> modality;

  static LossInput of(const TaskSequence& s) { return {s.tokens, s.loss_mask, s.modality}; }
};

struct LossBreakdown {
  double total = 0.0;      // summed per-position loss / n_masked
  double text_loss = 0.0;  // mean text-head NLL over text-target positions
  std::vector<double> stream_loss;  // mean NLL per codec stream over speech-target positions
  int n_text = 0;
  int n_speech = 0;
  int n_masked() const { return n_text + n_speech; }
};

/// Next-token loss over the masked positions of a packed batch. Text
/// successors are scored by the text head; codec successors by all codec
/// heads (summed or averaged per config). When `grads` is non-null the
/// gradient of `total` is accumulated into it.
template <typename T>
LossBreakdown sequence_loss(std::span<const LossInput> batch, const BasicParams<T>& params, const ModelConfig& cfg,
                            BasicParams<T>* grads = nullptr);

template <typename T>
LossBreakdown sequence_loss(const std::vector<TaskSequence>& batch, const BasicParams<T>& params,
                            const ModelConfig& cfg, BasicParams<T>* grads = nullptr) {
  std::vector<LossInput> in;
  in.reserve(batch.size());
  for (const auto& s : batch) in.push_back(LossInput::of(s));
  return sequence_loss<T>(in, params, cfg, grads);
}

/// Shared-embedding lookup: text ids index the text table, frames sum one row
/// per codec stream.
template <typename T>
Mat<T> embed_sequence(std::span<const MultimodalToken> tokens, const BasicParams<T>& params, const ModelConfig& cfg);

template <typename T>
struct ForwardOutput {
  Mat<T> hidden;                    // [T, d_model], after the final norm
  Mat<T> text_logits;               // [T, |V|]
  std::vector<Mat<T>> codec_logits;  // L' x [T, codebook_size]
};

/// Applies every head at every position.
template <typename T>
ForwardOutput<T> forward(std::span<const MultimodalToken> tokens, const BasicParams<T>& params, const ModelConfig& cfg);

/// Incremental single-sequence decoder with a key/value cache.
class DecoderState {
 public:
  DecoderState(const ParamsSet& params, const ModelConfig& cfg);

  void push(const MultimodalToken& token);
  void push(std::span<const MultimodalToken> tokens) {
    for (const auto& t : tokens) push(t);
  }
  int position() const { return pos_; }

  /// Heads applied to the hidden state of the last pushed token.
  std::vector<float> text_logits() const;
  std::vector<float> codec_logits(int stream) const;

 private:
  const ParamsSet* params_;
  const ModelConfig* cfg_;
  int pos_ = 0;
  std::vector<std::vector<float>> k_cache_, v_cache_;  // per layer, [pos, d_model]
  Vec<float> last_;                                     // final-normed hidden
};

}  // namespace clm
