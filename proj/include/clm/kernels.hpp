#pragma once

// Dense kernels with hand-written backward passes. Matrices are row-major;
// a linear layer computes y = x W with W stored [in, out].

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "clm/rng.hpp"
#include "clm/tensor.hpp"

namespace clm {

// ---- RMS normalization ----------------------------------------------------

/// y = x / sqrt(mean(x^2) + eps) * gain, row-wise. Stores 1/rms per row.
template <typename T>
void rmsnorm_forward(const Mat<T>& x, const T* gain, double eps, Mat<T>& y, Vec<T>& inv_rms);

/// Accumulates into dx and dgain.
template <typename T>
void rmsnorm_backward(const Mat<T>& x, const T* gain, const Vec<T>& inv_rms, const Mat<T>& dy, Mat<T>& dx,
                      T* dgain);

template <typename T>
BasicTensor<T> rmsnorm(const BasicTensor<T>& x, const BasicTensor<T>& gain, double eps);

// ---- Rotary positions -----------------------------------------------------

/// Rotates interleaved pairs (2i, 2i+1) of every head in place. `x` is
/// [n_tokens, n_heads * head_dim]; pair i of a token at position p turns by
/// p * base^(-2i/head_dim). `inverse` applies the transposed rotation, which
/// is also the backward pass.
template <typename T>
void rope_apply(T* x, int n_tokens, int n_heads, int head_dim, std::span<const int> positions, double base,
                bool inverse = false);

// ---- Causal attention -----------------------------------------------------

template <typename T>
using CRef = Eigen::Ref<const Mat<T>>;
template <typename T>
using MRef = Eigen::Ref<Mat<T>>;

/// Per-head softmax(q k^T / sqrt(d_h)) v with a causal mask, for one sequence.
/// Row t of `probs[h]` holds the attention weights of position t. `out` must
/// be pre-sized to q's shape.
template <typename T>
void attention_forward(CRef<T> q, CRef<T> k, CRef<T> v, int n_heads, MRef<T> out, std::vector<Mat<T>>& probs);

/// Accumulates into dq, dk, dv.
template <typename T>
void attention_backward(CRef<T> q, CRef<T> k, CRef<T> v, int n_heads, const std::vector<Mat<T>>& probs,
                        CRef<T> dout, MRef<T> dq, MRef<T> dk, MRef<T> dv);

template <typename T>
struct AttentionWeights {
  Mat<T> wq, wk, wv, wo;  // each [d_model, d_model]
};

/// Full attention block on one sequence: projections, optional rotary
/// positions (empty span: none), causal core, output projection.
template <typename T>
Mat<T> causal_attention(const Mat<T>& x, const AttentionWeights<T>& w, int n_heads,
                        std::span<const int> rope_positions = {}, double rope_base = 10000.0);

// ---- Activations ----------------------------------------------------------

template <typename T>
inline T silu(T x) {
  return x / (T(1) + std::exp(-x));
}
template <typename T>
inline T silu_grad(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

// ---- Cross-entropy --------------------------------------------------------

/// Sum over rows of weight[r] * -log softmax(logits[r])[target[r]]. When
/// `dlogits` is given, writes scale * weight[r] * (softmax - onehot) into it.
/// Throws std::out_of_range for a target outside [0, V).
template <typename T>
double softmax_xent_rows(const Mat<T>& logits, std::span<const int> targets, std::span<const T> weights, T scale,
                         Mat<T>* dlogits);

template <typename T>
struct CrossEntropyResult {
  double loss = 0.0;
  Mat<T> dlogits;
};

/// Mean negative log-likelihood over masked rows (0 when the mask is empty).
template <typename T>
CrossEntropyResult<T> cross_entropy(const Mat<T>& logits, std::span<const int> targets, std::span<const T> mask);

/// Row-wise log-softmax in double precision.
std::vector<double> log_softmax(std::span<const float> logits);

// ---- Finite-difference gradient checking ---------------------------------

struct CheckedParam {
  std::string name;
  Tensor64* value;
  const Tensor64* analytic;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_name;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int n_checked = 0;
};

/// Central differences on a random subsample of `coords_per_tensor`
/// coordinates per tensor (all coordinates of smaller tensors). Relative
/// error is |a - n| / max(1e-8, |a| + |n|).
GradCheckResult grad_check(const std::function<double()>& loss, std::span<const CheckedParam> params, Rng& rng,
                           double eps = 1e-4, int coords_per_tensor = 200);

}  // namespace clm
