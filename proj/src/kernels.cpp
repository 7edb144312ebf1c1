#include "clm/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "clm/error.hpp"

namespace clm {

template <typename T>
void rmsnorm_forward(const Mat<T>& x, const T* gain, double eps, Mat<T>& y, Vec<T>& inv_rms) {
  const Eigen::Index n = x.rows(), d = x.cols();
  y.resize(n, d);
  inv_rms.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double ms = x.row(r).template cast<double>().squaredNorm() / static_cast<double>(d);
    const T inv = static_cast<T>(1.0 / std::sqrt(ms + eps));
    inv_rms[r] = inv;
    for (Eigen::Index j = 0; j < d; ++j) y(r, j) = x(r, j) * inv * gain[j];
  }
}

template <typename T>
void rmsnorm_backward(const Mat<T>& x, const T* gain, const Vec<T>& inv_rms, const Mat<T>& dy, Mat<T>& dx,
                      T* dgain) {
  const Eigen::Index n = x.rows(), d = x.cols();
  for (Eigen::Index r = 0; r < n; ++r) {
    const T inv = inv_rms[r];
    T dot = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      dot += dy(r, j) * gain[j] * x(r, j);
      dgain[j] += dy(r, j) * x(r, j) * inv;
    }
    const T coef = inv * inv * inv * dot / static_cast<T>(d);
    for (Eigen::Index j = 0; j < d; ++j) dx(r, j) += inv * dy(r, j) * gain[j] - x(r, j) * coef;
  }
}

template <typename T>
BasicTensor<T> rmsnorm(const BasicTensor<T>& x, const BasicTensor<T>& gain, double eps) {
  const int d = x.shape().back();
  if (static_cast<int>(gain.size()) != d) throw ConfigError("rmsnorm: gain size mismatch");
  Mat<T> xm = ConstMatMap<T>(x.data(), static_cast<Eigen::Index>(x.size() / static_cast<std::size_t>(d)), d);
  Mat<T> y;
  Vec<T> inv;
  rmsnorm_forward<T>(xm, gain.data(), eps, y, inv);
  BasicTensor<T> out(x.shape());
  std::copy(y.data(), y.data() + y.size(), out.data());
  return out;
}

template <typename T>
void rope_apply(T* x, int n_tokens, int n_heads, int head_dim, std::span<const int> positions, double base,
                bool inverse) {
  if (head_dim % 2 != 0) throw ConfigError("rope: head dimension must be even");
  if (static_cast<int>(positions.size()) != n_tokens) throw ConfigError("rope: positions/token count mismatch");
  const int half = head_dim / 2;
  std::vector<double> freq(static_cast<std::size_t>(half));
  for (int i = 0; i < half; ++i) freq[static_cast<std::size_t>(i)] = std::pow(base, -2.0 * i / head_dim);
  const int row = n_heads * head_dim;
  for (int t = 0; t < n_tokens; ++t) {
    T* xr = x + static_cast<std::size_t>(t) * static_cast<std::size_t>(row);
    for (int i = 0; i < half; ++i) {
      const double ang = positions[static_cast<std::size_t>(t)] * freq[static_cast<std::size_t>(i)];
      const T c = static_cast<T>(std::cos(ang));
      const T s = static_cast<T>(inverse ? -std::sin(ang) : std::sin(ang));
      for (int h = 0; h < n_heads; ++h) {
        T* p = xr + h * head_dim + 2 * i;
        const T a = p[0], b = p[1];
        p[0] = a * c - b * s;
        p[1] = a * s + b * c;
      }
    }
  }
}

template <typename T>
void attention_forward(CRef<T> q, CRef<T> k, CRef<T> v, int n_heads, MRef<T> out, std::vector<Mat<T>>& probs) {
  const Eigen::Index n = q.rows(), d = q.cols();
  if (d % n_heads != 0) throw ConfigError("attention: d_model not divisible by n_heads");
  if (k.rows() != n || v.rows() != n || k.cols() != d || v.cols() != d)
    throw ConfigError("attention: q/k/v shape mismatch");
  const Eigen::Index dh = d / n_heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  if (out.rows() != n || out.cols() != d) throw ConfigError("attention: output not pre-sized");
  probs.resize(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Mat<T>& p = probs[static_cast<std::size_t>(h)];
    p.noalias() = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
    for (Eigen::Index t = 0; t < n; ++t) {
      T mx = p(t, 0);
      for (Eigen::Index j = 1; j <= t; ++j) mx = std::max(mx, p(t, j));
      T sum = 0;
      for (Eigen::Index j = 0; j <= t; ++j) {
        const T e = std::exp(p(t, j) - mx);
        p(t, j) = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (Eigen::Index j = 0; j <= t; ++j) p(t, j) *= inv;
      for (Eigen::Index j = t + 1; j < n; ++j) p(t, j) = 0;
    }
    out.middleCols(h * dh, dh).noalias() = p * v.middleCols(h * dh, dh);
  }
}

template <typename T>
void attention_backward(CRef<T> q, CRef<T> k, CRef<T> v, int n_heads, const std::vector<Mat<T>>& probs,
                        CRef<T> dout, MRef<T> dq, MRef<T> dk, MRef<T> dv) {
  const Eigen::Index n = q.rows(), d = q.cols();
  const Eigen::Index dh = d / n_heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Mat<T> dp, ds;
  for (int h = 0; h < n_heads; ++h) {
    const Mat<T>& p = probs[static_cast<std::size_t>(h)];
    const auto dout_h = dout.middleCols(h * dh, dh);
    dv.middleCols(h * dh, dh).noalias() += p.transpose() * dout_h;
    dp.noalias() = dout_h * v.middleCols(h * dh, dh).transpose();
    ds.resize(n, n);
    for (Eigen::Index t = 0; t < n; ++t) {
      T dot = 0;
      for (Eigen::Index j = 0; j <= t; ++j) dot += dp(t, j) * p(t, j);
      for (Eigen::Index j = 0; j <= t; ++j) ds(t, j) = p(t, j) * (dp(t, j) - dot) * scale;
      for (Eigen::Index j = t + 1; j < n; ++j) ds(t, j) = 0;
    }
    dq.middleCols(h * dh, dh).noalias() += ds * k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() += ds.transpose() * q.middleCols(h * dh, dh);
  }
}

template <typename T>
Mat<T> causal_attention(const Mat<T>& x, const AttentionWeights<T>& w, int n_heads,
                        std::span<const int> rope_positions, double rope_base) {
  const Eigen::Index d = x.cols();
  for (const Mat<T>* m : {&w.wq, &w.wk, &w.wv, &w.wo})
    if (m->rows() != d || m->cols() != d) throw ConfigError("causal_attention: weight shape mismatch");
  if (d % n_heads != 0) throw ConfigError("causal_attention: d_model not divisible by n_heads");
  Mat<T> q = x * w.wq, k = x * w.wk, v = x * w.wv;
  if (!rope_positions.empty()) {
    const int dh = static_cast<int>(d / n_heads);
    rope_apply(q.data(), static_cast<int>(x.rows()), n_heads, dh, rope_positions, rope_base);
    rope_apply(k.data(), static_cast<int>(x.rows()), n_heads, dh, rope_positions, rope_base);
  }
  Mat<T> out(x.rows(), d);
  std::vector<Mat<T>> probs;
  attention_forward<T>(q, k, v, n_heads, out, probs);
  return out * w.wo;
}

template <typename T>
double softmax_xent_rows(const Mat<T>& logits, std::span<const int> targets, std::span<const T> weights, T scale,
                         Mat<T>* dlogits) {
  const Eigen::Index n = logits.rows(), V = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != n) throw std::invalid_argument("xent: target count mismatch");
  if (dlogits) dlogits->setZero(n, V);
  double total = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (tgt < 0 || tgt >= V) throw std::out_of_range("cross_entropy: target " + std::to_string(tgt) + " out of range");
    const T w = weights.empty() ? T(1) : weights[static_cast<std::size_t>(r)];
    if (w == T(0)) continue;
    const T mx = logits.row(r).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < V; ++j) sum += std::exp(static_cast<double>(logits(r, j) - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    total += static_cast<double>(w) * (lse - static_cast<double>(logits(r, tgt)));
    if (dlogits) {
      const T g = scale * w;
      for (Eigen::Index j = 0; j < V; ++j)
        (*dlogits)(r, j) = g * static_cast<T>(std::exp(static_cast<double>(logits(r, j)) - lse));
      (*dlogits)(r, tgt) -= g;
    }
  }
  return total;
}

template <typename T>
CrossEntropyResult<T> cross_entropy(const Mat<T>& logits, std::span<const int> targets, std::span<const T> mask) {
  CrossEntropyResult<T> res;
  double msum = 0.0;
  for (T m : mask) msum += static_cast<double>(m);
  if (msum == 0.0) {
    res.dlogits.setZero(logits.rows(), logits.cols());
    for (int t : targets)
      if (t < 0 || t >= logits.cols()) throw std::out_of_range("cross_entropy: target out of range");
    return res;
  }
  const T scale = static_cast<T>(1.0 / msum);
  res.loss = softmax_xent_rows<T>(logits, targets, mask, scale, &res.dlogits) / msum;
  return res;
}

std::vector<double> log_softmax(std::span<const float> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

GradCheckResult grad_check(const std::function<double()>& loss, std::span<const CheckedParam> params, Rng& rng,
                           double eps, int coords_per_tensor) {
  GradCheckResult res;
  for (const auto& p : params) {
    const std::size_t n = p.value->size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t take = std::min(n, static_cast<std::size_t>(coords_per_tensor));
    for (std::size_t i = 0; i < take; ++i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n) - 1));
      std::swap(idx[i], idx[j]);
    }
    for (std::size_t i = 0; i < take; ++i) {
      double& v = (*p.value)[idx[i]];
      const double saved = v;
      v = saved + eps;
      const double up = loss();
      v = saved - eps;
      const double down = loss();
      v = saved;
      const double numeric = (up - down) / (2 * eps);
      const double analytic = (*p.analytic)[idx[i]];
      const double rel = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      ++res.n_checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_name = p.name;
        res.worst_index = idx[i];
        res.worst_analytic = analytic;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

#define CLM_INSTANTIATE_KERNELS(T)                                                                              \
  template void rmsnorm_forward<T>(const Mat<T>&, const T*, double, Mat<T>&, Vec<T>&);                          \
  template void rmsnorm_backward<T>(const Mat<T>&, const T*, const Vec<T>&, const Mat<T>&, Mat<T>&, T*);        \
  template BasicTensor<T> rmsnorm<T>(const BasicTensor<T>&, const BasicTensor<T>&, double);                     \
  template void rope_apply<T>(T*, int, int, int, std::span<const int>, double, bool);                           \
  template void attention_forward<T>(CRef<T>, CRef<T>, CRef<T>, int, MRef<T>, std::vector<Mat<T>>&);          \
  template void attention_backward<T>(CRef<T>, CRef<T>, CRef<T>, int, const std::vector<Mat<T>>&, CRef<T>,      \
                                      MRef<T>, MRef<T>, MRef<T>);                                               \
  template Mat<T> causal_attention<T>(const Mat<T>&, const AttentionWeights<T>&, int, std::span<const int>,     \
                                      double);                                                                  \
  template double softmax_xent_rows<T>(const Mat<T>&, std::span<const int>, std::span<const T>, T, Mat<T>*);    \
  template CrossEntropyResult<T> cross_entropy<T>(const Mat<T>&, std::span<const int>, std::span<const T>);

CLM_INSTANTIATE_KERNELS(float)
CLM_INSTANTIATE_KERNELS(double)

}  // namespace clm
