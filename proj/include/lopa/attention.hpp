#pragma once

// Single-head and multi-head scaled dot-product attention with an optional
// soft prefix prepended to the context. The prefixed head output is computed
// two ways: directly, by attending over the concatenated context, and in
// decomposed form, as a prefix-weighted bias plus a rescaling of the
// prefix-free output. The two are algebraically identical and the test suite
// holds them to 1e-10 of each other.

#include <cmath>
#include <cstddef>
#include <vector>

#include "lopa/matrix.hpp"

namespace lopa {

enum class ScaleMode { kUnscaled, kInvSqrtHeadDim };

template <typename T>
struct HeadWeightsT {
  MatrixT<T> wq;  // head_dim x d
  MatrixT<T> wk;  // head_dim x d
  MatrixT<T> wv;  // head_dim x d
  ScaleMode scale_mode = ScaleMode::kInvSqrtHeadDim;

  std::size_t head_dim() const { return wq.rows(); }
  std::size_t model_dim() const { return wq.cols(); }

  void validate() const {
    if (!wq.same_shape(wk) || !wq.same_shape(wv))
      throw ShapeError("head weights disagree: wq " + wq.shape_str() + ", wk " + wk.shape_str() + ", wv " +
                       wv.shape_str());
  }
};

using HeadWeights = HeadWeightsT<double>;

template <typename T>
HeadWeightsT<T> random_head(std::size_t head_dim, std::size_t d, Rng& rng, double stddev,
                            ScaleMode mode = ScaleMode::kInvSqrtHeadDim) {
  HeadWeightsT<T> w;
  w.wq = random_normal<T>(head_dim, d, rng, stddev);
  w.wk = random_normal<T>(head_dim, d, rng, stddev);
  w.wv = random_normal<T>(head_dim, d, rng, stddev);
  w.scale_mode = mode;
  return w;
}

namespace detail {
template <typename T>
T logit_scale(const HeadWeightsT<T>& w) {
  return w.scale_mode == ScaleMode::kInvSqrtHeadDim ? T{1} / std::sqrt(static_cast<T>(w.head_dim())) : T{1};
}
}  // namespace detail

/// Row vector of (optionally 1/sqrt(head_dim)-scaled) key-query dot products
/// for one query against every column of `context`.
template <typename T>
MatrixT<T> attention_logits(const HeadWeightsT<T>& w, const MatrixT<T>& x_query, const MatrixT<T>& context) {
  if (x_query.cols() != 1 || x_query.rows() != w.model_dim())
    throw ShapeError("attention_logits: query must be " + std::to_string(w.model_dim()) + "x1, got " +
                     x_query.shape_str());
  if (context.rows() != w.model_dim())
    detail::throw_shape("attention_logits", context.shape_str(), w.wk.shape_str());
  const MatrixT<T> q = matmul(w.wq, x_query);        // head_dim x 1
  const MatrixT<T> keys = matmul(w.wk, context);     // head_dim x n
  MatrixT<T> logits = matmul(transpose(q), keys);    // 1 x n
  const T s = detail::logit_scale(w);
  if (s != T{1}) logits = scale(logits, s);
  return logits;
}

/// One head, one query position: softmax over context logits weighting the
/// value-projected context columns. Returns head_dim x 1.
template <typename T>
MatrixT<T> head_forward(const HeadWeightsT<T>& w, const MatrixT<T>& x_query, const MatrixT<T>& x_context) {
  if (x_context.cols() == 0) throw ShapeError("head_forward: context has no columns");
  const MatrixT<T> weights = softmax_rows(attention_logits(w, x_query, x_context));  // 1 x n
  const MatrixT<T> values = matmul(w.wv, x_context);                                 // head_dim x n
  return matmul(values, transpose(weights));                                         // head_dim x 1
}

/// Direct prefixed attention: attend over concat(prefix, context). A prefix
/// with zero columns reduces to head_forward.
template <typename T>
MatrixT<T> prefix_forward_direct(const HeadWeightsT<T>& w, const MatrixT<T>& x_query, const MatrixT<T>& prefix,
                                 const MatrixT<T>& x_context) {
  if (prefix.cols() == 0) return head_forward(w, x_query, x_context);
  return head_forward(w, x_query, concat_cols(prefix, x_context));
}

/// Softmax mass the query assigns to each prefix column, i.e. the first m
/// entries of the softmax over the concatenated logit vector. Returns m x 1;
/// the entries lie in (0,1) and sum to less than 1 whenever the real context
/// is non-empty.
template <typename T>
MatrixT<T> prefix_attention_weights(const HeadWeightsT<T>& w, const MatrixT<T>& x_query, const MatrixT<T>& prefix,
                                    const MatrixT<T>& x_context) {
  const std::size_t m = prefix.cols();
  MatrixT<T> out(m, 1);
  if (m == 0) return out;
  const MatrixT<T> lz = attention_logits(w, x_query, prefix);     // 1 x m
  const MatrixT<T> lx = attention_logits(w, x_query, x_context);  // 1 x n
  T mx = lz(0, 0);
  for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, lz(0, j));
  for (std::size_t j = 0; j < lx.cols(); ++j) mx = std::max(mx, lx(0, j));
  T denom = T{0};
  for (std::size_t j = 0; j < m; ++j) denom += std::exp(lz(0, j) - mx);
  for (std::size_t j = 0; j < lx.cols(); ++j) denom += std::exp(lx(0, j) - mx);
  for (std::size_t j = 0; j < m; ++j) out(j, 0) = std::exp(lz(0, j) - mx) / denom;
  return out;
}

/// Decomposed prefixed attention: sum_k A_k (Wv z_k) + (1 - sum_k A_k) o,
/// where o is the prefix-free head output. Deliberately a separate code path
/// from prefix_forward_direct.
template <typename T>
MatrixT<T> prefix_forward_decomposed(const HeadWeightsT<T>& w, const MatrixT<T>& x_query, const MatrixT<T>& prefix,
                                     const MatrixT<T>& x_context) {
  const MatrixT<T> base = head_forward(w, x_query, x_context);
  if (prefix.cols() == 0) return base;
  const MatrixT<T> a = prefix_attention_weights(w, x_query, prefix, x_context);  // m x 1
  T mass = T{0};
  for (std::size_t k = 0; k < a.rows(); ++k) mass += a(k, 0);
  const MatrixT<T> bias = matmul(matmul(w.wv, prefix), a);  // head_dim x 1
  return add(bias, scale(base, T{1} - mass));
}

/// Numerical rank of Wv * prefix: the dimension of the subspace the prefix
/// can shift head outputs into.
template <typename T>
std::size_t offset_subspace_rank(const HeadWeightsT<T>& w, const MatrixT<T>& prefix, double rel_tol = 1e-9) {
  if (prefix.cols() == 0) return 0;
  const Matrix shifted = cast_matrix<double>(matmul(w.wv, prefix));
  return numerical_rank(shifted, rel_tol);
}

// ---------------------------------------------------------------------------
// Multi-head block attention over a whole sequence of query positions.
// ---------------------------------------------------------------------------

template <typename T>
struct MultiHeadT {
  std::vector<HeadWeightsT<T>> heads;
  MatrixT<T> out_proj;  // d x d

  std::size_t model_dim() const { return out_proj.rows(); }
  std::size_t head_dim() const { return heads.empty() ? 0 : heads.front().head_dim(); }

  void validate() const {
    if (heads.empty()) throw ShapeError("multi-head block with no heads");
    for (const auto& h : heads) h.validate();
    if (heads.size() * head_dim() != model_dim())
      throw ShapeError("model dim " + std::to_string(model_dim()) + " != n_heads*head_dim " +
                       std::to_string(heads.size() * head_dim()));
  }
};

using MultiHead = MultiHeadT<double>;

/// All heads over all query columns at once; concatenates head outputs along
/// rows and applies the output projection. Matches head_forward per column.
template <typename T>
MatrixT<T> multi_head_forward(const MultiHeadT<T>& mh, const MatrixT<T>& queries, const MatrixT<T>& context) {
  MatrixT<T> stacked;
  for (const auto& head : mh.heads) {
    const MatrixT<T> q = matmul(head.wq, queries);  // head_dim x nq
    const MatrixT<T> k = matmul(head.wk, context);  // head_dim x nc
    MatrixT<T> logits = matmul(transpose(q), k);    // nq x nc
    const T s = detail::logit_scale(head);
    if (s != T{1}) logits = scale(logits, s);
    const MatrixT<T> attn = softmax_rows(logits);
    const MatrixT<T> values = matmul(head.wv, context);     // head_dim x nc
    const MatrixT<T> out = matmul(values, transpose(attn)); // head_dim x nq
    stacked = stack_rows(stacked, out);
  }
  return matmul(mh.out_proj, stacked);
}

}  // namespace lopa
