#pragma once

// Soft-prompt construction strategies and their analytic gradients.
//
// A composer turns (its parameters, an instance encoding x') into a d x m
// prompt matrix:
//   task-only   Z = Z_S                         (one shared prompt)
//   additive    Z = reshape(MLP(x'))            (bias acts as the shared part)
//   gated       Z = Z_S o sigmoid(u v^T)        u = MLP_u(x'), v = MLP_v(x')
//   max         Z = max(Z_S, u v^T)             elementwise
//   concat      Z = [Z_S | u v^T]               prompt length doubles to 2m
// The u v^T factorization keeps the instance-specific component at rank <= r.

#ifdef LOPA_SERVER_BUILD
#error "composer code must not be compiled into a server build"
#endif

#include <cstdint>
#include <string>
#include <vector>

#include "lopa/matrix.hpp"
#include "lopa/util.hpp"

namespace lopa {

enum class Activation { kTanh, kRelu };
enum class Combine { kGate, kMax, kConcat };
enum class Method { kNone, kPromptTuning, kAdditive, kLopa, kPhmAdditive };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::kNone: return "none";
    case Method::kPromptTuning: return "pt";
    case Method::kAdditive: return "additive";
    case Method::kLopa: return "lopa";
    case Method::kPhmAdditive: return "phm-additive";
  }
  return "?";
}

inline const char* combine_name(Combine c) {
  switch (c) {
    case Combine::kGate: return "gate";
    case Combine::kMax: return "max";
    case Combine::kConcat: return "concat";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Two-layer projection head: out = W_up * act(W_down * x + b_down) + b_up,
// reshaped row-major into a declared matrix shape.
// ---------------------------------------------------------------------------
template <typename T>
struct MlpHeadT {
  MatrixT<T> w_down;  // h x d_enc
  MatrixT<T> b_down;  // h x 1
  MatrixT<T> w_up;    // (out_rows*out_cols) x h
  MatrixT<T> b_up;    // (out_rows*out_cols) x 1
  Activation activation = Activation::kTanh;
  std::size_t out_rows = 0;
  std::size_t out_cols = 0;

  std::size_t hidden_dim() const { return w_down.rows(); }
  std::size_t input_dim() const { return w_down.cols(); }
  std::size_t out_len() const { return out_rows * out_cols; }
};

using MlpHead = MlpHeadT<double>;

template <typename T>
MlpHeadT<T> make_mlp_head(std::size_t d_enc, std::size_t hidden, std::size_t out_rows, std::size_t out_cols,
                          Rng& rng, Activation act = Activation::kTanh, double stddev = 0.02) {
  MlpHeadT<T> head;
  head.w_down = random_normal<T>(hidden, d_enc, rng, stddev);
  head.b_down = MatrixT<T>(hidden, 1);
  head.w_up = random_normal<T>(out_rows * out_cols, hidden, rng, stddev);
  head.b_up = MatrixT<T>(out_rows * out_cols, 1);
  head.activation = act;
  head.out_rows = out_rows;
  head.out_cols = out_cols;
  return head;
}

namespace detail {
template <typename T>
MatrixT<T> apply_activation(const MatrixT<T>& pre, Activation act) {
  return act == Activation::kTanh ? tanh_elem(pre) : relu(pre);
}

template <typename T>
MatrixT<T> activation_grad(const MatrixT<T>& pre, const MatrixT<T>& hidden, Activation act) {
  MatrixT<T> g(pre.rows(), pre.cols());
  if (act == Activation::kTanh) {
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = T{1} - hidden.data()[i] * hidden.data()[i];
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = pre.data()[i] > T{0} ? T{1} : T{0};
  }
  return g;
}

/// Row-major reshape of a column vector into rows x cols.
template <typename T>
MatrixT<T> reshape_vec(const MatrixT<T>& vec, std::size_t rows, std::size_t cols) {
  if (vec.cols() != 1 || vec.rows() != rows * cols)
    throw ShapeError("reshape_vec: vector " + vec.shape_str() + " does not fill " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  MatrixT<T> out(rows, cols);
  out.data() = vec.data();
  return out;
}

template <typename T>
MatrixT<T> flatten_mat(const MatrixT<T>& m) {
  MatrixT<T> out(m.size(), 1);
  out.data() = m.data();
  return out;
}
}  // namespace detail

template <typename T>
struct MlpCacheT {
  MatrixT<T> input;   // d_enc x 1
  MatrixT<T> pre;     // h x 1
  MatrixT<T> hidden;  // h x 1
  MatrixT<T> out;     // out_rows x out_cols
};

template <typename T>
MatrixT<T> mlp_forward_cached(const MlpHeadT<T>& head, const MatrixT<T>& x_enc, MlpCacheT<T>* cache) {
  if (x_enc.cols() != 1 || x_enc.rows() != head.input_dim())
    throw ShapeError("mlp_forward: encoding " + x_enc.shape_str() + " does not match head input dim " +
                     std::to_string(head.input_dim()));
  MatrixT<T> pre = add(matmul(head.w_down, x_enc), head.b_down);
  MatrixT<T> hidden = detail::apply_activation(pre, head.activation);
  MatrixT<T> out_vec = add(matmul(head.w_up, hidden), head.b_up);
  MatrixT<T> out = detail::reshape_vec(out_vec, head.out_rows, head.out_cols);
  if (cache) {
    cache->input = x_enc;
    cache->pre = std::move(pre);
    cache->hidden = std::move(hidden);
    cache->out = out;
  }
  return out;
}

template <typename T>
MatrixT<T> mlp_forward(const MlpHeadT<T>& head, const MatrixT<T>& x_enc) {
  return mlp_forward_cached(head, x_enc, static_cast<MlpCacheT<T>*>(nullptr));
}

template <typename T>
struct MlpGradsT {
  MatrixT<T> w_down, b_down, w_up, b_up;
  MatrixT<T> d_input;  // d_enc x 1, for an optionally trainable encoder
};

/// Backpropagates d(out matrix) through the head. d_out is out_rows x out_cols.
template <typename T>
MlpGradsT<T> mlp_backward(const MlpHeadT<T>& head, const MlpCacheT<T>& cache, const MatrixT<T>& d_out) {
  const MatrixT<T> d_vec = detail::flatten_mat(d_out);  // out_len x 1
  MlpGradsT<T> g;
  g.w_up = matmul(d_vec, transpose(cache.hidden));
  g.b_up = d_vec;
  const MatrixT<T> d_hidden = matmul(transpose(head.w_up), d_vec);
  const MatrixT<T> d_pre = hadamard(d_hidden, detail::activation_grad(cache.pre, cache.hidden, head.activation));
  g.w_down = matmul(d_pre, transpose(cache.input));
  g.b_down = d_pre;
  g.d_input = matmul(transpose(head.w_down), d_pre);
  return g;
}

// ---------------------------------------------------------------------------
// Composer types.
// ---------------------------------------------------------------------------
template <typename T>
struct TaskOnlyComposerT {
  MatrixT<T> z_s;  // d x m
};

template <typename T>
struct InstanceAdditiveComposerT {
  MlpHeadT<T> mlp;  // out = d x m
};

template <typename T>
struct LopaComposerT {
  MatrixT<T> z_s;     // d x m
  MlpHeadT<T> mlp_u;  // out = d x r
  MlpHeadT<T> mlp_v;  // out = m x r
  std::size_t rank = 0;
  Combine combine = Combine::kGate;
};

using TaskOnlyComposer = TaskOnlyComposerT<double>;
using InstanceAdditiveComposer = InstanceAdditiveComposerT<double>;
using LopaComposer = LopaComposerT<double>;

/// Shared-prompt entries start at embedding scale (std 0.02); generator heads
/// start near zero so the gate opens at sigmoid(0) = 1/2.
template <typename T>
TaskOnlyComposerT<T> make_task_only_composer(std::size_t d, std::size_t m, Rng& rng, double stddev = 0.02) {
  return TaskOnlyComposerT<T>{random_normal<T>(d, m, rng, stddev)};
}

template <typename T>
InstanceAdditiveComposerT<T> make_additive_composer(std::size_t d, std::size_t m, std::size_t d_enc,
                                                    std::size_t hidden, Rng& rng,
                                                    Activation act = Activation::kTanh, double stddev = 0.02) {
  return InstanceAdditiveComposerT<T>{make_mlp_head<T>(d_enc, hidden, d, m, rng, act, stddev)};
}

template <typename T>
LopaComposerT<T> make_lopa_composer(std::size_t d, std::size_t m, std::size_t rank, std::size_t d_enc,
                                    std::size_t hidden, Rng& rng, Combine combine = Combine::kGate,
                                    Activation act = Activation::kTanh, double stddev = 0.02) {
  if (rank < 1 || rank > std::min(d, m))
    throw ConfigError("lopa rank " + std::to_string(rank) + " outside [1, min(d,m)] for d=" + std::to_string(d) +
                      " m=" + std::to_string(m));
  LopaComposerT<T> c;
  c.z_s = random_normal<T>(d, m, rng, stddev);
  c.mlp_u = make_mlp_head<T>(d_enc, hidden, d, rank, rng, act, stddev);
  c.mlp_v = make_mlp_head<T>(d_enc, hidden, m, rank, rng, act, stddev);
  c.rank = rank;
  c.combine = combine;
  return c;
}

// ---------------------------------------------------------------------------
// Composition.
// ---------------------------------------------------------------------------
template <typename T>
MatrixT<T> compose_task_only(const TaskOnlyComposerT<T>& c) {
  return c.z_s;
}

template <typename T>
MatrixT<T> compose_additive(const InstanceAdditiveComposerT<T>& c, const MatrixT<T>& x_enc) {
  return mlp_forward(c.mlp, x_enc);
}

template <typename T>
struct LopaCacheT {
  MlpCacheT<T> u_cache, v_cache;
  MatrixT<T> u;    // d x r
  MatrixT<T> v;    // m x r
  MatrixT<T> z_i;  // d x m
  MatrixT<T> gate;  // sigmoid(z_i), gate combine only
};

template <typename T>
MatrixT<T> compose_lopa_cached(const LopaComposerT<T>& c, const MatrixT<T>& x_enc, LopaCacheT<T>* cache) {
  LopaCacheT<T> local;
  LopaCacheT<T>& s = cache ? *cache : local;
  s.u = mlp_forward_cached(c.mlp_u, x_enc, cache ? &s.u_cache : nullptr);
  s.v = mlp_forward_cached(c.mlp_v, x_enc, cache ? &s.v_cache : nullptr);
  s.z_i = matmul(s.u, transpose(s.v));  // d x m, rank <= r
  switch (c.combine) {
    case Combine::kGate:
      s.gate = sigmoid(s.z_i);
      return hadamard(c.z_s, s.gate);
    case Combine::kMax:
      return elem_max(c.z_s, s.z_i);
    case Combine::kConcat:
      return concat_cols(c.z_s, s.z_i);
  }
  throw ConfigError("invalid combine tag");
}

/// Gated composition Z = Z_S o sigmoid(Z_I). Rejects max/concat composers.
template <typename T>
MatrixT<T> compose_lopa(const LopaComposerT<T>& c, const MatrixT<T>& x_enc) {
  if (c.combine != Combine::kGate) throw ConfigError("compose_lopa requires the gate combine");
  return compose_lopa_cached(c, x_enc, static_cast<LopaCacheT<T>*>(nullptr));
}

/// The max / concat ablation variants. Rejects gate composers.
template <typename T>
MatrixT<T> compose_variant(const LopaComposerT<T>& c, const MatrixT<T>& x_enc) {
  if (c.combine == Combine::kGate) throw ConfigError("compose_variant requires the max or concat combine");
  return compose_lopa_cached(c, x_enc, static_cast<LopaCacheT<T>*>(nullptr));
}

/// Uniform entry point used by training and serving clients.
template <typename T>
MatrixT<T> compose(const LopaComposerT<T>& c, const MatrixT<T>& x_enc) {
  return compose_lopa_cached(c, x_enc, static_cast<LopaCacheT<T>*>(nullptr));
}

// ---------------------------------------------------------------------------
// Gradients. upstream = dL/dZ with Z as produced by the composer
// (d x m, or d x 2m for the concat variant).
// ---------------------------------------------------------------------------
template <typename T>
struct LopaGradsT {
  MatrixT<T> z_s;  // dL/dZ_S
  MatrixT<T> z_i;  // dL/dZ_I
  MlpGradsT<T> mlp_u, mlp_v;
  MatrixT<T> d_x_enc;  // d_enc x 1
};

template <typename T>
LopaGradsT<T> lopa_backward(const LopaComposerT<T>& c, const LopaCacheT<T>& cache, const MatrixT<T>& upstream) {
  const std::size_t d = c.z_s.rows(), m = c.z_s.cols();
  LopaGradsT<T> g;
  switch (c.combine) {
    case Combine::kGate: {
      if (upstream.rows() != d || upstream.cols() != m)
        detail::throw_shape("lopa_backward", upstream.shape_str(), c.z_s.shape_str());
      // dL/dZ_S = dL/dZ o sigma(Z_I);  dL/dZ_I = (dL/dZ o Z_S) o sigma'(Z_I).
      g.z_s = hadamard(upstream, cache.gate);
      MatrixT<T> sig_grad = cache.gate;
      for (auto& x : sig_grad.data()) x = x * (T{1} - x);
      g.z_i = hadamard(hadamard(upstream, c.z_s), sig_grad);
      break;
    }
    case Combine::kMax: {
      if (upstream.rows() != d || upstream.cols() != m)
        detail::throw_shape("lopa_backward", upstream.shape_str(), c.z_s.shape_str());
      // Subgradient at exact ties routes to Z_S.
      g.z_s = MatrixT<T>(d, m);
      g.z_i = MatrixT<T>(d, m);
      for (std::size_t i = 0; i < upstream.size(); ++i) {
        if (c.z_s.data()[i] >= cache.z_i.data()[i])
          g.z_s.data()[i] = upstream.data()[i];
        else
          g.z_i.data()[i] = upstream.data()[i];
      }
      break;
    }
    case Combine::kConcat: {
      if (upstream.rows() != d || upstream.cols() != 2 * m)
        throw ShapeError("lopa_backward: concat upstream must be " + std::to_string(d) + "x" +
                         std::to_string(2 * m) + ", got " + upstream.shape_str());
      g.z_s = slice_cols(upstream, 0, m);
      g.z_i = slice_cols(upstream, m, 2 * m);
      break;
    }
  }
  // Z_I = u v^T.
  const MatrixT<T> g_u = matmul(g.z_i, cache.v);             // d x r
  const MatrixT<T> g_v = matmul(transpose(g.z_i), cache.u);  // m x r
  g.mlp_u = mlp_backward(c.mlp_u, cache.u_cache, g_u);
  g.mlp_v = mlp_backward(c.mlp_v, cache.v_cache, g_v);
  g.d_x_enc = add(g.mlp_u.d_input, g.mlp_v.d_input);
  return g;
}

/// Closed-form gradients for a given upstream dL/dZ; recomputes the forward
/// pass internally.
template <typename T>
LopaGradsT<T> grad_lopa(const LopaComposerT<T>& c, const MatrixT<T>& x_enc, const MatrixT<T>& upstream) {
  LopaCacheT<T> cache;
  compose_lopa_cached(c, x_enc, &cache);
  return lopa_backward(c, cache, upstream);
}

template <typename T>
MlpGradsT<T> grad_additive(const InstanceAdditiveComposerT<T>& c, const MatrixT<T>& x_enc,
                           const MatrixT<T>& upstream) {
  MlpCacheT<T> cache;
  mlp_forward_cached(c.mlp, x_enc, &cache);
  return mlp_backward(c.mlp, cache, upstream);
}

// ---------------------------------------------------------------------------
// Kronecker-sum linear maps (the PHM parameterization).
// ---------------------------------------------------------------------------
template <typename T>
MatrixT<T> kron(const MatrixT<T>& a, const MatrixT<T>& b) {
  MatrixT<T> out(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const T s = a(i, j);
      if (s == T{0}) continue;
      for (std::size_t r = 0; r < b.rows(); ++r)
        for (std::size_t c = 0; c < b.cols(); ++c) out(i * b.rows() + r, j * b.cols() + c) = s * b(r, c);
    }
  return out;
}

/// y = (sum_i kron(A_i, B_i)) x without materializing the Kronecker products:
/// with A p x q and B s x t, split x into q chunks of length t, form
/// S = B [x_1 ... x_q] and read the output chunks off the columns of S A^T.
template <typename T>
MatrixT<T> phm_linear(const std::vector<MatrixT<T>>& a_list, const std::vector<MatrixT<T>>& b_list,
                      const MatrixT<T>& x) {
  if (a_list.empty() || a_list.size() != b_list.size())
    throw ShapeError("phm_linear: need matching non-empty factor lists");
  const std::size_t p = a_list[0].rows(), q = a_list[0].cols();
  const std::size_t s = b_list[0].rows(), t = b_list[0].cols();
  for (std::size_t i = 0; i < a_list.size(); ++i) {
    if (a_list[i].rows() != p || a_list[i].cols() != q || b_list[i].rows() != s || b_list[i].cols() != t)
      detail::throw_shape("phm_linear factors", a_list[i].shape_str(), b_list[i].shape_str());
  }
  if (x.cols() != 1 || x.rows() != q * t)
    throw ShapeError("phm_linear: input " + x.shape_str() + " does not match " + std::to_string(q * t) + "x1");

  MatrixT<T> chunks(t, q);
  for (std::size_t j = 0; j < q; ++j)
    for (std::size_t i = 0; i < t; ++i) chunks(i, j) = x(j * t + i, 0);

  MatrixT<T> y(p * s, 1);
  for (std::size_t term = 0; term < a_list.size(); ++term) {
    const MatrixT<T> mixed = matmul(b_list[term], chunks);                  // s x q
    const MatrixT<T> combined = matmul(mixed, transpose(a_list[term]));     // s x p
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t r = 0; r < s; ++r) y(i * s + r, 0) += combined(r, i);
  }
  return y;
}

/// Instance-generator head whose two projections are Kronecker-sum maps; the
/// additive composer's PHM alternative. Forward-only.
template <typename T>
struct PhmHeadT {
  std::vector<MatrixT<T>> a_down, b_down;  // d_enc -> h
  MatrixT<T> bias_down;                    // h x 1
  std::vector<MatrixT<T>> a_up, b_up;      // h -> d*m
  MatrixT<T> bias_up;                      // (d*m) x 1
  Activation activation = Activation::kTanh;
  std::size_t out_rows = 0, out_cols = 0;
};

template <typename T>
PhmHeadT<T> make_phm_head(std::size_t d_enc, std::size_t hidden, std::size_t out_rows, std::size_t out_cols,
                          std::size_t n_phm, Rng& rng, Activation act = Activation::kTanh, double stddev = 0.02) {
  const std::size_t out_len = out_rows * out_cols;
  if (n_phm == 0 || d_enc % n_phm || hidden % n_phm || out_len % n_phm)
    throw ConfigError("phm factor count " + std::to_string(n_phm) + " must divide d_enc, h and d*m");
  PhmHeadT<T> head;
  for (std::size_t i = 0; i < n_phm; ++i) {
    head.a_down.push_back(random_normal<T>(n_phm, n_phm, rng, stddev));
    head.b_down.push_back(random_normal<T>(hidden / n_phm, d_enc / n_phm, rng, stddev));
    head.a_up.push_back(random_normal<T>(n_phm, n_phm, rng, stddev));
    head.b_up.push_back(random_normal<T>(out_len / n_phm, hidden / n_phm, rng, stddev));
  }
  head.bias_down = MatrixT<T>(hidden, 1);
  head.bias_up = MatrixT<T>(out_len, 1);
  head.activation = act;
  head.out_rows = out_rows;
  head.out_cols = out_cols;
  return head;
}

template <typename T>
MatrixT<T> compose_phm_additive(const PhmHeadT<T>& head, const MatrixT<T>& x_enc) {
  const MatrixT<T> pre = add(phm_linear(head.a_down, head.b_down, x_enc), head.bias_down);
  const MatrixT<T> hidden = detail::apply_activation(pre, head.activation);
  const MatrixT<T> out = add(phm_linear(head.a_up, head.b_up, hidden), head.bias_up);
  return detail::reshape_vec(out, head.out_rows, head.out_cols);
}

// ---------------------------------------------------------------------------
// Trainable-parameter enumeration. describe_composer_params is the single
// source of truth for what a method trains; constructors must agree with it
// (tested) and param_count simply sums it.
// ---------------------------------------------------------------------------
struct ParamShape {
  std::string name;
  std::size_t rows = 0, cols = 0;
  std::size_t count() const { return rows * cols; }
};

struct CountDims {
  std::size_t d = 0;      // model dim
  std::size_t m = 0;      // prompt length
  std::size_t h = 0;      // generator hidden dim
  std::size_t d_enc = 0;  // instance-encoding dim
  std::size_t r = 0;      // low-rank factor
  std::size_t n_phm = 1;  // Kronecker factor count
};

inline void describe_mlp(std::vector<ParamShape>& out, const std::string& prefix, std::size_t d_enc, std::size_t h,
                         std::size_t out_len) {
  out.push_back({prefix + ".w_down", h, d_enc});
  out.push_back({prefix + ".b_down", h, 1});
  out.push_back({prefix + ".w_up", out_len, h});
  out.push_back({prefix + ".b_up", out_len, 1});
}

inline std::vector<ParamShape> describe_composer_params(Method method, const CountDims& dims) {
  std::vector<ParamShape> out;
  switch (method) {
    case Method::kNone:
      break;
    case Method::kPromptTuning:
      out.push_back({"composer.z_s", dims.d, dims.m});
      break;
    case Method::kAdditive:
      describe_mlp(out, "composer.mlp", dims.d_enc, dims.h, dims.d * dims.m);
      break;
    case Method::kLopa:
      out.push_back({"composer.z_s", dims.d, dims.m});
      describe_mlp(out, "composer.mlp_u", dims.d_enc, dims.h, dims.d * dims.r);
      describe_mlp(out, "composer.mlp_v", dims.d_enc, dims.h, dims.m * dims.r);
      break;
    case Method::kPhmAdditive: {
      const std::size_t n = dims.n_phm;
      for (std::size_t i = 0; i < n; ++i) {
        out.push_back({"composer.phm.a_down" + std::to_string(i), n, n});
        out.push_back({"composer.phm.b_down" + std::to_string(i), dims.h / n, dims.d_enc / n});
      }
      out.push_back({"composer.phm.bias_down", dims.h, 1});
      for (std::size_t i = 0; i < n; ++i) {
        out.push_back({"composer.phm.a_up" + std::to_string(i), n, n});
        out.push_back({"composer.phm.b_up" + std::to_string(i), dims.d * dims.m / n, dims.h / n});
      }
      out.push_back({"composer.phm.bias_up", dims.d * dims.m, 1});
      break;
    }
  }
  return out;
}

/// Exact trainable-parameter count for a composer method at the given dims.
inline std::size_t param_count(Method method, const CountDims& dims) {
  std::size_t total = 0;
  for (const auto& p : describe_composer_params(method, dims)) total += p.count();
  return total;
}

}  // namespace lopa
