#pragma once

// The frozen toy backbone: byte-level embeddings, a stack of attention +
// feed-forward blocks with residual connections, pooling, and a linear task
// head. A soft prompt enters exactly once, as extra attention context in the
// first block; queries exist only at the real input positions, so deeper
// blocks run on an unchanged sequence length.
//
// Backbone weights are frozen by contract. The task head (`classifier`) is
// the one trainable matrix living here; the frozen-weight digest therefore
// covers everything except it.

#include <cstdint>
#include <string>
#include <vector>

#include "lopa/attention.hpp"
#include "lopa/digest.hpp"
#include "lopa/matrix.hpp"
#include "lopa/util.hpp"

namespace lopa {

enum class Pooling { kFirstToken, kMean };

struct ModelConfig {
  std::size_t d = 64;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 2;
  std::size_t ffn_dim = 128;
  std::size_t vocab = 256;
  std::size_t n_max = 64;
  std::size_t n_classes = 2;
  Pooling pooling = Pooling::kMean;
  ScaleMode scale_mode = ScaleMode::kInvSqrtHeadDim;

  std::size_t head_dim() const {
    if (n_heads == 0 || d % n_heads != 0)
      throw ConfigError("model dim " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) +
                        " heads");
    return d / n_heads;
  }
};

template <typename T>
struct BlockT {
  MultiHeadT<T> attn;
  MatrixT<T> ffn_w1;  // ffn_dim x d
  MatrixT<T> ffn_b1;  // ffn_dim x 1
  MatrixT<T> ffn_w2;  // d x ffn_dim
  MatrixT<T> ffn_b2;  // d x 1
};

template <typename T>
struct ToyTransformerT {
  ModelConfig cfg;
  MatrixT<T> tok_emb;     // d x vocab
  MatrixT<T> pos_emb;     // d x n_max
  std::vector<BlockT<T>> blocks;
  MatrixT<T> classifier;  // n_classes x d, the trainable task head
  bool frozen = true;
};

using ToyTransformer = ToyTransformerT<double>;

/// Backbone init keeps activations near unit scale without normalization
/// layers: embeddings and projections at std 1/sqrt(fan_in).
template <typename T>
ToyTransformerT<T> make_transformer(const ModelConfig& cfg, Rng& rng) {
  cfg.head_dim();  // validates divisibility
  ToyTransformerT<T> fm;
  fm.cfg = cfg;
  const double s_d = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  const double s_f = 1.0 / std::sqrt(static_cast<double>(cfg.ffn_dim));
  fm.tok_emb = random_normal<T>(cfg.d, cfg.vocab, rng, s_d);
  fm.pos_emb = random_normal<T>(cfg.d, cfg.n_max, rng, s_d);
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    BlockT<T> block;
    for (std::size_t h = 0; h < cfg.n_heads; ++h)
      block.attn.heads.push_back(random_head<T>(cfg.head_dim(), cfg.d, rng, s_d, cfg.scale_mode));
    block.attn.out_proj = random_normal<T>(cfg.d, cfg.d, rng, s_d);
    block.ffn_w1 = random_normal<T>(cfg.ffn_dim, cfg.d, rng, s_d);
    block.ffn_b1 = MatrixT<T>(cfg.ffn_dim, 1);
    block.ffn_w2 = random_normal<T>(cfg.d, cfg.ffn_dim, rng, s_f);
    block.ffn_b2 = MatrixT<T>(cfg.d, 1);
    fm.blocks.push_back(std::move(block));
  }
  fm.classifier = random_normal<T>(cfg.n_classes, cfg.d, rng, s_d);
  return fm;
}

using TokenSeq = std::vector<std::uint32_t>;

namespace detail {
template <typename T>
MatrixT<T> broadcast_col(const MatrixT<T>& col, std::size_t n) {
  MatrixT<T> out(col.rows(), n);
  for (std::size_t i = 0; i < col.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = col(i, 0);
  return out;
}
}  // namespace detail

/// Token + position embeddings for the real input. Prompts never receive
/// position embeddings; virtual tokens carry no position.
template <typename T>
MatrixT<T> embed_tokens(const ToyTransformerT<T>& fm, const TokenSeq& tokens) {
  if (tokens.empty()) throw ConfigError("empty token sequence");
  if (tokens.size() > fm.cfg.n_max)
    throw ConfigError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds n_max " +
                      std::to_string(fm.cfg.n_max));
  MatrixT<T> x(fm.cfg.d, tokens.size());
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    if (tokens[j] >= fm.cfg.vocab)
      throw ConfigError("token id " + std::to_string(tokens[j]) + " out of vocab " + std::to_string(fm.cfg.vocab));
    for (std::size_t i = 0; i < fm.cfg.d; ++i) x(i, j) = fm.tok_emb(i, tokens[j]) + fm.pos_emb(i, j);
  }
  return x;
}

/// Context width seen by each block; the executable record of where the
/// prompt enters.
struct ForwardTrace {
  std::vector<std::size_t> context_cols;
};

template <typename T>
struct HeadCacheT {
  MatrixT<T> q, k, v;  // head_dim x {n, c, c}
  MatrixT<T> attn;     // n x c, softmaxed rows
};

template <typename T>
struct BlockCacheT {
  MatrixT<T> x_in;     // d x n
  MatrixT<T> context;  // d x c
  std::vector<HeadCacheT<T>> heads;
  MatrixT<T> stacked;     // d x n head outputs before the out projection
  MatrixT<T> x_mid;       // d x n after the attention residual
  MatrixT<T> ffn_hidden;  // ffn_dim x n, post-tanh
};

template <typename T>
struct ForwardCacheT {
  MatrixT<T> prefix;   // d x m
  MatrixT<T> x_embed;  // d x n
  std::vector<BlockCacheT<T>> blocks;
  MatrixT<T> x_final;  // d x n
  MatrixT<T> pooled;   // d x 1
  MatrixT<T> logits;   // n_classes x 1
};

template <typename T>
MatrixT<T> forward_with_prefix(const ToyTransformerT<T>& fm, const MatrixT<T>& prefix, const TokenSeq& tokens,
                               ForwardTrace* trace = nullptr, ForwardCacheT<T>* cache = nullptr) {
  const std::size_t m = prefix.cols();
  if (m > 0 && prefix.rows() != fm.cfg.d)
    throw ShapeError("prefix " + prefix.shape_str() + " does not match model dim " + std::to_string(fm.cfg.d));
  if (tokens.size() + m > fm.cfg.n_max)
    throw ConfigError("sequence of " + std::to_string(tokens.size()) + " tokens plus prompt length " +
                      std::to_string(m) + " exceeds n_max " + std::to_string(fm.cfg.n_max));

  MatrixT<T> x = embed_tokens(fm, tokens);
  const std::size_t n = x.cols();
  if (trace) trace->context_cols.clear();
  if (cache) {
    cache->prefix = prefix;
    cache->x_embed = x;
    cache->blocks.clear();
  }

  for (std::size_t b = 0; b < fm.blocks.size(); ++b) {
    const BlockT<T>& block = fm.blocks[b];
    const MatrixT<T> context = (b == 0 && m > 0) ? concat_cols(prefix, x) : x;
    if (trace) trace->context_cols.push_back(context.cols());

    BlockCacheT<T> bc;
    if (cache) {
      bc.x_in = x;
      bc.context = context;
    }

    // Attention with residual. Queries are the real positions only.
    MatrixT<T> stacked;
    for (const auto& head : block.attn.heads) {
      const MatrixT<T> q = matmul(head.wq, x);
      const MatrixT<T> k = matmul(head.wk, context);
      MatrixT<T> logits = matmul(transpose(q), k);
      if (head.scale_mode == ScaleMode::kInvSqrtHeadDim)
        logits = scale(logits, T{1} / std::sqrt(static_cast<T>(head.head_dim())));
      const MatrixT<T> attn = softmax_rows(logits);
      const MatrixT<T> v = matmul(head.wv, context);
      stacked = stack_rows(stacked, matmul(v, transpose(attn)));
      if (cache) bc.heads.push_back(HeadCacheT<T>{q, k, v, attn});
    }
    x = add(x, matmul(block.attn.out_proj, stacked));
    if (cache) {
      bc.stacked = stacked;
      bc.x_mid = x;
    }

    // Feed-forward with residual; tanh keeps the unnormalized stack bounded.
    const MatrixT<T> hidden = tanh_elem(add(matmul(block.ffn_w1, x), detail::broadcast_col(block.ffn_b1, n)));
    x = add(x, add(matmul(block.ffn_w2, hidden), detail::broadcast_col(block.ffn_b2, n)));
    if (cache) {
      bc.ffn_hidden = hidden;
      cache->blocks.push_back(std::move(bc));
    }
  }

  const MatrixT<T> pooled = fm.cfg.pooling == Pooling::kMean ? mean_cols(x) : column(x, 0);
  const MatrixT<T> logits = matmul(fm.classifier, pooled);
  if (cache) {
    cache->x_final = x;
    cache->pooled = pooled;
    cache->logits = logits;
  }
  return logits;
}

template <typename T>
MatrixT<T> zero_shot_forward(const ToyTransformerT<T>& fm, const TokenSeq& tokens, ForwardTrace* trace = nullptr) {
  return forward_with_prefix(fm, MatrixT<T>(fm.cfg.d, 0), tokens, trace);
}

// ---------------------------------------------------------------------------
// Reverse pass. The backbone is frozen, so only the quantities that reach
// trainable parameters are produced: the gradient of the prompt (which the
// composers consume) and of the task head.
// ---------------------------------------------------------------------------
template <typename T>
struct BackbonePullbackT {
  MatrixT<T> d_prefix;      // d x m
  MatrixT<T> d_classifier;  // n_classes x d
};

template <typename T>
BackbonePullbackT<T> backward_with_prefix(const ToyTransformerT<T>& fm, const ForwardCacheT<T>& cache,
                                          const MatrixT<T>& d_logits) {
  const std::size_t n = cache.x_final.cols();
  const std::size_t m = cache.prefix.cols();

  BackbonePullbackT<T> out;
  out.d_classifier = matmul(d_logits, transpose(cache.pooled));
  MatrixT<T> d_pooled = matmul(transpose(fm.classifier), d_logits);

  MatrixT<T> d_x(fm.cfg.d, n);
  if (fm.cfg.pooling == Pooling::kMean) {
    const T inv = T{1} / static_cast<T>(n);
    for (std::size_t i = 0; i < fm.cfg.d; ++i)
      for (std::size_t j = 0; j < n; ++j) d_x(i, j) = d_pooled(i, 0) * inv;
  } else {
    for (std::size_t i = 0; i < fm.cfg.d; ++i) d_x(i, 0) = d_pooled(i, 0);
  }

  for (std::size_t bi = fm.blocks.size(); bi-- > 0;) {
    const BlockT<T>& block = fm.blocks[bi];
    const BlockCacheT<T>& bc = cache.blocks[bi];

    // Feed-forward: x_out = x_mid + W2 tanh(W1 x_mid + b1) + b2.
    const MatrixT<T> d_hidden = matmul(transpose(block.ffn_w2), d_x);
    MatrixT<T> d_pre = d_hidden;
    for (std::size_t i = 0; i < d_pre.size(); ++i) {
      const T hval = bc.ffn_hidden.data()[i];
      d_pre.data()[i] *= (T{1} - hval * hval);
    }
    MatrixT<T> d_x_mid = add(d_x, matmul(transpose(block.ffn_w1), d_pre));

    // Attention: x_mid = x_in + Wo stacked.
    const MatrixT<T> d_stacked = matmul(transpose(block.attn.out_proj), d_x_mid);
    MatrixT<T> d_x_in = d_x_mid;  // residual branch
    MatrixT<T> d_context(bc.context.rows(), bc.context.cols());

    const std::size_t dh = fm.cfg.head_dim();
    for (std::size_t h = 0; h < block.attn.heads.size(); ++h) {
      const HeadWeightsT<T>& head = block.attn.heads[h];
      const HeadCacheT<T>& hc = bc.heads[h];

      MatrixT<T> d_out(dh, n);
      for (std::size_t i = 0; i < dh; ++i)
        for (std::size_t j = 0; j < n; ++j) d_out(i, j) = d_stacked(h * dh + i, j);

      const MatrixT<T> d_v = matmul(d_out, hc.attn);              // head_dim x c
      const MatrixT<T> d_attn = matmul(transpose(d_out), hc.v);   // n x c

      // Softmax rows: dlogit = a o (da - <da, a>).
      MatrixT<T> d_logits_attn(n, hc.attn.cols());
      for (std::size_t i = 0; i < n; ++i) {
        T dot = T{0};
        for (std::size_t j = 0; j < hc.attn.cols(); ++j) dot += d_attn(i, j) * hc.attn(i, j);
        for (std::size_t j = 0; j < hc.attn.cols(); ++j)
          d_logits_attn(i, j) = hc.attn(i, j) * (d_attn(i, j) - dot);
      }
      if (head.scale_mode == ScaleMode::kInvSqrtHeadDim)
        d_logits_attn = scale(d_logits_attn, T{1} / std::sqrt(static_cast<T>(dh)));

      const MatrixT<T> d_q = matmul(hc.k, transpose(d_logits_attn));  // head_dim x n
      const MatrixT<T> d_k = matmul(hc.q, d_logits_attn);             // head_dim x c

      d_x_in = add(d_x_in, matmul(transpose(head.wq), d_q));
      d_context = add(d_context, add(matmul(transpose(head.wk), d_k), matmul(transpose(head.wv), d_v)));
    }

    if (bi == 0 && m > 0) {
      out.d_prefix = slice_cols(d_context, 0, m);
      d_x = add(d_x_in, slice_cols(d_context, m, d_context.cols()));
    } else {
      d_x = add(d_x_in, d_context);
    }
  }

  if (out.d_prefix.rows() == 0) out.d_prefix = MatrixT<T>(fm.cfg.d, m);
  return out;
}

/// Digest over the frozen backbone (embeddings and blocks). The task head is
/// trainable and deliberately excluded.
template <typename T>
std::string frozen_digest(const ToyTransformerT<T>& fm) {
  Sha256 h;
  digest_matrix(h, fm.tok_emb);
  digest_matrix(h, fm.pos_emb);
  for (const auto& block : fm.blocks) {
    for (const auto& head : block.attn.heads) {
      digest_matrix(h, head.wq);
      digest_matrix(h, head.wk);
      digest_matrix(h, head.wv);
    }
    digest_matrix(h, block.attn.out_proj);
    digest_matrix(h, block.ffn_w1);
    digest_matrix(h, block.ffn_b1);
    digest_matrix(h, block.ffn_w2);
    digest_matrix(h, block.ffn_b2);
  }
  return to_hex(h.finish());
}

}  // namespace lopa
