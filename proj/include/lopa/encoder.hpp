#pragma once

// Lightweight instance encoder: embeds tokens, pools them into one vector,
// and projects. It stands in for a small pretrained encoder; the prompt
// generators only need some fixed-length instance representation.

#ifdef LOPA_SERVER_BUILD
#error "instance-encoder code must not be compiled into a server build"
#endif

#include <cstdint>
#include <vector>

#include "lopa/matrix.hpp"
#include "lopa/util.hpp"

namespace lopa {

enum class Aggregation { kMean, kMax };

struct EncoderConfig {
  std::size_t d_enc = 32;
  std::size_t vocab = 256;
  Aggregation aggregation = Aggregation::kMean;
};

template <typename T>
struct InstanceEncoderT {
  EncoderConfig cfg;
  MatrixT<T> tok_emb;     // d_enc x vocab
  MatrixT<T> projection;  // d_enc x d_enc
};

using InstanceEncoder = InstanceEncoderT<double>;

template <typename T>
InstanceEncoderT<T> make_encoder(const EncoderConfig& cfg, Rng& rng) {
  InstanceEncoderT<T> enc;
  enc.cfg = cfg;
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg.d_enc));
  enc.tok_emb = random_normal<T>(cfg.d_enc, cfg.vocab, rng, s);
  enc.projection = random_normal<T>(cfg.d_enc, cfg.d_enc, rng, s);
  return enc;
}

template <typename T>
struct EncodeCacheT {
  std::vector<std::uint32_t> counts;      // per token id
  std::size_t token_count = 0;
  MatrixT<T> pooled;                      // d_enc x 1, pre-projection
  std::vector<std::uint32_t> argmax_tok;  // per dim, max aggregation only
};

/// Pooling accumulates per token id in ascending id order, so the result is
/// exactly invariant to permutations of the input sequence.
template <typename T>
MatrixT<T> encode_cached(const InstanceEncoderT<T>& enc, const std::vector<std::uint32_t>& tokens,
                         EncodeCacheT<T>* cache) {
  if (tokens.empty()) throw ConfigError("encode: empty token sequence");
  const std::size_t de = enc.cfg.d_enc;
  std::vector<std::uint32_t> counts(enc.cfg.vocab, 0);
  for (std::uint32_t t : tokens) {
    if (t >= enc.cfg.vocab)
      throw ConfigError("encode: token id " + std::to_string(t) + " out of vocab " +
                        std::to_string(enc.cfg.vocab));
    ++counts[t];
  }

  MatrixT<T> pooled(de, 1);
  std::vector<std::uint32_t> argmax_tok;
  if (enc.cfg.aggregation == Aggregation::kMean) {
    for (std::uint32_t t = 0; t < enc.cfg.vocab; ++t) {
      if (counts[t] == 0) continue;
      const T w = static_cast<T>(counts[t]);
      for (std::size_t i = 0; i < de; ++i) pooled(i, 0) += w * enc.tok_emb(i, t);
    }
    pooled = scale(pooled, T{1} / static_cast<T>(tokens.size()));
  } else {
    argmax_tok.assign(de, 0);
    for (std::size_t i = 0; i < de; ++i) pooled(i, 0) = -std::numeric_limits<T>::infinity();
    for (std::uint32_t t = 0; t < enc.cfg.vocab; ++t) {
      if (counts[t] == 0) continue;
      for (std::size_t i = 0; i < de; ++i) {
        if (enc.tok_emb(i, t) > pooled(i, 0)) {
          pooled(i, 0) = enc.tok_emb(i, t);
          argmax_tok[i] = t;
        }
      }
    }
  }
  if (cache) {
    cache->counts = std::move(counts);
    cache->token_count = tokens.size();
    cache->pooled = pooled;
    cache->argmax_tok = std::move(argmax_tok);
  }
  return matmul(enc.projection, pooled);
}

/// Pool-then-project instance representation; deterministic in the tokens.
template <typename T>
MatrixT<T> encode(const InstanceEncoderT<T>& enc, const std::vector<std::uint32_t>& tokens) {
  return encode_cached(enc, tokens, static_cast<EncodeCacheT<T>*>(nullptr));
}

template <typename T>
struct EncoderGradsT {
  MatrixT<T> tok_emb;     // d_enc x vocab
  MatrixT<T> projection;  // d_enc x d_enc
};

template <typename T>
EncoderGradsT<T> encoder_backward(const InstanceEncoderT<T>& enc, const EncodeCacheT<T>& cache,
                                  const MatrixT<T>& d_x_enc) {
  EncoderGradsT<T> g;
  g.projection = matmul(d_x_enc, transpose(cache.pooled));
  const MatrixT<T> d_pooled = matmul(transpose(enc.projection), d_x_enc);
  g.tok_emb = MatrixT<T>(enc.cfg.d_enc, enc.cfg.vocab);
  if (enc.cfg.aggregation == Aggregation::kMean) {
    const T inv = T{1} / static_cast<T>(cache.token_count);
    for (std::uint32_t t = 0; t < enc.cfg.vocab; ++t) {
      if (cache.counts[t] == 0) continue;
      const T w = static_cast<T>(cache.counts[t]) * inv;
      for (std::size_t i = 0; i < enc.cfg.d_enc; ++i) g.tok_emb(i, t) += d_pooled(i, 0) * w;
    }
  } else {
    for (std::size_t i = 0; i < enc.cfg.d_enc; ++i) g.tok_emb(i, cache.argmax_tok[i]) += d_pooled(i, 0);
  }
  return g;
}

}  // namespace lopa
