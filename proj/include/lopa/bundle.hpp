#pragma once

// ModelBundle glues a frozen backbone, an instance encoder, and a prompt
// composer into an end-to-end classifier, and exposes the trainable-parameter
// registry the optimizer and gradient checks walk over.

#ifdef LOPA_SERVER_BUILD
#error "bundle code must not be compiled into a server build"
#endif

#include <string>
#include <variant>
#include <vector>

#include "lopa/checkpoint.hpp"
#include "lopa/composer.hpp"
#include "lopa/encoder.hpp"
#include "lopa/transformer.hpp"

namespace lopa {

template <typename T>
using ComposerVariant =
    std::variant<std::monostate, TaskOnlyComposerT<T>, InstanceAdditiveComposerT<T>, LopaComposerT<T>>;

struct BundleConfig {
  ModelConfig model;
  EncoderConfig encoder;
  Method method = Method::kLopa;
  Combine combine = Combine::kGate;
  std::size_t m = 10;  // prompt length
  std::size_t r = 2;   // low-rank factor
  std::size_t h = 32;  // generator hidden dim
  Activation activation = Activation::kTanh;
  bool encoder_trainable = false;
  double init_std = 0.02;  // composer initialization scale

  CountDims count_dims() const {
    return CountDims{model.d, m, h, encoder.d_enc, r, 1};
  }
};

template <typename T>
struct ModelBundleT {
  BundleConfig cfg;
  ToyTransformerT<T> fm;
  InstanceEncoderT<T> encoder;
  ComposerVariant<T> composer;
};

using ModelBundle = ModelBundleT<double>;

/// One seed determines every component via decorrelated sub-streams.
template <typename T>
ModelBundleT<T> make_bundle(const BundleConfig& cfg, std::uint64_t seed) {
  if (cfg.encoder.vocab != cfg.model.vocab)
    throw ConfigError("encoder vocab must match model vocab");
  ModelBundleT<T> bundle;
  bundle.cfg = cfg;
  Rng fm_rng(Rng::mix(seed, 0x10));
  bundle.fm = make_transformer<T>(cfg.model, fm_rng);
  Rng enc_rng(Rng::mix(seed, 0x20));
  bundle.encoder = make_encoder<T>(cfg.encoder, enc_rng);
  Rng comp_rng(Rng::mix(seed, 0x30));
  switch (cfg.method) {
    case Method::kNone:
      bundle.composer = std::monostate{};
      break;
    case Method::kPromptTuning:
      bundle.composer = make_task_only_composer<T>(cfg.model.d, cfg.m, comp_rng, cfg.init_std);
      break;
    case Method::kAdditive:
      bundle.composer = make_additive_composer<T>(cfg.model.d, cfg.m, cfg.encoder.d_enc, cfg.h, comp_rng,
                                                  cfg.activation, cfg.init_std);
      break;
    case Method::kLopa:
      bundle.composer = make_lopa_composer<T>(cfg.model.d, cfg.m, cfg.r, cfg.encoder.d_enc, cfg.h, comp_rng,
                                              cfg.combine, cfg.activation, cfg.init_std);
      break;
    case Method::kPhmAdditive:
      throw ConfigError("phm-additive is a forward-only generator, not a trainable bundle method");
  }
  return bundle;
}

/// Does this composer consume an instance encoding?
inline bool method_uses_encoder(Method m) { return m == Method::kAdditive || m == Method::kLopa; }

template <typename T>
struct BundleStepCacheT {
  MatrixT<T> x_enc;  // d_enc x 1
  EncodeCacheT<T> encode_cache;
  LopaCacheT<T> lopa_cache;
  MlpCacheT<T> additive_cache;
  ForwardCacheT<T> fm_cache;
};

/// Prompt produced for one instance (d x 0 when no composer is configured).
template <typename T>
MatrixT<T> compose_prompt(const ModelBundleT<T>& bundle, const TokenSeq& tokens,
                          BundleStepCacheT<T>* cache = nullptr) {
  const auto& c = bundle.composer;
  if (std::holds_alternative<std::monostate>(c)) return MatrixT<T>(bundle.cfg.model.d, 0);
  if (const auto* task = std::get_if<TaskOnlyComposerT<T>>(&c)) return compose_task_only(*task);
  MatrixT<T> x_enc = encode_cached(bundle.encoder, tokens, cache ? &cache->encode_cache : nullptr);
  if (cache) cache->x_enc = x_enc;
  if (const auto* additive = std::get_if<InstanceAdditiveComposerT<T>>(&c))
    return mlp_forward_cached(additive->mlp, x_enc, cache ? &cache->additive_cache : nullptr);
  const auto& lopa = std::get<LopaComposerT<T>>(c);
  return compose_lopa_cached(lopa, x_enc, cache ? &cache->lopa_cache : nullptr);
}

template <typename T>
MatrixT<T> forward(const ModelBundleT<T>& bundle, const TokenSeq& tokens, ForwardTrace* trace = nullptr,
                   BundleStepCacheT<T>* cache = nullptr) {
  const MatrixT<T> prompt = compose_prompt(bundle, tokens, cache);
  return forward_with_prefix(bundle.fm, prompt, tokens, trace, cache ? &cache->fm_cache : nullptr);
}

// ---------------------------------------------------------------------------
// Trainable registry. Order is fixed: composer parameters (in their declared
// order), the task head, then encoder parameters when the encoder trains.
// Gradients are carried in a vector aligned with this order.
// ---------------------------------------------------------------------------
template <typename T>
struct ParamRef {
  std::string name;
  MatrixT<T>* value;
};

template <typename T>
std::vector<ParamRef<T>> collect_composer_params(ComposerVariant<T>& composer) {
  std::vector<ParamRef<T>> out;
  if (auto* task = std::get_if<TaskOnlyComposerT<T>>(&composer)) {
    out.push_back({"composer.z_s", &task->z_s});
  } else if (auto* additive = std::get_if<InstanceAdditiveComposerT<T>>(&composer)) {
    out.push_back({"composer.mlp.w_down", &additive->mlp.w_down});
    out.push_back({"composer.mlp.b_down", &additive->mlp.b_down});
    out.push_back({"composer.mlp.w_up", &additive->mlp.w_up});
    out.push_back({"composer.mlp.b_up", &additive->mlp.b_up});
  } else if (auto* lopa = std::get_if<LopaComposerT<T>>(&composer)) {
    out.push_back({"composer.z_s", &lopa->z_s});
    out.push_back({"composer.mlp_u.w_down", &lopa->mlp_u.w_down});
    out.push_back({"composer.mlp_u.b_down", &lopa->mlp_u.b_down});
    out.push_back({"composer.mlp_u.w_up", &lopa->mlp_u.w_up});
    out.push_back({"composer.mlp_u.b_up", &lopa->mlp_u.b_up});
    out.push_back({"composer.mlp_v.w_down", &lopa->mlp_v.w_down});
    out.push_back({"composer.mlp_v.b_down", &lopa->mlp_v.b_down});
    out.push_back({"composer.mlp_v.w_up", &lopa->mlp_v.w_up});
    out.push_back({"composer.mlp_v.b_up", &lopa->mlp_v.b_up});
  }
  return out;
}

template <typename T>
std::vector<ParamRef<T>> collect_trainables(ModelBundleT<T>& bundle) {
  std::vector<ParamRef<T>> out = collect_composer_params(bundle.composer);
  out.push_back({"fm.classifier", &bundle.fm.classifier});
  if (bundle.cfg.encoder_trainable && method_uses_encoder(bundle.cfg.method)) {
    out.push_back({"enc.tok_emb", &bundle.encoder.tok_emb});
    out.push_back({"enc.proj", &bundle.encoder.projection});
  }
  return out;
}

/// Scalars in the composer's registry slice; must agree with param_count.
template <typename T>
std::size_t composer_scalar_count(ModelBundleT<T>& bundle) {
  std::size_t total = 0;
  for (const auto& ref : collect_composer_params(bundle.composer)) total += ref.value->size();
  return total;
}

template <typename T>
std::vector<MatrixT<T>> zero_grads(const std::vector<ParamRef<T>>& refs) {
  std::vector<MatrixT<T>> grads;
  grads.reserve(refs.size());
  for (const auto& ref : refs) grads.emplace_back(ref.value->rows(), ref.value->cols());
  return grads;
}

/// Accumulates dLoss/dParam into `grads` (aligned with collect_trainables).
/// d_logits is the loss gradient at the logits.
template <typename T>
void backward(const ModelBundleT<T>& bundle, const BundleStepCacheT<T>& cache, const MatrixT<T>& d_logits,
              std::vector<MatrixT<T>>& grads) {
  const auto pull = backward_with_prefix(bundle.fm, cache.fm_cache, d_logits);
  std::size_t idx = 0;
  MatrixT<T> d_x_enc;

  if (std::holds_alternative<std::monostate>(bundle.composer)) {
    // no composer slots
  } else if (std::get_if<TaskOnlyComposerT<T>>(&bundle.composer)) {
    grads[idx] = add(grads[idx], pull.d_prefix);
    idx += 1;
  } else if (const auto* additive = std::get_if<InstanceAdditiveComposerT<T>>(&bundle.composer)) {
    const auto g = mlp_backward(additive->mlp, cache.additive_cache, pull.d_prefix);
    grads[idx] = add(grads[idx], g.w_down);
    grads[idx + 1] = add(grads[idx + 1], g.b_down);
    grads[idx + 2] = add(grads[idx + 2], g.w_up);
    grads[idx + 3] = add(grads[idx + 3], g.b_up);
    idx += 4;
    d_x_enc = g.d_input;
  } else {
    const auto& lopa = std::get<LopaComposerT<T>>(bundle.composer);
    const auto g = lopa_backward(lopa, cache.lopa_cache, pull.d_prefix);
    grads[idx] = add(grads[idx], g.z_s);
    grads[idx + 1] = add(grads[idx + 1], g.mlp_u.w_down);
    grads[idx + 2] = add(grads[idx + 2], g.mlp_u.b_down);
    grads[idx + 3] = add(grads[idx + 3], g.mlp_u.w_up);
    grads[idx + 4] = add(grads[idx + 4], g.mlp_u.b_up);
    grads[idx + 5] = add(grads[idx + 5], g.mlp_v.w_down);
    grads[idx + 6] = add(grads[idx + 6], g.mlp_v.b_down);
    grads[idx + 7] = add(grads[idx + 7], g.mlp_v.w_up);
    grads[idx + 8] = add(grads[idx + 8], g.mlp_v.b_up);
    idx += 9;
    d_x_enc = g.d_x_enc;
  }

  grads[idx] = add(grads[idx], pull.d_classifier);
  ++idx;

  if (bundle.cfg.encoder_trainable && method_uses_encoder(bundle.cfg.method)) {
    const auto ge = encoder_backward(bundle.encoder, cache.encode_cache, d_x_enc);
    grads[idx] = add(grads[idx], ge.tok_emb);
    grads[idx + 1] = add(grads[idx + 1], ge.projection);
  }
}

// ---------------------------------------------------------------------------
// Bundle und client checkpoints.
// ---------------------------------------------------------------------------
inline void write_bundle_meta(Checkpoint& ck, const BundleConfig& cfg) {
  write_model_meta(ck, cfg.model);
  ck.meta["d_enc"] = static_cast<std::int64_t>(cfg.encoder.d_enc);
  ck.meta["enc_aggregation"] = cfg.encoder.aggregation == Aggregation::kMean ? 0 : 1;
  ck.meta["method"] = static_cast<std::int64_t>(cfg.method);
  ck.meta["combine"] = static_cast<std::int64_t>(cfg.combine);
  ck.meta["m"] = static_cast<std::int64_t>(cfg.m);
  ck.meta["r"] = static_cast<std::int64_t>(cfg.r);
  ck.meta["h"] = static_cast<std::int64_t>(cfg.h);
  ck.meta["activation"] = cfg.activation == Activation::kTanh ? 0 : 1;
  ck.meta["encoder_trainable"] = cfg.encoder_trainable ? 1 : 0;
}

inline void read_bundle_meta(const Checkpoint& ck, BundleConfig& cfg) {
  cfg.model = read_model_meta(ck);
  cfg.encoder.d_enc = static_cast<std::size_t>(ck.meta_at("d_enc"));
  cfg.encoder.vocab = cfg.model.vocab;
  cfg.encoder.aggregation = ck.meta_at("enc_aggregation") == 0 ? Aggregation::kMean : Aggregation::kMax;
  cfg.method = static_cast<Method>(ck.meta_at("method"));
  cfg.combine = static_cast<Combine>(ck.meta_at("combine"));
  cfg.m = static_cast<std::size_t>(ck.meta_at("m"));
  cfg.r = static_cast<std::size_t>(ck.meta_at("r"));
  cfg.h = static_cast<std::size_t>(ck.meta_at("h"));
  cfg.activation = ck.meta_at("activation") == 0 ? Activation::kTanh : Activation::kRelu;
  cfg.encoder_trainable = ck.meta_at("encoder_trainable") == 1;
}

template <typename T>
void composer_to_checkpoint(Checkpoint& ck, ComposerVariant<T>& composer) {
  for (const auto& ref : collect_composer_params(composer)) ck.add(ref.name, *ref.value);
}

template <typename T>
void encoder_to_checkpoint(Checkpoint& ck, const InstanceEncoderT<T>& enc) {
  ck.add("enc.tok_emb", enc.tok_emb);
  ck.add("enc.proj", enc.projection);
}

/// Full training artifact: backbone + encoder + composer.
template <typename T>
Checkpoint bundle_to_checkpoint(ModelBundleT<T>& bundle) {
  Checkpoint ck;
  write_bundle_meta(ck, bundle.cfg);
  fm_to_checkpoint(ck, bundle.fm);
  encoder_to_checkpoint(ck, bundle.encoder);
  composer_to_checkpoint(ck, bundle.composer);
  return ck;
}

/// Server-side artifact: exactly the backbone parameter set.
template <typename T>
Checkpoint server_checkpoint(const ToyTransformerT<T>& fm) {
  Checkpoint ck;
  fm_to_checkpoint(ck, fm);
  return ck;
}

/// Client-side artifact: encoder + composer, no backbone weights.
template <typename T>
Checkpoint client_checkpoint(ModelBundleT<T>& bundle) {
  Checkpoint ck;
  write_bundle_meta(ck, bundle.cfg);
  encoder_to_checkpoint(ck, bundle.encoder);
  composer_to_checkpoint(ck, bundle.composer);
  return ck;
}

template <typename T>
ModelBundleT<T> bundle_from_checkpoint(const Checkpoint& ck) {
  BundleConfig cfg;
  read_bundle_meta(ck, cfg);
  ModelBundleT<T> bundle = make_bundle<T>(cfg, 0);
  bundle.fm = fm_from_checkpoint<T>(ck, /*exact_set=*/false);
  bundle.encoder.tok_emb = cast_matrix<T>(ck.array("enc.tok_emb"));
  bundle.encoder.projection = cast_matrix<T>(ck.array("enc.proj"));
  for (auto& ref : collect_composer_params(bundle.composer)) *ref.value = cast_matrix<T>(ck.array(ref.name));
  return bundle;
}

}  // namespace lopa
