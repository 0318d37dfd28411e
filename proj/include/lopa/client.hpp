#pragma once

// Client-side personalization: everything that runs before a request leaves
// the user's machine. A client holds only the encoder and its composer,
// never backbone weights; it computes the soft prefix locally and ships it
// in the envelope.

#ifdef LOPA_SERVER_BUILD
#error "client personalization code must not be compiled into a server build"
#endif

#include <cstdint>

#include "lopa/bundle.hpp"
#include "lopa/wire.hpp"

namespace lopa {

template <typename T>
struct ClientStateT {
  BundleConfig cfg;
  InstanceEncoderT<T> encoder;
  ComposerVariant<T> composer;
};

using ClientState = ClientStateT<double>;

template <typename T>
ClientStateT<T> client_from_bundle(const ModelBundleT<T>& bundle) {
  return ClientStateT<T>{bundle.cfg, bundle.encoder, bundle.composer};
}

template <typename T>
ClientStateT<T> client_from_checkpoint(const Checkpoint& ck) {
  ClientStateT<T> client;
  read_bundle_meta(ck, client.cfg);
  if (ck.has_array("fm.tok_emb"))
    throw IoError("client checkpoint carries backbone weights; clients hold only encoder and composer");
  Rng dummy(0);
  ModelBundleT<T> scaffold;  // composer built for shape, then overwritten
  scaffold.cfg = client.cfg;
  switch (client.cfg.method) {
    case Method::kNone:
      client.composer = std::monostate{};
      break;
    case Method::kPromptTuning:
      client.composer = make_task_only_composer<T>(client.cfg.model.d, client.cfg.m, dummy);
      break;
    case Method::kAdditive:
      client.composer = make_additive_composer<T>(client.cfg.model.d, client.cfg.m, client.cfg.encoder.d_enc,
                                                  client.cfg.h, dummy, client.cfg.activation);
      break;
    case Method::kLopa:
      client.composer = make_lopa_composer<T>(client.cfg.model.d, client.cfg.m, client.cfg.r,
                                              client.cfg.encoder.d_enc, client.cfg.h, dummy, client.cfg.combine,
                                              client.cfg.activation);
      break;
    case Method::kPhmAdditive:
      throw ConfigError("phm-additive composers are not servable clients");
  }
  client.encoder = make_encoder<T>(client.cfg.encoder, dummy);
  client.encoder.tok_emb = cast_matrix<T>(ck.array("enc.tok_emb"));
  client.encoder.projection = cast_matrix<T>(ck.array("enc.proj"));
  for (auto& ref : collect_composer_params(client.composer)) *ref.value = cast_matrix<T>(ck.array(ref.name));
  return client;
}

/// Computes the prompt for one input and packs the request. The composer
/// runs in f64; the single f64 -> f32 narrowing happens here, at the wire
/// boundary.
inline PrefixEnvelope client_prepare(const ClientState& client, const TokenSeq& tokens,
                                     std::uint64_t request_id) {
  Matrix prompt(client.cfg.model.d, 0);
  if (!std::holds_alternative<std::monostate>(client.composer)) {
    if (const auto* task = std::get_if<TaskOnlyComposer>(&client.composer)) {
      prompt = compose_task_only(*task);
    } else {
      const Matrix x_enc = encode(client.encoder, tokens);
      if (const auto* additive = std::get_if<InstanceAdditiveComposer>(&client.composer))
        prompt = compose_additive(*additive, x_enc);
      else
        prompt = compose(std::get<LopaComposer>(client.composer), x_enc);
    }
  }
  return make_envelope(cast_matrix<float>(prompt), tokens, request_id);
}

}  // namespace lopa
