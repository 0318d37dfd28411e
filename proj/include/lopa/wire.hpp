#pragma once

// Wire format for client-computed soft prefixes. One envelope carries
// everything the server needs to run a personalized forward pass, so the
// server itself stays task-blind. Layout (little-endian, byte-exact):
//
//   offset  size        field
//   0       4           magic "LOPA"
//   4       2           version (u16)
//   6       2           d (u16)
//   8       2           m (u16)
//   10      4*d*m       prefix, f32 row-major
//   ...     4           token_count (u32)
//   ...     4*count     token ids (u32)
//   ...     8           request_id (u64)
//
// Total: 4+2+2+2 + 4*d*m + 4 + 4*token_count + 8 bytes, exactly. m = 0 is a
// legal zero-shot request.
//
// Responses are framed as: request_id (u64), class count (u32), then f32
// logits. A rejected request answers with class count 0 followed by a u32
// reason code.

#include <cstdint>
#include <string>
#include <vector>

#include "lopa/bytes.hpp"
#include "lopa/matrix.hpp"
#include "lopa/util.hpp"

namespace lopa {

inline constexpr std::uint16_t kWireVersion = 1;
inline constexpr char kWireMagic[4] = {'L', 'O', 'P', 'A'};

enum class WireCode : std::uint32_t {
  kOk = 0,
  kBadMagic = 1,
  kVersionMismatch = 2,
  kTruncated = 3,
  kLengthMismatch = 4,
};

inline const char* wire_code_name(WireCode c) {
  switch (c) {
    case WireCode::kOk: return "ok";
    case WireCode::kBadMagic: return "bad-magic";
    case WireCode::kVersionMismatch: return "version-mismatch";
    case WireCode::kTruncated: return "truncated";
    case WireCode::kLengthMismatch: return "length-mismatch";
  }
  return "?";
}

class WireError : public std::runtime_error {
 public:
  WireError(WireCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  WireCode code() const { return code_; }

 private:
  WireCode code_;
};

struct PrefixEnvelope {
  std::uint16_t version = kWireVersion;
  std::uint16_t d = 0;
  std::uint16_t m = 0;
  std::vector<float> prefix;  // d*m, row-major
  std::vector<std::uint32_t> tokens;
  std::uint64_t request_id = 0;

  std::size_t serialized_size() const { return 4 + 2 + 2 + 2 + 4 * prefix.size() + 4 + 4 * tokens.size() + 8; }

  MatrixF prefix_matrix() const { return MatrixF(d, m, std::vector<float>(prefix.begin(), prefix.end())); }

  friend bool operator==(const PrefixEnvelope& a, const PrefixEnvelope& b) = default;
};

inline PrefixEnvelope make_envelope(const MatrixF& prefix, const std::vector<std::uint32_t>& tokens,
                                    std::uint64_t request_id) {
  if (prefix.rows() > 0xFFFF || prefix.cols() > 0xFFFF)
    throw ShapeError("prefix " + prefix.shape_str() + " exceeds the u16 wire dims");
  PrefixEnvelope env;
  env.d = static_cast<std::uint16_t>(prefix.rows());
  env.m = static_cast<std::uint16_t>(prefix.cols());
  env.prefix = prefix.data();
  env.tokens = tokens;
  env.request_id = request_id;
  return env;
}

inline std::vector<std::uint8_t> serialize(const PrefixEnvelope& env) {
  if (env.prefix.size() != static_cast<std::size_t>(env.d) * env.m)
    throw ShapeError("envelope prefix has " + std::to_string(env.prefix.size()) + " floats, expected " +
                     std::to_string(env.d * env.m));
  ByteWriter w;
  w.bytes(kWireMagic, 4);
  w.u16(env.version);
  w.u16(env.d);
  w.u16(env.m);
  for (float v : env.prefix) w.f32(v);
  w.u32(static_cast<std::uint32_t>(env.tokens.size()));
  for (std::uint32_t t : env.tokens) w.u32(t);
  w.u64(env.request_id);
  return w.take();
}

inline PrefixEnvelope deserialize(const std::uint8_t* data, std::size_t len) {
  if (len < 10) throw WireError(WireCode::kTruncated, "frame shorter than the fixed header");
  if (std::memcmp(data, kWireMagic, 4) != 0)
    throw WireError(WireCode::kBadMagic, "bad magic, not a prefix envelope");
  ByteReader r(data + 4, len - 4);
  PrefixEnvelope env;
  env.version = r.u16();
  if (env.version != kWireVersion)
    throw WireError(WireCode::kVersionMismatch,
                    "wire version " + std::to_string(env.version) + ", expected " + std::to_string(kWireVersion));
  env.d = r.u16();
  env.m = r.u16();
  const std::size_t prefix_floats = static_cast<std::size_t>(env.d) * env.m;
  if (r.remaining() < prefix_floats * 4 + 4)
    throw WireError(WireCode::kTruncated, "frame ends inside the prefix payload");
  env.prefix.resize(prefix_floats);
  for (auto& v : env.prefix) v = r.f32();
  const std::uint32_t token_count = r.u32();
  if (r.remaining() < static_cast<std::size_t>(token_count) * 4 + 8)
    throw WireError(WireCode::kTruncated, "frame ends inside the token payload");
  env.tokens.resize(token_count);
  for (auto& t : env.tokens) t = r.u32();
  env.request_id = r.u64();
  if (r.remaining() != 0)
    throw WireError(WireCode::kLengthMismatch, "frame length does not match its declared d/m/token_count");
  return env;
}

inline PrefixEnvelope deserialize(const std::vector<std::uint8_t>& bytes) {
  return deserialize(bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------
// Response framing.
// ---------------------------------------------------------------------------
struct WireResponse {
  std::uint64_t request_id = 0;
  std::vector<float> logits;              // empty on error
  WireCode error = WireCode::kOk;

  bool ok() const { return error == WireCode::kOk; }
};

enum class RequestReject : std::uint32_t {
  kNone = 0,
  kDimMismatch = 1,    // envelope d != model d
  kBadTokens = 2,      // empty sequence or id out of vocab
  kTooLong = 3,        // m + token_count exceeds the position table
};

inline std::vector<std::uint8_t> encode_response(std::uint64_t request_id, const std::vector<float>& logits) {
  ByteWriter w;
  w.u64(request_id);
  w.u32(static_cast<std::uint32_t>(logits.size()));
  for (float v : logits) w.f32(v);
  return w.take();
}

inline std::vector<std::uint8_t> encode_reject(std::uint64_t request_id, RequestReject reason) {
  ByteWriter w;
  w.u64(request_id);
  w.u32(0);
  w.u32(static_cast<std::uint32_t>(reason));
  return w.take();
}

struct DecodedResponse {
  std::uint64_t request_id = 0;
  std::vector<float> logits;
  RequestReject reject = RequestReject::kNone;
  bool ok() const { return reject == RequestReject::kNone; }
};

inline DecodedResponse decode_response(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  DecodedResponse out;
  out.request_id = r.u64();
  const std::uint32_t count = r.u32();
  if (count == 0) {
    out.reject = static_cast<RequestReject>(r.u32());
    if (out.reject == RequestReject::kNone) out.reject = RequestReject::kBadTokens;
    return out;
  }
  out.logits.resize(count);
  for (auto& v : out.logits) v = r.f32();
  return out;
}

}  // namespace lopa
