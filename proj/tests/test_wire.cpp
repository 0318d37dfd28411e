#include <catch2/catch_amalgamated.hpp>

#include "lopa/wire.hpp"

using namespace lopa;

namespace {

PrefixEnvelope random_envelope(Rng& rng, std::uint16_t d, std::uint16_t m, std::size_t n_tokens) {
  PrefixEnvelope env;
  env.d = d;
  env.m = m;
  env.prefix.resize(static_cast<std::size_t>(d) * m);
  for (auto& v : env.prefix) v = static_cast<float>(rng.normal());
  env.tokens.resize(n_tokens);
  for (auto& t : env.tokens) t = static_cast<std::uint32_t>(rng.below(256));
  env.request_id = rng.next_u64();
  return env;
}

}  // namespace

TEST_CASE("layout arithmetic for the minimal frame", "[wire]") {
  PrefixEnvelope env;
  env.d = 0;
  env.m = 0;
  env.tokens = {7};
  env.request_id = 42;
  const auto bytes = serialize(env);
  // 4 magic + 2 version + 2 d + 2 m + 0 prefix + 4 count + 4 token + 8 id.
  REQUIRE(bytes.size() == 26);
  REQUIRE(bytes.size() == env.serialized_size());
  const PrefixEnvelope back = deserialize(bytes);
  REQUIRE(back == env);

  // Field positions: magic, then version 1 as u16 LE.
  REQUIRE(bytes[0] == 'L');
  REQUIRE(bytes[1] == 'O');
  REQUIRE(bytes[2] == 'P');
  REQUIRE(bytes[3] == 'A');
  REQUIRE(bytes[4] == 1);
  REQUIRE(bytes[5] == 0);
}

TEST_CASE("round-trip is the identity, bitwise on the f32 payload", "[wire][property]") {
  Rng rng(60);
  for (int trial = 0; trial < 30; ++trial) {
    const auto env = random_envelope(rng, static_cast<std::uint16_t>(1 + rng.below(48)),
                                     static_cast<std::uint16_t>(rng.below(12)), 1 + rng.below(20));
    const auto bytes = serialize(env);
    REQUIRE(bytes.size() == env.serialized_size());
    REQUIRE(deserialize(bytes) == env);
  }
}

TEST_CASE("malformed frames produce distinct error codes", "[wire]") {
  Rng rng(61);
  const auto env = random_envelope(rng, 8, 3, 5);
  const auto bytes = serialize(env);

  // Flipped magic: no partial parse.
  {
    auto bad = bytes;
    bad[0] = 'X';
    try {
      deserialize(bad);
      FAIL("expected bad magic to throw");
    } catch (const WireError& e) {
      REQUIRE(e.code() == WireCode::kBadMagic);
    }
  }

  // Unsupported version.
  {
    auto bad = bytes;
    bad[4] = 9;
    try {
      deserialize(bad);
      FAIL("expected version mismatch to throw");
    } catch (const WireError& e) {
      REQUIRE(e.code() == WireCode::kVersionMismatch);
    }
  }

  // Truncations at several depths.
  for (std::size_t keep : {std::size_t{3}, std::size_t{9}, std::size_t{20}, bytes.size() - 1}) {
    try {
      deserialize(bytes.data(), keep);
      FAIL("expected truncation to throw");
    } catch (const WireError& e) {
      REQUIRE(e.code() == WireCode::kTruncated);
    }
  }

  // Trailing garbage: the declared dims no longer match the length.
  {
    auto bad = bytes;
    bad.push_back(0);
    try {
      deserialize(bad);
      FAIL("expected length mismatch to throw");
    } catch (const WireError& e) {
      REQUIRE(e.code() == WireCode::kLengthMismatch);
    }
  }

  // Declared dims larger than the payload: truncated, not misread.
  {
    auto bad = bytes;
    bad[7] = 0xFF;  // d high byte
    try {
      deserialize(bad);
      FAIL("expected oversized dims to throw");
    } catch (const WireError& e) {
      REQUIRE(e.code() == WireCode::kTruncated);
    }
  }
}

TEST_CASE("zero-length prompts are legal zero-shot requests", "[wire]") {
  PrefixEnvelope env;
  env.d = 0;
  env.m = 0;
  env.tokens = {1, 2, 3};
  env.request_id = 1;
  REQUIRE(deserialize(serialize(env)).prefix.empty());

  Rng rng(62);
  const auto with_d = random_envelope(rng, 16, 0, 4);
  REQUIRE(deserialize(serialize(with_d)) == with_d);
}

TEST_CASE("response frames round-trip, including rejections", "[wire]") {
  const std::vector<float> logits = {0.25f, -1.5f, 3.0f};
  const auto ok = decode_response(encode_response(77, logits));
  REQUIRE(ok.ok());
  REQUIRE(ok.request_id == 77);
  REQUIRE(ok.logits == logits);

  const auto rejected = decode_response(encode_reject(78, RequestReject::kDimMismatch));
  REQUIRE_FALSE(rejected.ok());
  REQUIRE(rejected.request_id == 78);
  REQUIRE(rejected.reject == RequestReject::kDimMismatch);
  REQUIRE(rejected.logits.empty());
}
