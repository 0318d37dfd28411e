#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <thread>

#include "lopa/client.hpp"
#include "lopa/serving.hpp"
#include "lopa/train.hpp"

using namespace lopa;

namespace {

BundleConfig serving_cfg(Method method) {
  BundleConfig cfg;
  cfg.model.d = 32;
  cfg.model.n_heads = 4;
  cfg.model.n_blocks = 2;
  cfg.model.ffn_dim = 24;
  cfg.model.vocab = 256;
  cfg.model.n_max = 32;
  cfg.model.n_classes = 2;
  cfg.encoder.d_enc = 16;
  cfg.encoder.vocab = 256;
  cfg.method = method;
  cfg.m = 6;
  cfg.r = 2;
  cfg.h = 8;
  return cfg;
}

TokenSeq random_tokens(Rng& rng, std::size_t n) {
  TokenSeq t(n);
  for (auto& v : t) v = static_cast<std::uint32_t>(rng.below(256));
  return t;
}

}  // namespace

TEST_CASE("client prompts: constant for task-only, instance-aware otherwise", "[serving]") {
  Rng rng(70);
  const auto task_bundle = make_bundle<double>(serving_cfg(Method::kPromptTuning), 3);
  const ClientState task_client = client_from_bundle(task_bundle);
  const TokenSeq in1 = random_tokens(rng, 8), in2 = random_tokens(rng, 5);
  const auto env1 = client_prepare(task_client, in1, 1);
  const auto env2 = client_prepare(task_client, in2, 2);
  REQUIRE(env1.prefix == env2.prefix);  // identical prefix bytes for any input
  REQUIRE(env1.m == 6);

  const auto lopa_bundle = make_bundle<double>(serving_cfg(Method::kLopa), 3);
  const ClientState lopa_client = client_from_bundle(lopa_bundle);
  REQUIRE(client_prepare(lopa_client, in1, 3).prefix != client_prepare(lopa_client, in2, 4).prefix);

  // m = 0 clients send an empty prefix.
  auto none_bundle = make_bundle<double>(serving_cfg(Method::kNone), 3);
  const auto env0 = client_prepare(client_from_bundle(none_bundle), in1, 5);
  REQUIRE(env0.m == 0);
  REQUIRE(env0.prefix.empty());
}

TEST_CASE("batch of one equals the direct forward", "[serving]") {
  Rng rng(71);
  auto bundle = make_bundle<double>(serving_cfg(Method::kLopa), 5);
  const auto fm32 = fm_from_checkpoint<float>(server_checkpoint(bundle.fm), true);
  const ClientState client = client_from_bundle(bundle);

  const TokenSeq tokens = random_tokens(rng, 9);
  const auto env = client_prepare(client, tokens, 11);
  const BatchResult result = server_step(fm32, {env});
  REQUIRE(result.items.size() == 1);
  REQUIRE(result.items[0].ok());
  REQUIRE(result.items[0].request_id == 11);

  // f32 reference: same prefix, same backbone, straight call.
  const MatrixF direct = forward_with_prefix(fm32, env.prefix_matrix(), tokens);
  for (std::size_t i = 0; i < direct.size(); ++i)
    REQUIRE(result.items[0].logits[i] == Catch::Approx(direct.data()[i]).margin(1e-6));
}

TEST_CASE("mixed batches answer exactly like sequential forwards", "[serving][oracle]") {
  Rng rng(72);
  auto lopa_bundle = make_bundle<double>(serving_cfg(Method::kLopa), 6);
  auto pt_bundle = make_bundle<double>(serving_cfg(Method::kPromptTuning), 7);
  pt_bundle.fm = lopa_bundle.fm;  // one shared backbone, two "tenants"
  const auto fm32 = fm_from_checkpoint<float>(server_checkpoint(lopa_bundle.fm), true);

  const ClientState lopa_client = client_from_bundle(lopa_bundle);
  const ClientState pt_client = client_from_bundle(pt_bundle);

  std::vector<PrefixEnvelope> batch;
  std::uint64_t next_id = 100;
  for (int i = 0; i < 20; ++i) {
    const TokenSeq tokens = random_tokens(rng, 4 + rng.below(10));
    switch (i % 3) {
      case 0: batch.push_back(client_prepare(lopa_client, tokens, next_id++)); break;
      case 1: batch.push_back(client_prepare(pt_client, tokens, next_id++)); break;
      default: {
        PrefixEnvelope env = make_envelope(MatrixF(fm32.cfg.d, 0), tokens, next_id++);
        batch.push_back(env);  // zero-shot tenant
      }
    }
  }

  const BatchResult batched = server_step(fm32, batch);
  REQUIRE(batched.items.size() == batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const BatchResult single = server_step(fm32, {batch[i]});
    REQUIRE(batched.items[i].ok());
    REQUIRE(batched.items[i].request_id == batch[i].request_id);
    for (std::size_t c = 0; c < batched.items[i].logits.size(); ++c)
      REQUIRE(batched.items[i].logits[c] == Catch::Approx(single.items[0].logits[c]).margin(1e-6));
  }
}

TEST_CASE("per-request rejection leaves the rest of the batch intact", "[serving]") {
  Rng rng(73);
  auto bundle = make_bundle<double>(serving_cfg(Method::kPromptTuning), 8);
  const auto fm32 = fm_from_checkpoint<float>(server_checkpoint(bundle.fm), true);
  const ClientState client = client_from_bundle(bundle);

  const TokenSeq good_tokens = random_tokens(rng, 6);
  auto good = client_prepare(client, good_tokens, 1);

  PrefixEnvelope wrong_d = good;
  wrong_d.d = 16;  // disagrees with the model dim
  wrong_d.prefix.assign(static_cast<std::size_t>(wrong_d.d) * wrong_d.m, 0.0f);
  wrong_d.request_id = 2;

  PrefixEnvelope empty_tokens = good;
  empty_tokens.tokens.clear();
  empty_tokens.request_id = 3;

  PrefixEnvelope too_long = good;
  too_long.tokens = random_tokens(rng, 30);  // 30 + m=6 > n_max=32
  too_long.request_id = 4;

  PrefixEnvelope bad_id = good;
  bad_id.tokens = {999};
  bad_id.request_id = 5;

  // Duplicate request ids are both answered, keyed by position.
  PrefixEnvelope dup = good;
  dup.request_id = 1;

  const BatchResult result = server_step(fm32, {good, wrong_d, empty_tokens, too_long, bad_id, dup});
  REQUIRE(result.items[0].ok());
  REQUIRE(result.items[1].reject == RequestReject::kDimMismatch);
  REQUIRE(result.items[2].reject == RequestReject::kBadTokens);
  REQUIRE(result.items[3].reject == RequestReject::kTooLong);
  REQUIRE(result.items[4].reject == RequestReject::kBadTokens);
  REQUIRE(result.items[5].ok());
  REQUIRE(result.items[5].request_id == result.items[0].request_id);
  REQUIRE(result.items[5].logits == result.items[0].logits);
}

TEST_CASE("remote queries equal local forwards", "[serving][oracle]") {
  Rng rng(74);
  auto bundle = make_bundle<double>(serving_cfg(Method::kLopa), 9);
  auto fm32 = fm_from_checkpoint<float>(server_checkpoint(bundle.fm), true);
  const ClientState client = client_from_bundle(bundle);

  ServeConfig scfg;
  scfg.batch_window = 4;
  scfg.batch_timeout_ms = 5;
  PrefixServer server(fm32, scfg);
  server.start();

  SECTION("single client, single request") {
    const TokenSeq tokens = random_tokens(rng, 7);
    const auto env = client_prepare(client, tokens, 21);
    const auto remote = query("127.0.0.1", server.port(), env);
    const MatrixF local = forward_with_prefix(fm32, env.prefix_matrix(), tokens);
    REQUIRE(remote.size() == local.size());
    for (std::size_t i = 0; i < remote.size(); ++i)
      REQUIRE(remote[i] == Catch::Approx(local.data()[i]).margin(1e-6));
  }

  SECTION("eight concurrent clients with mixed tenants") {
    constexpr int kClients = 8;
    std::vector<TokenSeq> inputs;
    std::vector<PrefixEnvelope> envs;
    for (int i = 0; i < kClients; ++i) {
      inputs.push_back(random_tokens(rng, 5 + i));
      if (i % 2 == 0)
        envs.push_back(client_prepare(client, inputs.back(), 1000 + i));
      else
        envs.push_back(make_envelope(MatrixF(fm32.cfg.d, 0), inputs.back(), 1000 + i));
    }

    std::vector<std::vector<float>> remote(kClients);
    std::atomic<int> failures{0};
    std::vector<std::thread> threads;
    for (int i = 0; i < kClients; ++i) {
      threads.emplace_back([&, i] {
        try {
          remote[i] = query("127.0.0.1", server.port(), envs[i]);
        } catch (...) {
          failures.fetch_add(1);
        }
      });
    }
    for (auto& t : threads) t.join();
    REQUIRE(failures.load() == 0);

    for (int i = 0; i < kClients; ++i) {
      const MatrixF local = forward_with_prefix(fm32, envs[i].prefix_matrix(), inputs[i]);
      REQUIRE(remote[i].size() == local.size());
      for (std::size_t c = 0; c < local.size(); ++c)
        REQUIRE(remote[i][c] == Catch::Approx(local.data()[c]).margin(1e-6));
    }
  }

  SECTION("rejected request surfaces as a remote error") {
    PrefixEnvelope bad = client_prepare(client, random_tokens(rng, 6), 31);
    bad.tokens.clear();
    REQUIRE_THROWS_AS(query("127.0.0.1", server.port(), bad), RemoteError);
  }

  server.stop();
}

TEST_CASE("a stopped server yields a clean connection error", "[serving]") {
  Rng rng(75);
  auto bundle = make_bundle<double>(serving_cfg(Method::kPromptTuning), 10);
  auto fm32 = fm_from_checkpoint<float>(server_checkpoint(bundle.fm), true);
  const ClientState client = client_from_bundle(bundle);
  const auto env = client_prepare(client, random_tokens(rng, 5), 41);

  std::uint16_t port = 0;
  {
    PrefixServer server(fm32, ServeConfig{});
    server.start();
    port = server.port();
    REQUIRE(query("127.0.0.1", port, env).size() == 2);
    server.stop();
  }
  REQUIRE_THROWS_AS(query("127.0.0.1", port, env), RemoteError);

  // Restarting on a fresh port serves again.
  PrefixServer again(fm32, ServeConfig{});
  again.start();
  REQUIRE(query("127.0.0.1", again.port(), env).size() == 2);
  again.stop();
}

TEST_CASE("malformed frames close only the offending connection", "[serving]") {
  Rng rng(76);
  auto bundle = make_bundle<double>(serving_cfg(Method::kPromptTuning), 11);
  auto fm32 = fm_from_checkpoint<float>(server_checkpoint(bundle.fm), true);
  const ClientState client = client_from_bundle(bundle);

  PrefixServer server(fm32, ServeConfig{});
  server.start();

  // A connection that speaks garbage gets dropped...
  {
    net::Socket bad = net::connect_to("127.0.0.1", server.port());
    std::vector<std::uint8_t> garbage = {'n', 'o', 'p', 'e'};
    net::write_frame(bad.fd(), garbage);
    REQUIRE_FALSE(net::read_frame(bad.fd()).has_value());  // server closed it
  }

  // ...while a well-formed client on a fresh connection is unaffected.
  const auto env = client_prepare(client, random_tokens(rng, 6), 51);
  REQUIRE(query("127.0.0.1", server.port(), env).size() == 2);
  server.stop();
}

TEST_CASE("client checkpoints hold no backbone weights", "[serving][checkpoint]") {
  auto bundle = make_bundle<double>(serving_cfg(Method::kLopa), 12);
  Checkpoint client_ck = client_checkpoint(bundle);
  REQUIRE_FALSE(client_ck.has_array("fm.tok_emb"));
  REQUIRE_FALSE(client_ck.has_array("fm.classifier"));

  const ClientState restored = client_from_checkpoint<double>(parse_checkpoint(serialize_checkpoint(client_ck)));
  Rng rng(77);
  const TokenSeq tokens = random_tokens(rng, 8);
  const auto original = client_prepare(client_from_bundle(bundle), tokens, 61);
  const auto reloaded = client_prepare(restored, tokens, 61);
  // Prefixes agree to one f32 narrowing of the composer parameters.
  REQUIRE(original.prefix.size() == reloaded.prefix.size());
  for (std::size_t i = 0; i < original.prefix.size(); ++i)
    REQUIRE(reloaded.prefix[i] == Catch::Approx(original.prefix[i]).margin(1e-6));

  // And a full-bundle checkpoint is rejected as client state.
  Checkpoint full = bundle_to_checkpoint(bundle);
  REQUIRE_THROWS_AS(client_from_checkpoint<double>(full), IoError);
}
