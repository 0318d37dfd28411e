#pragma once

// Synthetic byte-token classification tasks. Instances are derived from
// (task seed, split, index) alone, so train and test draw from disjoint
// deterministic streams and any instance can be regenerated on demand.
//
// Three labeling regimes:
//   task-signal      label = presence of a fixed byte. A global rule; a
//                    shared prompt (or just the task head) suffices.
//   instance-signal  a key byte at position 0 marks one of two carrier
//                    groups; the label is the low bit of the marked group's
//                    byte, and the unmarked group carries the complement.
//                    Every single token feature is uncorrelated with the
//                    label; only the key x carrier interaction decides it.
//                    Also answers to the name "parity-of-marked-byte".
//   mixed            global-rule bit XOR key bit: solving it needs the task
//                    pattern and the instance key together.

#ifdef LOPA_SERVER_BUILD
#error "task-generator code must not be compiled into a server build"
#endif

#include <cstdint>
#include <string>
#include <vector>

#include "lopa/matrix.hpp"
#include "lopa/transformer.hpp"
#include "lopa/util.hpp"

namespace lopa {

enum class Split { kTrain, kTest };

struct Instance {
  TokenSeq tokens;
  std::size_t label = 0;
};

namespace task_bytes {
// Byte layout: fillers from a band disjoint from every signal byte.
inline constexpr std::uint32_t kFillerBase = 0x80;
inline constexpr std::uint32_t kFillerSpan = 64;
inline constexpr std::uint32_t kKeyBase = 0xE0;      // key token: 0xE0 | k
inline constexpr std::uint32_t kCarrierABase = 0x10; // group A carrier: 0x10 | bit
inline constexpr std::uint32_t kCarrierBBase = 0x20; // group B carrier: 0x20 | bit
inline constexpr std::uint32_t kTaskByte = 0x41;     // task-signal pattern
inline constexpr std::uint32_t kMixedByte = 0x42;    // mixed-task pattern
}  // namespace task_bytes

class Task {
 public:
  enum class Kind { kTaskSignal, kInstanceSignal, kMixed };

  Task(Kind kind, std::string name, std::uint64_t seed, std::size_t train_size, std::size_t test_size,
       std::size_t seq_len)
      : kind_(kind),
        name_(std::move(name)),
        seed_(seed),
        train_size_(train_size),
        test_size_(test_size),
        seq_len_(seq_len) {
    if (seq_len_ < 4) throw ConfigError("task sequences need at least 4 positions");
  }

  const std::string& name() const { return name_; }
  Kind kind() const { return kind_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t train_size() const { return train_size_; }
  std::size_t test_size() const { return test_size_; }
  std::size_t seq_len() const { return seq_len_; }
  std::size_t size(Split split) const { return split == Split::kTrain ? train_size_ : test_size_; }
  static constexpr std::size_t n_classes() { return 2; }

  /// Deterministic in (seed, split, index); splits use disjoint streams.
  Instance sample(Split split, std::size_t index) const {
    const std::uint64_t split_tag = split == Split::kTrain ? 1 : 2;
    Rng rng(Rng::mix(seed_, split_tag * 0x100000000ULL + index));
    Instance inst;
    inst.tokens.resize(seq_len_);
    for (auto& t : inst.tokens)
      t = task_bytes::kFillerBase + static_cast<std::uint32_t>(rng.below(task_bytes::kFillerSpan));

    switch (kind_) {
      case Kind::kTaskSignal: {
        const bool present = rng.below(2) == 1;
        if (present) inst.tokens[rng.below(seq_len_)] = task_bytes::kTaskByte;
        inst.label = present ? 1 : 0;
        break;
      }
      case Kind::kInstanceSignal: {
        const std::uint32_t key = static_cast<std::uint32_t>(rng.below(2));
        const std::uint32_t bit = static_cast<std::uint32_t>(rng.below(2));
        inst.tokens[0] = task_bytes::kKeyBase | key;
        std::size_t pos_a = 1 + rng.below(seq_len_ - 1);
        std::size_t pos_b = 1 + rng.below(seq_len_ - 2);
        if (pos_b >= pos_a) ++pos_b;  // distinct positions
        inst.tokens[pos_a] = task_bytes::kCarrierABase | bit;
        inst.tokens[pos_b] = task_bytes::kCarrierBBase | (bit ^ 1u);
        inst.label = bit ^ key;
        break;
      }
      case Kind::kMixed: {
        const std::uint32_t key = static_cast<std::uint32_t>(rng.below(2));
        const bool pattern = rng.below(2) == 1;
        inst.tokens[0] = task_bytes::kKeyBase | key;
        if (pattern) inst.tokens[1 + rng.below(seq_len_ - 1)] = task_bytes::kMixedByte;
        inst.label = (pattern ? 1u : 0u) ^ key;
        break;
      }
    }
    return inst;
  }

 private:
  Kind kind_;
  std::string name_;
  std::uint64_t seed_;
  std::size_t train_size_;
  std::size_t test_size_;
  std::size_t seq_len_;
};

inline Task make_task(const std::string& name, std::uint64_t seed, std::size_t train_size = 1024,
                      std::size_t test_size = 256, std::size_t seq_len = 12) {
  if (name == "task-signal") return Task(Task::Kind::kTaskSignal, name, seed, train_size, test_size, seq_len);
  if (name == "instance-signal" || name == "parity-of-marked-byte")
    return Task(Task::Kind::kInstanceSignal, name, seed, train_size, test_size, seq_len);
  if (name == "mixed") return Task(Task::Kind::kMixed, name, seed, train_size, test_size, seq_len);
  throw ConfigError("unknown task \"" + name + "\" (expected task-signal, instance-signal or mixed)");
}

}  // namespace lopa
