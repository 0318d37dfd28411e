#pragma once

// Checkpoint container: a binary file of named f32 arrays behind a small
// integer-metadata header. Layout (all little-endian):
//
//   magic "LPCK" | u16 version | u32 meta_count
//   meta entry:   u16 key_len | key bytes | i64 value
//   u32 array_count
//   array entry:  u16 name_len | name bytes | u32 rows | u32 cols | f32 data
//
// Weights are stored f32 row-major regardless of the in-memory precision;
// loading widens back to the requested scalar type.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lopa/bytes.hpp"
#include "lopa/matrix.hpp"
#include "lopa/transformer.hpp"
#include "lopa/util.hpp"

namespace lopa {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::int64_t> meta;
  std::vector<std::pair<std::string, MatrixF>> arrays;

  const MatrixF& array(const std::string& name) const {
    for (const auto& [n, m] : arrays)
      if (n == name) return m;
    throw IoError("checkpoint missing array " + name);
  }
  bool has_array(const std::string& name) const {
    for (const auto& [n, m] : arrays)
      if (n == name) return true;
    return false;
  }
  std::int64_t meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw IoError("checkpoint missing meta key " + key);
    return it->second;
  }

  template <typename T>
  void add(const std::string& name, const MatrixT<T>& m) {
    arrays.emplace_back(name, cast_matrix<float>(m));
  }
};

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.bytes("LPCK", 4);
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.meta.size()));
  for (const auto& [key, value] : ck.meta) {
    w.str(key);
    w.i64(value);
  }
  w.u32(static_cast<std::uint32_t>(ck.arrays.size()));
  for (const auto& [name, m] : ck.arrays) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (float v : m.data()) w.f32(v);
  }
  const auto& buf = w.data();
  return std::string(reinterpret_cast<const char*>(buf.data()), buf.size());
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  ByteReader r(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size());
  char magic[4];
  if (!r.need(4)) throw IoError("checkpoint truncated");
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::string(magic, 4) != "LPCK") throw IoError("not a checkpoint file (bad magic)");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    const std::string key = r.str();
    ck.meta[key] = r.i64();
  }
  const std::uint32_t n_arrays = r.u32();
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    const std::string name = r.str();
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    MatrixF m(rows, cols);
    for (auto& v : m.data()) v = r.f32();
    ck.arrays.emplace_back(name, std::move(m));
  }
  if (r.remaining() != 0) throw IoError("trailing bytes after checkpoint payload");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------
// Backbone schema.
// ---------------------------------------------------------------------------
inline std::vector<std::string> fm_array_names(const ModelConfig& cfg) {
  std::vector<std::string> names = {"fm.tok_emb", "fm.pos_emb"};
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const std::string p = "fm.block" + std::to_string(b) + ".";
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::string hp = p + "head" + std::to_string(h) + ".";
      names.push_back(hp + "wq");
      names.push_back(hp + "wk");
      names.push_back(hp + "wv");
    }
    names.push_back(p + "attn_out");
    names.push_back(p + "ffn_w1");
    names.push_back(p + "ffn_b1");
    names.push_back(p + "ffn_w2");
    names.push_back(p + "ffn_b2");
  }
  names.push_back("fm.classifier");
  return names;
}

inline void write_model_meta(Checkpoint& ck, const ModelConfig& cfg) {
  ck.meta["d"] = static_cast<std::int64_t>(cfg.d);
  ck.meta["n_heads"] = static_cast<std::int64_t>(cfg.n_heads);
  ck.meta["n_blocks"] = static_cast<std::int64_t>(cfg.n_blocks);
  ck.meta["ffn_dim"] = static_cast<std::int64_t>(cfg.ffn_dim);
  ck.meta["vocab"] = static_cast<std::int64_t>(cfg.vocab);
  ck.meta["n_max"] = static_cast<std::int64_t>(cfg.n_max);
  ck.meta["n_classes"] = static_cast<std::int64_t>(cfg.n_classes);
  ck.meta["pooling"] = cfg.pooling == Pooling::kMean ? 1 : 0;
  ck.meta["scale_mode"] = cfg.scale_mode == ScaleMode::kInvSqrtHeadDim ? 1 : 0;
}

inline ModelConfig read_model_meta(const Checkpoint& ck) {
  ModelConfig cfg;
  cfg.d = static_cast<std::size_t>(ck.meta_at("d"));
  cfg.n_heads = static_cast<std::size_t>(ck.meta_at("n_heads"));
  cfg.n_blocks = static_cast<std::size_t>(ck.meta_at("n_blocks"));
  cfg.ffn_dim = static_cast<std::size_t>(ck.meta_at("ffn_dim"));
  cfg.vocab = static_cast<std::size_t>(ck.meta_at("vocab"));
  cfg.n_max = static_cast<std::size_t>(ck.meta_at("n_max"));
  cfg.n_classes = static_cast<std::size_t>(ck.meta_at("n_classes"));
  cfg.pooling = ck.meta_at("pooling") == 1 ? Pooling::kMean : Pooling::kFirstToken;
  cfg.scale_mode = ck.meta_at("scale_mode") == 1 ? ScaleMode::kInvSqrtHeadDim : ScaleMode::kUnscaled;
  return cfg;
}

template <typename T>
void fm_to_checkpoint(Checkpoint& ck, const ToyTransformerT<T>& fm) {
  write_model_meta(ck, fm.cfg);
  ck.add("fm.tok_emb", fm.tok_emb);
  ck.add("fm.pos_emb", fm.pos_emb);
  for (std::size_t b = 0; b < fm.blocks.size(); ++b) {
    const std::string p = "fm.block" + std::to_string(b) + ".";
    for (std::size_t h = 0; h < fm.blocks[b].attn.heads.size(); ++h) {
      const std::string hp = p + "head" + std::to_string(h) + ".";
      ck.add(hp + "wq", fm.blocks[b].attn.heads[h].wq);
      ck.add(hp + "wk", fm.blocks[b].attn.heads[h].wk);
      ck.add(hp + "wv", fm.blocks[b].attn.heads[h].wv);
    }
    ck.add(p + "attn_out", fm.blocks[b].attn.out_proj);
    ck.add(p + "ffn_w1", fm.blocks[b].ffn_w1);
    ck.add(p + "ffn_b1", fm.blocks[b].ffn_b1);
    ck.add(p + "ffn_w2", fm.blocks[b].ffn_w2);
    ck.add(p + "ffn_b2", fm.blocks[b].ffn_b2);
  }
  ck.add("fm.classifier", fm.classifier);
}

/// Assembles the backbone. With exact_set, the checkpoint must contain the
/// backbone arrays and nothing else: a serving process refuses to load any
/// parameter it does not own.
template <typename T>
ToyTransformerT<T> fm_from_checkpoint(const Checkpoint& ck, bool exact_set) {
  const ModelConfig cfg = read_model_meta(ck);
  const auto names = fm_array_names(cfg);
  if (exact_set) {
    for (const auto& [name, m] : ck.arrays) {
      bool known = false;
      for (const auto& want : names) known = known || want == name;
      if (!known)
        throw IoError("server checkpoint carries non-backbone parameters (" + name +
                      "); personalization must stay client-side");
    }
  }
  auto grab = [&](const std::string& name) { return cast_matrix<T>(ck.array(name)); };
  ToyTransformerT<T> fm;
  fm.cfg = cfg;
  fm.tok_emb = grab("fm.tok_emb");
  fm.pos_emb = grab("fm.pos_emb");
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const std::string p = "fm.block" + std::to_string(b) + ".";
    BlockT<T> block;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::string hp = p + "head" + std::to_string(h) + ".";
      HeadWeightsT<T> head;
      head.wq = grab(hp + "wq");
      head.wk = grab(hp + "wk");
      head.wv = grab(hp + "wv");
      head.scale_mode = cfg.scale_mode;
      block.attn.heads.push_back(std::move(head));
    }
    block.attn.out_proj = grab(p + "attn_out");
    block.ffn_w1 = grab(p + "ffn_w1");
    block.ffn_b1 = grab(p + "ffn_b1");
    block.ffn_w2 = grab(p + "ffn_w2");
    block.ffn_b2 = grab(p + "ffn_b2");
    fm.blocks.push_back(std::move(block));
  }
  fm.classifier = grab("fm.classifier");
  return fm;
}

}  // namespace lopa
