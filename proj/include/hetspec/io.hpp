#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hetspec/error.hpp"
#include "hetspec/model.hpp"

namespace hetspec {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

// Bytes map to ids 0..255; id 256 is end-of-sequence.
struct ByteTokenizer {
  static constexpr std::size_t kVocab = 257;
  static constexpr TokenId kEos = 256;

  static std::vector<TokenId> encode(std::string_view s) {
    std::vector<TokenId> out;
    out.reserve(s.size());
    for (unsigned char c : s) out.push_back(c);
    return out;
  }

  // EOS is dropped; ids outside the vocabulary are rejected.
  static std::string decode(std::span<const TokenId> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) {
      if (t == kEos) continue;
      if (t > 255) throw InputError("tokenizer: id " + std::to_string(t) + " outside the vocabulary");
      out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Toy model
// ---------------------------------------------------------------------------

inline ModelWeights gen_toy_model(std::uint64_t seed, const ModelConfig& c = ModelConfig::tiny()) {
  c.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 0.02f);
  auto randn = [&](std::vector<std::size_t> shape) {
    Tensor t(std::move(shape));
    for (float& x : t.data()) x = normal(rng);
    return t;
  };
  ModelWeights w;
  w.config = c;
  w.tok_embeddings = randn({c.vocab_size, c.d_model});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerWeights L;
    L.attn_norm = Tensor({c.d_model}, 1.0f);
    L.wq = randn({c.d_model, c.d_model});
    L.wk = randn({c.d_model, c.d_model});
    L.wv = randn({c.d_model, c.d_model});
    L.wo = randn({c.d_model, c.d_model});
    L.mlp_norm = Tensor({c.d_model}, 1.0f);
    L.w_gate = randn({c.d_model, c.d_ff});
    L.w_up = randn({c.d_model, c.d_ff});
    L.w_down = randn({c.d_ff, c.d_model});
    w.layers.push_back(std::move(L));
  }
  w.final_norm = Tensor({c.d_model}, 1.0f);
  w.lm_head = randn({c.d_model, c.vocab_size});
  for (std::size_t h = 0; h < c.n_draft_heads; ++h) w.draft_heads.push_back(randn({c.d_model, c.vocab_size}));
  pack_weights(w);
  return w;
}

// FNV-1a over the raw bytes of every tensor, in container order.
inline std::uint64_t weights_checksum(const ModelWeights& w);

// ---------------------------------------------------------------------------
// Container
// ---------------------------------------------------------------------------

inline constexpr char kContainerMagic[4] = {'G', 'H', 'D', 'R'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 0;
inline constexpr std::size_t kPayloadAlign = 64;
inline constexpr const char* kConfigTensor = "__config__";

namespace detail {

struct NamedTensor {
  std::string name;
  const Tensor* tensor;
};

inline std::vector<NamedTensor> named_tensors(const ModelWeights& w) {
  std::vector<NamedTensor> out{{"tok_embeddings", &w.tok_embeddings}};
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", &L.attn_norm});
    out.push_back({p + "wq", &L.wq});
    out.push_back({p + "wk", &L.wk});
    out.push_back({p + "wv", &L.wv});
    out.push_back({p + "wo", &L.wo});
    out.push_back({p + "mlp_norm", &L.mlp_norm});
    out.push_back({p + "w_gate", &L.w_gate});
    out.push_back({p + "w_up", &L.w_up});
    out.push_back({p + "w_down", &L.w_down});
  }
  out.push_back({"final_norm", &w.final_norm});
  out.push_back({"lm_head", &w.lm_head});
  for (std::size_t h = 0; h < w.draft_heads.size(); ++h)
    out.push_back({"draft_heads." + std::to_string(h), &w.draft_heads[h]});
  return out;
}

inline Tensor config_tensor(const ModelConfig& c) {
  return Tensor({10}, std::vector<float>{
                          static_cast<float>(c.vocab_size), static_cast<float>(c.d_model),
                          static_cast<float>(c.n_layers), static_cast<float>(c.n_heads),
                          static_cast<float>(c.d_head), static_cast<float>(c.d_ff),
                          static_cast<float>(c.n_draft_heads), static_cast<float>(c.max_context), c.rope_base,
                          c.norm_eps});
}

inline ModelConfig config_from_tensor(const Tensor& t) {
  if (t.numel() != 10) throw ShapeMismatchError(kConfigTensor, "metadata tensor must hold 10 values");
  auto d = t.data();
  auto count = [&](std::size_t i) {
    const float v = d[i];
    if (!(v >= 0.0f && v < 16777216.0f) || v != std::floor(v)) {
      throw FormatError(std::string(kConfigTensor) + ": field " + std::to_string(i) + " is not a count");
    }
    return static_cast<std::size_t>(v);
  };
  ModelConfig c;
  c.vocab_size = count(0);
  c.d_model = count(1);
  c.n_layers = count(2);
  c.n_heads = count(3);
  c.d_head = count(4);
  c.d_ff = count(5);
  c.n_draft_heads = count(6);
  c.max_context = count(7);
  c.rope_base = d[8];
  c.norm_eps = d[9];
  return c;
}

inline std::map<std::string, std::vector<std::size_t>> expected_shapes(const ModelConfig& c) {
  std::map<std::string, std::vector<std::size_t>> s{{"tok_embeddings", {c.vocab_size, c.d_model}}};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    s[p + "attn_norm"] = {c.d_model};
    s[p + "wq"] = s[p + "wk"] = s[p + "wv"] = s[p + "wo"] = {c.d_model, c.d_model};
    s[p + "mlp_norm"] = {c.d_model};
    s[p + "w_gate"] = s[p + "w_up"] = {c.d_model, c.d_ff};
    s[p + "w_down"] = {c.d_ff, c.d_model};
  }
  s["final_norm"] = {c.d_model};
  s["lm_head"] = {c.d_model, c.vocab_size};
  for (std::size_t h = 0; h < c.n_draft_heads; ++h) s["draft_heads." + std::to_string(h)] = {c.d_model, c.vocab_size};
  return s;
}

template <typename T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <typename T>
  T get(const std::string& what) {
    if (data_.size() - pos_ < sizeof(T)) throw TruncatedError(what, "container ends inside the " + what + " entry");
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string bytes(std::size_t n, const std::string& what) {
    if (data_.size() - pos_ < n) throw TruncatedError(what, "container ends inside the " + what + " entry");
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view data) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f) throw IoError("write to '" + path.string() + "' failed");
}

}  // namespace detail

inline std::string serialize_model(const ModelWeights& w) {
  validate_weights(w);
  const Tensor cfg = detail::config_tensor(w.config);
  std::vector<detail::NamedTensor> all{{kConfigTensor, &cfg}};
  for (auto& nt : detail::named_tensors(w)) all.push_back(nt);

  std::size_t table = 12;
  for (const auto& nt : all) table += 4 + nt.name.size() + 4 + 4 + 8 * nt.tensor->rank() + 8;
  auto align = [](std::size_t x) { return (x + kPayloadAlign - 1) / kPayloadAlign * kPayloadAlign; };
  std::vector<std::size_t> offsets;
  std::size_t at = align(table);
  for (const auto& nt : all) {
    offsets.push_back(at);
    at = align(at + nt.tensor->numel() * sizeof(float));
  }

  std::string buf;
  buf.reserve(at);
  buf.append(kContainerMagic, 4);
  detail::put<std::uint32_t>(buf, kContainerVersion);
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(all.size()));
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& nt = all[i];
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(nt.name.size()));
    buf += nt.name;
    detail::put<std::uint32_t>(buf, kDtypeF32);
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(nt.tensor->rank()));
    for (auto e : nt.tensor->shape()) detail::put<std::uint64_t>(buf, e);
    detail::put<std::uint64_t>(buf, offsets[i]);
  }
  for (std::size_t i = 0; i < all.size(); ++i) {
    buf.resize(offsets[i], '\0');
    const auto d = all[i].tensor->data();
    buf.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(float));
  }
  buf.resize(at, '\0');
  return buf;
}

inline ModelWeights deserialize_model(std::string_view data) {
  if (data.size() < 4 || std::memcmp(data.data(), kContainerMagic, 4) != 0) {
    throw BadMagicError("model container: bad magic (expected GHDR)");
  }
  detail::Reader rd(data.substr(4));
  const auto version = rd.get<std::uint32_t>("header");
  if (version != kContainerVersion) throw FormatError("model container: unsupported version " + std::to_string(version));
  const auto count = rd.get<std::uint32_t>("header");

  struct Entry {
    std::vector<std::size_t> shape;
    std::uint64_t offset;
  };
  std::map<std::string, Entry> entries;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "tensor table #" + std::to_string(i);
    const auto name_len = rd.get<std::uint32_t>(where);
    std::string name = rd.bytes(name_len, where);
    const auto dtype = rd.get<std::uint32_t>(name);
    if (dtype != kDtypeF32) throw FormatError("model container: tensor '" + name + "' has unsupported dtype");
    const auto rank = rd.get<std::uint32_t>(name);
    if (rank == 0 || rank > 8) throw FormatError("model container: tensor '" + name + "' has invalid rank");
    Entry e;
    std::uint64_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto ext = rd.get<std::uint64_t>(name);
      if (ext == 0 || ext > (std::uint64_t{1} << 32)) throw FormatError("model container: tensor '" + name + "' has invalid extent");
      numel *= ext;
      e.shape.push_back(static_cast<std::size_t>(ext));
    }
    e.offset = rd.get<std::uint64_t>(name);
    const std::uint64_t bytes = numel * sizeof(float);
    if (e.offset > data.size() || data.size() - e.offset < bytes) {
      throw TruncatedError(name, "model container: payload of '" + name + "' runs past the end of the file");
    }
    spans.emplace_back(e.offset, e.offset + bytes);
    if (!entries.emplace(name, std::move(e)).second) {
      throw FormatError("model container: duplicate tensor name '" + name + "'");
    }
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) throw FormatError("model container: overlapping tensor payloads");
  }

  auto load = [&](const std::string& name, const std::vector<std::size_t>* expect) {
    auto it = entries.find(name);
    if (it == entries.end()) throw FormatError("model container: missing tensor '" + name + "'");
    if (expect && it->second.shape != *expect) {
      throw ShapeMismatchError(name, "model container: tensor '" + name + "' has shape " +
                                         shape_string(it->second.shape) + ", expected " + shape_string(*expect));
    }
    Tensor t(it->second.shape);
    std::memcpy(t.data().data(), data.data() + it->second.offset, t.numel() * sizeof(float));
    return t;
  };

  ModelWeights w;
  w.config = detail::config_from_tensor(load(kConfigTensor, nullptr));
  try {
    w.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model container: ") + e.what());
  }
  const auto shapes = detail::expected_shapes(w.config);
  if (entries.size() != shapes.size() + 1) {
    for (const auto& [name, _] : entries) {
      if (name != kConfigTensor && !shapes.count(name)) throw FormatError("model container: unexpected tensor '" + name + "'");
    }
  }
  auto get = [&](const std::string& n) { return load(n, &shapes.at(n)); };
  w.tok_embeddings = get("tok_embeddings");
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerWeights L;
    L.attn_norm = get(p + "attn_norm");
    L.wq = get(p + "wq");
    L.wk = get(p + "wk");
    L.wv = get(p + "wv");
    L.wo = get(p + "wo");
    L.mlp_norm = get(p + "mlp_norm");
    L.w_gate = get(p + "w_gate");
    L.w_up = get(p + "w_up");
    L.w_down = get(p + "w_down");
    w.layers.push_back(std::move(L));
  }
  w.final_norm = get("final_norm");
  w.lm_head = get("lm_head");
  for (std::size_t h = 0; h < w.config.n_draft_heads; ++h) w.draft_heads.push_back(get("draft_heads." + std::to_string(h)));
  pack_weights(w);
  return w;
}

inline void save_model(const ModelWeights& w, const std::filesystem::path& path) {
  detail::write_file(path, serialize_model(w));
}

inline ModelWeights load_model(const std::filesystem::path& path) { return deserialize_model(detail::read_file(path)); }

inline std::uint64_t weights_checksum(const ModelWeights& w) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& nt : detail::named_tensors(w)) {
    const auto d = nt.tensor->data();
    const auto* p = reinterpret_cast<const unsigned char*>(d.data());
    for (std::size_t i = 0; i < d.size() * sizeof(float); ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace hetspec
