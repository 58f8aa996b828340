#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hetspec/sparse_attention.hpp"
#include "hetspec/tensor.hpp"

namespace hetspec {

struct LayerWeights {
  Tensor attn_norm;  // [d_model]
  Tensor wq, wk, wv, wo;  // [d_model x d_model]
  Tensor mlp_norm;  // [d_model]
  Tensor w_gate, w_up;  // [d_model x d_ff]
  Tensor w_down;  // [d_ff x d_model]

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

enum class Linear { q, k, v, o, gate, up, down };

// Panel-packed copies of every projection, built by pack_weights().
struct PackedWeights {
  std::vector<std::array<PackedMatrix, 7>> layers;  // indexed by Linear
  PackedMatrix lm_head;
  std::vector<PackedMatrix> draft_heads;
};

struct ModelWeights {
  ModelConfig config;
  Tensor tok_embeddings;  // [vocab x d_model]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // [d_model]
  Tensor lm_head;  // [d_model x vocab]
  std::vector<Tensor> draft_heads;  // n_draft_heads x [d_model x vocab]
  // Optional; results are identical with or without it. Re-pack after editing tensors.
  std::shared_ptr<const PackedWeights> packed;

  friend bool operator==(const ModelWeights& a, const ModelWeights& b) {
    return a.config == b.config && a.tok_embeddings == b.tok_embeddings && a.layers == b.layers &&
           a.final_norm == b.final_norm && a.lm_head == b.lm_head && a.draft_heads == b.draft_heads;
  }
};

inline const Tensor& linear_tensor(const LayerWeights& L, Linear which) {
  switch (which) {
    case Linear::q: return L.wq;
    case Linear::k: return L.wk;
    case Linear::v: return L.wv;
    case Linear::o: return L.wo;
    case Linear::gate: return L.w_gate;
    case Linear::up: return L.w_up;
    case Linear::down: return L.w_down;
  }
  throw ContractViolation("unknown linear");
}

inline void pack_weights(ModelWeights& w) {
  auto p = std::make_shared<PackedWeights>();
  for (const auto& L : w.layers) {
    auto& dst = p->layers.emplace_back();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = PackedMatrix(linear_tensor(L, static_cast<Linear>(i)).view());
  }
  p->lm_head = PackedMatrix(w.lm_head.view());
  for (const auto& h : w.draft_heads) p->draft_heads.emplace_back(h.view());
  w.packed = std::move(p);
}

inline WeightRef layer_weight(const ModelWeights& w, std::size_t l, Linear which) {
  return {linear_tensor(w.layers[l], which).view(),
          w.packed ? &w.packed->layers[l][static_cast<std::size_t>(which)] : nullptr};
}

inline WeightRef lm_head_weight(const ModelWeights& w) {
  return {w.lm_head.view(), w.packed ? &w.packed->lm_head : nullptr};
}

inline WeightRef draft_weight(const ModelWeights& w, std::size_t h) {
  return {w.draft_heads[h].view(), w.packed ? &w.packed->draft_heads[h] : nullptr};
}

namespace detail {

inline void expect_shape(const Tensor& t, const std::vector<std::size_t>& shape, const std::string& name) {
  if (t.shape() != shape) {
    throw ConfigError("weights: tensor '" + name + "' has shape " + shape_string(t.shape()) + ", expected " +
                      shape_string(shape));
  }
}

}  // namespace detail

inline void validate_weights(const ModelWeights& w) {
  const auto& c = w.config;
  c.validate();
  detail::expect_shape(w.tok_embeddings, {c.vocab_size, c.d_model}, "tok_embeddings");
  if (w.layers.size() != c.n_layers) throw ConfigError("weights: layer count differs from config");
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    detail::expect_shape(L.attn_norm, {c.d_model}, p + "attn_norm");
    detail::expect_shape(L.wq, {c.d_model, c.d_model}, p + "wq");
    detail::expect_shape(L.wk, {c.d_model, c.d_model}, p + "wk");
    detail::expect_shape(L.wv, {c.d_model, c.d_model}, p + "wv");
    detail::expect_shape(L.wo, {c.d_model, c.d_model}, p + "wo");
    detail::expect_shape(L.mlp_norm, {c.d_model}, p + "mlp_norm");
    detail::expect_shape(L.w_gate, {c.d_model, c.d_ff}, p + "w_gate");
    detail::expect_shape(L.w_up, {c.d_model, c.d_ff}, p + "w_up");
    detail::expect_shape(L.w_down, {c.d_ff, c.d_model}, p + "w_down");
  }
  detail::expect_shape(w.final_norm, {c.d_model}, "final_norm");
  detail::expect_shape(w.lm_head, {c.d_model, c.vocab_size}, "lm_head");
  if (w.draft_heads.size() != c.n_draft_heads) throw ConfigError("weights: draft head count differs from config");
  for (std::size_t h = 0; h < w.draft_heads.size(); ++h) {
    detail::expect_shape(w.draft_heads[h], {c.d_model, c.vocab_size}, "draft_heads." + std::to_string(h));
  }
}

// Block KV produced by a forward pass but not yet part of the cache.
// Layout: [layer][head][block row][d_head].
struct StagedKV {
  std::size_t n_layers = 0, n_heads = 0, width = 0, d_head = 0;
  std::vector<float> keys, values;

  StagedKV() = default;
  StagedKV(const ModelConfig& c, std::size_t w)
      : n_layers(c.n_layers), n_heads(c.n_heads), width(w), d_head(c.d_head),
        keys(c.n_layers * c.n_heads * w * c.d_head), values(keys.size()) {}

  std::size_t offset(std::size_t layer, std::size_t head) const { return ((layer * n_heads + head) * width) * d_head; }
  MutMatrix k(std::size_t layer, std::size_t head) { return {keys.data() + offset(layer, head), width, d_head, d_head}; }
  MutMatrix v(std::size_t layer, std::size_t head) { return {values.data() + offset(layer, head), width, d_head, d_head}; }
  ConstMatrix k(std::size_t layer, std::size_t head) const {
    return {keys.data() + offset(layer, head), width, d_head, d_head};
  }
  ConstMatrix v(std::size_t layer, std::size_t head) const {
    return {values.data() + offset(layer, head), width, d_head, d_head};
  }
};

class KVCache {
 public:
  KVCache() = default;
  // Storage is left uninitialized; only rows below length() are ever read.
  explicit KVCache(const ModelConfig& c)
      : n_layers_(c.n_layers), n_heads_(c.n_heads), max_context_(c.max_context), d_head_(c.d_head),
        size_(c.n_layers * c.n_heads * c.max_context * c.d_head), keys_(new float[size_]), values_(new float[size_]) {}

  KVCache(const KVCache& o)
      : n_layers_(o.n_layers_), n_heads_(o.n_heads_), max_context_(o.max_context_), d_head_(o.d_head_),
        length_(o.length_), size_(o.size_), keys_(size_ ? new float[size_] : nullptr),
        values_(size_ ? new float[size_] : nullptr) {
    for (std::size_t lh = 0; lh < n_layers_ * n_heads_; ++lh) {
      const std::size_t at = lh * max_context_ * d_head_;
      std::copy_n(o.keys_.get() + at, length_ * d_head_, keys_.get() + at);
      std::copy_n(o.values_.get() + at, length_ * d_head_, values_.get() + at);
    }
  }
  KVCache& operator=(const KVCache& o) {
    if (this != &o) *this = KVCache(o);
    return *this;
  }
  KVCache(KVCache&&) noexcept = default;
  KVCache& operator=(KVCache&&) noexcept = default;

  std::size_t length() const noexcept { return length_; }
  std::size_t capacity() const noexcept { return max_context_; }

  // All max_context rows; rows at or past length() are unspecified.
  ConstMatrix keys(std::size_t layer, std::size_t head) const {
    return {keys_.get() + offset(layer, head), max_context_, d_head_, d_head_};
  }
  ConstMatrix values(std::size_t layer, std::size_t head) const {
    return {values_.get() + offset(layer, head), max_context_, d_head_, d_head_};
  }

  // Appends the staged rows in `rows` order (gather-compaction).
  void commit(const StagedKV& staged, std::span<const std::size_t> rows) {
    if (length_ + rows.size() > max_context_) throw CapacityError("kv cache: commit exceeds max_context");
    detail::require(staged.n_layers == n_layers_ && staged.n_heads == n_heads_ && staged.d_head == d_head_,
                    "kv cache: staged block has a different shape");
    for (std::size_t l = 0; l < n_layers_; ++l) {
      for (std::size_t h = 0; h < n_heads_; ++h) {
        const auto sk = staged.k(l, h);
        const auto sv = staged.v(l, h);
        float* dk = keys_.get() + offset(l, h);
        float* dv = values_.get() + offset(l, h);
        for (std::size_t t = 0; t < rows.size(); ++t) {
          detail::require(rows[t] < staged.width, "kv cache: staged row out of range");
          std::copy_n(sk.row(rows[t]).data(), d_head_, dk + (length_ + t) * d_head_);
          std::copy_n(sv.row(rows[t]).data(), d_head_, dv + (length_ + t) * d_head_);
        }
      }
    }
    length_ += rows.size();
  }

  // Fills rows up to `length` with values from `fill(index)`. Used for latency
  // profiling at a chosen context length without running a prefill.
  template <typename F>
  void fill_synthetic(std::size_t length, F&& fill) {
    if (length > max_context_) throw CapacityError("kv cache: synthetic length exceeds max_context");
    for (std::size_t i = 0; i < size_; ++i) {
      keys_[i] = fill(i);
      values_[i] = fill(i + size_);
    }
    length_ = length;
  }

 private:
  std::size_t offset(std::size_t layer, std::size_t head) const {
    return ((layer * n_heads_ + head) * max_context_) * d_head_;
  }

  std::size_t n_layers_ = 0, n_heads_ = 0, max_context_ = 0, d_head_ = 0;
  std::size_t length_ = 0;
  std::size_t size_ = 0;
  std::unique_ptr<float[]> keys_, values_;
};

// Output of one forward pass over a block of tokens.
struct BlockOutput {
  Tensor logits;  // [w x vocab]
  Tensor hidden;  // [w x d_model], final-normed hidden state feeding the LM and draft heads
  StagedKV staged;
};

struct BlockInput {
  std::span<const TokenId> tokens;
  std::span<const std::size_t> positions;
  const CooMask* mask = nullptr;
};

namespace detail {

inline void check_block(const ModelConfig& c, const KVCache& cache, const BlockInput& in) {
  detail::require(!in.tokens.empty(), "forward: empty block");
  detail::require(in.positions.size() == in.tokens.size(), "forward: one position per token required");
  detail::require(in.mask != nullptr && in.mask->rows() == in.tokens.size(), "forward: mask does not match block");
  if (cache.length() + in.tokens.size() > c.max_context) {
    throw CapacityError("forward: block of " + std::to_string(in.tokens.size()) + " tokens at cache length " +
                        std::to_string(cache.length()) + " exceeds max_context " + std::to_string(c.max_context));
  }
  for (auto t : in.tokens) detail::require(t < c.vocab_size, "forward: token id out of vocabulary");
  for (std::size_t i = 0; i < in.tokens.size(); ++i) {
    detail::require(in.mask->contains(i, i), "forward: mask lacks a diagonal entry");
  }
}

inline void embed(const ModelWeights& w, std::span<const TokenId> tokens, MutMatrix x) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto src = w.tok_embeddings.row(tokens[i]);
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }
}

}  // namespace detail

// Single-unit forward pass. Attention for block row i covers the committed cache
// plus the block rows its mask allows; block KV is staged, never committed here.
inline BlockOutput forward_block(const ModelWeights& w, const KVCache& cache, const BlockInput& in,
                                 KernelCounters* counters = nullptr) {
  const auto& c = w.config;
  detail::check_block(c, cache, in);
  const std::size_t n = in.tokens.size();
  const std::size_t P = cache.length();
  const float scale = 1.0f / std::sqrt(static_cast<float>(c.d_head));

  BlockOutput out{Tensor::matrix(n, c.vocab_size), Tensor::matrix(n, c.d_model), StagedKV(c, n)};
  Tensor x = Tensor::matrix(n, c.d_model);
  Tensor h = Tensor::matrix(n, c.d_model);
  Tensor q = Tensor::matrix(n, c.d_model), k = Tensor::matrix(n, c.d_model), v = Tensor::matrix(n, c.d_model);
  Tensor attn = Tensor::matrix(n, c.d_model);
  Tensor tmp = Tensor::matrix(n, c.d_model);
  Tensor gate = Tensor::matrix(n, c.d_ff), up = Tensor::matrix(n, c.d_ff);
  detail::embed(w, in.tokens, x.view());
  const Tensor rot = rope_tables(in.positions, c.d_head, c.rope_base);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = w.layers[l];
    for (std::size_t i = 0; i < n; ++i) rmsnorm_row(x.row(i), L.attn_norm.data(), c.norm_eps, h.row(i));
    gemm_into(h.view(), layer_weight(w, l, Linear::q), {0, c.d_model}, q.view());
    gemm_into(h.view(), layer_weight(w, l, Linear::k), {0, c.d_model}, k.view());
    gemm_into(h.view(), layer_weight(w, l, Linear::v), {0, c.d_model}, v.view());
    for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
      const Interval cols{hd * c.d_head, (hd + 1) * c.d_head};
      auto qh = q.view().columns(cols);
      auto kh = k.view().columns(cols);
      auto vh = v.view().columns(cols);
      auto sk = out.staged.k(l, hd);
      auto sv = out.staged.v(l, hd);
      for (std::size_t i = 0; i < n; ++i) {
        rope_apply(qh.row(i), rot.row(i));
        rope_apply(kh.row(i), rot.row(i));
        std::copy_n(kh.row(i).data(), c.d_head, sk.row(i).data());
        std::copy_n(vh.row(i).data(), c.d_head, sv.row(i).data());
      }
      attend_masked(qh, cache.keys(l, hd), cache.values(l, hd), P, sk, sv, *in.mask, scale,
                    attn.view().columns(cols), 0, counters);
    }
    gemm_into(attn.view(), layer_weight(w, l, Linear::o), {0, c.d_model}, tmp.view());
    for (std::size_t e = 0; e < x.numel(); ++e) x.storage()[e] += tmp.storage()[e];

    for (std::size_t i = 0; i < n; ++i) rmsnorm_row(x.row(i), L.mlp_norm.data(), c.norm_eps, h.row(i));
    gemm_into(h.view(), layer_weight(w, l, Linear::gate), {0, c.d_ff}, gate.view());
    gemm_into(h.view(), layer_weight(w, l, Linear::up), {0, c.d_ff}, up.view());
    silu_gate(gate.storage(), up.storage());
    gemm_into(up.view(), layer_weight(w, l, Linear::down), {0, c.d_model}, tmp.view());
    for (std::size_t e = 0; e < x.numel(); ++e) x.storage()[e] += tmp.storage()[e];
  }
  for (std::size_t i = 0; i < n; ++i) rmsnorm_row(x.row(i), w.final_norm.data(), c.norm_eps, out.hidden.row(i));
  gemm_into(out.hidden.view(), lm_head_weight(w), {0, c.vocab_size}, out.logits.view());
  return out;
}

struct PrefillResult {
  KVCache cache;
  Tensor hidden;  // [1 x d_model] at the last prompt position
  Tensor logits;  // [1 x vocab]
};

inline Tensor row_tensor(const Tensor& t, std::size_t i) {
  const auto r = t.row(i);
  return Tensor({1, t.cols()}, std::vector<float>(r.begin(), r.end()));
}

inline PrefillResult prefill(const ModelWeights& w, std::span<const TokenId> prompt) {
  const auto& c = w.config;
  if (prompt.empty()) throw CapacityError("prefill: prompt must contain at least one token");
  if (prompt.size() > c.max_context) throw CapacityError("prefill: prompt longer than max_context");
  KVCache cache(c);
  const CooMask mask = CooMask::causal(prompt.size());
  std::vector<std::size_t> pos(prompt.size());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  BlockOutput out = forward_block(w, cache, {prompt, pos, &mask});
  std::vector<std::size_t> rows(prompt.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  cache.commit(out.staged, rows);
  return {std::move(cache), row_tensor(out.hidden, prompt.size() - 1), row_tensor(out.logits, prompt.size() - 1)};
}

struct SequentialStep {
  TokenId next_token = 0;
  Tensor hidden;  // [1 x d_model]
  Tensor logits;  // [1 x vocab]
};

// Feeds `last_token` at the next cache position, commits its KV, returns the greedy successor.
inline SequentialStep decode_step(const ModelWeights& w, KVCache& cache, TokenId last_token) {
  if (cache.length() >= w.config.max_context) throw CapacityError("decode: kv cache is full");
  static const CooMask single = CooMask::causal(1);
  const TokenId tok[1] = {last_token};
  const std::size_t pos[1] = {cache.length()};
  BlockOutput out = forward_block(w, cache, {tok, pos, &single});
  const std::size_t row0[1] = {0};
  cache.commit(out.staged, row0);
  return {static_cast<TokenId>(argmax(out.logits.row(0))), std::move(out.hidden), std::move(out.logits)};
}

inline TokenId decode_step_sequential(const ModelWeights& w, KVCache& cache, TokenId last_token) {
  return decode_step(w, cache, last_token).next_token;
}

struct Candidate {
  TokenId token = 0;
  float prob = 0.0f;
};

// heads[h] holds draft head h+1's candidates in rank order.
struct DraftCandidates {
  std::vector<std::vector<Candidate>> heads;

  std::size_t n_heads() const noexcept { return heads.size(); }
};

// Top-k candidates of one logit row: descending logit, ties to the smaller id.
inline std::vector<Candidate> top_k(std::span<const float> logits, std::size_t k) {
  detail::require(k >= 1, "top_k: k must be >= 1");
  k = std::min(k, logits.size());
  std::vector<std::size_t> idx(logits.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
  float m = -INFINITY;
  for (float v : logits) m = std::max(m, v);
  float z = 0.0f;
  for (float v : logits) z += std::exp(v - m);
  std::vector<Candidate> out(k);
  for (std::size_t r = 0; r < k; ++r) {
    out[r] = {static_cast<TokenId>(idx[r]), std::exp(logits[idx[r]] - m) / z};
  }
  return out;
}

// Each draft head is a single linear projection of the final hidden state.
inline DraftCandidates draft(const ModelWeights& w, std::span<const float> hidden, std::size_t k) {
  detail::require(k >= 1, "draft: k must be >= 1");
  detail::require(hidden.size() == w.config.d_model, "draft: hidden size differs from d_model");
  DraftCandidates out;
  const ConstMatrix hv{hidden.data(), 1, hidden.size(), hidden.size()};
  Tensor logits = Tensor::matrix(1, w.config.vocab_size);
  for (std::size_t h = 0; h < w.draft_heads.size(); ++h) {
    gemm_into(hv, draft_weight(w, h), {0, w.config.vocab_size}, logits.view());
    out.heads.push_back(top_k(logits.row(0), k));
  }
  return out;
}

inline DraftCandidates draft(const ModelWeights& w, const Tensor& hidden, std::size_t k) {
  return draft(w, hidden.row(0), k);
}

}  // namespace hetspec
