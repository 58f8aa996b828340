#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

#include "hetspec/tensor.hpp"
#include "hetspec/tree.hpp"

namespace hetspec {

struct Coord {
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  friend bool operator==(const Coord&, const Coord&) = default;
  friend auto operator<=>(const Coord&, const Coord&) = default;
};

// COO list of (row, col) block positions a row may attend to, grouped by row
// ascending with columns ascending inside each row.
class CooMask {
 public:
  CooMask() = default;

  // Takes pairs already in row-major order; rejects anything else.
  CooMask(std::size_t rows, std::vector<Coord> pairs) : rows_(rows), pairs_(std::move(pairs)) {
    for (std::size_t p = 0; p < pairs_.size(); ++p) {
      detail::require(pairs_[p].row < rows_ && pairs_[p].col < rows_, "mask: pair outside the block");
      detail::require(p == 0 || pairs_[p - 1] < pairs_[p], "mask: pairs must be row-major and unique");
    }
    row_begin_.assign(rows_ + 1, 0);
    for (const auto& c : pairs_) ++row_begin_[c.row + 1];
    for (std::size_t r = 0; r < rows_; ++r) row_begin_[r + 1] += row_begin_[r];
  }

  // Full lower triangle: ordinary causal attention inside the block.
  static CooMask causal(std::size_t rows) {
    std::vector<Coord> pairs;
    pairs.reserve(rows * (rows + 1) / 2);
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t j = 0; j <= i; ++j) pairs.push_back({i, j});
    return CooMask(rows, std::move(pairs));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t size() const noexcept { return pairs_.size(); }
  const std::vector<Coord>& pairs() const noexcept { return pairs_; }
  const Coord& operator[](std::size_t p) const { return pairs_[p]; }

  // Pair-index interval holding row `r`.
  Interval row_pairs(std::size_t r) const { return {row_begin_[r], row_begin_[r + 1]}; }

  bool contains(std::size_t row, std::size_t col) const {
    const auto rp = row_pairs(row);
    return std::binary_search(pairs_.begin() + rp.begin, pairs_.begin() + rp.end,
                              Coord{static_cast<std::uint32_t>(row), static_cast<std::uint32_t>(col)});
  }

  // Sub-mask restricted to columns inside `cols`, keeping row-major order.
  CooMask filter_cols(Interval cols) const {
    std::vector<Coord> keep;
    for (const auto& c : pairs_)
      if (cols.contains(c.col)) keep.push_back(c);
    return CooMask(rows_, std::move(keep));
  }

  friend bool operator==(const CooMask& a, const CooMask& b) {
    return a.rows_ == b.rows_ && a.pairs_ == b.pairs_;
  }

 private:
  std::size_t rows_ = 0;
  std::vector<Coord> pairs_;
  std::vector<std::size_t> row_begin_ = std::vector<std::size_t>(1, 0);
};

// Each node attends to its tree ancestors and itself.
inline CooMask build_mask(const VerificationTree& tree) {
  std::vector<Coord> pairs;
  for (std::size_t i = 0; i < tree.width(); ++i) {
    for (std::size_t j : tree.path(i)) pairs.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
  }
  return CooMask(tree.width(), std::move(pairs));
}

// Instrumentation for the sparse kernels.
struct KernelCounters {
  std::size_t score_evals = 0;
  std::size_t av_updates = 0;
};

// scores[p - pairs.begin] = scale * q[row_p] . k[col_p] for p in `pairs`.
inline void sparse_qk(ConstMatrix q, ConstMatrix k_block, const CooMask& mask, Interval pairs, float scale,
                      std::span<float> scores, KernelCounters* counters = nullptr) {
  detail::require(q.cols == k_block.cols, "sparse_qk: head dims differ");
  detail::require(pairs.end <= mask.size() && scores.size() >= pairs.size(), "sparse_qk: pair range out of bounds");
  for (std::size_t p = pairs.begin; p < pairs.end; ++p) {
    const Coord c = mask[p];
    scores[p - pairs.begin] = dot(q.row(c.row), k_block.row(c.col)) * scale;
  }
  if (counters) counters->score_evals += pairs.size();
}

inline std::vector<float> sparse_qk(const Tensor& q, const Tensor& k_block, const CooMask& mask, float scale,
                                    KernelCounters* counters = nullptr) {
  detail::require(q.rows() == mask.rows() && k_block.rows() == mask.rows(), "sparse_qk: block size differs from mask");
  std::vector<float> scores(mask.size());
  sparse_qk(q.view(), k_block.view(), mask, {0, mask.size()}, scale, scores, counters);
  return scores;
}

// out[row] = sum over the row's pairs of probs * v[col]. Streams rows of V and keeps a
// `block_cols`-wide slice of the output row in local accumulators, storing it once.
// Rows with no pair in range are left untouched.
inline void sparse_av(std::span<const float> probs, ConstMatrix v_block, const CooMask& mask, Interval pairs,
                      MutMatrix out, std::size_t block_cols = 0, KernelCounters* counters = nullptr) {
  constexpr std::size_t kMaxBlock = 256;
  const std::size_t d = v_block.cols;
  const std::size_t bc = std::min(block_cols == 0 ? d : block_cols, kMaxBlock);
  detail::require(probs.size() >= pairs.size(), "sparse_av: probability span too short");
  std::array<float, kMaxBlock> acc;
  std::size_t p = pairs.begin;
  while (p < pairs.end) {
    const std::uint32_t row = mask[p].row;
    std::size_t seg_end = p;
    while (seg_end < pairs.end && mask[seg_end].row == row) ++seg_end;
    for (std::size_t c0 = 0; c0 < d; c0 += bc) {
      const std::size_t cn = std::min(bc, d - c0);
      std::fill_n(acc.begin(), cn, 0.0f);
      for (std::size_t s = p; s < seg_end; ++s) {
        const float w = probs[s - pairs.begin];
        const float* vrow = v_block.data + mask[s].col * v_block.stride + c0;
        for (std::size_t c = 0; c < cn; ++c) acc[c] += w * vrow[c];
      }
      float* orow = out.data + row * out.stride + c0;
      for (std::size_t c = 0; c < cn; ++c) orow[c] = acc[c];
    }
    if (counters) counters->av_updates += seg_end - p;
    p = seg_end;
  }
}

inline Tensor sparse_av(std::span<const float> probs, const Tensor& v_block, const CooMask& mask,
                        std::size_t block_cols = 0, KernelCounters* counters = nullptr) {
  detail::require(probs.size() == mask.size(), "sparse_av: one probability per mask pair required");
  Tensor out = Tensor::matrix(mask.rows(), v_block.cols());
  sparse_av(probs, v_block.view(), mask, {0, mask.size()}, out.view(), block_cols, counters);
  return out;
}

// Unnormalized attention over a subset of keys: o = sum exp(s - m) v, l = sum exp(s - m).
// A row that saw no keys holds the merge identity m = -inf, l = 0, o = 0.
struct PartialAttention {
  Tensor o;
  std::vector<float> m;
  std::vector<float> l;

  PartialAttention() = default;
  PartialAttention(std::size_t rows, std::size_t d) { reset(rows, d); }

  void reset(std::size_t rows, std::size_t d) {
    if (o.rows() != rows || o.cols() != d) o = Tensor::matrix(rows, d);
    std::fill(o.storage().begin(), o.storage().end(), 0.0f);
    m.assign(rows, -INFINITY);
    l.assign(rows, 0.0f);
  }
  std::size_t rows() const noexcept { return m.size(); }
};

inline void attend_dense_prefix(ConstMatrix q, ConstMatrix k_cache, ConstMatrix v_cache, Interval range, float scale,
                                PartialAttention& out) {
  detail::require(range.end <= k_cache.rows && range.end <= v_cache.rows, "attend_dense_prefix: range beyond cache");
  out.reset(q.rows, q.cols);
  if (range.empty()) return;
  std::vector<float> s(range.size());
  for (std::size_t i = 0; i < q.rows; ++i) {
    float m = -INFINITY;
    for (std::size_t j = range.begin; j < range.end; ++j) {
      s[j - range.begin] = dot(q.row(i), k_cache.row(j)) * scale;
      m = std::max(m, s[j - range.begin]);
    }
    float l = 0.0f;
    for (auto& e : s) {
      e = std::exp(e - m);
      l += e;
    }
    auto orow = out.o.row(i);
    for (std::size_t j = range.begin; j < range.end; ++j) {
      const float w = s[j - range.begin];
      const auto vrow = v_cache.row(j);
      for (std::size_t c = 0; c < orow.size(); ++c) orow[c] += w * vrow[c];
    }
    out.m[i] = m;
    out.l[i] = l;
  }
}

inline PartialAttention attend_dense_prefix(const Tensor& q, const Tensor& k_cache, const Tensor& v_cache,
                                            Interval range, float scale) {
  PartialAttention out;
  attend_dense_prefix(q.view(), k_cache.view(), v_cache.view(), range, scale, out);
  return out;
}

// Partial over mask pairs in `pairs` only (a unit may own a slice of the pair list).
inline void attend_sparse_block(ConstMatrix q, ConstMatrix k_block, ConstMatrix v_block, const CooMask& mask,
                                Interval pairs, float scale, PartialAttention& out, std::size_t block_cols = 0,
                                KernelCounters* counters = nullptr) {
  out.reset(q.rows, q.cols);
  if (pairs.empty()) return;
  std::vector<float> s(pairs.size());
  sparse_qk(q, k_block, mask, pairs, scale, s, counters);
  std::size_t p = pairs.begin;
  while (p < pairs.end) {
    const std::uint32_t row = mask[p].row;
    std::size_t e = p;
    float m = -INFINITY;
    for (; e < pairs.end && mask[e].row == row; ++e) m = std::max(m, s[e - pairs.begin]);
    float l = 0.0f;
    for (std::size_t t = p; t < e; ++t) {
      s[t - pairs.begin] = std::exp(s[t - pairs.begin] - m);
      l += s[t - pairs.begin];
    }
    out.m[row] = m;
    out.l[row] = l;
    p = e;
  }
  sparse_av(s, v_block, mask, pairs, out.o.view(), block_cols, counters);
}

inline PartialAttention attend_sparse_block(const Tensor& q, const Tensor& k_block, const Tensor& v_block,
                                            const CooMask& mask, float scale, KernelCounters* counters = nullptr) {
  PartialAttention out;
  attend_sparse_block(q.view(), k_block.view(), v_block.view(), mask, {0, mask.size()}, scale, out, 0, counters);
  return out;
}

// O = sum_p e^{m_p - m*} o_p / sum_p e^{m_p - m*} l_p per row, parts taken in order.
inline void merge_partials(std::span<const PartialAttention* const> parts, MutMatrix out) {
  detail::require(!parts.empty(), "merge_partials: need at least one part");
  const std::size_t rows = parts.front()->rows();
  for (const auto* p : parts) detail::require(p->rows() == rows, "merge_partials: row counts differ");
  for (std::size_t i = 0; i < rows; ++i) {
    float mstar = -INFINITY;
    for (const auto* p : parts)
      if (p->l[i] > 0.0f) mstar = std::max(mstar, p->m[i]);
    detail::require(mstar > -INFINITY, "merge_partials: row " + std::to_string(i) + " has no contributing part");
    auto orow = out.row(i);
    std::fill(orow.begin(), orow.end(), 0.0f);
    float den = 0.0f;
    for (const auto* p : parts) {
      if (!(p->l[i] > 0.0f)) continue;
      const float a = std::exp(p->m[i] - mstar);
      const auto prow = p->o.row(i);
      for (std::size_t c = 0; c < orow.size(); ++c) orow[c] += a * prow[c];
      den += a * p->l[i];
    }
    for (auto& v : orow) v /= den;
  }
}

inline Tensor merge_partials(std::span<const PartialAttention> parts) {
  detail::require(!parts.empty(), "merge_partials: need at least one part");
  std::vector<const PartialAttention*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  Tensor out = Tensor::matrix(parts.front().rows(), parts.front().o.cols());
  merge_partials(ptrs, out.view());
  return out;
}

namespace detail {

// In place exp(v[i] - m) for every element.
inline void exp_shifted(std::span<float> v, float m) {
  std::size_t j = 0;
  for (; j + 8 <= v.size(); j += 8) {
    vf8 x;
    std::memcpy(&x, v.data() + j, sizeof x);
    x = vexp(x - m);
    std::memcpy(v.data() + j, &x, sizeof x);
  }
  if (j < v.size()) {
    vf8 x{};
    std::copy(v.begin() + static_cast<std::ptrdiff_t>(j), v.end(), reinterpret_cast<float*>(&x));
    x = vexp(x - m);
    std::copy_n(reinterpret_cast<const float*>(&x), v.size() - j, v.data() + j);
  }
}

}  // namespace detail

// Single-pass masked attention for the block: every row attends to cache rows
// [0, prefix_len) and then to its mask pairs, in that order, through one
// softmax. A width-1 block at position P+d and a tree node at depth d over a
// P-row cache see the same key sequence, so both produce identical bits.
inline void attend_masked(ConstMatrix q, ConstMatrix k_cache, ConstMatrix v_cache, std::size_t prefix_len,
                          ConstMatrix k_block, ConstMatrix v_block, const CooMask& mask, float scale, MutMatrix out,
                          std::size_t block_cols = 0, KernelCounters* counters = nullptr) {
  constexpr std::size_t kMaxBlock = 256;
  constexpr std::size_t kGroup = 4;  // rows sharing one pass over the cached values
  detail::require(mask.rows() == q.rows, "attend_masked: mask rows differ from block width");
  const std::size_t d = q.cols;
  const std::size_t bc = std::min(block_cols == 0 ? d : block_cols, kMaxBlock);
  std::vector<float> block_scores(mask.size());
  sparse_qk(q, k_block, mask, {0, mask.size()}, scale, block_scores, counters);
  std::vector<float> s(kGroup * prefix_len);
  std::array<float, kGroup> l;
  std::array<std::array<float, kMaxBlock>, kGroup> acc;
  for (std::size_t i0 = 0; i0 < q.rows; i0 += kGroup) {
    const std::size_t gn = std::min(kGroup, q.rows - i0);
    for (std::size_t g = 0; g < gn; ++g) {
      const std::size_t i = i0 + g;
      const Interval rp = mask.row_pairs(i);
      const std::span<float> sg(s.data() + g * prefix_len, prefix_len);
      float m = -INFINITY;
      for (std::size_t j = 0; j < prefix_len; ++j) {
        sg[j] = dot(q.row(i), k_cache.row(j)) * scale;
        m = std::max(m, sg[j]);
      }
      for (std::size_t p = rp.begin; p < rp.end; ++p) m = std::max(m, block_scores[p]);
      const std::span<float> bs(block_scores.data() + rp.begin, rp.size());
      detail::exp_shifted(sg, m);
      detail::exp_shifted(bs, m);
      l[g] = 0.0f;
      for (float e : sg) l[g] += e;
      for (float e : bs) l[g] += e;
    }
    for (std::size_t c0 = 0; c0 < d; c0 += bc) {
      const std::size_t cn = std::min(bc, d - c0);
      for (std::size_t g = 0; g < gn; ++g) std::fill_n(acc[g].begin(), cn, 0.0f);
      for (std::size_t j = 0; j < prefix_len; ++j) {
        const float* vrow = v_cache.data + j * v_cache.stride + c0;
        for (std::size_t g = 0; g < gn; ++g) {
          const float sj = s[g * prefix_len + j];
          for (std::size_t c = 0; c < cn; ++c) acc[g][c] += sj * vrow[c];
        }
      }
      for (std::size_t g = 0; g < gn; ++g) {
        const Interval rp = mask.row_pairs(i0 + g);
        for (std::size_t p = rp.begin; p < rp.end; ++p) {
          const float* vrow = v_block.data + mask[p].col * v_block.stride + c0;
          for (std::size_t c = 0; c < cn; ++c) acc[g][c] += block_scores[p] * vrow[c];
        }
        float* orow = out.data + (i0 + g) * out.stride + c0;
        for (std::size_t c = 0; c < cn; ++c) orow[c] = acc[g][c] / l[g];
      }
    }
    if (counters)
      for (std::size_t g = 0; g < gn; ++g) counters->av_updates += mask.row_pairs(i0 + g).size();
  }
}

}  // namespace hetspec
