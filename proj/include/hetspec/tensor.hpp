#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#ifdef __FMA__
#include <immintrin.h>
#endif

#include "hetspec/error.hpp"

namespace hetspec {

using TokenId = std::uint32_t;

// Half-open index interval [begin, end).
struct Interval {
  std::size_t begin = 0;
  std::size_t end = 0;

  constexpr std::size_t size() const noexcept { return end > begin ? end - begin : 0; }
  constexpr bool empty() const noexcept { return end <= begin; }
  constexpr bool contains(std::size_t i) const noexcept { return i >= begin && i < end; }
  constexpr bool overlaps(const Interval& o) const noexcept {
    return !empty() && !o.empty() && begin < o.end && o.begin < end;
  }
  friend constexpr bool operator==(const Interval&, const Interval&) = default;
};

// Strided row-major window onto float storage owned elsewhere.
template <typename T>
struct MatrixView {
  T* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t stride = 0;

  std::span<T> row(std::size_t i) const { return {data + i * stride, cols}; }
  T& operator()(std::size_t i, std::size_t j) const { return data[i * stride + j]; }

  MatrixView<T> columns(Interval c) const {
    return {data + c.begin, rows, c.size(), stride};
  }
  MatrixView<T> rows_window(Interval r) const {
    return {data + r.begin * stride, r.size(), cols, stride};
  }
  operator MatrixView<const T>() const { return {data, rows, cols, stride}; }
};

using ConstMatrix = MatrixView<const float>;
using MutMatrix = MatrixView<float>;

// Dense row-major f32 array. Rank-1 tensors act as a single row when viewed as a matrix.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, float fill = 0.0f)
      : shape_(std::move(shape)) {
    check_shape();
    data_.assign(count(shape_), fill);
  }

  Tensor(std::vector<std::size_t> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    detail::require(count(shape_) == data_.size(), "tensor: data length does not match shape");
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, float fill = 0.0f) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor from_rows(const std::vector<std::vector<float>>& rows) {
    detail::require(!rows.empty() && !rows.front().empty(), "tensor: empty row list");
    Tensor t = matrix(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      detail::require(rows[i].size() == t.cols(), "tensor: ragged rows");
      std::copy(rows[i].begin(), rows[i].end(), t.row(i).begin());
    }
    return t;
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const noexcept {
    if (shape_.empty()) return 0;
    return shape_.size() == 1 ? 1 : numel() / shape_.back();
  }
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  std::span<float> row(std::size_t i) { return {data_.data() + i * cols(), cols()}; }
  std::span<const float> row(std::size_t i) const { return {data_.data() + i * cols(), cols()}; }

  float& at(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  float at(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

  MutMatrix view() noexcept { return {data_.data(), rows(), cols(), cols()}; }
  ConstMatrix view() const noexcept { return {data_.data(), rows(), cols(), cols()}; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static std::size_t count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
  }
  void check_shape() const {
    detail::require(!shape_.empty(), "tensor: rank must be >= 1");
    for (auto e : shape_) detail::require(e >= 1, "tensor: extents must be >= 1");
  }

  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

inline std::string shape_string(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct ModelConfig {
  std::size_t vocab_size = 257;
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_head = 32;
  std::size_t d_ff = 512;
  std::size_t n_draft_heads = 4;
  std::size_t max_context = 4160;
  float rope_base = 10000.0f;
  float norm_eps = 1e-5f;

  // Desk-scale default: 4160 = largest profiling bucket (4096) + widest block (64).
  static ModelConfig tiny() { return {}; }

  void validate() const {
    auto bad = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (vocab_size < 2) bad("vocab_size must be >= 2");
    if (n_heads == 0 || d_head == 0) bad("n_heads and d_head must be >= 1");
    if (d_model != n_heads * d_head) bad("d_model must equal n_heads * d_head");
    if (d_head % 2 != 0) bad("d_head must be even for rotary embeddings");
    if (n_layers == 0 || d_ff == 0) bad("n_layers and d_ff must be >= 1");
    if (n_draft_heads < 1) bad("n_draft_heads must be >= 1");
    if (max_context < 1) bad("max_context must be >= 1");
    if (!(rope_base > 0.0f)) bad("rope_base must be positive");
    if (!(norm_eps > 0.0f)) bad("norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

// Dot product with a fixed 8-lane reduction tree. Every attention score in the
// project goes through here, so identical operands always give identical bits.
inline float dot(std::span<const float> a, std::span<const float> b) {
  using vf8 = float __attribute__((vector_size(32)));
  using vi8 = std::int32_t __attribute__((vector_size(32)));
  const std::size_t n = a.size();
  vf8 lane{};
  std::size_t c = 0;
  for (; c + 8 <= n; c += 8) {
    vf8 x, y;
    std::memcpy(&x, a.data() + c, sizeof x);
    std::memcpy(&y, b.data() + c, sizeof y);
    lane += x * y;
  }
  for (std::size_t l = 0; c < n; ++c, ++l) lane[l] += a[c] * b[c];
  const vf8 pairs = lane + __builtin_shuffle(lane, vi8{1, 0, 3, 2, 5, 4, 7, 6});
  const vf8 quads = pairs + __builtin_shuffle(pairs, vi8{2, 3, 0, 1, 6, 7, 4, 5});
  return quads[0] + quads[4];
}

inline constexpr std::size_t kPanel = 16;

// Weight matrix stored as contiguous 16-column panels: element (p, j) lives at
// panel j / 16, offset p * 16 + j % 16. The last panel is zero padded.
class PackedMatrix {
 public:
  PackedMatrix() = default;

  explicit PackedMatrix(ConstMatrix b) : rows_(b.rows), cols_(b.cols) {
    data_.assign(panels() * rows_ * kPanel, 0.0f);
    for (std::size_t p = 0; p < rows_; ++p)
      for (std::size_t j = 0; j < cols_; ++j) data_[(j / kPanel) * rows_ * kPanel + p * kPanel + j % kPanel] = b(p, j);
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t panels() const noexcept { return (cols_ + kPanel - 1) / kPanel; }
  const float* panel(std::size_t t) const noexcept { return data_.data() + t * rows_ * kPanel; }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<float> data_;
};

namespace detail {

using vf8 = float __attribute__((vector_size(32)));

// Lane-wise exp: Cephes range reduction and polynomial, inputs below -87 give 0.
// Every lane is computed independently, so a value's result never depends on
// its neighbours or on where it sits in a batch.
inline vf8 vexp(vf8 x) {
  using vi8 = std::int32_t __attribute__((vector_size(32)));
  const vf8 lo = x < -87.0f ? vf8{} - 87.0f : x;
  const vf8 xc = lo > 88.0f ? vf8{} + 88.0f : lo;
  const vf8 shifter = vf8{} + 12582912.0f;
  const vf8 n = (xc * 1.44269504088896341f + shifter) - shifter;
  vf8 r = xc - n * 0.693359375f;
  r = r + n * 2.12194440e-4f;
  vf8 y = vf8{} + 1.9875691500e-4f;
  y = y * r + 1.3981999507e-3f;
  y = y * r + 8.3334519073e-3f;
  y = y * r + 4.1665795894e-2f;
  y = y * r + 1.6666665459e-1f;
  y = y * r + 5.0000001201e-1f;
  y = y * (r * r) + r + 1.0f;
  const vi8 bits = (__builtin_convertvector(n, vi8) + 127) << 23;
  vf8 scale;
  std::memcpy(&scale, &bits, sizeof scale);
  const vf8 e = y * scale;
  return x < -87.0f ? vf8{} : e;
}

// acc + a * b, rounded once when the target has fused multiply-add.
inline vf8 madd(vf8 acc, vf8 a, vf8 b) {
#ifdef __FMA__
  return reinterpret_cast<vf8>(_mm256_fmadd_ps(reinterpret_cast<__m256>(a), reinterpret_cast<__m256>(b),
                                               reinterpret_cast<__m256>(acc)));
#else
  return acc + a * b;
#endif
}

}  // namespace detail

// Whether gemm accumulates with a fused multiply-add (one rounding per term).
inline constexpr bool kFusedGemm =
#ifdef __FMA__
    true;
#else
    false;
#endif

namespace detail {

// RN rows x one 16-column panel, written row-major to acc_out. Each element
// accumulates a[i][p] * b[p][j] in ascending p through madd, so tiling,
// packing and vector width never change the result.
template <std::size_t RN>
[[gnu::noinline]] void panel_tile(const float* a, std::size_t a_stride, std::size_t k, const float* b,
                                  std::size_t b_stride, float* acc_out) {
  vf8 acc[RN][2] = {};
  for (std::size_t p = 0; p < k; ++p) {
    vf8 b0, b1;
    std::memcpy(&b0, b + p * b_stride, sizeof(vf8));
    std::memcpy(&b1, b + p * b_stride + 8, sizeof(vf8));
#pragma GCC unroll 4
    for (std::size_t r = 0; r < RN; ++r) {
      const float s = a[r * a_stride + p];
      const vf8 av = {s, s, s, s, s, s, s, s};
      acc[r][0] = madd(acc[r][0], av, b0);
      acc[r][1] = madd(acc[r][1], av, b1);
    }
  }
#pragma GCC unroll 4
  for (std::size_t r = 0; r < RN; ++r) {
    std::memcpy(acc_out + r * kPanel, &acc[r][0], sizeof(vf8));
    std::memcpy(acc_out + r * kPanel + 8, &acc[r][1], sizeof(vf8));
  }
}

// Runs all rows of `a` against one panel and writes panel columns [lo, hi) to out.
inline void panel_rows(ConstMatrix a, const float* b, std::size_t b_stride, std::size_t lo, std::size_t hi,
                       MutMatrix out, std::size_t oj0) {
  float tile[4][kPanel];
  std::size_t i0 = 0;
  auto emit = [&](std::size_t rn) {
    for (std::size_t r = 0; r < rn; ++r) std::copy(tile[r] + lo, tile[r] + hi, out.data + (i0 + r) * out.stride + oj0);
  };
  for (; i0 + 4 <= a.rows; i0 += 4) {
    panel_tile<4>(a.data + i0 * a.stride, a.stride, a.cols, b, b_stride, &tile[0][0]);
    emit(4);
  }
  const std::size_t rest = a.rows - i0;
  if (rest == 3) panel_tile<3>(a.data + i0 * a.stride, a.stride, a.cols, b, b_stride, &tile[0][0]);
  if (rest == 2) panel_tile<2>(a.data + i0 * a.stride, a.stride, a.cols, b, b_stride, &tile[0][0]);
  if (rest == 1) panel_tile<1>(a.data + i0 * a.stride, a.stride, a.cols, b, b_stride, &tile[0][0]);
  if (rest) emit(rest);
}

inline void check_gemm(ConstMatrix a, std::size_t b_rows, std::size_t b_cols, Interval cols, MutMatrix out) {
  require(a.cols == b_rows, "gemm: inner extents differ");
  require(!cols.empty() && cols.end <= b_cols, "gemm: column range empty or out of bounds");
  require(out.rows == a.rows && out.cols == cols.size(), "gemm: output shape mismatch");
}

}  // namespace detail

// out[i][j] = sum_p a[i][p] * b[p][cols.begin + j]. `out` must be m x |cols|.
inline void gemm_into(ConstMatrix a, ConstMatrix b, Interval cols, MutMatrix out) {
  detail::check_gemm(a, b.rows, b.cols, cols, out);
  std::vector<float> slab;
  for (std::size_t j0 = cols.begin; j0 < cols.end; j0 += kPanel) {
    const std::size_t jn = std::min(kPanel, cols.end - j0);
    if (jn == kPanel) {
      detail::panel_rows(a, b.data + j0, b.stride, 0, kPanel, out, j0 - cols.begin);
      continue;
    }
    slab.assign(b.rows * kPanel, 0.0f);
    for (std::size_t p = 0; p < b.rows; ++p) std::copy_n(b.data + p * b.stride + j0, jn, slab.data() + p * kPanel);
    detail::panel_rows(a, slab.data(), kPanel, 0, jn, out, j0 - cols.begin);
  }
}

inline void gemm_into(ConstMatrix a, const PackedMatrix& b, Interval cols, MutMatrix out) {
  detail::check_gemm(a, b.rows(), b.cols(), cols, out);
  for (std::size_t t = cols.begin / kPanel; t * kPanel < cols.end; ++t) {
    const std::size_t lo = std::max(cols.begin, t * kPanel), hi = std::min(cols.end, (t + 1) * kPanel);
    detail::panel_rows(a, b.panel(t), kPanel, lo - t * kPanel, hi - t * kPanel, out, lo - cols.begin);
  }
}

// A weight operand: row-major view plus an optional packed copy of the same values.
struct WeightRef {
  ConstMatrix rows;
  const PackedMatrix* packed = nullptr;
};

inline void gemm_into(ConstMatrix a, const WeightRef& b, Interval cols, MutMatrix out) {
  if (b.packed) {
    gemm_into(a, *b.packed, cols, out);
  } else {
    gemm_into(a, b.rows, cols, out);
  }
}

inline Tensor gemm(const Tensor& a, const Tensor& b, Interval cols) {
  detail::require(a.rank() == 2 && b.rank() == 2, "gemm: operands must be matrices");
  detail::require(!cols.empty(), "gemm: column range is empty");
  Tensor out = Tensor::matrix(a.rows(), cols.size());
  gemm_into(a.view(), b.view(), cols, out.view());
  return out;
}

inline Tensor gemm(const Tensor& a, const Tensor& b) { return gemm(a, b, {0, b.cols()}); }

inline void softmax_row(std::span<float> row) {
  float m = -INFINITY;
  for (float v : row) {
    detail::require(std::isfinite(v), "softmax: non-finite input");
    m = std::max(m, v);
  }
  float sum = 0.0f;
  for (float& v : row) {
    v = std::exp(v - m);
    sum += v;
  }
  for (float& v : row) v /= sum;
}

inline Tensor softmax_rows(const Tensor& x) {
  detail::require(x.cols() >= 1, "softmax: need at least one column");
  Tensor out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_row(out.row(i));
  return out;
}

inline void rmsnorm_row(std::span<const float> x, std::span<const float> g, float eps,
                        std::span<float> out) {
  float ss = 0.0f;
  for (float v : x) ss += v * v;
  const float inv = 1.0f / std::sqrt(ss / static_cast<float>(x.size()) + eps);
  for (std::size_t c = 0; c < x.size(); ++c) out[c] = x[c] * inv * g[c];
}

inline Tensor rmsnorm(const Tensor& x, const Tensor& g, float eps = 1e-5f) {
  detail::require(g.numel() == x.cols(), "rmsnorm: gain length differs from row length");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) rmsnorm_row(x.row(i), g.data(), eps, out.row(i));
  return out;
}

// cos/sin for each lane pair at `position`, interleaved as (c0, s0, c1, s1, ...).
// Every head and layer at that position reuses the same table.
inline void rope_table(std::size_t position, float base, std::span<float> cs) {
  const std::size_t d = cs.size();
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double inv_freq = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const double angle = static_cast<double>(position) * inv_freq;
    cs[2 * i] = static_cast<float>(std::cos(angle));
    cs[2 * i + 1] = static_cast<float>(std::sin(angle));
  }
}

inline void rope_apply(std::span<float> x, std::span<const float> cs) {
  for (std::size_t i = 0; i + 1 < x.size(); i += 2) {
    const float c = cs[i], s = cs[i + 1];
    const float x0 = x[i];
    const float x1 = x[i + 1];
    x[i] = x0 * c - x1 * s;
    x[i + 1] = x0 * s + x1 * c;
  }
}

// Rotates interleaved lane pairs (2i, 2i+1) by position * base^(-2i/d).
inline void rope_row(std::span<float> x, std::size_t position, float base) {
  std::vector<float> cs(x.size());
  rope_table(position, base, cs);
  rope_apply(x, cs);
}

// One rotation table row per block position.
inline Tensor rope_tables(std::span<const std::size_t> positions, std::size_t d_head, float base) {
  Tensor t = Tensor::matrix(positions.size(), d_head);
  for (std::size_t i = 0; i < positions.size(); ++i) rope_table(positions[i], base, t.row(i));
  return t;
}

inline Tensor rope(const Tensor& x, std::span<const std::size_t> positions, float base) {
  detail::require(x.cols() % 2 == 0, "rope: d_head must be even");
  detail::require(positions.size() == x.rows(), "rope: one position per row required");
  Tensor out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    if (positions[i] != 0) rope_row(out.row(i), positions[i], base);
  }
  return out;
}

inline std::size_t argmax(std::span<const float> x) {
  detail::require(!x.empty(), "argmax: empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (x[i] > x[best]) best = i;
  }
  return best;
}

inline std::size_t argmax_row(const Tensor& x) {
  detail::require(x.rows() == 1, "argmax_row: expected a single row");
  return argmax(x.row(0));
}

namespace detail {

inline vf8 silu8(vf8 x) { return x / (1.0f + vexp(vf8{} - x)); }

}  // namespace detail

inline float silu(float v) { return detail::silu8(detail::vf8{} + v)[0]; }

// a[i] = silu(g[i]) * a[i], lane-wise so results match silu() exactly.
inline void silu_gate(std::span<const float> g, std::span<float> a) {
  detail::require(g.size() == a.size(), "silu_gate: size mismatch");
  std::size_t i = 0;
  for (; i + 8 <= a.size(); i += 8) {
    detail::vf8 x, y;
    std::memcpy(&x, g.data() + i, sizeof x);
    std::memcpy(&y, a.data() + i, sizeof y);
    y = detail::silu8(x) * y;
    std::memcpy(a.data() + i, &y, sizeof y);
  }
  for (; i < a.size(); ++i) a[i] = silu(g[i]) * a[i];
}

}  // namespace hetspec
