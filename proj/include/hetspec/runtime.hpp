#pragma once

#include <time.h>

#include <algorithm>
#include <atomic>
#include <barrier>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <exception>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "hetspec/model.hpp"
#include "hetspec/sparse_attention.hpp"

namespace hetspec {

// One emulated processing unit: a pool of worker threads plus a slowdown factor.
struct VirtualUnit {
  std::size_t id = 0;
  std::size_t worker_count = 1;
  double throttle = 1.0;

  friend bool operator==(const VirtualUnit&, const VirtualUnit&) = default;
};

struct RuntimeCounters {
  std::size_t barrier_phases = 0;
  std::size_t activation_copies = 0;  // explicit inter-unit activation transfers
  std::size_t bytes_copied = 0;
};

namespace detail {

inline std::chrono::nanoseconds thread_cpu_now() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return std::chrono::seconds(ts.tv_sec) + std::chrono::nanoseconds(ts.tv_nsec);
}

// Sleeps for the bulk of `d` and spins the tail; sleep_for alone overshoots short waits.
inline void throttle_delay(std::chrono::nanoseconds d) {
  using namespace std::chrono;
  const auto deadline = steady_clock::now() + d;
  constexpr auto kSpinTail = microseconds(150);
  if (d > kSpinTail * 2) std::this_thread::sleep_for(d - kSpinTail);
  while (steady_clock::now() < deadline) {
  }
}

struct PhaseCounter {
  std::atomic<std::size_t>* phases;
  void operator()() noexcept { phases->fetch_add(1, std::memory_order_relaxed); }
};

}  // namespace detail

class HeteroRuntime;

// Per-thread handle passed to a job.
class WorkerContext {
 public:
  std::size_t unit() const noexcept { return unit_; }
  std::size_t worker() const noexcept { return worker_; }
  std::size_t workers() const noexcept { return workers_; }

  // Stage boundary: pays the unit's throttle for the work done since the last
  // boundary, then rendezvous with every worker of every unit.
  void sync() {
    pay_throttle();
    if (barrier_) barrier_->arrive_and_wait();
    mark_ = detail::thread_cpu_now();
  }

  // This worker's contiguous share of `whole`, cut at multiples of `granule`.
  Interval share(Interval whole, std::size_t granule = 1) const {
    const std::size_t g = std::max<std::size_t>(granule, 1);
    const std::size_t chunks = (whole.size() + g - 1) / g;
    const std::size_t lo = chunks * worker_ / workers_;
    const std::size_t hi = chunks * (worker_ + 1) / workers_;
    return {std::min(whole.begin + lo * g, whole.end), std::min(whole.begin + hi * g, whole.end)};
  }

 private:
  friend class HeteroRuntime;
  using Barrier = std::barrier<detail::PhaseCounter>;

  void pay_throttle() {
    if (throttle_ > 1.0) {
      const auto worked = detail::thread_cpu_now() - mark_;
      detail::throttle_delay(std::chrono::nanoseconds(
          static_cast<std::int64_t>(static_cast<double>(worked.count()) * (throttle_ - 1.0))));
    }
  }

  std::size_t unit_ = 0, worker_ = 0, workers_ = 1;
  double throttle_ = 1.0;
  Barrier* barrier_ = nullptr;
  std::chrono::nanoseconds mark_{};
};

// Persistent worker pools for a set of virtual units sharing one address space.
class HeteroRuntime {
 public:
  using Job = std::function<void(WorkerContext&)>;

  explicit HeteroRuntime(std::vector<VirtualUnit> units) : units_(std::move(units)) {
    if (units_.empty()) throw ConfigError("runtime: at least one unit required");
    for (std::size_t u = 0; u < units_.size(); ++u) {
      if (units_[u].worker_count < 1) throw ConfigError("runtime: unit worker_count must be >= 1");
      if (!(units_[u].throttle >= 1.0)) throw ConfigError("runtime: unit throttle must be >= 1");
      units_[u].id = u;
      for (std::size_t k = 0; k < units_[u].worker_count; ++k) slots_.push_back({u, k});
    }
    for (std::size_t t = 0; t < slots_.size(); ++t) threads_.emplace_back([this, t] { worker_loop(t); });
  }

  HeteroRuntime(const HeteroRuntime&) = delete;
  HeteroRuntime& operator=(const HeteroRuntime&) = delete;

  ~HeteroRuntime() {
    {
      std::lock_guard lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  const std::vector<VirtualUnit>& units() const noexcept { return units_; }
  std::size_t total_workers() const noexcept { return slots_.size(); }

  // Runs `job` on every worker and returns when all of them are done.
  // With `barriers` false, sync() only pays throttle (test hook for race checks).
  void run(const Job& job, bool barriers = true) {
    std::unique_lock lk(mu_);
    barrier_ = barriers ? std::make_unique<WorkerContext::Barrier>(
                              static_cast<std::ptrdiff_t>(slots_.size()), detail::PhaseCounter{&phases_})
                        : nullptr;
    job_ = &job;
    pending_ = slots_.size();
    error_ = nullptr;
    ++generation_;
    cv_.notify_all();
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    job_ = nullptr;
    barrier_.reset();
    if (error_) std::rethrow_exception(error_);
  }

  RuntimeCounters counters() const {
    RuntimeCounters c;
    c.barrier_phases = phases_.load();
    c.activation_copies = copies_.load();
    c.bytes_copied = bytes_.load();
    return c;
  }

  void reset_counters() {
    phases_ = 0;
    copies_ = 0;
    bytes_ = 0;
  }

  // Called by code paths that physically move activations between units.
  void record_copy(std::size_t bytes) {
    copies_.fetch_add(1);
    bytes_.fetch_add(bytes);
  }

 private:
  struct Slot {
    std::size_t unit, worker;
  };

  void worker_loop(std::size_t t) {
    std::uint64_t seen = 0;
    for (;;) {
      const Job* job = nullptr;
      WorkerContext::Barrier* barrier = nullptr;
      {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        job = job_;
        barrier = barrier_.get();
      }
      WorkerContext ctx;
      ctx.unit_ = slots_[t].unit;
      ctx.worker_ = slots_[t].worker;
      ctx.workers_ = units_[ctx.unit_].worker_count;
      ctx.throttle_ = units_[ctx.unit_].throttle;
      ctx.barrier_ = barrier;
      ctx.mark_ = detail::thread_cpu_now();
      try {
        (*job)(ctx);
        ctx.pay_throttle();
      } catch (...) {
        {
          std::lock_guard lk(mu_);
          if (!error_) error_ = std::current_exception();
        }
        if (barrier) barrier->arrive_and_drop();
      }
      {
        std::lock_guard lk(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::vector<VirtualUnit> units_;
  std::vector<Slot> slots_;
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  const Job* job_ = nullptr;
  std::unique_ptr<WorkerContext::Barrier> barrier_;
  std::uint64_t generation_ = 0;
  std::size_t pending_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
  std::atomic<std::size_t> phases_{0}, copies_{0}, bytes_{0};
};

// ---------------------------------------------------------------------------
// Partition plans
// ---------------------------------------------------------------------------

// A unit's share of one attention head: cache rows, interior pair slice, and
// optionally the boundary columns of the block.
struct UnitAttention {
  Interval prefix;
  Interval pairs;
  bool boundary = false;

  friend bool operator==(const UnitAttention&, const UnitAttention&) = default;
};

struct HeadPlan {
  std::vector<UnitAttention> units;  // indexed by unit id
  friend bool operator==(const HeadPlan&, const HeadPlan&) = default;
};

// Column intervals per unit (indexed by unit id) for every linear in a layer.
// Gate and up projections share the `mlp_in` split so SwiGLU stays unit-local.
struct LayerPlan {
  std::vector<Interval> q, k, v, o, mlp_in, down;
  std::vector<HeadPlan> heads;
  friend bool operator==(const LayerPlan&, const LayerPlan&) = default;
};

// Estimated multiply-accumulate counts for the step the plan was built for.
struct WorkEstimate {
  double linear = 0.0;
  double attention = 0.0;
  double unit0_linear = 0.0;
  double unit0_attention = 0.0;

  double attention_fraction() const {
    return linear + attention > 0.0 ? attention / (linear + attention) : 0.0;
  }
  friend bool operator==(const WorkEstimate&, const WorkEstimate&) = default;
};

struct PartitionPlan {
  std::vector<VirtualUnit> units;
  std::size_t context_bucket = 0;
  std::size_t width = 1;
  std::size_t pair_count = 1;  // interior pairs the head assignments were drawn for
  std::size_t boundary_cols = 0;
  std::size_t sparse_unit = 0;  // unit preferred for sparse work (low parallelism)
  std::size_t dense_unit = 0;  // unit preferred for cache-row work (high parallelism)
  double ratio = 0.0;
  std::vector<LayerPlan> layers;
  std::vector<Interval> lm_head;
  WorkEstimate estimate;

  friend bool operator==(const PartitionPlan&, const PartitionPlan&) = default;
};

namespace detail {

inline void check_split(const std::vector<Interval>& split, std::size_t n_units, std::size_t out_dim,
                        std::size_t granule, const std::string& what) {
  if (split.size() != n_units) throw ConfigError("plan: " + what + " needs one interval per unit");
  std::vector<Interval> parts;
  for (const auto& iv : split) {
    if (iv.end < iv.begin || iv.end > out_dim) throw ConfigError("plan: " + what + " interval out of range");
    if (!iv.empty()) parts.push_back(iv);
    if (granule > 1 && !iv.empty() && (iv.begin % granule || iv.end % granule)) {
      throw ConfigError("plan: " + what + " must split on head boundaries");
    }
  }
  std::sort(parts.begin(), parts.end(), [](auto& a, auto& b) { return a.begin < b.begin; });
  std::size_t at = 0;
  for (const auto& iv : parts) {
    if (iv.begin != at) throw ConfigError("plan: " + what + " intervals must be disjoint and cover the output");
    at = iv.end;
  }
  if (at != out_dim) throw ConfigError("plan: " + what + " intervals do not cover the output dimension");
}

inline std::vector<Interval> ratio_split(std::size_t n, double ratio, std::size_t granule) {
  std::size_t c0 = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
  if (granule > 1) c0 = static_cast<std::size_t>(std::llround(static_cast<double>(c0) / static_cast<double>(granule))) * granule;
  c0 = std::min(c0, n);
  return {{0, c0}, {c0, n}};
}

inline std::size_t round_clamp(double x, std::size_t hi) {
  if (!(x > 0.0)) return 0;
  return std::min(static_cast<std::size_t>(std::llround(x)), hi);
}

inline double linear_macs_per_row(const ModelConfig& c, const std::vector<Interval>& q,
                                  const std::vector<Interval>& k, const std::vector<Interval>& v,
                                  const std::vector<Interval>& o, const std::vector<Interval>& mlp_in,
                                  const std::vector<Interval>& down, std::size_t u) {
  const double d = static_cast<double>(c.d_model), f = static_cast<double>(c.d_ff);
  return d * static_cast<double>(q[u].size() + k[u].size() + v[u].size() + o[u].size()) +
         2.0 * d * static_cast<double>(mlp_in[u].size()) + f * static_cast<double>(down[u].size());
}

}  // namespace detail

inline void validate_plan(const PartitionPlan& plan, const ModelConfig& c) {
  const std::size_t U = plan.units.size();
  if (U == 0) throw ConfigError("plan: no units");
  if (plan.layers.size() != c.n_layers) throw ConfigError("plan: layer count differs from model");
  if (plan.boundary_cols > plan.width) throw ConfigError("plan: boundary columns exceed block width");
  for (std::size_t l = 0; l < plan.layers.size(); ++l) {
    const auto& L = plan.layers[l];
    const std::string p = "layer " + std::to_string(l) + " ";
    detail::check_split(L.q, U, c.d_model, c.d_head, p + "wq");
    detail::check_split(L.k, U, c.d_model, c.d_head, p + "wk");
    detail::check_split(L.v, U, c.d_model, c.d_head, p + "wv");
    detail::check_split(L.o, U, c.d_model, 1, p + "wo");
    detail::check_split(L.mlp_in, U, c.d_ff, 1, p + "w_gate/w_up");
    detail::check_split(L.down, U, c.d_model, 1, p + "w_down");
    if (L.heads.size() != c.n_heads) throw ConfigError("plan: " + p + "head count differs from model");
    for (std::size_t h = 0; h < L.heads.size(); ++h) {
      const auto& H = L.heads[h];
      const std::string hp = p + "head " + std::to_string(h) + " ";
      if (H.units.size() != U) throw ConfigError("plan: " + hp + "needs one assignment per unit");
      std::vector<Interval> pre, pairs;
      std::size_t owners = 0;
      for (const auto& a : H.units) {
        pre.push_back(a.prefix);
        pairs.push_back(a.pairs);
        owners += a.boundary ? 1 : 0;
      }
      detail::check_split(pre, U, plan.context_bucket, 1, hp + "prefix");
      detail::check_split(pairs, U, plan.pair_count, 1, hp + "pairs");
      if (plan.boundary_cols > 0 && owners != 1) throw ConfigError("plan: " + hp + "needs exactly one boundary owner");
      if (plan.boundary_cols == 0 && owners != 0) throw ConfigError("plan: " + hp + "has a boundary owner but no boundary");
    }
  }
  detail::check_split(plan.lm_head, U, c.vocab_size, 1, "lm_head");
}

struct PlanOptions {
  std::size_t sparse_unit = 1;
  std::size_t boundary_cols = 0;
};

// Two-unit plan giving unit 0 `ratio` of every linear's columns and of each head's
// estimated attention work. Sparse pairs go to `sparse_unit` first, cache rows to the other.
inline PartitionPlan plan_from_ratio(const ModelConfig& c, const std::vector<VirtualUnit>& units, double ratio,
                                     std::size_t context_bucket, const CooMask& mask, const PlanOptions& opt = {}) {
  detail::require(ratio >= 0.0 && ratio <= 1.0, "plan_from_ratio: ratio must lie in [0, 1]");
  if (units.size() != 2) throw ConfigError("plan_from_ratio: exactly two units are supported");
  if (opt.sparse_unit > 1) throw ConfigError("plan_from_ratio: sparse_unit must be 0 or 1");
  const std::size_t w = mask.rows();
  if (opt.boundary_cols > w) throw ConfigError("plan_from_ratio: boundary columns exceed block width");

  PartitionPlan plan;
  plan.units = units;
  for (std::size_t u = 0; u < 2; ++u) plan.units[u].id = u;
  plan.context_bucket = context_bucket;
  plan.width = w;
  plan.boundary_cols = opt.boundary_cols;
  plan.sparse_unit = opt.sparse_unit;
  plan.dense_unit = 1 - opt.sparse_unit;
  plan.ratio = ratio;

  const std::size_t S_bnd = opt.boundary_cols ? mask.filter_cols({0, opt.boundary_cols}).size() : 0;
  const std::size_t S = mask.size() - S_bnd;
  plan.pair_count = S;
  const std::size_t P = context_bucket;
  const std::size_t D = 1 - opt.sparse_unit;  // dense-preferred unit
  const double W = static_cast<double>(w * P + S + S_bnd);
  const double share_D = D == 0 ? ratio : 1.0 - ratio;
  double target = share_D * W;

  HeadPlan head;
  head.units.resize(2);
  const bool dense_owns_boundary = S_bnd > 0 && target >= 0.5 * static_cast<double>(S_bnd);
  if (S_bnd > 0) {
    head.units[dense_owns_boundary ? D : opt.sparse_unit].boundary = true;
    if (dense_owns_boundary) target -= static_cast<double>(S_bnd);
  }
  const std::size_t rows_D = w == 0 ? 0 : detail::round_clamp(target / static_cast<double>(w), P);
  const double left = target - static_cast<double>(rows_D * w);
  const std::size_t pairs_D = rows_D == P ? detail::round_clamp(left, S) : 0;
  head.units[D].prefix = {0, rows_D};
  head.units[opt.sparse_unit].prefix = {rows_D, P};
  head.units[D].pairs = {0, pairs_D};
  head.units[opt.sparse_unit].pairs = {pairs_D, S};

  const auto qkv = detail::ratio_split(c.d_model, ratio, c.d_head);
  LayerPlan layer{qkv, qkv, qkv,
                  detail::ratio_split(c.d_model, ratio, 1),
                  detail::ratio_split(c.d_ff, ratio, 1),
                  detail::ratio_split(c.d_model, ratio, 1),
                  std::vector<HeadPlan>(c.n_heads, head)};
  plan.layers.assign(c.n_layers, layer);
  plan.lm_head = detail::ratio_split(c.vocab_size, ratio, 1);

  // Work estimate for a w-row block at this bucket.
  const double rows = static_cast<double>(w);
  const double dh2 = 2.0 * static_cast<double>(c.d_head);
  const double L = static_cast<double>(c.n_layers), Hn = static_cast<double>(c.n_heads);
  auto unit_linear = [&](std::size_t u) {
    return rows * (L * detail::linear_macs_per_row(c, layer.q, layer.k, layer.v, layer.o, layer.mlp_in, layer.down, u) +
                   static_cast<double>(c.d_model) * static_cast<double>(plan.lm_head[u].size()));
  };
  auto unit_attention = [&](std::size_t u) {
    const auto& a = head.units[u];
    return L * Hn * dh2 *
           (rows * static_cast<double>(a.prefix.size()) + static_cast<double>(a.pairs.size()) +
            (a.boundary ? static_cast<double>(S_bnd) : 0.0));
  };
  plan.estimate.unit0_linear = unit_linear(0);
  plan.estimate.linear = unit_linear(0) + unit_linear(1);
  plan.estimate.unit0_attention = unit_attention(0);
  plan.estimate.attention = unit_attention(0) + unit_attention(1);
  return plan;
}

// Everything on unit `owner`; the remaining units idle at the barriers.
inline PartitionPlan single_unit_plan(const ModelConfig& c, const std::vector<VirtualUnit>& units, std::size_t owner,
                                      std::size_t context_bucket, const CooMask& mask) {
  if (owner >= units.size()) throw ConfigError("single_unit_plan: owner out of range");
  const std::size_t U = units.size();
  auto all = [&](std::size_t n) {
    std::vector<Interval> s(U, Interval{n, n});
    for (std::size_t u = 0; u < U; ++u) s[u] = u == owner ? Interval{0, n} : Interval{0, 0};
    return s;
  };
  PartitionPlan plan;
  plan.units = units;
  for (std::size_t u = 0; u < U; ++u) plan.units[u].id = u;
  plan.context_bucket = context_bucket;
  plan.width = mask.rows();
  plan.pair_count = mask.size();
  plan.sparse_unit = owner;
  plan.dense_unit = owner;
  plan.ratio = owner == 0 ? 1.0 : 0.0;
  HeadPlan head;
  head.units.resize(U);
  head.units[owner] = {{0, context_bucket}, {0, mask.size()}, false};
  for (std::size_t u = 0; u < U; ++u)
    if (u != owner) head.units[u] = {{0, 0}, {0, 0}, false};
  LayerPlan layer{all(c.d_model), all(c.d_model), all(c.d_model), all(c.d_model), all(c.d_ff), all(c.d_model),
                  std::vector<HeadPlan>(c.n_heads, head)};
  plan.layers.assign(c.n_layers, layer);
  plan.lm_head = all(c.vocab_size);
  return plan;
}

// ---------------------------------------------------------------------------
// Shared arena
// ---------------------------------------------------------------------------

// Named full-width activation regions visible to all units. Each (region, stage)
// records which unit writes which columns; overlapping claims are rejected.
class SharedArena {
 public:
  MutMatrix add_region(const std::string& name, std::size_t rows, std::size_t cols) {
    auto& r = regions_[name];
    r.data.assign(rows * cols, 0.0f);
    r.rows = rows;
    r.cols = cols;
    return region(name);
  }

  MutMatrix region(const std::string& name) {
    auto it = regions_.find(name);
    if (it == regions_.end()) throw ConfigError("arena: unknown region '" + name + "'");
    return {it->second.data.data(), it->second.rows, it->second.cols, it->second.cols};
  }

  void claim(const std::string& name, const std::string& stage, std::size_t unit, Interval cols) {
    auto it = regions_.find(name);
    if (it == regions_.end()) throw ConfigError("arena: unknown region '" + name + "'");
    if (cols.end > it->second.cols) throw ConfigError("arena: claim beyond region '" + name + "'");
    auto& claims = it->second.writers[stage];
    for (const auto& [u, iv] : claims) {
      if (u != unit && iv.overlaps(cols)) {
        throw ConfigError("arena: units " + std::to_string(u) + " and " + std::to_string(unit) +
                          " both write region '" + name + "' in stage " + stage);
      }
    }
    claims.push_back({unit, cols});
  }

  std::vector<std::pair<std::size_t, Interval>> writers(const std::string& name, const std::string& stage) const {
    auto it = regions_.find(name);
    if (it == regions_.end()) return {};
    auto s = it->second.writers.find(stage);
    return s == it->second.writers.end() ? std::vector<std::pair<std::size_t, Interval>>{} : s->second;
  }

  std::vector<float> take(const std::string& name) { return std::move(regions_.at(name).data); }

 private:
  struct Region {
    std::vector<float> data;
    std::size_t rows = 0, cols = 0;
    std::map<std::string, std::vector<std::pair<std::size_t, Interval>>> writers;
  };
  std::map<std::string, Region> regions_;
};

// ---------------------------------------------------------------------------
// Step execution
// ---------------------------------------------------------------------------

struct StepOptions {
  bool barriers = true;  // false only in race-demonstration tests
  std::size_t av_block_cols = 0;
};

namespace detail {

// Maps a split drawn over [0, from) onto [0, to) by scaling its breakpoints.
inline Interval rescale(Interval iv, std::size_t from, std::size_t to) {
  auto at = [&](std::size_t b) -> std::size_t {
    if (b >= from) return to;
    return static_cast<std::size_t>((static_cast<unsigned long long>(b) * to + from / 2) / from);
  };
  return {at(iv.begin), at(iv.end)};
}

struct ResolvedHead {
  std::vector<UnitAttention> units;
  std::optional<std::size_t> fused_owner;  // one unit owns every key: no merge needed
  std::size_t merge_owner = 0;
};

inline std::size_t owner_of(const std::vector<Interval>& split, std::size_t col) {
  for (std::size_t u = 0; u < split.size(); ++u)
    if (split[u].contains(col)) return u;
  return 0;
}

}  // namespace detail

// Runs one forward pass over `in` with every stage split across the runtime's
// units per `plan`. Linear outputs are written in place into shared regions by
// their owning unit; attention partials are merged with the online-softmax rule.
// Barriers per step: 6 per layer + 1 for the LM head.
inline BlockOutput execute_step(const ModelWeights& w, const KVCache& cache, const BlockInput& in,
                                const PartitionPlan& plan, HeteroRuntime& rt, const StepOptions& opt = {}) {
  const auto& c = w.config;
  detail::check_block(c, cache, in);
  validate_plan(plan, c);
  if (plan.units.size() != rt.units().size()) throw ConfigError("execute_step: plan and runtime unit counts differ");
  const std::size_t U = plan.units.size();
  const std::size_t n = in.tokens.size();
  const std::size_t P = cache.length();
  const float scale = 1.0f / std::sqrt(static_cast<float>(c.d_head));
  const CooMask& mask = *in.mask;
  const std::size_t bcols = std::min(plan.boundary_cols, n);
  const CooMask boundary_mask = bcols ? mask.filter_cols({0, bcols}) : CooMask(n, {});
  const CooMask interior_mask = bcols ? mask.filter_cols({bcols, n}) : mask;

  // Resolve head assignments for the actual prefix length and pair count.
  if (plan.dense_unit >= U || plan.sparse_unit >= U) throw ConfigError("execute_step: preferred unit out of range");
  std::vector<std::vector<detail::ResolvedHead>> heads(c.n_layers, std::vector<detail::ResolvedHead>(c.n_heads));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      auto& R = heads[l][h];
      const auto& H = plan.layers[l].heads[h];
      R.units = H.units;
      for (std::size_t u = 0; u < U; ++u) {
        R.units[u].prefix = plan.context_bucket ? detail::rescale(H.units[u].prefix, plan.context_bucket, P)
                                                : (u == plan.dense_unit ? Interval{0, P} : Interval{0, 0});
        R.units[u].pairs = plan.pair_count ? detail::rescale(H.units[u].pairs, plan.pair_count, interior_mask.size())
                                           : (u == plan.sparse_unit ? Interval{0, interior_mask.size()}
                                                                        : Interval{0, 0});
        if (bcols == 0) R.units[u].boundary = false;
      }
      std::size_t active = 0, last = 0;
      for (std::size_t u = 0; u < U; ++u) {
        const auto& a = R.units[u];
        if (!a.prefix.empty() || !a.pairs.empty() || (a.boundary && boundary_mask.size())) {
          ++active;
          last = u;
        }
      }
      if (active == 1) R.fused_owner = last;
      R.merge_owner = detail::owner_of(plan.layers[l].q, h * c.d_head);
    }
  }

  // Arena and write claims.
  SharedArena arena;
  MutMatrix x = arena.add_region("x", n, c.d_model);
  MutMatrix q = arena.add_region("q", n, c.d_model);
  MutMatrix k = arena.add_region("k", n, c.d_model);
  MutMatrix v = arena.add_region("v", n, c.d_model);
  MutMatrix attn = arena.add_region("attn", n, c.d_model);
  MutMatrix act = arena.add_region("act", n, c.d_ff);
  MutMatrix hidden = arena.add_region("hidden", n, c.d_model);
  MutMatrix logits = arena.add_region("logits", n, c.vocab_size);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = plan.layers[l];
    const std::string s = std::to_string(l);
    for (std::size_t u = 0; u < U; ++u) {
      arena.claim("q", s, u, L.q[u]);
      arena.claim("k", s, u, L.k[u]);
      arena.claim("v", s, u, L.v[u]);
      arena.claim("x", s + "/wo", u, L.o[u]);
      arena.claim("act", s, u, L.mlp_in[u]);
      arena.claim("x", s + "/down", u, L.down[u]);
    }
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const auto& R = heads[l][h];
      arena.claim("attn", s, R.fused_owner.value_or(R.merge_owner), {h * c.d_head, (h + 1) * c.d_head});
    }
  }
  for (std::size_t u = 0; u < U; ++u) {
    arena.claim("logits", "final", u, plan.lm_head[u]);
    arena.claim("hidden", "final", u, plan.layers.back().o[u]);
  }
  detail::embed(w, in.tokens, x);
  const Tensor rot = rope_tables(in.positions, c.d_head, c.rope_base);

  BlockOutput out{Tensor(), Tensor(), StagedKV(c, n)};
  // Partial slots: [head][unit][kind] with kind 0 = cache rows, 1 = boundary, 2 = interior pairs.
  std::vector<PartialAttention> partials(c.n_heads * U * 3);
  auto slot = [&](std::size_t h, std::size_t u, std::size_t kind) -> PartialAttention& {
    return partials[(h * U + u) * 3 + kind];
  };

  const HeteroRuntime::Job job = [&](WorkerContext& ctx) {
    const std::size_t u = ctx.unit();
    Tensor hloc = Tensor::matrix(n, c.d_model);
    Tensor scratch = Tensor::matrix(n, std::max(c.d_model, c.d_ff));
    auto norm_rows = [&](const Tensor& g) {
      for (std::size_t i = 0; i < n; ++i) rmsnorm_row(x.row(i), g.data(), c.norm_eps, hloc.row(i));
    };
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const auto& L = plan.layers[l];
      const auto& W = w.layers[l];

      // Q/K/V projections, head-granular per worker; RoPE and staging for owned heads.
      norm_rows(W.attn_norm);
      const auto project = [&](Linear which_w, const Interval& cols, MutMatrix dst, int which) {
        const Interval mine = ctx.share(cols, c.d_head);
        if (mine.empty()) return;
        gemm_into(hloc.view(), layer_weight(w, l, which_w), mine, dst.columns(mine));
        for (std::size_t h = mine.begin / c.d_head; h < mine.end / c.d_head; ++h) {
          auto hv = dst.columns({h * c.d_head, (h + 1) * c.d_head});
          for (std::size_t i = 0; i < n; ++i) {
            if (which != 2) rope_apply(hv.row(i), rot.row(i));
            if (which == 1) std::copy_n(hv.row(i).data(), c.d_head, out.staged.k(l, h).row(i).data());
            if (which == 2) std::copy_n(hv.row(i).data(), c.d_head, out.staged.v(l, h).row(i).data());
          }
        }
      };
      project(Linear::q, L.q[u], q, 0);
      project(Linear::k, L.k[u], k, 1);
      project(Linear::v, L.v[u], v, 2);
      ctx.sync();

      // Attention partials (or the whole head when one unit owns all of it).
      std::size_t task = 0;
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        const auto& R = heads[l][h];
        const Interval hc{h * c.d_head, (h + 1) * c.d_head};
        const auto qh = ConstMatrix(q.columns(hc));
        const auto sk = ConstMatrix(out.staged.k(l, h));
        const auto sv = ConstMatrix(out.staged.v(l, h));
        auto mine = [&]() { return (task++ % ctx.workers()) == ctx.worker(); };
        if (R.fused_owner) {
          if (*R.fused_owner == u && mine()) {
            attend_masked(qh, cache.keys(l, h), cache.values(l, h), P, sk, sv, mask, scale, attn.columns(hc),
                          opt.av_block_cols);
          }
          continue;
        }
        const auto& a = R.units[u];
        if (mine()) attend_dense_prefix(qh, cache.keys(l, h), cache.values(l, h), a.prefix, scale, slot(h, u, 0));
        if (mine()) {
          if (a.boundary)
            attend_sparse_block(qh, sk, sv, boundary_mask, {0, boundary_mask.size()}, scale, slot(h, u, 1),
                                opt.av_block_cols);
          else
            slot(h, u, 1).reset(n, c.d_head);
        }
        if (mine()) attend_sparse_block(qh, sk, sv, interior_mask, a.pairs, scale, slot(h, u, 2), opt.av_block_cols);
      }
      ctx.sync();

      // Online-softmax merge by the unit owning the head's query columns.
      task = 0;
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        const auto& R = heads[l][h];
        if (R.fused_owner || R.merge_owner != u) continue;
        if ((task++ % ctx.workers()) != ctx.worker()) continue;
        std::vector<const PartialAttention*> parts;
        for (std::size_t kind = 0; kind < 3; ++kind)
          for (std::size_t v2 = 0; v2 < U; ++v2) parts.push_back(&slot(h, v2, kind));
        merge_partials(parts, attn.columns({h * c.d_head, (h + 1) * c.d_head}));
      }
      ctx.sync();

      // Output projection + residual on owned columns.
      const auto residual = [&](Linear which_w, ConstMatrix src, const Interval& cols) {
        const Interval mine = ctx.share(cols, 16);
        if (mine.empty()) return;
        MutMatrix tmp{scratch.storage().data(), n, mine.size(), mine.size()};
        gemm_into(src, layer_weight(w, l, which_w), mine, tmp);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < mine.size(); ++j) x(i, mine.begin + j) += tmp(i, j);
      };
      residual(Linear::o, attn, L.o[u]);
      ctx.sync();

      // Gate/up with fused SwiGLU on owned d_ff columns.
      norm_rows(W.mlp_norm);
      {
        const Interval mine = ctx.share(L.mlp_in[u], 16);
        if (!mine.empty()) {
          MutMatrix g{scratch.storage().data(), n, mine.size(), mine.size()};
          gemm_into(hloc.view(), layer_weight(w, l, Linear::gate), mine, g);
          auto a = act.columns(mine);
          gemm_into(hloc.view(), layer_weight(w, l, Linear::up), mine, a);
          for (std::size_t i = 0; i < n; ++i) silu_gate(g.row(i), a.row(i));
        }
      }
      ctx.sync();

      residual(Linear::down, act, L.down[u]);
      ctx.sync();
    }
    for (std::size_t i = 0; i < n; ++i) rmsnorm_row(x.row(i), w.final_norm.data(), c.norm_eps, hloc.row(i));
    {
      const Interval mine = ctx.share(plan.layers.back().o[u], 16);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = mine.begin; j < mine.end; ++j) hidden(i, j) = hloc.at(i, j);
      const Interval lm = ctx.share(plan.lm_head[u], 16);
      if (!lm.empty()) gemm_into(hloc.view(), lm_head_weight(w), lm, logits.columns(lm));
    }
    ctx.sync();
  };
  rt.run(job, opt.barriers);

  out.logits = Tensor({n, c.vocab_size}, arena.take("logits"));
  out.hidden = Tensor({n, c.d_model}, arena.take("hidden"));
  return out;
}

// ---------------------------------------------------------------------------
// Latency measurement
// ---------------------------------------------------------------------------

struct LatencyStats {
  double median_ms = 0.0;
  double p10_ms = 0.0;
  double p90_ms = 0.0;
  std::vector<double> samples_ms;

  static LatencyStats from_samples(std::vector<double> samples) {
    detail::require(!samples.empty(), "latency: no samples");
    LatencyStats s;
    s.samples_ms = samples;
    std::sort(samples.begin(), samples.end());
    auto q = [&](double f) { return samples[static_cast<std::size_t>(std::lround(f * static_cast<double>(samples.size() - 1)))]; };
    s.median_ms = q(0.5);
    s.p10_ms = q(0.1);
    s.p90_ms = q(0.9);
    return s;
  }
};

// Times execute_step for a block shaped by `mask` over a cache holding
// `context_bucket` synthetic entries. `warmup` untimed runs precede `reps` timed ones.
inline LatencyStats measure_step_latency(const ModelWeights& w, HeteroRuntime& rt, const PartitionPlan& plan,
                                         const CooMask& mask, std::size_t context_bucket, std::size_t reps,
                                         std::size_t warmup = 1) {
  detail::require(reps >= 3, "measure_step_latency: reps must be >= 3");
  const std::size_t width = mask.rows();
  KVCache cache(w.config);
  std::mt19937 rng(1234);
  std::uniform_real_distribution<float> dist(-0.5f, 0.5f);
  cache.fill_synthetic(context_bucket, [&](std::size_t) { return dist(rng); });
  std::vector<TokenId> tokens(width);
  std::vector<std::size_t> pos(width);
  for (std::size_t i = 0; i < width; ++i) {
    tokens[i] = static_cast<TokenId>((i * 37 + 11) % w.config.vocab_size);
    pos[i] = context_bucket + i;
  }
  const BlockInput in{tokens, pos, &mask};
  for (std::size_t i = 0; i < warmup; ++i) execute_step(w, cache, in, plan, rt);
  std::vector<double> samples;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    execute_step(w, cache, in, plan, rt);
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return LatencyStats::from_samples(std::move(samples));
}

}  // namespace hetspec
