#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hetspec/model.hpp"
#include "hetspec/runtime.hpp"
#include "hetspec/speculative.hpp"
#include "hetspec/tree.hpp"

namespace hetspec {

// acc[h-1][r]: probability that draft head h's rank-r candidate is the greedy token.
class HeadAccuracyTable {
 public:
  HeadAccuracyTable() = default;

  explicit HeadAccuracyTable(std::vector<std::vector<double>> acc) : acc_(std::move(acc)) {
    if (acc_.empty()) throw InvalidTableError("accuracy table: needs at least one head");
    for (const auto& row : acc_) {
      if (row.empty() || row.size() != acc_.front().size()) {
        throw InvalidTableError("accuracy table: every head needs the same, nonzero number of ranks");
      }
    }
    validate_accuracy_rows(acc_);
  }

  std::size_t heads() const noexcept { return acc_.size(); }
  std::size_t ranks() const noexcept { return acc_.empty() ? 0 : acc_.front().size(); }
  double at(std::size_t head, std::size_t rank) const { return acc_.at(head - 1).at(rank); }
  const std::vector<std::vector<double>>& rows() const noexcept { return acc_; }

  // (head, rank) entries that exceed the rank before them.
  std::vector<std::pair<std::size_t, std::size_t>> monotonicity_violations() const {
    std::vector<std::pair<std::size_t, std::size_t>> v;
    for (std::size_t h = 0; h < acc_.size(); ++h)
      for (std::size_t r = 1; r < acc_[h].size(); ++r)
        if (acc_[h][r] > acc_[h][r - 1]) v.emplace_back(h + 1, r);
    return v;
  }

  friend bool operator==(const HeadAccuracyTable&, const HeadAccuracyTable&) = default;

 private:
  std::vector<std::vector<double>> acc_;
};

// ---------------------------------------------------------------------------
// Acceptance estimation and tree construction
// ---------------------------------------------------------------------------

// Per-node probability that the whole root-to-node path is drafted correctly.
inline std::vector<double> path_products(const VerificationTree& tree, const HeadAccuracyTable& table) {
  std::vector<double> p(tree.width(), 1.0);
  for (std::size_t i = 1; i < tree.width(); ++i) {
    const auto& n = tree.node(i);
    if (n.head > table.heads() || n.rank >= table.ranks()) {
      throw ConfigError("tree node " + std::to_string(i) + " (head " + std::to_string(n.head) + ", rank " +
                        std::to_string(n.rank) + ") is outside the accuracy table");
    }
    p[i] = p[n.parent] * table.at(n.head, n.rank);
  }
  return p;
}

// Expected tokens per step under head independence: 1 + sum of path products.
inline double expected_acceptance(const VerificationTree& tree, const HeadAccuracyTable& table) {
  const auto p = path_products(tree, table);
  double e = 1.0;
  for (std::size_t i = 1; i < p.size(); ++i) e += p[i];
  return e;
}

// Largest tree width expressible with the table's heads and ranks (saturating).
inline std::size_t max_tree_width(const HeadAccuracyTable& table) {
  constexpr std::size_t kCap = std::size_t{1} << 40;
  std::size_t total = 1, level = 1;
  for (std::size_t d = 0; d < table.heads(); ++d) {
    level = std::min(level * table.ranks(), kCap);
    total = std::min(total + level, kCap);
  }
  return total;
}

// Grows the tree from the root by repeatedly adding the frontier candidate with
// the largest path product. Ties go to the shallower node, then lower rank, then
// lower parent index.
inline VerificationTree greedy_tree(const HeadAccuracyTable& table, std::size_t width) {
  if (width < 1) throw ConfigError("greedy_tree: width must be >= 1");
  if (width > max_tree_width(table)) {
    throw ConfigError("greedy_tree: width " + std::to_string(width) + " exceeds the " +
                      std::to_string(max_tree_width(table)) + " candidates the table can express");
  }
  VerificationTree tree;
  std::vector<double> prod{1.0};
  while (tree.width() < width) {
    struct Pick {
      double value = -1.0;
      std::size_t depth = 0, rank = 0, parent = 0;
    } best;
    bool found = false;
    for (std::size_t p = 0; p < tree.width(); ++p) {
      const std::size_t head = tree.depth(p) + 1;
      if (head > table.heads()) continue;
      for (std::size_t r = 0; r < table.ranks(); ++r) {
        if (tree.has_child(p, r)) continue;
        const Pick c{prod[p] * table.at(head, r), head, r, p};
        const bool better = !found || c.value > best.value ||
                            (c.value == best.value &&
                             std::tie(c.depth, c.rank, c.parent) < std::tie(best.depth, best.rank, best.parent));
        if (better) {
          best = c;
          found = true;
        }
      }
    }
    tree.add(best.parent, best.rank);
    prod.push_back(best.value);
  }
  return tree;
}

// ---------------------------------------------------------------------------
// Tree refinement
// ---------------------------------------------------------------------------

using TreeEvaluator = std::function<double(const VerificationTree&)>;

inline TreeEvaluator estimator_evaluator(const HeadAccuracyTable& table) {
  return [table](const VerificationTree& t) { return expected_acceptance(t, table); };
}

// Mean tokens per step over `trials` oracle-drafter steps; no model involved. The
// greedy token after node i is the planted truth for depth(i)+1.
inline double simulate_acceptance(const VerificationTree& tree, const HeadAccuracyTable& table, std::size_t trials,
                                  std::uint64_t seed) {
  detail::require(trials >= 1, "simulate_acceptance: trials must be >= 1");
  path_products(tree, table);  // range check
  const std::size_t H = table.heads();
  const std::size_t k = table.ranks();
  const std::size_t vocab = std::max<std::size_t>(1024, 4 * (H + k));
  std::vector<std::optional<TokenId>> truth(H);
  std::vector<TokenId> want(H + 2);
  for (std::size_t h = 0; h < H; ++h) {
    truth[h] = static_cast<TokenId>(h + 1);
    want[h + 1] = static_cast<TokenId>(h + 1);
  }
  want[H + 1] = static_cast<TokenId>(vocab - 1);
  std::mt19937_64 rng(seed);
  std::size_t gained = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const DraftCandidates c = oracle_draft(truth, table.rows(), k, vocab, rng);
    const AssembledBlock b = assemble_block(tree, 0, c, 0);
    gained += verify_with(tree, b.tokens, [&](std::size_t i) { return want[std::min(tree.depth(i) + 1, H + 1)]; }).gain();
  }
  return static_cast<double>(gained) / static_cast<double>(trials);
}

inline TreeEvaluator monte_carlo_evaluator(const HeadAccuracyTable& table, std::size_t trials, std::uint64_t seed) {
  return [table, trials, seed](const VerificationTree& t) { return simulate_acceptance(t, table, trials, seed); };
}

namespace detail {

inline VerificationTree with_rank(const VerificationTree& t, std::size_t node, std::size_t rank) {
  auto nodes = t.non_root_nodes();
  nodes[node - 1].rank = rank;
  return VerificationTree::from_nodes(nodes);
}

inline VerificationTree without_leaf(const VerificationTree& t, std::size_t leaf) {
  std::vector<TreeNode> nodes;
  for (std::size_t i = 1; i < t.width(); ++i) {
    if (i == leaf) continue;
    TreeNode n = t.node(i);
    if (n.parent > leaf) --n.parent;
    nodes.push_back(n);
  }
  return VerificationTree::from_nodes(nodes);
}

inline std::vector<std::size_t> subtree(const VerificationTree& t, std::size_t root) {
  std::vector<std::size_t> out{root};
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t ch : t.children(out[i])) out.push_back(ch);
  return out;
}

}  // namespace detail

struct RefineResult {
  VerificationTree tree;
  double score = 0.0;
  std::size_t evaluations = 0;
};

// Local search around `tree`. Moves: (1) swap a leaf for an unused sibling rank;
// (2) for two nodes at the same depth, drop the weakest leaf under one and grow
// the strongest frontier candidate under the other. A move is kept only when the
// evaluator strictly improves; at most `budget` evaluations are spent.
inline RefineResult refine_tree(const VerificationTree& tree, const HeadAccuracyTable& table,
                                const TreeEvaluator& evaluate, std::size_t budget) {
  RefineResult best{tree, 0.0, 0};
  if (budget == 0) return best;
  best.score = evaluate(tree);
  best.evaluations = 1;

  auto next_moves = [&](const VerificationTree& t) {
    std::vector<VerificationTree> moves;
    for (std::size_t i = 1; i < t.width(); ++i) {
      if (!t.is_leaf(i)) continue;
      for (std::size_t r = 0; r < table.ranks(); ++r)
        if (!t.has_child(t.node(i).parent, r)) moves.push_back(detail::with_rank(t, i, r));
    }
    const auto prod = path_products(t, table);
    for (std::size_t a = 1; a < t.width(); ++a) {
      for (std::size_t b = 1; b < t.width(); ++b) {
        if (a == b || t.depth(a) != t.depth(b)) continue;
        std::optional<std::size_t> drop;
        for (std::size_t n : detail::subtree(t, a))
          if (t.is_leaf(n) && (!drop || prod[n] < prod[*drop])) drop = n;
        std::optional<std::pair<std::size_t, std::size_t>> grow;
        double grow_val = -1.0;
        for (std::size_t n : detail::subtree(t, b)) {
          if (t.depth(n) + 1 > table.heads()) continue;
          for (std::size_t r = 0; r < table.ranks(); ++r) {
            if (t.has_child(n, r)) continue;
            const double val = prod[n] * table.at(t.depth(n) + 1, r);
            if (val > grow_val) {
              grow_val = val;
              grow = {{n, r}};
            }
          }
        }
        if (!drop || !grow) continue;
        VerificationTree m = t;
        m.add(grow->first, grow->second);
        moves.push_back(detail::without_leaf(m, *drop));
      }
    }
    return moves;
  };

  bool improved = true;
  while (improved && best.evaluations < budget) {
    improved = false;
    for (const auto& cand : next_moves(best.tree)) {
      if (best.evaluations >= budget) break;
      const double s = evaluate(cand);
      ++best.evaluations;
      if (s > best.score) {
        best.tree = cand;
        best.score = s;
        improved = true;
        break;
      }
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

struct CalibrationResult {
  HeadAccuracyTable table;
  std::size_t samples = 0;
  std::vector<std::pair<std::size_t, std::size_t>> violations;  // rank-monotonicity breaches, kept as measured
};

// Counts how often head h's rank-r candidate matches the token h steps ahead.
class AccuracyCounter {
 public:
  AccuracyCounter(std::size_t heads, std::size_t k) : k_(k), hits_(heads, std::vector<std::size_t>(k, 0)) {
    detail::require(heads >= 1 && k >= 1, "calibration: heads and k must be >= 1");
  }

  void observe(const DraftCandidates& cands, std::span<const TokenId> truth_ahead) {
    detail::require(cands.n_heads() >= hits_.size() && truth_ahead.size() >= hits_.size(),
                    "calibration: missing heads in observation");
    for (std::size_t h = 0; h < hits_.size(); ++h)
      for (std::size_t r = 0; r < k_ && r < cands.heads[h].size(); ++r)
        if (cands.heads[h][r].token == truth_ahead[h]) ++hits_[h][r];
    ++samples_;
  }

  CalibrationResult finish() const {
    if (samples_ == 0) throw InputError("calibration: no samples observed");
    std::vector<std::vector<double>> acc(hits_.size(), std::vector<double>(k_));
    for (std::size_t h = 0; h < hits_.size(); ++h)
      for (std::size_t r = 0; r < k_; ++r)
        acc[h][r] = static_cast<double>(hits_[h][r]) / static_cast<double>(samples_);
    CalibrationResult res{HeadAccuracyTable(std::move(acc)), samples_, {}};
    res.violations = res.table.monotonicity_violations();
    return res;
  }

 private:
  std::size_t k_;
  std::vector<std::vector<std::size_t>> hits_;
  std::size_t samples_ = 0;
};

// Runs greedy decoding over each prompt and scores the model's draft heads
// against the tokens they were meant to predict.
inline CalibrationResult calibrate_heads(const ModelWeights& w, const std::vector<std::vector<TokenId>>& prompts,
                                         std::size_t steps_per_prompt, std::size_t k) {
  if (prompts.empty()) throw InputError("calibration: dataset is empty");
  const std::size_t H = w.config.n_draft_heads;
  AccuracyCounter counter(H, k);
  for (const auto& prompt : prompts) {
    if (prompt.empty()) throw InputError("calibration: empty prompt");
    const std::size_t budget = w.config.max_context - std::min(w.config.max_context, prompt.size());
    const std::size_t steps = std::min(steps_per_prompt, budget > H ? budget - H : 0);
    if (steps == 0) continue;
    auto pre = prefill(w, prompt);
    std::vector<TokenId> seq{static_cast<TokenId>(argmax_row(pre.logits))};
    std::vector<DraftCandidates> drafts{draft(w, pre.hidden, k)};
    while (seq.size() < steps + H) {
      auto st = decode_step(w, pre.cache, seq.back());
      seq.push_back(st.next_token);
      if (drafts.size() < steps) drafts.push_back(draft(w, st.hidden, k));
    }
    for (std::size_t t = 0; t < steps; ++t) counter.observe(drafts[t], std::span(seq).subspan(t + 1, H));
  }
  return counter.finish();
}

// ---------------------------------------------------------------------------
// Ratio and width search
// ---------------------------------------------------------------------------

struct RatioSample {
  double ratio = 0.0;
  LatencyStats stats;
};

struct TuneResult {
  double ratio = 0.0;
  LatencyStats stats;
  std::vector<RatioSample> trace;  // accepted points, latencies non-increasing
};

inline double snap_ratio(double r, double step) {
  return std::clamp(std::round(r / step) * step, 0.0, 1.0);
}

// Starting split proportional to each unit's solo speed.
inline double initial_ratio(const LatencyStats& unit0_alone, const LatencyStats& unit1_alone, double step) {
  const double t0 = unit0_alone.median_ms, t1 = unit1_alone.median_ms;
  if (!(t0 + t1 > 0.0)) return 0.5;
  return snap_ratio(t1 / (t0 + t1), step);
}

// Candidate beats the incumbent only when its median falls below the incumbent's p10.
inline bool clearly_faster(const LatencyStats& cand, const LatencyStats& cur) { return cand.median_ms < cur.p10_ms; }

using RatioProbe = std::function<LatencyStats(double ratio)>;

// Hill climb over the partition ratio in `step` increments.
inline TuneResult tune_ratio(const RatioProbe& probe, double init_ratio, double step = 1.0 / 32,
                             std::size_t max_iters = 16) {
  detail::require(step > 0.0 && step <= 0.5, "tune_ratio: step must lie in (0, 0.5]");
  TuneResult res;
  res.ratio = snap_ratio(init_ratio, step);
  res.stats = probe(res.ratio);
  res.trace.push_back({res.ratio, res.stats});
  for (std::size_t it = 0; it < max_iters; ++it) {
    std::optional<RatioSample> best;
    for (double dir : {-1.0, 1.0}) {
      const double r = snap_ratio(res.ratio + dir * step, step);
      if (r == res.ratio) continue;
      RatioSample s{r, probe(r)};
      if (clearly_faster(s.stats, res.stats) && (!best || s.stats.median_ms < best->stats.median_ms)) best = s;
    }
    if (!best) break;
    res.ratio = best->ratio;
    res.stats = best->stats;
    res.trace.push_back(*best);
  }
  return res;
}

// Source of step latencies for a (tree, ratio, context bucket) triple.
class StepProfiler {
 public:
  virtual ~StepProfiler() = default;
  virtual LatencyStats measure(const VerificationTree& tree, double ratio, std::size_t bucket) = 0;
};

// Measures real execute_step latencies on a runtime with two units.
class RuntimeProfiler : public StepProfiler {
 public:
  RuntimeProfiler(const ModelWeights& w, HeteroRuntime& rt, std::size_t reps, PlanOptions opt = {})
      : w_(w), rt_(rt), reps_(reps), opt_(opt) {}

  LatencyStats measure(const VerificationTree& tree, double ratio, std::size_t bucket) override {
    const CooMask mask = build_mask(tree);
    const PartitionPlan plan = plan_from_ratio(w_.config, rt_.units(), ratio, bucket, mask, opt_);
    return measure_step_latency(w_, rt_, plan, mask, bucket, reps_);
  }

  const PlanOptions& options() const noexcept { return opt_; }

 private:
  const ModelWeights& w_;
  HeteroRuntime& rt_;
  std::size_t reps_;
  PlanOptions opt_;
};

inline TuneResult tune_ratio(StepProfiler& profiler, const VerificationTree& tree, std::size_t bucket,
                             std::optional<double> init_ratio = std::nullopt, double step = 1.0 / 32,
                             std::size_t max_iters = 16) {
  const double init = init_ratio ? *init_ratio
                                 : initial_ratio(profiler.measure(tree, 1.0, bucket), profiler.measure(tree, 0.0, bucket), step);
  return tune_ratio([&](double r) { return profiler.measure(tree, r, bucket); }, init, step, max_iters);
}

struct WidthCandidate {
  std::size_t width = 0;
  bool feasible = false;
  std::string note;
  double acceptance = 0.0;
  std::string acceptance_source;
  double ratio = 0.0;
  LatencyStats latency;
  std::vector<RatioSample> trace;
  double score = 0.0;  // acceptance per millisecond
};

struct Provenance {
  std::size_t context_bucket = 0;
  std::vector<WidthCandidate> candidates;
  std::map<std::size_t, std::vector<RatioSample>> bucket_traces;
};

struct Strategy {
  std::size_t width = 1;
  VerificationTree tree;
  std::map<std::size_t, PartitionPlan> plans;  // context bucket -> plan
  Provenance provenance;

  void validate() const {
    if (tree.width() != width) throw ConfigError("strategy: tree width differs from strategy width");
    if (plans.empty()) throw ConfigError("strategy: no partition plans");
  }
};

// Index of the highest acceptance/latency score; ties go to the earlier (narrower) entry.
inline std::size_t select_width(const std::vector<WidthCandidate>& cands) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (!cands[i].feasible) continue;
    if (!best || cands[i].score > cands[*best].score) best = i;
  }
  if (!best) throw ConfigError("select_width: no feasible width");
  return *best;
}

// Measured (calibration) acceptance for a width, when available.
using AcceptanceSource = std::function<std::optional<double>(std::size_t width, const VerificationTree& tree)>;

struct SweepOptions {
  double step = 1.0 / 32;
  std::size_t max_iters = 16;
  std::size_t refine_budget = 0;
  AcceptanceSource measured_acceptance;
  PlanOptions plan;
};

inline Strategy sweep_widths(StepProfiler& profiler, const ModelConfig& config, const std::vector<VirtualUnit>& units,
                             const HeadAccuracyTable& table, const std::vector<std::size_t>& widths,
                             std::size_t context_bucket, const SweepOptions& opt = {}) {
  Provenance prov;
  prov.context_bucket = context_bucket;
  std::vector<VerificationTree> trees;
  for (std::size_t width : widths) {
    WidthCandidate c;
    c.width = width;
    VerificationTree tree;
    try {
      tree = greedy_tree(table, width);
    } catch (const ConfigError& e) {
      c.note = e.what();
      prov.candidates.push_back(c);
      trees.emplace_back();
      continue;
    }
    if (opt.refine_budget > 0) tree = refine_tree(tree, table, estimator_evaluator(table), opt.refine_budget).tree;
    const TuneResult tr = tune_ratio(profiler, tree, context_bucket, std::nullopt, opt.step, opt.max_iters);
    std::optional<double> measured = opt.measured_acceptance ? opt.measured_acceptance(width, tree) : std::nullopt;
    c.feasible = true;
    c.acceptance = measured ? *measured : expected_acceptance(tree, table);
    c.acceptance_source = measured ? "calibration" : "estimator";
    c.ratio = tr.ratio;
    c.latency = tr.stats;
    c.trace = tr.trace;
    c.score = tr.stats.median_ms > 0.0 ? c.acceptance / tr.stats.median_ms : 0.0;
    prov.candidates.push_back(c);
    trees.push_back(tree);
  }
  const std::size_t pick = select_width(prov.candidates);
  Strategy s;
  s.width = prov.candidates[pick].width;
  s.tree = trees[pick];
  s.plans[context_bucket] =
      plan_from_ratio(config, units, prov.candidates[pick].ratio, context_bucket, build_mask(s.tree), opt.plan);
  prov.bucket_traces[context_bucket] = prov.candidates[pick].trace;
  s.provenance = std::move(prov);
  return s;
}

struct BucketPlans {
  std::map<std::size_t, PartitionPlan> plans;
  std::map<std::size_t, std::vector<RatioSample>> traces;
};

inline BucketPlans bucket_plans(StepProfiler& profiler, const ModelConfig& config,
                                const std::vector<VirtualUnit>& units, const VerificationTree& tree,
                                const std::vector<std::size_t>& buckets, const SweepOptions& opt = {}) {
  if (buckets.empty()) throw ConfigError("bucket_plans: no context buckets given");
  BucketPlans out;
  const CooMask mask = build_mask(tree);
  for (std::size_t b : buckets) {
    const TuneResult tr = tune_ratio(profiler, tree, b, std::nullopt, opt.step, opt.max_iters);
    out.plans[b] = plan_from_ratio(config, units, tr.ratio, b, mask, opt.plan);
    out.traces[b] = tr.trace;
  }
  return out;
}

// Width sweep at the first bucket, then per-bucket ratio tuning for the chosen tree.
inline Strategy profile_strategy(StepProfiler& profiler, const ModelConfig& config,
                                 const std::vector<VirtualUnit>& units, const HeadAccuracyTable& table,
                                 const std::vector<std::size_t>& widths, const std::vector<std::size_t>& buckets,
                                 const SweepOptions& opt = {}) {
  if (buckets.empty()) throw ConfigError("profile: no context buckets given");
  Strategy s = sweep_widths(profiler, config, units, table, widths, buckets.front(), opt);
  std::vector<std::size_t> rest(buckets.begin() + 1, buckets.end());
  if (!rest.empty()) {
    BucketPlans bp = bucket_plans(profiler, config, units, s.tree, rest, opt);
    for (auto& [b, p] : bp.plans) s.plans[b] = std::move(p);
    for (auto& [b, t] : bp.traces) s.provenance.bucket_traces[b] = std::move(t);
  }
  return s;
}

// Plan for the nearest bucket at or below `cache_len` (the smallest bucket when none is).
inline const PartitionPlan& select_plan(const std::map<std::size_t, PartitionPlan>& plans, std::size_t cache_len) {
  if (plans.empty()) throw ConfigError("select_plan: no plans");
  auto it = plans.upper_bound(cache_len);
  if (it == plans.begin()) return it->second;
  return std::prev(it)->second;
}

inline BlockForwardFn hcmp_forward(const ModelWeights& w, const PartitionPlan& plan, HeteroRuntime& rt) {
  return [&w, &plan, &rt](const KVCache& cache, const BlockInput& in) { return execute_step(w, cache, in, plan, rt); };
}

// Forward pass that picks the strategy's plan for the current cache length.
// Blocks shaped differently from the strategy tree (prefill, fallbacks) run on a single unit.
inline BlockForwardFn strategy_forward(const ModelWeights& w, const Strategy& s, HeteroRuntime& rt) {
  return [&w, &s, &rt](const KVCache& cache, const BlockInput& in) {
    if (in.tokens.size() != s.width) return forward_block(w, cache, in);
    return execute_step(w, cache, in, select_plan(s.plans, cache.length()), rt);
  };
}

}  // namespace hetspec
