#include <gtest/gtest.h>

#include <random>

#include "support/oracles.hpp"

using namespace hetspec;

namespace {

LatencyStats flat_stats(double ms) { return LatencyStats::from_samples({ms * 0.99, ms, ms * 1.01}); }

// Latency depends only on tree width; ratio is irrelevant.
class WidthProfiler : public StepProfiler {
 public:
  explicit WidthProfiler(std::function<double(std::size_t)> ms) : ms_(std::move(ms)) {}
  LatencyStats measure(const VerificationTree& tree, double, std::size_t) override {
    ++calls;
    return flat_stats(ms_(tree.width()));
  }
  std::size_t calls = 0;

 private:
  std::function<double(std::size_t)> ms_;
};

// Latency is a V around `best` ratio, scaled by bucket.
class BowlProfiler : public StepProfiler {
 public:
  explicit BowlProfiler(double best) : best_(best) {}
  LatencyStats measure(const VerificationTree&, double ratio, std::size_t bucket) override {
    return flat_stats((1.0 + 10.0 * std::abs(ratio - best_)) * (1.0 + bucket / 1024.0));
  }

 private:
  double best_;
};

const std::vector<double> kTableOne{1.0, 1.72, 2.28, 2.59, 2.93, 3.19, 3.34};
const std::vector<std::size_t> kTableOneWidths{1, 2, 4, 8, 16, 32, 64};

double table_one(std::size_t width) {
  for (std::size_t i = 0; i < kTableOneWidths.size(); ++i)
    if (kTableOneWidths[i] == width) return kTableOne[i];
  return 0.0;
}

}  // namespace

TEST(AccuracyTable, Validation) {
  using Rows = std::vector<std::vector<double>>;
  EXPECT_THROW(HeadAccuracyTable(Rows{}), InvalidTableError);
  EXPECT_THROW(HeadAccuracyTable({{0.5, 0.1}, {0.5}}), InvalidTableError);
  EXPECT_THROW(HeadAccuracyTable({{0.7, 0.6}}), InvalidTableError);
  EXPECT_THROW(HeadAccuracyTable(Rows{{-0.1}}), InvalidTableError);
  EXPECT_THROW(HeadAccuracyTable(Rows{std::vector<double>{}}), InvalidTableError);
  const HeadAccuracyTable t({{0.5, 0.3}, {0.2, 0.4}});
  EXPECT_EQ(t.heads(), 2u);
  EXPECT_EQ(t.ranks(), 2u);
  EXPECT_DOUBLE_EQ(t.at(2, 1), 0.4);
  ASSERT_EQ(t.monotonicity_violations().size(), 1u);
  EXPECT_EQ(t.monotonicity_violations()[0], (std::pair<std::size_t, std::size_t>{2, 1}));
}

TEST(ExpectedAcceptance, Examples) {
  const HeadAccuracyTable t({{0.6, 0.3}, {0.5, 0.2}});
  EXPECT_DOUBLE_EQ(expected_acceptance(VerificationTree::root_only(), t), 1.0);
  EXPECT_NEAR(expected_acceptance(VerificationTree::chain(2), t), 1.9, 1e-12);
  EXPECT_THROW(expected_acceptance(VerificationTree::chain(3), t), ConfigError);
  EXPECT_EQ(max_tree_width(t), 1u + 2u + 4u);
}

TEST(GreedyTree, Examples) {
  const HeadAccuracyTable t({{0.6, 0.3}, {0.5, 0.2}});
  const auto w2 = greedy_tree(t, 2);
  ASSERT_EQ(w2.width(), 2u);
  EXPECT_EQ(w2.node(1), (TreeNode{0, 1, 0}));
  // root, (h1,r0)=0.6, (h1,r1)=0.3, (h1r0,h2r0)=0.3: tie goes to the shallower node.
  const auto w4 = greedy_tree(t, 4);
  EXPECT_NEAR(expected_acceptance(w4, t), 2.2, 1e-12);
  EXPECT_EQ(w4.node(2), (TreeNode{0, 1, 1}));
  EXPECT_EQ(greedy_tree(t, 1).width(), 1u);
  EXPECT_THROW(greedy_tree(t, 0), ConfigError);
  EXPECT_THROW(greedy_tree(t, 8), ConfigError);
  EXPECT_NO_THROW(greedy_tree(t, 7));
}

TEST(GreedyTreeProperty, OptimalOnMonotoneTables) {
  std::mt19937_64 rng(91);
  for (int trial = 0; trial < 20; ++trial) {
    const auto acc = oracle::random_table(3, 3, rng);
    const HeadAccuracyTable t(acc);
    for (std::size_t width = 1; width <= 6; ++width) {
      const auto tree = greedy_tree(t, width);
      ASSERT_EQ(tree.width(), width);
      ASSERT_NEAR(expected_acceptance(tree, t), oracle::best_tree_value(acc, width), 1e-12)
          << "trial " << trial << " width " << width;
    }
  }
}

TEST(GreedyTreeProperty, AcceptanceNonDecreasingInWidth) {
  std::mt19937_64 rng(92);
  const HeadAccuracyTable t(oracle::random_table(4, 4, rng));
  double prev = 0.0;
  for (std::size_t width = 1; width <= 64; ++width) {
    const double e = expected_acceptance(greedy_tree(t, width), t);
    ASSERT_GE(e, prev);
    prev = e;
  }
}

TEST(EstimatorProperty, MatchesMonteCarlo) {
  std::mt19937_64 rng(93);
  for (int trial = 0; trial < 6; ++trial) {
    const auto acc = oracle::random_table(3, 3, rng);
    const HeadAccuracyTable t(acc);
    const auto tree = oracle::random_tree(6, 3, 3, rng);
    const double est = expected_acceptance(tree, t);
    EXPECT_NEAR(simulate_acceptance(tree, t, 40000, 7 + trial), est, 0.02);
    EXPECT_NEAR(oracle::planted_rank_acceptance(tree, acc, 40000, 100 + trial), est, 0.02);
  }
}

TEST(RefineTree, KeepsOptimumAndFixesBadLeaf) {
  const HeadAccuracyTable t({{0.6, 0.3, 0.0}, {0.5, 0.2, 0.0}});
  const auto best = greedy_tree(t, 4);
  const auto r = refine_tree(best, t, estimator_evaluator(t), 200);
  EXPECT_EQ(r.tree, best);
  EXPECT_NEAR(r.score, 2.2, 1e-12);

  // Rank 2 of head 1 is worthless; refinement should swap it out.
  const auto bad = VerificationTree::from_nodes({{0, 1, 0}, {0, 1, 2}, {1, 2, 0}});
  const auto fixed = refine_tree(bad, t, estimator_evaluator(t), 200);
  EXPECT_NEAR(fixed.score, 2.2, 1e-12);
  EXPECT_LE(fixed.evaluations, 200u);
  EXPECT_EQ(refine_tree(bad, t, estimator_evaluator(t), 0).tree, bad);
}

TEST(RefineTreeProperty, NeverWorseAndRespectsBudget) {
  std::mt19937_64 rng(94);
  for (int trial = 0; trial < 10; ++trial) {
    const HeadAccuracyTable t(oracle::random_table(3, 3, rng));
    const auto start = oracle::random_tree(2 + trial % 6, 3, 3, rng);
    const std::size_t budget = 5 + trial * 7;
    const auto r = refine_tree(start, t, estimator_evaluator(t), budget);
    EXPECT_GE(r.score, expected_acceptance(start, t));
    EXPECT_EQ(r.tree.width(), start.width());
    EXPECT_LE(r.evaluations, budget);
    EXPECT_NEAR(r.score, expected_acceptance(r.tree, t), 1e-12);
  }
}

TEST(Calibration, CounterRecoversPlantedAccuracies) {
  const std::vector<std::vector<double>> acc{{0.7, 0.1}, {0.4, 0.2}, {0.15, 0.05}};
  AccuracyCounter counter(3, 2);
  std::mt19937_64 rng(95);
  std::uniform_int_distribution<TokenId> tok(0, 999);
  for (int s = 0; s < 10000; ++s) {
    std::vector<std::optional<TokenId>> truth;
    std::vector<TokenId> ahead;
    for (int h = 0; h < 3; ++h) {
      ahead.push_back(tok(rng));
      truth.emplace_back(ahead.back());
    }
    counter.observe(oracle_draft(truth, acc, 2, 1000, rng), ahead);
  }
  const auto res = counter.finish();
  EXPECT_EQ(res.samples, 10000u);
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(res.table.at(h + 1, r), acc[h][r], 0.02) << h << "," << r;
  EXPECT_TRUE(res.violations.empty());
}

TEST(Calibration, ReportsRankInversions) {
  const std::vector<std::vector<double>> acc{{0.2, 0.6}};
  AccuracyCounter counter(1, 2);
  std::mt19937_64 rng(96);
  for (int s = 0; s < 2000; ++s) {
    const TokenId t = static_cast<TokenId>(s % 50);
    const std::vector<std::optional<TokenId>> truth{t};
    counter.observe(oracle_draft(truth, acc, 2, 1000, rng), std::vector<TokenId>{t});
  }
  const auto res = counter.finish();
  ASSERT_EQ(res.violations.size(), 1u);
  EXPECT_EQ(res.violations[0], (std::pair<std::size_t, std::size_t>{1, 1}));
  EXPECT_GT(res.table.at(1, 1), res.table.at(1, 0));
}

TEST(Calibration, ModelRunAndErrors) {
  const auto w = gen_toy_model(5);
  const std::vector<std::vector<TokenId>> prompts{{1, 2, 3}, {40, 41}};
  const auto res = calibrate_heads(w, prompts, 6, 1);
  EXPECT_EQ(res.table.ranks(), 1u);
  EXPECT_EQ(res.table.heads(), w.config.n_draft_heads);
  EXPECT_EQ(res.samples, 12u);
  const auto k3 = calibrate_heads(w, prompts, 6, 3);
  // Top-1 hits are the first column of the top-3 table.
  for (std::size_t h = 1; h <= k3.table.heads(); ++h) EXPECT_DOUBLE_EQ(k3.table.at(h, 0), res.table.at(h, 0));
  EXPECT_THROW(calibrate_heads(w, {}, 6, 1), InputError);
  EXPECT_THROW(calibrate_heads(w, std::vector<std::vector<TokenId>>{std::vector<TokenId>{}}, 6, 1), InputError);
  EXPECT_THROW(AccuracyCounter(2, 1).finish(), InputError);
}

TEST(TuneRatio, ClimbsToBowlMinimum) {
  const auto bowl = [](double r) { return flat_stats(1.0 + 10.0 * std::abs(r - 0.7)); };
  const auto res = tune_ratio(bowl, 0.25, 1.0 / 32, 32);
  EXPECT_NEAR(res.ratio, 0.6875, 1e-12);
  for (std::size_t i = 1; i < res.trace.size(); ++i)
    EXPECT_LE(res.trace[i].stats.median_ms, res.trace[i - 1].stats.median_ms);
  EXPECT_EQ(res.trace.front().ratio, 0.25);
  EXPECT_THROW(tune_ratio(bowl, 0.5, 0.0), ContractViolation);
}

TEST(TuneRatio, NoiseDoesNotMoveTheSplit) {
  // Every neighbour is within the incumbent's spread.
  const auto noisy = [](double r) {
    return LatencyStats::from_samples({9.0, 10.0 + 0.01 * r, 11.0});
  };
  const auto res = tune_ratio(noisy, 0.5);
  EXPECT_EQ(res.ratio, 0.5);
  EXPECT_EQ(res.trace.size(), 1u);
}

TEST(TuneRatio, InitialRatioFromSoloSpeeds) {
  EXPECT_NEAR(initial_ratio(flat_stats(3.0), flat_stats(1.0), 1.0 / 32), 0.25, 1e-12);
  EXPECT_NEAR(initial_ratio(flat_stats(1.0), flat_stats(1.0), 1.0 / 32), 0.5, 1e-12);
  EXPECT_NEAR(snap_ratio(0.51, 0.25), 0.5, 1e-12);
  EXPECT_EQ(snap_ratio(1.4, 0.25), 1.0);
  BowlProfiler p(0.4);
  const auto res = tune_ratio(p, VerificationTree::chain(2), 256);
  EXPECT_NEAR(res.ratio, 0.40625, 1e-12);
}

TEST(SelectWidth, TableOneLatencyCurves) {
  std::vector<WidthCandidate> c;
  for (std::size_t i = 0; i < kTableOneWidths.size(); ++i) {
    WidthCandidate x;
    x.width = kTableOneWidths[i];
    x.feasible = true;
    x.acceptance = kTableOne[i];
    x.score = x.acceptance / 10.0;
    c.push_back(x);
  }
  EXPECT_EQ(c[select_width(c)].width, 64u);
  for (auto& x : c)
    if (x.width > 16) x.score = x.acceptance / 20.0;
  EXPECT_EQ(c[select_width(c)].width, 16u);
  for (auto& x : c) x.feasible = false;
  EXPECT_THROW(select_width(c), ConfigError);
}

TEST(SweepWidths, UsesMeasuredAcceptanceAndSkipsInfeasible) {
  const auto c = ModelConfig::tiny();
  const std::vector<VirtualUnit> units{{0, 1, 1.0}, {1, 1, 1.0}};
  const HeadAccuracyTable t(std::vector<std::vector<double>>(4, std::vector<double>(8, 0.1)));
  WidthProfiler flat([](std::size_t) { return 5.0; });
  SweepOptions opt;
  opt.measured_acceptance = [](std::size_t w, const VerificationTree&) -> std::optional<double> {
    return table_one(w);
  };
  const std::vector<std::size_t> widths{2, 4, 8, 16, 32, 64};
  const auto s = sweep_widths(flat, c, units, t, widths, 128, opt);
  EXPECT_EQ(s.width, 64u);
  EXPECT_EQ(s.tree.width(), 64u);
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.provenance.candidates.size(), widths.size());
  EXPECT_EQ(s.provenance.candidates[0].acceptance_source, "calibration");

  WidthProfiler steep([](std::size_t w) { return w > 16 ? 10.0 : 5.0; });
  EXPECT_EQ(sweep_widths(steep, c, units, t, widths, 128, opt).width, 16u);

  const HeadAccuracyTable small({{0.5}, {0.4}});
  const auto s2 = sweep_widths(flat, c, units, small, {2, 3, 8}, 128);
  EXPECT_FALSE(s2.provenance.candidates[2].feasible);
  EXPECT_FALSE(s2.provenance.candidates[2].note.empty());
  EXPECT_EQ(s2.provenance.candidates[0].acceptance_source, "estimator");
  EXPECT_EQ(s2.width, 3u);
}

TEST(BucketPlans, PerBucketRatiosAndErrors) {
  const auto c = ModelConfig::tiny();
  const std::vector<VirtualUnit> units{{0, 1, 1.0}, {1, 1, 1.0}};
  BowlProfiler p(0.3);
  const auto tree = VerificationTree::chain(3);
  const auto one = bucket_plans(p, c, units, tree, {512});
  EXPECT_EQ(one.plans.size(), 1u);
  EXPECT_NEAR(one.plans.at(512).ratio, 0.3125, 1e-12);
  EXPECT_THROW(bucket_plans(p, c, units, tree, {}), ConfigError);

  const auto many = bucket_plans(p, c, units, tree, {64, 1024, 4096});
  EXPECT_LT(many.plans.at(64).estimate.attention_fraction(), many.plans.at(1024).estimate.attention_fraction());
  EXPECT_LT(many.plans.at(1024).estimate.attention_fraction(), many.plans.at(4096).estimate.attention_fraction());

  EXPECT_EQ(select_plan(many.plans, 1500).context_bucket, 1024u);
  EXPECT_EQ(select_plan(many.plans, 10).context_bucket, 64u);
  EXPECT_EQ(select_plan(many.plans, 9999).context_bucket, 4096u);
  EXPECT_THROW(select_plan({}, 5), ConfigError);
}

TEST(ProfileStrategy, DeterministicForDeterministicProfiler) {
  const auto c = ModelConfig::tiny();
  const std::vector<VirtualUnit> units{{0, 1, 1.0}, {1, 1, 1.0}};
  const HeadAccuracyTable t({{0.6, 0.2}, {0.5, 0.2}, {0.4, 0.1}});
  BowlProfiler p(0.55);
  const auto a = profile_strategy(p, c, units, t, {1, 2, 4}, {128, 1024});
  const auto b = profile_strategy(p, c, units, t, {1, 2, 4}, {128, 1024});
  EXPECT_EQ(a.width, b.width);
  EXPECT_EQ(a.tree, b.tree);
  EXPECT_EQ(a.plans, b.plans);
  EXPECT_EQ(a.plans.size(), 2u);
  EXPECT_THROW(profile_strategy(p, c, units, t, {1}, {}), ConfigError);
}
