#include <gtest/gtest.h>

#include <atomic>
#include <random>

#include "support/allreduce_reference.hpp"
#include "support/oracles.hpp"
#include "support/plans.hpp"

using namespace hetspec;

namespace {

const ModelWeights& model() {
  static const ModelWeights w = gen_toy_model(21);
  return w;
}

std::vector<VirtualUnit> two_units(std::size_t w0 = 1, std::size_t w1 = 1, double t0 = 1.0, double t1 = 1.0) {
  return {{0, w0, t0}, {1, w1, t1}};
}

// A prompt-filled cache plus a tree block to run over it.
struct Scenario {
  KVCache cache;
  VerificationTree tree;
  CooMask mask;
  std::vector<TokenId> tokens;
  std::vector<std::size_t> pos;
  BlockInput input() const { return {tokens, pos, &mask}; }
};

Scenario scenario(std::size_t prompt_len, std::size_t width, std::mt19937_64& rng) {
  const auto& w = model();
  std::uniform_int_distribution<TokenId> tok(0, 255);
  std::vector<TokenId> prompt(prompt_len);
  for (auto& t : prompt) t = tok(rng);
  Scenario s{prefill(w, prompt).cache, oracle::random_tree(width, 4, 3, rng), {}, {}, {}};
  s.mask = build_mask(s.tree);
  for (std::size_t i = 0; i < width; ++i) {
    s.tokens.push_back(tok(rng));
    s.pos.push_back(s.cache.length() + s.tree.depth(i));
  }
  return s;
}

bool staged_equal(const StagedKV& a, const StagedKV& b, std::size_t layer) {
  for (std::size_t h = 0; h < a.n_heads; ++h)
    for (std::size_t i = 0; i < a.width; ++i) {
      const auto ka = a.k(layer, h).row(i), kb = b.k(layer, h).row(i);
      const auto va = a.v(layer, h).row(i), vb = b.v(layer, h).row(i);
      if (!std::equal(ka.begin(), ka.end(), kb.begin()) || !std::equal(va.begin(), va.end(), vb.begin())) return false;
    }
  return true;
}

}  // namespace

TEST(Runtime, ConstructionErrors) {
  EXPECT_THROW(HeteroRuntime({}), ConfigError);
  EXPECT_THROW(HeteroRuntime({{0, 0, 1.0}}), ConfigError);
  EXPECT_THROW(HeteroRuntime({{0, 1, 0.5}}), ConfigError);
}

TEST(Runtime, RunsEveryWorkerAndSharesCoverRange) {
  HeteroRuntime rt({{0, 3, 1.0}, {1, 2, 1.0}});
  EXPECT_EQ(rt.total_workers(), 5u);
  std::vector<int> hits(5 * 7, 0);
  std::vector<std::atomic<int>> cover(101);
  rt.run([&](WorkerContext& ctx) {
    const std::size_t slot = ctx.unit() * 3 + ctx.worker();
    hits[slot] += 1;
    const Interval mine = ctx.share({0, 101}, 4);
    if (ctx.unit() == 0)
      for (std::size_t i = mine.begin; i < mine.end; ++i) cover[i]++;
    ctx.sync();
  });
  for (std::size_t s = 0; s < 5; ++s) EXPECT_EQ(hits[s], 1);
  for (std::size_t i = 0; i < 101; ++i) EXPECT_EQ(cover[i].load(), 1);
}

TEST(Runtime, PropagatesJobErrors) {
  HeteroRuntime rt(two_units(2, 1));
  EXPECT_THROW(rt.run([](WorkerContext& ctx) {
                 ctx.sync();
                 if (ctx.unit() == 1) throw ConfigError("boom");
                 ctx.sync();
               }),
               ConfigError);
  // Still usable afterwards.
  std::atomic<int> n{0};
  rt.run([&](WorkerContext&) { ++n; });
  EXPECT_EQ(n.load(), 3);
}

TEST(PlanFromRatio, Examples) {
  const auto c = ModelConfig::tiny();
  const CooMask m = build_mask(VerificationTree::chain(3));
  const auto half = plan_from_ratio(c, two_units(), 0.5, 256, m);
  EXPECT_EQ(half.layers[0].q[0], (Interval{0, 64}));
  EXPECT_EQ(half.layers[0].q[1], (Interval{64, 128}));
  EXPECT_NO_THROW(validate_plan(half, c));
  const auto none = plan_from_ratio(c, two_units(), 0.0, 256, m);
  for (const auto& L : none.layers) {
    EXPECT_TRUE(L.q[0].empty() && L.o[0].empty() && L.mlp_in[0].empty() && L.down[0].empty());
    for (const auto& H : L.heads) EXPECT_TRUE(H.units[0].prefix.empty() && H.units[0].pairs.empty());
  }
  EXPECT_TRUE(none.lm_head[0].empty());
  EXPECT_THROW(plan_from_ratio(c, two_units(), 1.5, 256, m), ContractViolation);
  EXPECT_THROW(plan_from_ratio(c, two_units(), -0.1, 256, m), ContractViolation);
  EXPECT_THROW(plan_from_ratio(c, {{0, 1, 1.0}}, 0.5, 256, m), ConfigError);
}

TEST(PlanFromRatio, HeadGranularProjections) {
  const auto c = ModelConfig::tiny();
  const CooMask m = CooMask::causal(4);
  for (int i = 0; i <= 32; ++i) {
    const auto p = plan_from_ratio(c, two_units(), i / 32.0, 64, m);
    EXPECT_EQ(p.layers[0].q[0].end % c.d_head, 0u);
    EXPECT_NO_THROW(validate_plan(p, c));
  }
}

// Unit 0's estimated attention share against a direct count of cache rows and pairs.
TEST(PlanFromRatio, AttentionWorkSplitMatchesCountingOracle) {
  const auto c = ModelConfig::tiny();
  std::mt19937_64 rng(71);
  const auto t = oracle::random_tree(16, 4, 4, rng);
  const CooMask m = build_mask(t);
  const std::size_t P = 4096, w = 16;
  const auto plan = plan_from_ratio(c, two_units(), 0.75, P, m);
  double unit0 = 0.0, total = 0.0;
  for (const auto& L : plan.layers)
    for (const auto& H : L.heads) {
      for (std::size_t u = 0; u < 2; ++u) {
        double work = 0.0;
        for (std::size_t r = H.units[u].prefix.begin; r < H.units[u].prefix.end; ++r) work += w;
        for (std::size_t q = H.units[u].pairs.begin; q < H.units[u].pairs.end; ++q) work += 1;
        total += work;
        if (u == 0) unit0 += work;
      }
    }
  const double granule = static_cast<double>(c.d_head) / static_cast<double>(c.d_model);
  EXPECT_NEAR(unit0 / total, 0.75, granule);
  EXPECT_NEAR(plan.estimate.unit0_attention / plan.estimate.attention, unit0 / total, 1e-12);
}

TEST(PlanFromRatio, SparsePairsGoToLowParallelismUnit) {
  const auto c = ModelConfig::tiny();
  const CooMask m = build_mask(VerificationTree::chain(7));
  const auto p = plan_from_ratio(c, two_units(), 0.5, 1024, m, {1, 0});
  const auto& H = p.layers[0].heads[0];
  EXPECT_EQ(H.units[1].pairs.size(), m.size());
  EXPECT_GT(H.units[0].prefix.size(), 0u);
  const auto q = plan_from_ratio(c, two_units(), 0.5, 1024, m, {0, 0});
  EXPECT_EQ(q.layers[0].heads[0].units[0].pairs.size(), m.size());
}

TEST(PlanFromRatio, AttentionFractionGrowsWithBucket) {
  const auto c = ModelConfig::tiny();
  const CooMask m = build_mask(VerificationTree::chain(15));
  double prev = 0.0;
  for (std::size_t b : {64u, 256u, 1024u, 4096u}) {
    const double f = plan_from_ratio(c, two_units(), 0.5, b, m).estimate.attention_fraction();
    EXPECT_GT(f, prev);
    prev = f;
  }
}

TEST(ValidatePlan, RejectsBrokenPlans) {
  const auto c = ModelConfig::tiny();
  const CooMask m = CooMask::causal(4);
  const auto good = plan_from_ratio(c, two_units(), 0.5, 128, m);
  auto bad = good;
  bad.layers[1].o[0] = {0, 70};  // overlaps unit 1's [64, 128)
  EXPECT_THROW(validate_plan(bad, c), ConfigError);
  bad = good;
  bad.layers[0].mlp_in[1] = {256, 500};  // gap at the end
  EXPECT_THROW(validate_plan(bad, c), ConfigError);
  bad = good;
  bad.layers[2].q = {{0, 48}, {48, 128}};  // splits a head
  EXPECT_THROW(validate_plan(bad, c), ConfigError);
  bad = good;
  bad.layers.pop_back();
  EXPECT_THROW(validate_plan(bad, c), ConfigError);
  bad = good;
  bad.layers[0].heads[3].units[0].prefix = {0, 100};
  EXPECT_THROW(validate_plan(bad, c), ConfigError);
  bad = good;
  bad.lm_head = {{0, 257}};
  EXPECT_THROW(validate_plan(bad, c), ConfigError);
}

TEST(SharedArena, OverlappingWritersRejected) {
  SharedArena a;
  a.add_region("x", 2, 10);
  a.claim("x", "s", 0, {0, 5});
  a.claim("x", "s", 1, {5, 10});
  EXPECT_THROW(a.claim("x", "s", 1, {4, 6}), ConfigError);
  EXPECT_NO_THROW(a.claim("x", "t", 1, {0, 10}));
  EXPECT_THROW(a.claim("y", "s", 0, {0, 1}), ConfigError);
  EXPECT_THROW(a.claim("x", "s", 0, {8, 11}), ConfigError);
}

TEST(ExecuteStep, DegeneratePlansAreBitwiseSingleUnit) {
  const auto& w = model();
  std::mt19937_64 rng(72);
  auto s = scenario(40, 9, rng);
  const auto ref = forward_block(w, s.cache, s.input());
  HeteroRuntime rt(two_units(2, 1));
  for (std::size_t owner : {0u, 1u}) {
    const auto out = execute_step(w, s.cache, s.input(), single_unit_plan(w.config, rt.units(), owner, 40, s.mask), rt);
    EXPECT_EQ(out.logits, ref.logits);
    EXPECT_EQ(out.hidden, ref.hidden);
    EXPECT_EQ(out.staged.keys, ref.staged.keys);
  }
  // ratio 0 puts everything on unit 1.
  const auto out = execute_step(w, s.cache, s.input(), plan_from_ratio(w.config, rt.units(), 0.0, 40, s.mask), rt);
  EXPECT_EQ(out.logits, ref.logits);
}

// Master property: any plan equals the single-unit pass. Layer-0 K/V come
// straight out of the split projections and must match bit for bit.
TEST(ExecuteStepProperty, RandomPlansMatchSingleUnit) {
  const auto& w = model();
  std::mt19937_64 rng(73);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t U = 2 + trial % 2;
    std::vector<VirtualUnit> units;
    for (std::size_t u = 0; u < U; ++u) units.push_back({u, 1 + (trial + u) % 2, 1.0});
    HeteroRuntime rt(units);
    auto s = scenario(1 + trial * 23, 1 + trial * 3, rng);
    const std::size_t bcols = trial % 3 == 0 ? std::min<std::size_t>(2, s.mask.rows()) : 0;
    const std::size_t bucket = trial % 2 ? s.cache.length() : 200;
    const auto plan = oracle::random_plan(w.config, units, s.mask, bucket, bcols, rng);
    const auto ref = forward_block(w, s.cache, s.input());
    const auto out = execute_step(w, s.cache, s.input(), plan, rt);
    ASSERT_TRUE(staged_equal(out.staged, ref.staged, 0)) << "trial " << trial;
    ASSERT_LE(oracle::rel_diff(out.logits.data(), ref.logits.data()), 1e-5) << "trial " << trial;
    ASSERT_LE(oracle::rel_diff(out.hidden.data(), ref.hidden.data()), 1e-5);
  }
}

TEST(ExecuteStep, RepeatRunsAreBitwiseIdentical) {
  const auto& w = model();
  std::mt19937_64 rng(74);
  auto s = scenario(70, 12, rng);
  HeteroRuntime rt(two_units(2, 2));
  const auto plan = oracle::random_plan(w.config, rt.units(), s.mask, 70, 3, rng);
  const auto a = execute_step(w, s.cache, s.input(), plan, rt);
  for (int r = 0; r < 5; ++r) {
    const auto b = execute_step(w, s.cache, s.input(), plan, rt);
    ASSERT_EQ(a.logits, b.logits);
    ASSERT_EQ(a.hidden, b.hidden);
  }
}

TEST(ExecuteStep, BarrierCountAndZeroCopies) {
  const auto& w = model();
  std::mt19937_64 rng(75);
  auto s = scenario(30, 8, rng);
  HeteroRuntime rt(two_units(2, 1));
  const auto plan = plan_from_ratio(w.config, rt.units(), 0.5, 30, s.mask);
  rt.reset_counters();
  execute_step(w, s.cache, s.input(), plan, rt);
  const auto c = rt.counters();
  EXPECT_EQ(c.barrier_phases, 6 * w.config.n_layers + 1);
  EXPECT_EQ(c.activation_copies, 0u);
  EXPECT_EQ(c.bytes_copied, 0u);
}

TEST(ExecuteStep, PlanMismatchIsConfigError) {
  const auto& w = model();
  std::mt19937_64 rng(76);
  auto s = scenario(10, 4, rng);
  HeteroRuntime three({{0, 1, 1.0}, {1, 1, 1.0}, {2, 1, 1.0}});
  const auto plan = plan_from_ratio(w.config, two_units(), 0.5, 10, s.mask);
  EXPECT_THROW(execute_step(w, s.cache, s.input(), plan, three), ConfigError);
  HeteroRuntime rt(two_units());
  auto bad = plan;
  bad.layers[0].k[1] = {0, 128};
  EXPECT_THROW(execute_step(w, s.cache, s.input(), bad, rt), ConfigError);
}

// Without barriers, a unit reads shared regions before their writer finishes.
// A throttled writer makes that schedule near certain; the result diverges or
// the merge sees rows nobody has filled yet.
TEST(ExecuteStep, BarriersAreLoadBearing) {
  const auto& w = model();
  std::mt19937_64 rng(77);
  auto s = scenario(50, 8, rng);
  HeteroRuntime rt(two_units(1, 1, 4.0, 1.0));
  const auto plan = plan_from_ratio(w.config, rt.units(), 0.5, 50, s.mask);
  const auto ref = execute_step(w, s.cache, s.input(), plan, rt);
  int broken = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    try {
      const auto out = execute_step(w, s.cache, s.input(), plan, rt, {false, 0});
      if (out.logits != ref.logits) ++broken;
    } catch (const Error&) {
      ++broken;
    }
  }
  EXPECT_GT(broken, 0);
}

TEST(MemoryTraffic, AllreduceReferenceCopiesWhereColumnSplitDoesNot) {
  const auto& w = model();
  std::mt19937_64 rng(78);
  HeteroRuntime rt(two_units());
  const Tensor x = oracle::random_tensor(6, w.config.d_model, rng);
  const std::vector<Interval> ff{{0, 200}, {200, 512}};
  rt.reset_counters();
  const auto ar = oracle::allreduce_mlp(w, 1, x, ff, rt);
  const auto c = rt.counters();
  EXPECT_EQ(c.activation_copies, ar.exchanges);
  EXPECT_GE(c.bytes_copied, 2 * x.numel() * sizeof(float));

  // Same math as the single-unit MLP.
  const auto& L = w.layers[1];
  const Tensor h = rmsnorm(x, L.mlp_norm, w.config.norm_eps);
  Tensor g = gemm(h, L.w_gate), u = gemm(h, L.w_up);
  for (std::size_t i = 0; i < g.numel(); ++i) g.storage()[i] = silu(g.storage()[i]) * u.storage()[i];
  Tensor ref = gemm(g, L.w_down);
  for (std::size_t i = 0; i < ref.numel(); ++i) ref.storage()[i] += x.storage()[i];
  EXPECT_LE(oracle::rel_diff(ar.out.data(), ref.data()), 1e-5);
}

TEST(Latency, StatsAndErrors) {
  const auto s = LatencyStats::from_samples({5, 1, 4, 2, 3, 9, 7, 8, 6});
  EXPECT_DOUBLE_EQ(s.median_ms, 5.0);
  EXPECT_LE(s.p10_ms, s.median_ms);
  EXPECT_GE(s.p90_ms, s.median_ms);
  EXPECT_THROW(LatencyStats::from_samples({}), ContractViolation);

  const auto& w = model();
  HeteroRuntime rt(two_units());
  const CooMask m = CooMask::causal(2);
  const auto plan = plan_from_ratio(w.config, rt.units(), 0.5, 16, m);
  EXPECT_THROW(measure_step_latency(w, rt, plan, m, 16, 2), ContractViolation);
  const auto st = measure_step_latency(w, rt, plan, m, 16, 9);
  EXPECT_EQ(st.samples_ms.size(), 9u);
  EXPECT_GE(st.median_ms, st.p10_ms);
  EXPECT_LE(st.median_ms, st.p90_ms);
}

TEST(Latency, ThrottleTwoRoughlyDoublesSoloLatency) {
  const auto& w = model();
  const CooMask m = build_mask(VerificationTree::chain(7));
  auto solo = [&](double throttle) {
    HeteroRuntime rt({{0, 1, throttle}});
    const auto plan = single_unit_plan(w.config, rt.units(), 0, 256, m);
    return measure_step_latency(w, rt, plan, m, 256, 9, 2).median_ms;
  };
  const double t1 = solo(1.0), t2 = solo(2.0);
  EXPECT_NEAR(t2 / t1, 2.0, 0.5) << t1 << " ms vs " << t2 << " ms";
}

// Soft: wider blocks should not be faster than a single row.
TEST(Latency, WidthOneNotSlowerThanWidthSixtyFour) {
  const auto& w = model();
  HeteroRuntime rt(two_units());
  auto at = [&](std::size_t width) {
    const CooMask m = CooMask::causal(width);
    return measure_step_latency(w, rt, plan_from_ratio(w.config, rt.units(), 0.5, 128, m), m, 128, 5).median_ms;
  };
  EXPECT_LE(at(1), at(64));
}
