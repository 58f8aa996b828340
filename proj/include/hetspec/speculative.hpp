#pragma once

#include <functional>
#include <optional>
#include <random>
#include <span>
#include <unordered_set>
#include <vector>

#include "hetspec/model.hpp"
#include "hetspec/sparse_attention.hpp"
#include "hetspec/tree.hpp"

namespace hetspec {

struct AcceptanceRecord {
  std::size_t steps = 0;
  std::size_t tokens_emitted = 0;

  void record(std::size_t gained) {
    ++steps;
    tokens_emitted += gained;
  }
  double acceptance_length() const {
    return steps == 0 ? 1.0 : static_cast<double>(tokens_emitted) / static_cast<double>(steps);
  }
};

struct AssembledBlock {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> positions;
};

inline AssembledBlock assemble_block(const VerificationTree& tree, TokenId root_token, const DraftCandidates& cands,
                                     std::size_t cache_len) {
  AssembledBlock b;
  b.tokens.reserve(tree.width());
  b.positions.reserve(tree.width());
  b.tokens.push_back(root_token);
  b.positions.push_back(cache_len);
  for (std::size_t i = 1; i < tree.width(); ++i) {
    const auto& n = tree.node(i);
    if (n.head > cands.n_heads() || n.rank >= cands.heads[n.head - 1].size()) {
      throw ConfigError("assemble_block: tree node " + std::to_string(i) + " needs head " + std::to_string(n.head) +
                        " rank " + std::to_string(n.rank) + " which the drafter did not provide");
    }
    b.tokens.push_back(cands.heads[n.head - 1][n.rank].token);
    b.positions.push_back(cache_len + n.head);
  }
  return b;
}

struct VerifyResult {
  std::vector<std::size_t> accepted_path;  // node indices, root excluded
  TokenId bonus_token = 0;
  std::size_t last_node = 0;  // root when nothing was accepted

  std::size_t gain() const noexcept { return accepted_path.size() + 1; }
};

// Greedy tree walk. `greedy_at(i)` is the target model's argmax after node i.
template <typename GreedyAt>
VerifyResult verify_with(const VerificationTree& tree, std::span<const TokenId> tokens, GreedyAt&& greedy_at) {
  detail::require(tokens.size() == tree.width(), "verify: one token per tree node required");
  VerifyResult r;
  std::size_t cur = 0;
  TokenId want = greedy_at(cur);
  for (;;) {
    std::size_t next = kNoParent;
    for (std::size_t ch : tree.children(cur)) {
      if (tokens[ch] == want) {
        next = ch;
        break;
      }
    }
    if (next == kNoParent) break;
    r.accepted_path.push_back(next);
    cur = next;
    want = greedy_at(cur);
  }
  r.last_node = cur;
  r.bonus_token = want;
  return r;
}

inline VerifyResult verify(const VerificationTree& tree, std::span<const TokenId> tokens, const Tensor& logits) {
  detail::require(logits.rows() == tree.width(), "verify: one logit row per tree node required");
  return verify_with(tree, tokens, [&](std::size_t i) { return static_cast<TokenId>(argmax(logits.row(i))); });
}

using BlockForwardFn = std::function<BlockOutput(const KVCache&, const BlockInput&)>;

inline BlockForwardFn single_unit_forward(const ModelWeights& w) {
  return [&w](const KVCache& cache, const BlockInput& in) { return forward_block(w, cache, in); };
}

struct StepResult {
  std::vector<TokenId> emitted;  // accepted path tokens followed by the bonus token
  VerifyResult verdict;
  Tensor hidden;  // [1 x d_model] at the last accepted node, input to the next draft
};

inline StepResult speculative_step(const ModelWeights& w, KVCache& cache, const VerificationTree& tree,
                                   const CooMask& mask, TokenId root_token, const DraftCandidates& cands,
                                   const BlockForwardFn& forward) {
  if (cache.length() + tree.width() > w.config.max_context) {
    throw CapacityError("speculative_step: cache length " + std::to_string(cache.length()) + " + width " +
                        std::to_string(tree.width()) + " exceeds max_context");
  }
  const AssembledBlock block = assemble_block(tree, root_token, cands, cache.length());
  BlockOutput out = forward(cache, {block.tokens, block.positions, &mask});
  StepResult r;
  r.verdict = verify(tree, block.tokens, out.logits);
  std::vector<std::size_t> commit_rows{0};
  for (std::size_t n : r.verdict.accepted_path) {
    commit_rows.push_back(n);
    r.emitted.push_back(block.tokens[n]);
  }
  r.emitted.push_back(r.verdict.bonus_token);
  cache.commit(out.staged, commit_rows);
  r.hidden = row_tensor(out.hidden, r.verdict.last_node);
  return r;
}

struct DraftContext {
  std::span<const float> hidden;  // final hidden state at the position that produced the root
  std::span<const TokenId> generated;  // tokens generated so far; the root is the last one
};

using Drafter = std::function<DraftCandidates(const DraftContext&)>;

inline Drafter medusa_drafter(const ModelWeights& w, std::size_t k) {
  return [&w, k](const DraftContext& ctx) { return draft(w, ctx.hidden, k); };
}

// Planted-truth drafter: for head h the true token lands at rank r with
// probability acc[h][r], independently across heads; every other rank holds a
// distinct wrong token.
inline DraftCandidates oracle_draft(std::span<const std::optional<TokenId>> truth,
                                    const std::vector<std::vector<double>>& acc, std::size_t k, std::size_t vocab,
                                    std::mt19937_64& rng) {
  detail::require(k >= 1 && vocab > k, "oracle_draft: need 1 <= k < vocab");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(vocab - 1));
  DraftCandidates out;
  out.heads.resize(acc.size());
  for (std::size_t h = 0; h < acc.size(); ++h) {
    const double u = unif(rng);
    std::optional<std::size_t> planted;
    double cum = 0.0;
    for (std::size_t r = 0; r < acc[h].size() && r < k; ++r) {
      cum += acc[h][r];
      if (u < cum) {
        planted = r;
        break;
      }
    }
    auto& list = out.heads[h];
    list.resize(k);
    std::unordered_set<TokenId> used;
    if (truth[h]) used.insert(*truth[h]);
    for (std::size_t r = 0; r < k; ++r) {
      list[r].prob = static_cast<float>(1.0 / static_cast<double>(r + 2));
      if (planted && *planted == r && truth[h]) {
        list[r].token = *truth[h];
        continue;
      }
      TokenId t;
      do t = pick(rng);
      while (used.count(t));
      used.insert(t);
      list[r].token = t;
    }
  }
  return out;
}

inline void validate_accuracy_rows(const std::vector<std::vector<double>>& acc) {
  for (std::size_t h = 0; h < acc.size(); ++h) {
    double s = 0.0;
    for (double a : acc[h]) {
      if (!(a >= 0.0 && a <= 1.0)) throw InvalidTableError("accuracy table: entries must lie in [0, 1]");
      s += a;
    }
    if (s > 1.0 + 1e-12) {
      throw InvalidTableError("accuracy table: head " + std::to_string(h + 1) + " sums to " + std::to_string(s) +
                              " > 1");
    }
  }
}

// Drafter that knows the greedy continuation from a hidden sequential run.
class OracleDrafter {
 public:
  OracleDrafter(std::vector<TokenId> truth, std::vector<std::vector<double>> acc, std::size_t k, std::size_t vocab,
                std::uint64_t seed)
      : truth_(std::move(truth)), acc_(std::move(acc)), k_(k), vocab_(vocab), rng_(seed) {
    validate_accuracy_rows(acc_);
  }

  DraftCandidates operator()(const DraftContext& ctx) {
    const std::size_t root = ctx.generated.size() - 1;
    std::vector<std::optional<TokenId>> t(acc_.size());
    for (std::size_t h = 0; h < acc_.size(); ++h) {
      if (root + h + 1 < truth_.size()) t[h] = truth_[root + h + 1];
    }
    return oracle_draft(t, acc_, k_, vocab_, rng_);
  }

 private:
  std::vector<TokenId> truth_;
  std::vector<std::vector<double>> acc_;
  std::size_t k_, vocab_;
  std::mt19937_64 rng_;
};

struct GenerationOptions {
  std::size_t max_new_tokens = 64;
  std::optional<TokenId> eos;
};

struct GenerationResult {
  std::vector<TokenId> tokens;  // generated tokens (prompt excluded)
  AcceptanceRecord stats;  // steps after the prefill
};

namespace detail {

// Appends tokens until the budget or EOS is hit; returns false once generation must stop.
inline bool append_tokens(std::vector<TokenId>& out, std::span<const TokenId> add, const GenerationOptions& opt) {
  for (TokenId t : add) {
    if (out.size() >= opt.max_new_tokens) return false;
    out.push_back(t);
    if (opt.eos && t == *opt.eos) return false;
  }
  return out.size() < opt.max_new_tokens;
}

inline void check_room(const ModelConfig& c, std::size_t prompt_len, const GenerationOptions& opt) {
  if (prompt_len + opt.max_new_tokens > c.max_context) {
    throw CapacityError("generate: prompt plus max_new_tokens exceeds max_context");
  }
}

}  // namespace detail

inline GenerationResult generate_sequential(const ModelWeights& w, std::span<const TokenId> prompt,
                                            const GenerationOptions& opt) {
  detail::check_room(w.config, prompt.size(), opt);
  GenerationResult r;
  if (opt.max_new_tokens == 0) return r;
  auto pre = prefill(w, prompt);
  TokenId next = static_cast<TokenId>(argmax_row(pre.logits));
  if (!detail::append_tokens(r.tokens, std::span(&next, 1), opt)) return r;
  for (;;) {
    next = decode_step_sequential(w, pre.cache, next);
    r.stats.record(1);
    if (!detail::append_tokens(r.tokens, std::span(&next, 1), opt)) return r;
  }
}

// Tree-verified greedy decoding. When the tree no longer fits in the context
// window the loop falls back to root-only steps, which are sequential decoding.
inline GenerationResult generate_speculative(const ModelWeights& w, std::span<const TokenId> prompt,
                                             const VerificationTree& tree, const GenerationOptions& opt,
                                             const Drafter& drafter, const BlockForwardFn& forward) {
  detail::check_room(w.config, prompt.size(), opt);
  GenerationResult r;
  if (opt.max_new_tokens == 0) return r;
  auto pre = prefill(w, prompt);
  const CooMask mask = build_mask(tree);
  const VerificationTree single = VerificationTree::root_only();
  const CooMask single_mask = build_mask(single);
  Tensor hidden = pre.hidden;
  TokenId root = static_cast<TokenId>(argmax_row(pre.logits));
  if (!detail::append_tokens(r.tokens, std::span(&root, 1), opt)) return r;
  for (;;) {
    const bool fits = pre.cache.length() + tree.width() <= w.config.max_context;
    const auto& t = fits ? tree : single;
    DraftCandidates cands;
    if (t.width() > 1) cands = drafter({hidden.row(0), r.tokens});
    StepResult step = speculative_step(w, pre.cache, t, fits ? mask : single_mask, root, cands, forward);
    r.stats.record(step.emitted.size());
    if (!detail::append_tokens(r.tokens, step.emitted, opt)) return r;
    root = step.emitted.back();
    hidden = std::move(step.hidden);
  }
}

}  // namespace hetspec
