// hetspec command-line driver: model generation, decoding, calibration,
// tree tuning, profiling and benchmarking.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hetspec/hetspec.hpp"

namespace {

using namespace hetspec;

enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kIo = 3,
  kFormat = 4,
  kConfig = 5,
  kCapacity = 6,
  kInput = 7,
};

constexpr const char* kDefaultUnits = "u0:workers=1,throttle=1;u1:workers=1,throttle=1";

std::vector<std::size_t> parse_list(const std::string& s, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": '" + item + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw ConfigError(std::string(what) + ": empty list");
  return out;
}

// Moderate, rank-decaying accuracies used when no table is supplied.
HeadAccuracyTable default_table(std::size_t heads, std::size_t k) {
  std::vector<std::vector<double>> acc(heads, std::vector<double>(k));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t r = 0; r < k; ++r) acc[h][r] = 0.6 / static_cast<double>(h + 1) / static_cast<double>(1u << (r + 1));
  return HeadAccuracyTable(std::move(acc));
}

std::vector<std::vector<double>> oracle_rows(std::size_t heads, double acc) {
  if (!(acc >= 0.0 && acc <= 1.0)) throw ConfigError("--oracle-acc must lie in [0, 1]");
  return std::vector<std::vector<double>>(heads, std::vector<double>{acc});
}

Strategy load_strategy(const std::string& path, const ModelConfig& c) {
  Strategy s = strategy_from_json(detail::read_json_file(path));
  check_strategy(s, c);
  return s;
}

struct DecodeSetup {
  std::string model, prompt, strategy, units, acc_table;
  std::size_t width = 0, max_tokens = 64, k = 0;
  std::optional<double> oracle_acc;
  std::uint64_t seed = 0;
  double ratio = 0.5;
  bool seq = false;
};

struct DecodeRun {
  GenerationResult result;
  double seconds = 0.0;
  std::size_t width = 1;
  double ratio = 0.0;
  std::string units;
  std::size_t bucket = 0;
};

// Holds everything a speculative run borrows by reference.
class Decoder {
 public:
  explicit Decoder(const DecodeSetup& s) : s_(s), w_(load_model(s.model)) {
    prompt_ = ByteTokenizer::encode(s.prompt);
    if (prompt_.empty()) throw InputError("decode: prompt is empty");
    opt_.max_new_tokens = s.max_tokens;
    opt_.eos = ByteTokenizer::kEos;
    if (s.seq) return;

    if (!s.strategy.empty()) {
      strategy_ = load_strategy(s.strategy, w_.config);
      tree_ = strategy_->tree;
      units_ = s.units.empty() ? strategy_->plans.begin()->second.units : parse_units(s.units);
      for (const auto& [b, p] : strategy_->plans)
        if (p.units.size() != units_.size()) throw ConfigError("decode: --units does not match the strategy's unit count");
    } else {
      if (s.width == 0) throw ConfigError("decode: pass --strategy, --width or --seq");
      const std::size_t k = s.k ? s.k : 4;
      const HeadAccuracyTable table =
          s.acc_table.empty() ? default_table(w_.config.n_draft_heads, k) : table_from_json(detail::read_json_file(s.acc_table));
      if (table.heads() > w_.config.n_draft_heads) throw ConfigError("decode: accuracy table has more heads than the model");
      tree_ = greedy_tree(table, s.width);
      if (!s.units.empty()) units_ = parse_units(s.units);
    }
    const std::size_t k = std::max<std::size_t>(s.k, tree_.max_rank() + 1);
    if (s.oracle_acc) {
      // The oracle needs the greedy continuation; it is computed before timing starts.
      auto truth = generate_sequential(w_, prompt_, opt_).tokens;
      oracle_ = std::make_unique<OracleDrafter>(std::move(truth), oracle_rows(w_.config.n_draft_heads, *s.oracle_acc), k,
                                                w_.config.vocab_size, s.seed);
      drafter_ = [this](const DraftContext& c) { return (*oracle_)(c); };
    } else {
      drafter_ = medusa_drafter(w_, k);
    }
    if (!units_.empty()) {
      rt_ = std::make_unique<HeteroRuntime>(units_);
      if (strategy_) {
        forward_ = strategy_forward(w_, *strategy_, *rt_);
      } else {
        if (units_.size() != 2) throw ConfigError("decode: --width with --units needs exactly two units");
        plan_ = plan_from_ratio(w_.config, units_, s.ratio, 0, build_mask(tree_));
        forward_ = hcmp_forward(w_, plan_, *rt_);
      }
    } else {
      forward_ = single_unit_forward(w_);
    }
  }

  DecodeRun run() {
    DecodeRun r;
    const auto t0 = std::chrono::steady_clock::now();
    if (s_.seq) {
      r.result = generate_sequential(w_, prompt_, opt_);
    } else {
      r.result = generate_speculative(w_, prompt_, tree_, opt_, drafter_, forward_);
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.width = s_.seq ? 1 : tree_.width();
    if (strategy_) {
      const auto& p = select_plan(strategy_->plans, prompt_.size());
      r.ratio = p.ratio;
      r.bucket = p.context_bucket;
    } else if (rt_) {
      r.ratio = plan_.ratio;
    }
    r.units = units_.empty() ? "single" : format_units(units_);
    return r;
  }

  const ModelWeights& weights() const { return w_; }

 private:
  DecodeSetup s_;
  ModelWeights w_;
  std::vector<TokenId> prompt_;
  GenerationOptions opt_;
  VerificationTree tree_;
  std::optional<Strategy> strategy_;
  std::vector<VirtualUnit> units_;
  std::unique_ptr<HeteroRuntime> rt_;
  std::unique_ptr<OracleDrafter> oracle_;
  PartitionPlan plan_;
  Drafter drafter_;
  BlockForwardFn forward_;
};

std::vector<std::vector<TokenId>> load_calibration(const std::string& path) {
  std::vector<std::vector<TokenId>> prompts;
  for (const auto& p : load_prompts_jsonl(path)) prompts.push_back(ByteTokenizer::encode(p));
  if (prompts.empty()) throw InputError("calibration file '" + path + "' holds no prompts");
  return prompts;
}

void report_violations(const CalibrationResult& cal) {
  for (const auto& [h, r] : cal.violations)
    std::cerr << "warning: head " << h << " rank " << r << " is more accurate than rank " << r - 1 << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"Tree-verified speculative decoding with hetero-unit model parallelism"};
  app.require_subcommand(1);

  // gen-model
  std::uint64_t gen_seed = 0;
  std::string gen_preset = "tiny", gen_out;
  auto* gen = app.add_subcommand("gen-model", "Write a randomly initialised model container");
  gen->add_option("--seed", gen_seed, "RNG seed")->required();
  gen->add_option("--preset", gen_preset, "Model preset")->check(CLI::IsMember({"tiny"}));
  gen->add_option("--out", gen_out, "Output path")->required();

  // decode
  DecodeSetup ds;
  auto* dec = app.add_subcommand("decode", "Generate text from a prompt");
  dec->add_option("--model", ds.model)->required();
  dec->add_option("--prompt", ds.prompt)->required();
  auto* dec_strategy = dec->add_option("--strategy", ds.strategy, "Strategy JSON from `profile`");
  auto* dec_width = dec->add_option("--width", ds.width, "Verification width (root included)");
  auto* dec_seq = dec->add_flag("--seq", ds.seq, "Sequential greedy baseline");
  dec_strategy->excludes(dec_width);
  dec_seq->excludes(dec_strategy)->excludes(dec_width);
  dec->add_option("--max-tokens", ds.max_tokens)->default_val(64);
  dec->add_option("--units", ds.units, "Unit spec, e.g. " + std::string(kDefaultUnits));
  dec->add_option("--acc-table", ds.acc_table, "Accuracy table used to shape the tree for --width");
  dec->add_option("--ratio", ds.ratio, "Partition ratio for --width with --units")->check(CLI::Range(0.0, 1.0));
  dec->add_option("--k", ds.k, "Candidates drafted per head");
  dec->add_option("--oracle-acc", ds.oracle_acc, "Use a planted-truth drafter with this rank-0 accuracy");
  dec->add_option("--seed", ds.seed, "Seed for the planted-truth drafter");

  // profile
  std::string prof_model, prof_widths = "2,4,8,16,32,64", prof_calib, prof_buckets = "256,1024",
                          prof_units = kDefaultUnits, prof_out;
  std::size_t prof_k = 4, prof_steps = 32, prof_reps = 7, prof_refine = 0;
  auto* prof = app.add_subcommand("profile", "Calibrate heads, sweep widths and tune partition ratios");
  prof->add_option("--model", prof_model)->required();
  prof->add_option("--widths", prof_widths)->capture_default_str();
  prof->add_option("--calib", prof_calib)->required();
  prof->add_option("--buckets", prof_buckets)->capture_default_str();
  prof->add_option("--units", prof_units)->capture_default_str();
  prof->add_option("--out", prof_out)->required();
  prof->add_option("--k", prof_k)->capture_default_str();
  prof->add_option("--steps", prof_steps, "Calibration steps per prompt")->capture_default_str();
  prof->add_option("--reps", prof_reps, "Timed repetitions per latency sample")->capture_default_str()->check(CLI::Range(3, 1000));
  prof->add_option("--refine-budget", prof_refine)->capture_default_str();

  // tune-tree
  std::string tt_table, tt_out;
  std::size_t tt_width = 0, tt_refine = 0, tt_trials = 0;
  std::uint64_t tt_seed = 1;
  auto* tt = app.add_subcommand("tune-tree", "Build a verification tree from an accuracy table");
  tt->add_option("--acc-table", tt_table)->required();
  tt->add_option("--width", tt_width)->required()->check(CLI::PositiveNumber);
  tt->add_option("--refine-budget", tt_refine)->capture_default_str();
  tt->add_option("--mc-trials", tt_trials, "Refine against Monte-Carlo acceptance with this many trials");
  tt->add_option("--seed", tt_seed)->capture_default_str();
  tt->add_option("--out", tt_out)->required();

  // calibrate
  std::string cal_model, cal_calib, cal_out;
  std::size_t cal_k = 4, cal_steps = 32;
  auto* cal = app.add_subcommand("calibrate", "Measure per-head, per-rank draft accuracy");
  cal->add_option("--model", cal_model)->required();
  cal->add_option("--calib", cal_calib)->required();
  cal->add_option("--k", cal_k)->capture_default_str()->check(CLI::PositiveNumber);
  cal->add_option("--steps", cal_steps, "Steps per prompt")->capture_default_str();
  cal->add_option("--out", cal_out)->required();

  // bench
  DecodeSetup bs;
  std::size_t bench_reps = 5;
  bool bench_json = false;
  auto* bench = app.add_subcommand("bench", "Time decoding with a strategy");
  bench->add_option("--model", bs.model)->required();
  bench->add_option("--strategy", bs.strategy)->required();
  bench->add_option("--reps", bench_reps)->capture_default_str()->check(CLI::Range(1, 10000));
  bench->add_flag("--json", bench_json, "Emit a JSON report");
  bench->add_option("--prompt", bs.prompt)->default_val("The quick brown fox jumps over the lazy dog.");
  bench->add_option("--max-tokens", bs.max_tokens)->default_val(64);
  bench->add_option("--units", bs.units);
  bench->add_option("--oracle-acc", bs.oracle_acc);
  bench->add_option("--seed", bs.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  if (gen->parsed()) {
    const auto w = gen_toy_model(gen_seed, ModelConfig::tiny());
    save_model(w, gen_out);
    std::cout << "wrote " << gen_out << " (checksum " << std::hex << weights_checksum(w) << std::dec << ")\n";
  } else if (dec->parsed()) {
    Decoder d(ds);
    const DecodeRun r = d.run();
    std::cout << ByteTokenizer::decode(r.result.tokens) << "\n";
    std::cerr << "tokens: " << r.result.tokens.size() << "\n"
              << "tokens/s: " << static_cast<double>(r.result.tokens.size()) / r.seconds << "\n"
              << "acceptance length: " << r.result.stats.acceptance_length() << "\n";
  } else if (prof->parsed()) {
    const auto w = load_model(prof_model);
    const auto units = parse_units(prof_units);
    if (units.size() != 2) throw ConfigError("profile: exactly two units are required");
    const auto cal_res = calibrate_heads(w, load_calibration(prof_calib), prof_steps, prof_k);
    report_violations(cal_res);
    HeteroRuntime rt(units);
    RuntimeProfiler profiler(w, rt, prof_reps);
    SweepOptions opt;
    opt.refine_budget = prof_refine;
    const Strategy s = profile_strategy(profiler, w.config, units, cal_res.table, parse_list(prof_widths, "--widths"),
                                        parse_list(prof_buckets, "--buckets"), opt);
    detail::write_json_file(prof_out, strategy_to_json(s));
    for (const auto& c : s.provenance.candidates) {
      if (!c.feasible) {
        std::cerr << "width " << c.width << ": skipped (" << c.note << ")\n";
        continue;
      }
      std::cerr << "width " << c.width << ": acceptance " << c.acceptance << ", ratio " << c.ratio << ", median "
                << c.latency.median_ms << " ms\n";
    }
    std::cout << "selected width " << s.width << " -> " << prof_out << "\n";
  } else if (tt->parsed()) {
    const auto table = table_from_json(detail::read_json_file(tt_table));
    VerificationTree tree = greedy_tree(table, tt_width);
    if (tt_refine > 0) {
      const auto eval = tt_trials ? monte_carlo_evaluator(table, tt_trials, tt_seed) : estimator_evaluator(table);
      tree = refine_tree(tree, table, eval, tt_refine).tree;
    }
    detail::write_json_file(tt_out, tree_to_json(tree));
    std::cout << "width " << tree.width() << ", expected acceptance " << expected_acceptance(tree, table) << "\n";
  } else if (cal->parsed()) {
    const auto w = load_model(cal_model);
    const auto res = calibrate_heads(w, load_calibration(cal_calib), cal_steps, cal_k);
    report_violations(res);
    detail::write_json_file(cal_out, table_to_json(res.table));
    std::cout << "calibrated " << res.table.heads() << " heads x " << res.table.ranks() << " ranks over " << res.samples
              << " samples -> " << cal_out << "\n";
  } else if (bench->parsed()) {
    Decoder d(bs);
    std::vector<double> step_ms, tps;
    DecodeRun last;
    for (std::size_t i = 0; i < bench_reps; ++i) {
      last = d.run();
      const double steps = static_cast<double>(std::max<std::size_t>(1, last.result.stats.steps));
      step_ms.push_back(last.seconds * 1e3 / steps);
      tps.push_back(static_cast<double>(last.result.tokens.size()) / last.seconds);
    }
    const auto lat = LatencyStats::from_samples(step_ms);
    const double tokens_per_s = LatencyStats::from_samples(tps).median_ms;
    if (bench_json) {
      Json j = {{"width", last.width},
                {"acceptance_length", last.result.stats.acceptance_length()},
                {"ratio", last.ratio},
                {"units", last.units},
                {"context_bucket", last.bucket},
                {"tokens", last.result.tokens.size()},
                {"timing",
                 {{"median_latency_ms", lat.median_ms},
                  {"p10_latency_ms", lat.p10_ms},
                  {"p90_latency_ms", lat.p90_ms},
                  {"tokens_per_s", tokens_per_s}}}};
      std::cout << j.dump(2) << "\n";
    } else {
      std::cout << "width " << last.width << ", acceptance length " << last.result.stats.acceptance_length()
                << ", median step " << lat.median_ms << " ms, " << tokens_per_s << " tokens/s\n";
    }
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const hetspec::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const hetspec::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFormat;
  } catch (const hetspec::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const hetspec::CapacityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCapacity;
  } catch (const hetspec::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}
