#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "hetspec/hetspec.hpp"

using namespace hetspec;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(HETSPEC_CLI_PATH) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("hetspec_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    ASSERT_EQ(cli("gen-model --seed 7 --out " + model()).code, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string path(const std::string& leaf) { return (dir_ / leaf).string(); }
  static std::string model() { return path("model.bin"); }
  static std::string samples(const std::string& leaf) { return std::string(HETSPEC_SAMPLES_DIR) + "/" + leaf; }

  static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, GenModelIsDeterministic) {
  ASSERT_EQ(cli("gen-model --seed 7 --out " + path("again.bin")).code, 0);
  EXPECT_TRUE(load_model(model()) == load_model(path("again.bin")));
  EXPECT_TRUE(load_model(model()) == gen_toy_model(7));
}

TEST_F(Cli, SpeculativeDecodeMatchesSequential) {
  const std::string base = "decode --model " + model() + " --prompt 'Hello there' --max-tokens 40";
  const auto seq = cli(base + " --seq");
  ASSERT_EQ(seq.code, 0);
  EXPECT_FALSE(seq.out.empty());
  const auto w16 = cli(base + " --width 16");
  EXPECT_EQ(w16.code, 0);
  EXPECT_EQ(w16.out, seq.out);
  const auto hcmp = cli(base + " --width 8 --units 'u0:workers=1,throttle=1;u1:workers=1,throttle=1' --ratio 0.25");
  EXPECT_EQ(hcmp.code, 0);
  EXPECT_EQ(hcmp.out, seq.out);
  const auto oracle = cli(base + " --width 5 --acc-table " + samples("acc_table.json") + " --oracle-acc 0.7 --seed 3");
  EXPECT_EQ(oracle.code, 0);
  EXPECT_EQ(oracle.out, seq.out);
}

TEST_F(Cli, TuneTree) {
  ASSERT_EQ(cli("tune-tree --acc-table " + samples("acc_table.json") + " --width 1 --out " + path("t1.json")).code, 0);
  const auto t1 = detail::read_json_file(path("t1.json"));
  EXPECT_TRUE(t1.at("nodes").empty());
  ASSERT_EQ(cli("tune-tree --acc-table " + samples("acc_table.json") + " --width 9 --refine-budget 50 --out " +
                path("t9.json"))
                .code,
            0);
  EXPECT_EQ(tree_from_json(detail::read_json_file(path("t9.json"))).width(), 9u);
  EXPECT_EQ(cli("tune-tree --acc-table " + samples("acc_table.json") + " --width 1000 --out " + path("t.json")).code, 5);
}

TEST_F(Cli, CalibrateWritesTable) {
  ASSERT_EQ(cli("calibrate --model " + model() + " --calib " + samples("calib.jsonl") + " --k 2 --steps 4 --out " +
                path("acc.json"))
                .code,
            0);
  const auto t = table_from_json(detail::read_json_file(path("acc.json")));
  EXPECT_EQ(t.heads(), 4u);
  EXPECT_EQ(t.ranks(), 2u);
}

TEST_F(Cli, ProfileThenBenchJson) {
  const auto prof = cli("profile --model " + model() + " --calib " + samples("calib.jsonl") +
                        " --widths 1,2,4 --buckets 16,64 --reps 3 --steps 4 --k 2 --out " + path("strategy.json"));
  ASSERT_EQ(prof.code, 0);
  const Strategy s = strategy_from_json(detail::read_json_file(path("strategy.json")));
  EXPECT_EQ(s.plans.size(), 2u);
  EXPECT_EQ(s.provenance.candidates.size(), 3u);

  const auto bench = cli("bench --model " + model() + " --strategy " + path("strategy.json") +
                         " --reps 2 --max-tokens 12 --json");
  ASSERT_EQ(bench.code, 0);
  const Json j = Json::parse(bench.out);
  EXPECT_EQ(j.at("width").get<std::size_t>(), s.width);
  EXPECT_GE(j.at("acceptance_length").get<double>(), 1.0);
  EXPECT_TRUE(j.contains("ratio"));
  EXPECT_TRUE(j.contains("units"));
  EXPECT_TRUE(j.contains("context_bucket"));
  const auto& timing = j.at("timing");
  for (const char* k : {"median_latency_ms", "p10_latency_ms", "p90_latency_ms", "tokens_per_s"})
    EXPECT_GT(timing.at(k).get<double>(), 0.0) << k;

  const auto dec = cli("decode --model " + model() + " --strategy " + path("strategy.json") +
                       " --prompt 'Hello there' --max-tokens 40");
  EXPECT_EQ(dec.code, 0);
  EXPECT_EQ(dec.out, cli("decode --model " + model() + " --prompt 'Hello there' --max-tokens 40 --seq").out);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("decode --model " + model() + " --bogus").code, 2);
  EXPECT_EQ(cli("decode --model /nonexistent.bin --prompt hi --seq").code, 3);
  {
    std::ofstream(path("junk.bin")) << "not a model";
  }
  EXPECT_EQ(cli("decode --model " + path("junk.bin") + " --prompt hi --seq").code, 4);
  EXPECT_EQ(cli("decode --model " + model() + " --prompt hi --width 4 --units 'u0:workers=0'").code, 5);
  EXPECT_EQ(cli("decode --model " + model() + " --prompt hi").code, 5);
  EXPECT_EQ(cli("decode --model " + model() + " --prompt hi --seq --max-tokens 100000").code, 6);
  EXPECT_EQ(cli("decode --model " + model() + " --prompt '' --seq").code, 7);
  {
    std::ofstream(path("empty.jsonl")) << "\n";
  }
  EXPECT_EQ(cli("calibrate --model " + model() + " --calib " + path("empty.jsonl") + " --out " + path("x.json")).code, 7);
  EXPECT_EQ(cli("tune-tree --acc-table " + path("junk.bin") + " --width 2 --out " + path("x.json")).code, 4);
}
