#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "caat/cli.hpp"
#include "caat/train.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result caat_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "caat");
  std::ostringstream out, err;
  const int code = caat::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("caat_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small enough for sub-second runs.
std::vector<std::string> tiny_train(const fs::path& out) {
  return {"train", "--layers", "2", "--hidden", "16", "--heads", "4", "--seq-len", "8",
          "--batch", "2", "--steps", "4", "--eval-every", "2", "--synthetic", "--out",
          out.string()};
}

std::vector<std::string> with(std::vector<std::string> base, std::initializer_list<std::string> more) {
  base.insert(base.end(), more);
  return base;
}

}  // namespace

TEST(CliTrain, WritesArtifacts) {
  const fs::path dir = scratch("train");
  const Result r = caat_cli(with(tiny_train(dir / "run"), {"--p", "0.5", "--tp", "2", "--placement", "h"}));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"config.txt", "run_manifest.txt", "metrics.csv", "comm_ledger.csv",
                        "checkpoint/manifest.txt"}) {
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  }
  std::istringstream metrics(slurp(dir / "run" / "metrics.csv"));
  const auto rows = caat::read_metrics_csv(metrics);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_GT(rows.back().comm_fwd_elems, 0u);
  EXPECT_GT(rows.back().norm_sync_elems, 0u);
  const caat::TrainConfig cfg = caat::load_train_config(dir / "run" / "config.txt");
  EXPECT_EQ(cfg.model.p, 0.5);
  EXPECT_EQ(cfg.model.ranks, 2u);
  EXPECT_NE(slurp(dir / "run" / "run_manifest.txt").find("status=ok"), std::string::npos);
}

TEST(CliTrain, ConfigFileWithFlagOverrides) {
  const fs::path dir = scratch("cfgfile");
  std::ofstream(dir / "toy.cfg") << "# toy\nlayers=2\nhidden=16\nheads=4\nseq_len=8\nbatch=2\n"
                                    "steps=2\neval_every=1\ntp=4\np=0.25\nsynthetic=on\n";
  const Result r = caat_cli({"train", "--config", (dir / "toy.cfg").string(), "--p", "0.5",
                             "--tp", "2", "--out", (dir / "run").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const caat::TrainConfig cfg = caat::load_train_config(dir / "run" / "config.txt");
  EXPECT_EQ(cfg.model.p, 0.5);
  EXPECT_EQ(cfg.model.ranks, 2u);
  EXPECT_EQ(cfg.model.layers, 2u);
}

TEST(CliTrain, UsageErrorsExitTwoBeforeCompute) {
  const fs::path dir = scratch("usage");
  EXPECT_EQ(caat_cli(with(tiny_train(dir / "a"), {"--p", "1.5"})).code, 2);
  EXPECT_FALSE(fs::exists(dir / "a"));
  EXPECT_EQ(caat_cli(with(tiny_train(dir / "b"), {"--tp", "3"})).code, 2);
  EXPECT_EQ(caat_cli(with(tiny_train(dir / "c"), {"--placement", "x"})).code, 2);
  EXPECT_EQ(caat_cli(with(tiny_train(dir / "d"), {"--data", "/nonexistent"})).code, 2);
  EXPECT_EQ(caat_cli({"train", "--data", "x", "--synthetic"}).code, 2);
  EXPECT_EQ(caat_cli({"train", "--config", (dir / "missing.cfg").string()}).code, 2);
  EXPECT_EQ(caat_cli({"train", "--bogus"}).code, 2);
  EXPECT_EQ(caat_cli({}).code, 2);
  EXPECT_EQ(caat_cli({"--help"}).code, 0);
}

TEST(CliTrain, ZeroStepsWritesInitialRowOnly) {
  const fs::path dir = scratch("zero");
  std::vector<std::string> args = tiny_train(dir / "run");
  args[12] = "0";  // --steps
  ASSERT_EQ(args[11], "--steps");
  ASSERT_EQ(caat_cli(args).code, 0);
  const std::string csv = slurp(dir / "run" / "metrics.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_NE(csv.find("\n0,,"), std::string::npos);
}

TEST(CliTrain, RerunReproducesMetricsBytes) {
  const fs::path dir = scratch("rerun");
  for (const char* mask : {"none", "random"}) {
    ASSERT_EQ(caat_cli(with(tiny_train(dir / "a"), {"--mask", mask, "--p", "0.5", "--tp", "2"})).code, 0);
    ASSERT_EQ(caat_cli(with(tiny_train(dir / "b"), {"--mask", mask, "--p", "0.5", "--tp", "2"})).code, 0);
    EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
    EXPECT_EQ(slurp(dir / "a" / "comm_ledger.csv"), slurp(dir / "b" / "comm_ledger.csv"));
  }
}

TEST(CliTrain, SeedFallsBackToEnvironment) {
  const fs::path dir = scratch("seed");
  ::setenv("CAAT_SEED", "17", 1);
  ASSERT_EQ(caat_cli(tiny_train(dir / "env")).code, 0);
  ASSERT_EQ(caat_cli(with(tiny_train(dir / "flag"), {"--seed", "3"})).code, 0);
  ::setenv("CAAT_SEED", "not-a-number", 1);
  EXPECT_EQ(caat_cli(tiny_train(dir / "bad")).code, 2);
  ::unsetenv("CAAT_SEED");
  EXPECT_EQ(caat::load_train_config(dir / "env" / "config.txt").model.seed, 17u);
  EXPECT_EQ(caat::load_train_config(dir / "flag" / "config.txt").model.seed, 3u);
}

TEST(CliInfer, LogicalCheckAndDeterminism) {
  const fs::path dir = scratch("infer");
  ASSERT_EQ(caat_cli(with(tiny_train(dir / "run"), {"--tp", "2", "--p", "0.5"})).code, 0);
  const std::string ckpt = (dir / "run" / "checkpoint").string();
  const Result a = caat_cli({"infer", "--ckpt", ckpt, "--check-logical", "--prompt-bytes", "ab"});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.out.find("max_diff=0\n"), std::string::npos) << a.out;
  EXPECT_NE(a.out.find("logical_comm_elems=0"), std::string::npos);
  EXPECT_EQ(a.out, caat_cli({"infer", "--ckpt", ckpt, "--check-logical", "--prompt-bytes", "ab"}).out);
  const Result logical = caat_cli({"infer", "--ckpt", ckpt, "--prompt-bytes", "ab"});
  const Result ranked = caat_cli({"infer", "--ckpt", ckpt, "--prompt-bytes", "ab", "--mode", "ranked"});
  EXPECT_EQ(logical.out.substr(logical.out.find("tokens=")),
            ranked.out.substr(ranked.out.find("tokens=")));
}

TEST(CliInfer, MissingCheckpointIsUsageError) {
  EXPECT_EQ(caat_cli({"infer", "--ckpt", "/nonexistent/ckpt"}).code, 2);
  EXPECT_EQ(caat_cli({"infer"}).code, 2);
}

TEST(CliPerfModel, SinglePointAndErrors) {
  const Result r = caat_cli({"perfmodel", "--h", "768", "--s", "1024", "--r", "8", "--C", "1000", "--p", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("speedup=0\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("p_star=1\n"), std::string::npos);
  EXPECT_EQ(caat_cli({"perfmodel", "--h", "768", "--s", "1024", "--r", "8", "--p", "1"}).code, 2);
  EXPECT_EQ(caat_cli({"perfmodel", "--h", "768", "--s", "1024", "--r", "8", "--C", "1000"}).code, 2);
  EXPECT_EQ(caat_cli({"perfmodel", "--h", "768", "--s", "1024", "--r", "8", "--C", "1000", "--p", "2"}).code, 2);
}

TEST(CliPerfModel, SweepCsv) {
  const fs::path dir = scratch("perf");
  const Result r = caat_cli({"perfmodel", "--h", "768", "--s", "1024", "--r", "8", "--C", "1e4",
                             "--sweep", "5", "--csv", (dir / "s.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(dir / "s.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "p,G,P,T,speedup");
  EXPECT_NE(csv.find("\n1,"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "s_summary.csv"));
  const Result stdout_sweep = caat_cli({"perfmodel", "--h", "8", "--s", "8", "--r", "2", "--C", "4", "--sweep", "3"});
  EXPECT_NE(stdout_sweep.out.find("0.5,"), std::string::npos);
}

TEST(CliCommstats, ConfigReductions) {
  const fs::path dir = scratch("comm");
  auto cfg = [&](const std::string& name, const std::string& extra) {
    std::ofstream(dir / name) << "layers=2\nhidden=16\nheads=4\nseq_len=8\nbatch=2\ntp=2\n" << extra;
    return (dir / name).string();
  };
  Result r = caat_cli({"commstats", "--config", cfg("half.cfg", "p=0.5\n")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("reduction_pct=50\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("measured_equals_analytic=yes"), std::string::npos);
  r = caat_cli({"commstats", "--config", cfg("full.cfg", "p=1\n")});
  EXPECT_NE(r.out.find("reduction_pct=0\n"), std::string::npos) << r.out;
  r = caat_cli({"commstats", "--config", cfg("mask.cfg", "p=0.5\nmask=topk\n")});
  EXPECT_NE(r.out.find("reduction_pct=12.5\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("measured_equals_analytic=yes"), std::string::npos);
  EXPECT_EQ(caat_cli({"commstats"}).code, 2);
  EXPECT_EQ(caat_cli({"commstats", "--config", "a", "--metrics", "b"}).code, 2);
}

TEST(CliCommstats, MetricsAgainstBaselineRun) {
  const fs::path dir = scratch("commrun");
  ASSERT_EQ(caat_cli(with(tiny_train(dir / "half"), {"--tp", "2", "--p", "0.5"})).code, 0);
  ASSERT_EQ(caat_cli(with(tiny_train(dir / "full"), {"--tp", "2", "--p", "1"})).code, 0);
  const Result r = caat_cli({"commstats", "--metrics", (dir / "half" / "metrics.csv").string(),
                             "--baseline", (dir / "full" / "metrics.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("reduction_pct=50\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("measured_equals_analytic=yes"), std::string::npos);
}
