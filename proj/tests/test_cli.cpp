// Runs the markov_mamba executable as a subprocess and checks exit codes and outputs.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include <json.hpp>

#ifndef MARKOV_MAMBA_CLI
#error "MARKOV_MAMBA_CLI must name the CLI executable"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

fs::path work(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("markov_mamba_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Result run(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "stdout.txt";
  const std::string cmd = std::string("\"") + MARKOV_MAMBA_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

fs::path write_tiny_config(const fs::path& dir, bool switching = false) {
  json cfg{{"model", {{"d", 4}, {"N", 4}, {"e", 1}, {"w", 2}}},
           {"data", {{"T", 32}, {"B", 8}, {"switching", switching}}},
           {"train", {{"iterations", 20}, {"seed", 3}}},
           {"eval", {{"every", 10}, {"batch", 16}}}};
  const fs::path p = dir / "tiny.json";
  std::ofstream(p) << cfg.dump(2);
  return p;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  const fs::path dir = work("usage");
  EXPECT_EQ(run("", dir).code, 2);
  EXPECT_EQ(run("frobnicate", dir).code, 2);
  EXPECT_EQ(run("gen-data --no-such-flag", dir).code, 2);
  EXPECT_EQ(run("train --config " + (dir / "missing.json").string(), dir).code, 2);
  std::ofstream(dir / "bad.json") << R"({"train": {"iters": 3}})";
  const Result bad = run("train --config " + (dir / "bad.json").string(), dir);
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.out.find("iters"), std::string::npos) << bad.out;
  EXPECT_EQ(run("train --ablate no-memory --config " + write_tiny_config(dir).string(), dir).code, 2);
  EXPECT_EQ(run("verify-construction --epsilon 2", dir).code, 2);
}

TEST(Cli, GenDataIsReproducibleFromManifest) {
  const fs::path dir = work("gen");
  ASSERT_EQ(run("gen-data -k 2 --beta 0.5 -T 40 -B 5 --seed 11 --out " + (dir / "a").string(), dir).code, 0);
  ASSERT_EQ(run("gen-data -k 2 --beta 0.5 -T 40 -B 5 --seed 11 --out " + (dir / "b").string(), dir).code, 0);
  ASSERT_EQ(run("gen-data --manifest " + (dir / "a" / "manifest.json").string() + " --out " + (dir / "c").string(), dir).code, 0);
  const std::string a = slurp(dir / "a" / "sequences.txt");
  EXPECT_EQ(a, slurp(dir / "b" / "sequences.txt"));
  EXPECT_EQ(a, slurp(dir / "c" / "sequences.txt"));
  std::istringstream lines(a);
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    ++count;
    EXPECT_EQ(line.size(), 40u);
    EXPECT_EQ(line.find_first_not_of("01"), std::string::npos);
  }
  EXPECT_EQ(count, 5);
  const json m = read_json(dir / "a" / "manifest.json");
  EXPECT_EQ(m.at("seed"), 11);
  EXPECT_EQ(m.at("data").at("k"), 2);
  EXPECT_EQ(m.at("count"), 5);
}

TEST(Cli, GenDataSwitchingAlphabet) {
  const fs::path dir = work("gen_switch");
  ASSERT_EQ(run("gen-data --switching --p-switch 0.2 -T 200 -B 3 --seed 4 --out " + dir.string(), dir).code, 0);
  const std::string text = slurp(dir / "sequences.txt");
  EXPECT_EQ(text.find_first_not_of("01S\n"), std::string::npos);
  EXPECT_NE(text.find('S'), std::string::npos);
}

TEST(Cli, TrainWritesRunDirectoryAndReusesIt) {
  const fs::path dir = work("train");
  const std::string args = "train --quiet --config " + write_tiny_config(dir).string() + " --out-root " + dir.string() + " --run-id r";
  const Result first = run(args, dir);
  ASSERT_EQ(first.code, 0) << first.out;
  for (const char* f : {"config.json", "metrics.csv", "checkpoint.json"}) EXPECT_TRUE(fs::exists(dir / "r" / f)) << f;
  EXPECT_EQ(slurp(dir / "r" / "metrics.csv").substr(0, 39), "iter,lr,train_loss,eval_loss,loss_gap\n0");
  const Result second = run(args, dir);
  EXPECT_EQ(second.code, 0);
  EXPECT_NE(second.out.find("reused"), std::string::npos) << second.out;
  EXPECT_EQ(run(args + " --seed 9", dir).code, 2);
  EXPECT_EQ(run(args + " --seed 9 --fresh", dir).code, 0);
}

TEST(Cli, EvalCheckpointAndOracleSentinel) {
  const fs::path dir = work("eval");
  const fs::path cfg = write_tiny_config(dir);
  ASSERT_EQ(run("train --quiet --config " + cfg.string() + " --out-root " + dir.string() + " --run-id r", dir).code, 0);
  const Result ev = run("eval --checkpoint " + (dir / "r" / "checkpoint.json").string(), dir);
  ASSERT_EQ(ev.code, 0) << ev.out;
  for (const char* f : {"eval.json", "match_curve_x0.csv", "match_curve_x1.csv", "at_trajectory.csv"}) {
    EXPECT_TRUE(fs::exists(dir / "r" / "eval" / f)) << f;
  }
  const json rep = read_json(dir / "r" / "eval" / "eval.json");
  EXPECT_GT(rep.at("loss_gap").get<double>(), 0.0);
  EXPECT_EQ(rep.at("sequences"), 16);

  ASSERT_EQ(run("eval --checkpoint oracle --config " + cfg.string() + " --out " + (dir / "o").string(), dir).code, 0);
  const json oracle = read_json(dir / "o" / "eval.json");
  EXPECT_EQ(oracle.at("loss_gap"), 0.0);
  EXPECT_EQ(oracle.at("l1_distance"), 0.0);

  EXPECT_EQ(run("eval --checkpoint " + (dir / "nope.json").string(), dir).code, 2);
}

TEST(Cli, VerifyConstructionCertificates) {
  const fs::path dir = work("verify");
  const Result ok = run("verify-construction --beta 1 --epsilon 0.01 --tmax 12 --out-root " + dir.string() + " --run-id c", dir);
  ASSERT_EQ(ok.code, 0) << ok.out;
  const json cert = read_json(dir / "c" / "certificate.json");
  EXPECT_TRUE(cert.at("valid").get<bool>());
  EXPECT_LE(cert.at("max_kl").get<double>(), 0.01);
  EXPECT_LE(cert.at("max_kl_different_ends").get<double>(), 1e-12);
  EXPECT_EQ(cert.at("positions"), 8190);
  EXPECT_TRUE(fs::exists(dir / "c" / "checkpoint.json"));

  // +10% on alpha_0 stays inside epsilon; doubling it does not.
  const Result small = run("verify-construction --perturb 0.1 --out-root " + dir.string() + " --run-id p1", dir);
  EXPECT_EQ(small.code, 0) << small.out;
  const Result big = run("verify-construction --perturb 1.0 --out-root " + dir.string() + " --run-id p2", dir);
  EXPECT_EQ(big.code, 1) << big.out;
  EXPECT_FALSE(read_json(dir / "p2" / "certificate.json").at("valid").get<bool>());
}

TEST(Cli, SweepWritesGrid) {
  const fs::path dir = work("sweep");
  const Result r = run("sweep --config " + write_tiny_config(dir).string() +
                           " --orders 1,2 --windows 3 --seeds 0 --iterations 10 --threshold 10 --sweep-id s --out-root " +
                           dir.string(),
                       dir);
  ASSERT_EQ(r.code, 0) << r.out;
  const json s = read_json(dir / "s" / "sweep.json");
  ASSERT_EQ(s.at("cells").size(), 2u);
  for (const auto& c : s.at("cells")) EXPECT_EQ(c.at("status"), "pass");
}
