#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "dppo/commands.hpp"
#include "dppo/io.hpp"

using namespace dppo;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "dppo_test_commands" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CommandOptions options(const fs::path& dir, const std::string& config) {
  atomic_write(dir / "run.cfg", config);
  CommandOptions o;
  o.config = dir / "run.cfg";
  o.out = dir / "out";
  return o;
}

}  // namespace

TEST_CASE("train writes its outputs") {
  const fs::path dir = scratch("train");
  std::ostringstream log, err;
  const auto opts = options(dir, "seed=5\ntrain.epochs=3\n");
  REQUIRE(cmd_train(opts, log, err) == kExitOk);
  for (const char* f : {"metrics.jsonl", "summary.csv", "curves.csv", "effective_config.cfg"})
    CHECK(fs::exists(dir / "out" / f));
  const std::string summary = read_file(dir / "out" / "summary.csv");
  CHECK(summary.rfind("r_q,r_o,seed,final_reward,completions_used,wallclock_micros\n", 0) == 0);
  CHECK(summary.find("\n0,0,5,") != std::string::npos);
  const std::string curves = read_file(dir / "out" / "curves.csv");
  CHECK(std::count(curves.begin(), curves.end(), '\n') == 4);
  CHECK(summary.find('\r') == std::string::npos);
}

TEST_CASE("invalid config exits nonzero with the line") {
  const fs::path dir = scratch("invalid");
  std::ostringstream log, err;
  const auto opts = options(dir, "seed=1\npruning.r_q=1.0\n");
  CHECK(cmd_train(opts, log, err) == kExitConfig);
  CHECK(err.str().find("line 2") != std::string::npos);
  CHECK(err.str().find("r_q < 1") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "out" / "summary.csv"));
}

TEST_CASE("overrides and echo reproduce the run") {
  const fs::path dir = scratch("echo");
  std::ostringstream log, err;
  auto opts = options(dir, "train.epochs=4\npruning.r_o=0.5\n");
  opts.seed = 77;
  opts.workers = 2;
  REQUIRE(cmd_train(opts, log, err) == kExitOk);
  const std::string first = read_file(dir / "out" / "summary.csv");
  CHECK(first.find(",77,") != std::string::npos);

  CommandOptions again;
  again.config = dir / "out" / "effective_config.cfg";
  again.out = dir / "again";
  REQUIRE(cmd_train(again, log, err) == kExitOk);
  CHECK(read_file(dir / "again" / "summary.csv") == first);
  CHECK(read_file(dir / "again" / "metrics.jsonl") == read_file(dir / "out" / "metrics.jsonl"));
}

TEST_CASE("verify refuses tasks above the enumeration cap") {
  const fs::path dir = scratch("verify_cap");
  std::ostringstream log, err;
  const auto opts = options(dir, "task.vocab_size=11\ntask.completion_len=4\n");
  CHECK(cmd_verify(opts, log, err) == kExitCapacity);
  CHECK(err.str().find("capacity") != std::string::npos);
}

TEST_CASE("pack bench") {
  const fs::path dir = scratch("pack");
  std::ostringstream log, err;
  REQUIRE(cmd_pack_bench(options(dir, "pack_bench.num_prompts=0\n"), log, err) == kExitOk);
  CHECK(read_file(dir / "out" / "pack_bench.csv") ==
        "distribution,strategy,num_profiles,num_prompts,l_max,n_win,sequences,"
        "valid_tokens,allocated_tokens,density\n");

  const fs::path dir2 = scratch("pack2");
  REQUIRE(cmd_pack_bench(options(dir2, "pack_bench.num_profiles=3\n"), log, err) == kExitOk);
  const std::string csv = read_file(dir2 / "out" / "pack_bench.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3 * 3);
  CHECK(csv.find("uniform_max,off,3,256,16,4,768,12288,12288,1\n") != std::string::npos);
}

TEST_CASE("atomic write leaves no temp file") {
  const fs::path dir = scratch("atomic");
  atomic_write(dir / "a.txt", "one");
  atomic_write(dir / "a.txt", "two");
  CHECK(read_file(dir / "a.txt") == "two");
  CHECK_FALSE(fs::exists(dir / "a.txt.tmp"));
}
