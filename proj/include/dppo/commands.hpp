#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dppo/config.hpp"
#include "dppo/grpo.hpp"
#include "dppo/policy.hpp"
#include "dppo/pruning.hpp"

namespace dppo {

enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitCapacity = 4,
  kExitDegenerate = 5,
  kExitRuntime = 6,
};

struct CommandOptions {
  std::filesystem::path config;
  std::optional<std::filesystem::path> out;
  std::optional<int> workers;
  std::optional<std::uint64_t> seed;
};

// Loads the config and applies command-line overrides.
RunConfig resolve_config(const CommandOptions& opts);

// Fixed batch used by the verification suite: a perturbed behavior policy, one
// rollout group per prompt, and history scores from those groups (epoch 2).
struct VerifyFixture {
  PolicyParams behavior;
  PolicyParams params;
  std::vector<Group> groups;
  HistoryStore history{0};
  std::vector<bool> prompt_candidates;
};

VerifyFixture make_verify_fixture(const TaskSpec& spec, const TrainConfig& cfg);

// Each command writes its files under the output directory and returns an
// ExitCode; diagnostics go to `err`.
int cmd_train(const CommandOptions& opts, std::ostream& log, std::ostream& err);
int cmd_verify(const CommandOptions& opts, std::ostream& log, std::ostream& err);
int cmd_pack_bench(const CommandOptions& opts, std::ostream& log,
                   std::ostream& err);

// Synthetic prompt lengths for one benchmark profile.
std::vector<int> pack_profile(const std::string& distribution, int num_prompts,
                              int l_max, std::uint64_t seed, int profile);

}  // namespace dppo
