#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dppo/env.hpp"
#include "dppo/trainer.hpp"

namespace dppo {

struct VerifyConfig {
  std::size_t trials = 100'000;  // Monte-Carlo draws per sampling/variance check
  double fd_step = 1e-6;
};

// Synthetic length profiles for the packing benchmark.
struct PackBenchConfig {
  int num_prompts = 256;
  int l_max = 16;
  int num_profiles = 20;
  // uniform_max: every length l_max; mixed: uniform in {2..l_max};
  // short_heavy: 3/4 of lengths in {2..l_max/4}, the rest up to l_max.
  std::vector<std::string> distributions = {"uniform_max", "mixed",
                                            "short_heavy"};
};

struct RunConfig {
  TaskSpec task = default_task_spec();
  TrainConfig train;
  VerifyConfig verify;
  PackBenchConfig pack_bench;
  std::string output_dir = "out";
};

// Flat key=value text: '#' starts a comment, blank lines are ignored, keys
// carry dotted section prefixes (pruning.r_o). Unknown keys, duplicates and
// out-of-range values raise ConfigError with the offending line.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

// The effective configuration, every key explicit, in a form parse_config
// reads back to an identical RunConfig.
std::string format_config(const RunConfig& cfg);

bool is_pack_distribution(std::string_view name);

}  // namespace dppo
