#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dppo/env.hpp"
#include "dppo/grpo.hpp"
#include "dppo/packing.hpp"
#include "dppo/policy.hpp"
#include "dppo/pruning.hpp"

namespace dppo {

struct TrainConfig {
  int epochs = 60;
  int group_size = 5;
  double learning_rate = 0.5;
  SurrogateConfig surrogate;
  PruningConfig pruning;
  std::uint64_t seed = 0;
  // Sequence slots per batch. With packing off every slot holds one prompt;
  // with packing on a slot holds every prompt packed into that sequence.
  int batch_prompts = 2;
  PackStrategy pack_strategy = PackStrategy::off;
  int l_max = 0;  // 0: longest prompt in the task
  int n_win = 4;
  int workers = 1;
  double init_scale = 0.0;  // half-width of uniform init noise on the logits
  bool record_wallclock = false;

  void validate() const;
};

struct StepMetrics {
  int epoch = 0;
  int batch = 0;
  double mean_reward = 0.0;      // rollouts of the kept prompts
  double expected_reward = 0.0;  // exact, of the policy after the step
  double pg_loss = 0.0;
  double kl = 0.0;
  int prompts_kept = 0;
  int prompts_total = 0;
  int completions_kept = 0;
  int completions_total = 0;
  double grad_norm = 0.0;
  std::int64_t wallclock_micros = 0;
  bool skipped = false;
};

struct TrainResult {
  PolicyParams params;
  std::vector<StepMetrics> metrics;
  HistoryStore history{0};
  // Epoch at which each prompt's history score was last written (0 = never).
  std::vector<int> history_written_at;
  int total_batches = 0;
  int skipped_batches = 0;
  long long completions_used = 0;
  long long completions_unpruned = 0;
};

// Per-group rescaled average (1/|S|) sum_{kept} gamma_i x_i.
GradientVector combine_group(std::span<const GradientVector> per_completion,
                             const LevelDecision& decision);

// Prompt-level composition (1/|S^q|) sum_{kept} gamma_q x_q. Entries of
// dropped prompts are ignored. Throws DegenerateBatch when nothing is kept.
GradientVector combine_prompts(std::span<const GradientVector> per_prompt,
                               const LevelDecision& decision);

// Gradient contribution of one rollout: Psi for the plain unclipped,
// KL-free configuration, otherwise the full surrogate gradient.
GradientVector completion_gradient(const PolicyParams& params,
                                   const PsiEntry& entry,
                                   const SurrogateConfig& cfg,
                                   const PolicyParams* ref);

// The pruned, rescaled batch gradient; groups[k] pairs with
// plan.prompt_ids[k]. With r_o = r_q = 0 this is
// (1/|Q|) sum_q (1/G) sum_i Psi.
GradientVector estimate_gradient(std::span<const Group> groups,
                                 const PruningPlan& plan,
                                 const PolicyParams& params,
                                 const SurrogateConfig& cfg,
                                 const PolicyParams* ref = nullptr);

// Prompt ids per batch in schedule order (packing applied if enabled).
std::vector<std::vector<int>> make_batches(const TaskSpec& spec,
                                           const TrainConfig& cfg);

PolicyParams initial_params(const TaskSpec& spec, const TrainConfig& cfg);

// Exact expected reward of the policy, averaged over prompts.
double expected_reward(const TaskSpec& spec, const PolicyParams& params);

TrainResult train(const TaskSpec& spec, const TrainConfig& cfg);

}  // namespace dppo
