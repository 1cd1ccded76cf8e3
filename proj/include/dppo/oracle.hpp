#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "dppo/env.hpp"
#include "dppo/grpo.hpp"
#include "dppo/policy.hpp"
#include "dppo/pruning.hpp"

namespace dppo {

enum class PruneLevel { completion, prompt, hierarchical };

std::string_view to_string(PruneLevel level);
std::string_view to_string(PruneMode mode);

inline constexpr std::size_t kPlanCap = 1'000'000;

// One keep/drop outcome of a level with its exact probability.
struct LevelPlan {
  std::vector<bool> keep;
  double probability = 0.0;
};

// Number of outcomes enumerate_level_plans would list.
std::size_t level_plan_count(const std::vector<bool>& candidate, double rate,
                             PruneMode mode);

// Every outcome of the pruning design on one level, written from the design's
// definition: independent drops (with the single-survivor resurrection when
// every item is dropped) or a uniformly random floor(rate * C)-subset.
std::vector<LevelPlan> enumerate_level_plans(const std::vector<bool>& candidate,
                                             double rate, PruneMode mode,
                                             std::size_t cap = kPlanCap);

// Pruning rates actually applied at each level.
PruningConfig level_config(const PruningConfig& cfg, PruneLevel level);

struct UnbiasednessReport {
  double max_abs_deviation = 0.0;
  std::size_t num_plans_enumerated = 0;
  PruneMode mode = PruneMode::deterministic_fraction;
  PruneLevel level = PruneLevel::completion;
  double r_o = 0.0;
  double r_q = 0.0;
  bool joint = false;  // full joint enumeration vs. per-level factorization
};

// A fixed batch of rollouts to take pruning expectations over.
struct UnbiasednessProblem {
  std::vector<Group> groups;
  PolicyParams params;
  SurrogateConfig surrogate;
  std::vector<bool> prompt_candidates;  // aligned with groups
};

// (1/|Q|) sum_k (1/G_k) sum_i x_{k,i}, each sum taken before its division
GradientVector unpruned_average(
    std::span<const std::vector<GradientVector>> per_completion);

// Exact expectation of the rescaled estimator over all pruning plans.
// Completion plans of different groups are independent, so the expectation
// is taken level by level through the trainer's own composition functions
// (combine_group, combine_prompts). `plans` receives the number of outcomes
// visited.
GradientVector expected_pruned_estimate(
    std::span<const std::vector<GradientVector>> per_completion,
    std::span<const std::vector<bool>> completion_candidates,
    const std::vector<bool>& prompt_candidates, const PruningConfig& cfg,
    PruneLevel level, std::size_t* plans = nullptr,
    std::size_t cap = kPlanCap);

// Enumerates every joint plan and calls estimate_gradient on each. Throws
// CapacityError if the joint count exceeds `cap`.
GradientVector expected_pruned_estimate_joint(const UnbiasednessProblem& problem,
                                              const PruningConfig& cfg,
                                              PruneLevel level,
                                              std::size_t* plans = nullptr,
                                              std::size_t cap = kPlanCap);

// Joint enumeration when it fits in `joint_limit` plans, factorized otherwise.
UnbiasednessReport exact_unbiasedness(const UnbiasednessProblem& problem,
                                      const PruningConfig& cfg,
                                      PruneLevel level,
                                      std::size_t joint_limit = 20'000,
                                      std::size_t cap = kPlanCap);

// (1 - beta r)(1 - (1 - beta) r) / (1 - r)
double variance_factor(double beta, double r_q);

GradientVector central_difference(
    const PolicyParams& params,
    const std::function<double(const PolicyParams&)>& objective, double h);

// max_j |analytic_j - fd_j| / max(|analytic|_inf, |fd|_inf)
double finite_diff_check(
    const PolicyParams& params,
    const std::function<double(const PolicyParams&)>& objective,
    const GradientVector& analytic, double h);

// Expected full-batch GRPO gradient (1/|Q|) sum_q E[(1/G) sum_i Psi_i] with
// the expectation over every ordered G-tuple of completions drawn from
// `behavior`. Throws CapacityError above `cap` tuples per prompt.
GradientVector exact_grpo_gradient(const TaskSpec& spec,
                                   const PolicyParams& behavior,
                                   const PolicyParams& params, int group_size,
                                   std::size_t cap = kPlanCap);

struct SamplingReport {
  std::size_t trials = 0;
  GradientVector mean;
  GradientVector standard_error;
  GradientVector exact;
  double max_z = 0.0;  // max_j |mean_j - exact_j| / se_j
  double max_abs_deviation = 0.0;
  bool within(double z) const { return max_z <= z; }
};

// Monte-Carlo mean of the hierarchical estimator over fresh rollouts and
// pruning draws, against exact_grpo_gradient. Prompt candidates come from
// `history` (which must be past epoch 1 for prompt pruning to act).
SamplingReport sampling_unbiasedness(const TaskSpec& spec,
                                     const PolicyParams& behavior,
                                     const PolicyParams& params,
                                     const HistoryStore& history,
                                     const PruningConfig& cfg, int group_size,
                                     std::size_t trials, std::uint64_t seed,
                                     int workers = 1);

// Single-draw variance of a rescaled value under pruning: items carry base
// probabilities (summing to 1) and drop probabilities. With
// C = sum base (1 - p), the rescaled draw is gamma x with x ~ base (1 - p) / C
// and gamma = C / (1 - p). Variances are traces of the covariance.
struct SingleDrawVariance {
  double var_full = 0.0;
  double var_pruned = 0.0;
  // E_{candidates}[|x|^2 / (1 - p)] <= E[|x|^2]
  bool condition_holds = true;
};

SingleDrawVariance single_draw_variance(std::span<const GradientVector> values,
                                        std::span<const double> base,
                                        std::span<const double> drop);

// Population view of a task: every completion of every prompt with its
// behavior probability, the advantage (r - mu_q) / sigma_q under the behavior
// policy, and Psi at `params`.
struct VarianceInstance {
  std::vector<std::vector<double>> probs;
  std::vector<std::vector<double>> advantages;
  std::vector<std::vector<GradientVector>> psi;
  std::vector<std::vector<bool>> completion_candidates;
  std::vector<double> scores;  // E|A| per prompt
  std::vector<bool> prompt_candidates;
  std::vector<GradientVector> prompt_means;  // G(q)
};

VarianceInstance build_variance_instance(const TaskSpec& spec,
                                         const PolicyParams& behavior,
                                         const PolicyParams& params,
                                         double beta);

struct LevelVarianceReport {
  std::vector<SingleDrawVariance> completion;  // one per prompt
  SingleDrawVariance prompt;
};

LevelVarianceReport per_level_variance(const VarianceInstance& inst,
                                       const PruningConfig& cfg);

struct VarianceReport {
  std::size_t trials = 0;
  double var_pruned = 0.0;        // Monte-Carlo trace covariance
  double var_pruned_se = 0.0;     // jackknife standard error
  double var_pruned_exact = 0.0;  // by enumeration
  double var_between = 0.0;       // Var_Q[G(q)]
  double mean_within = 0.0;       // E_q[Var_O[Psi]]
  double bound_factor = 1.0;
  double bound_value = 0.0;
  bool completion_condition = true;
  bool prompt_condition = true;
  bool satisfied = false;
};

// Hierarchical single-draw estimator gamma(q) gamma(o,q) Psi(q,o), with
// q ~ uniform prompts kept with prob 1 - P^q and o ~ behavior kept with prob
// 1 - P^o. satisfied = var_pruned <= bound_value + 3 * var_pruned_se.
VarianceReport empirical_variance(const TaskSpec& spec,
                                  const PolicyParams& behavior,
                                  const PolicyParams& params,
                                  const PruningConfig& cfg, std::size_t trials,
                                  std::uint64_t seed, int workers = 1);

// Behavior policy on which the low-score condition holds: even prompts are
// saturated on their target (zero reward variance), odd prompts put 0.45 on
// the target at every position.
PolicyParams low_score_instance(const TaskSpec& spec);

}  // namespace dppo
