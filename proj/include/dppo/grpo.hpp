#pragma once

#include <span>
#include <vector>

#include "dppo/env.hpp"
#include "dppo/policy.hpp"
#include "dppo/rng.hpp"

namespace dppo {

// One prompt with its G rollouts under the behavior policy.
struct Group {
  int prompt_id = 0;
  std::vector<Completion> completions;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<double> old_log_probs;
  std::vector<std::vector<double>> old_token_log_probs;

  std::size_t size() const { return completions.size(); }
  void validate() const;
};

struct SurrogateConfig {
  double clip_epsilon = 0.2;
  double kl_beta = 0.0;
  bool use_clip = false;
  bool token_level = false;

  void validate() const;
};

// Group-normalized advantages with the population standard deviation. A group
// whose reward std is below 1e-12 gets all-zero advantages.
std::vector<double> compute_advantages(std::span<const double> rewards);

// pi_new(c) / pi_old(c)
double ratio(const PolicyParams& params_new, double old_log_prob,
             const Completion& c);

double clipped_surrogate(double rho, double advantage,
                         const SurrogateConfig& cfg);

// rho_hat - log rho_hat - 1 with rho_hat = pi_ref / pi_theta.
double kl_token(double pi_ref_prob, double pi_theta_prob);

// Everything Psi needs about one rollout. old_token_log_probs is required only
// for token-level configurations.
struct PsiEntry {
  const Completion& completion;
  double advantage = 0.0;
  double old_log_prob = 0.0;
  std::span<const double> old_token_log_probs = {};
};

PsiEntry entry_of(const Group& group, std::size_t i);

// Psi(q, o) = rho * A * grad log pi(o|q). Sequence level by default; with
// token_level the per-position ratios are used with a 1/|o| weight. Clip and
// KL settings are ignored here; see surrogate_gradient.
GradientVector psi(const PolicyParams& params_new, const PsiEntry& entry,
                   const SurrogateConfig& cfg = {});
void add_psi(const PolicyParams& params_new, const PsiEntry& entry,
             const SurrogateConfig& cfg, double scale, GradientVector& out);

// Per-rollout training objective: clipped (if enabled) surrogate minus the
// per-token KL penalty against `ref`, averaged over tokens. `ref` may be null
// when kl_beta == 0.
double surrogate_objective(const PolicyParams& params, const PsiEntry& entry,
                           const SurrogateConfig& cfg,
                           const PolicyParams* ref);
GradientVector surrogate_gradient(const PolicyParams& params,
                                  const PsiEntry& entry,
                                  const SurrogateConfig& cfg,
                                  const PolicyParams* ref);

// Mean per-token KL(pi_theta || pi_ref) estimate over the completion's tokens.
double completion_kl(const PolicyParams& params, const PolicyParams& ref,
                     const Completion& c);

// Samples G completions from the behavior policy and fills rewards,
// advantages, and old log-probabilities.
Group rollout_group(const TaskSpec& spec, const PolicyParams& behavior,
                    int prompt_id, int group_size, RngStream& rng);

// Builds a group from given completions (used by enumeration oracles).
Group make_group(const TaskSpec& spec, const PolicyParams& behavior,
                 std::vector<Completion> completions);

}  // namespace dppo
