#include "dppo/grpo.hpp"

#include <algorithm>
#include <cmath>

#include "dppo/error.hpp"

namespace dppo {

void Group::validate() const {
  const std::size_t g = completions.size();
  if (g < 2) throw InvalidInput("group: needs at least two completions");
  if (rewards.size() != g || advantages.size() != g ||
      old_log_probs.size() != g)
    throw InvalidInput("group: list lengths differ");
  if (!old_token_log_probs.empty() && old_token_log_probs.size() != g)
    throw InvalidInput("group: token log-prob list length differs");
}

void SurrogateConfig::validate() const {
  if (!(clip_epsilon >= 0.0 && clip_epsilon < 1.0))
    throw InvalidInput("surrogate: clip_epsilon must be in [0, 1)");
  if (!(kl_beta >= 0.0)) throw InvalidInput("surrogate: kl_beta must be >= 0");
}

std::vector<double> compute_advantages(std::span<const double> rewards) {
  const std::size_t n = rewards.size();
  if (n < 2) throw InvalidInput("compute_advantages: group size must be >= 2");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(n);
  const double sd = std::sqrt(var);
  std::vector<double> adv(n, 0.0);
  if (sd < 1e-12) return adv;
  for (std::size_t i = 0; i < n; ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

double ratio(const PolicyParams& params_new, double old_log_prob,
             const Completion& c) {
  if (!std::isfinite(old_log_prob))
    throw InvalidInput("ratio: old_log_prob must be finite");
  return std::exp(log_prob(params_new, c) - old_log_prob);
}

double clipped_surrogate(double rho, double advantage,
                         const SurrogateConfig& cfg) {
  const double unclipped = rho * advantage;
  if (!cfg.use_clip) return unclipped;
  const double clipped =
      std::clamp(rho, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) *
      advantage;
  return std::min(unclipped, clipped);
}

double kl_token(double pi_ref_prob, double pi_theta_prob) {
  if (!(pi_ref_prob > 0.0) || !(pi_theta_prob > 0.0))
    throw InvalidInput("kl_token: probabilities must be positive");
  const double r = pi_ref_prob / pi_theta_prob;
  return r - std::log(r) - 1.0;
}

PsiEntry entry_of(const Group& group, std::size_t i) {
  PsiEntry e{group.completions[i], group.advantages[i],
             group.old_log_probs[i]};
  if (!group.old_token_log_probs.empty())
    e.old_token_log_probs = group.old_token_log_probs[i];
  return e;
}

namespace {

std::span<const double> require_token_log_probs(const PsiEntry& entry) {
  if (entry.old_token_log_probs.size() != entry.completion.tokens.size())
    throw InvalidInput(
        "psi: token-level mode needs per-token old log-probabilities");
  return entry.old_token_log_probs;
}

// Whether the unclipped branch of min(rho A, clip(rho) A) is active. At the
// tie the unclipped derivative is taken.
bool unclipped_active(double rho, double advantage,
                      const SurrogateConfig& cfg) {
  if (!cfg.use_clip) return true;
  const double clipped =
      std::clamp(rho, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) *
      advantage;
  return rho * advantage <= clipped;
}

}  // namespace

void add_psi(const PolicyParams& params_new, const PsiEntry& entry,
             const SurrogateConfig& cfg, double scale, GradientVector& out) {
  if (!std::isfinite(entry.advantage))
    throw InvalidInput("psi: advantage must be finite");
  if (entry.advantage == 0.0) return;
  const Completion& c = entry.completion;
  if (!cfg.token_level) {
    const double rho = ratio(params_new, entry.old_log_prob, c);
    add_score(params_new, c, scale * rho * entry.advantage, out);
    return;
  }
  const auto old_lp = require_token_log_probs(entry);
  const auto new_lp = token_log_probs(params_new, c);
  const double inv_len = 1.0 / static_cast<double>(c.tokens.size());
  for (std::size_t t = 0; t < c.tokens.size(); ++t) {
    const double rho_t = std::exp(new_lp[t] - old_lp[t]);
    add_token_score(params_new, c, static_cast<int>(t),
                    scale * inv_len * rho_t * entry.advantage, out);
  }
}

GradientVector psi(const PolicyParams& params_new, const PsiEntry& entry,
                   const SurrogateConfig& cfg) {
  GradientVector g(params_new.shape().size());
  add_psi(params_new, entry, cfg, 1.0, g);
  return g;
}

double surrogate_objective(const PolicyParams& params, const PsiEntry& entry,
                           const SurrogateConfig& cfg,
                           const PolicyParams* ref) {
  const Completion& c = entry.completion;
  const auto new_lp = token_log_probs(params, c);
  const double inv_len = 1.0 / static_cast<double>(c.tokens.size());
  double value = 0.0;
  if (cfg.token_level) {
    const auto old_lp = require_token_log_probs(entry);
    for (std::size_t t = 0; t < c.tokens.size(); ++t)
      value += inv_len * clipped_surrogate(std::exp(new_lp[t] - old_lp[t]),
                                           entry.advantage, cfg);
  } else {
    double lp = 0.0;
    for (double v : new_lp) lp += v;
    value = clipped_surrogate(std::exp(lp - entry.old_log_prob),
                              entry.advantage, cfg);
  }
  if (cfg.kl_beta > 0.0) {
    if (ref == nullptr)
      throw InvalidInput("surrogate_objective: KL penalty needs a reference");
    const auto ref_lp = token_log_probs(*ref, c);
    for (std::size_t t = 0; t < c.tokens.size(); ++t)
      value -= cfg.kl_beta * inv_len *
               kl_token(std::exp(ref_lp[t]), std::exp(new_lp[t]));
  }
  return value;
}

GradientVector surrogate_gradient(const PolicyParams& params,
                                  const PsiEntry& entry,
                                  const SurrogateConfig& cfg,
                                  const PolicyParams* ref) {
  const Completion& c = entry.completion;
  GradientVector g(params.shape().size());
  const auto new_lp = token_log_probs(params, c);
  const double inv_len = 1.0 / static_cast<double>(c.tokens.size());
  if (cfg.token_level) {
    const auto old_lp = require_token_log_probs(entry);
    for (std::size_t t = 0; t < c.tokens.size(); ++t) {
      const double rho_t = std::exp(new_lp[t] - old_lp[t]);
      if (unclipped_active(rho_t, entry.advantage, cfg))
        add_token_score(params, c, static_cast<int>(t),
                        inv_len * rho_t * entry.advantage, g);
    }
  } else {
    double lp = 0.0;
    for (double v : new_lp) lp += v;
    const double rho = std::exp(lp - entry.old_log_prob);
    if (unclipped_active(rho, entry.advantage, cfg))
      add_score(params, c, rho * entry.advantage, g);
  }
  if (cfg.kl_beta > 0.0) {
    if (ref == nullptr)
      throw InvalidInput("surrogate_gradient: KL penalty needs a reference");
    // d/dtheta (r - log r - 1) = (1 - r) d log pi_theta, r = pi_ref / pi_theta
    const auto ref_lp = token_log_probs(*ref, c);
    for (std::size_t t = 0; t < c.tokens.size(); ++t) {
      const double r = std::exp(ref_lp[t] - new_lp[t]);
      add_token_score(params, c, static_cast<int>(t),
                      -cfg.kl_beta * inv_len * (1.0 - r), g);
    }
  }
  return g;
}

double completion_kl(const PolicyParams& params, const PolicyParams& ref,
                     const Completion& c) {
  const auto lp = token_log_probs(params, c);
  const auto ref_lp = token_log_probs(ref, c);
  double total = 0.0;
  for (std::size_t t = 0; t < lp.size(); ++t)
    total += kl_token(std::exp(ref_lp[t]), std::exp(lp[t]));
  return total / static_cast<double>(lp.size());
}

Group make_group(const TaskSpec& spec, const PolicyParams& behavior,
                 std::vector<Completion> completions) {
  if (completions.empty()) throw InvalidInput("make_group: no completions");
  Group g;
  g.prompt_id = completions.front().prompt_id;
  g.completions = std::move(completions);
  for (const auto& c : g.completions) {
    if (c.prompt_id != g.prompt_id)
      throw InvalidInput("make_group: completions from different prompts");
    g.rewards.push_back(reward(spec, c));
    auto lps = token_log_probs(behavior, c);
    double lp = 0.0;
    for (double v : lps) lp += v;
    g.old_log_probs.push_back(lp);
    g.old_token_log_probs.push_back(std::move(lps));
  }
  g.advantages = compute_advantages(g.rewards);
  return g;
}

Group rollout_group(const TaskSpec& spec, const PolicyParams& behavior,
                    int prompt_id, int group_size, RngStream& rng) {
  if (group_size < 2) throw InvalidInput("rollout_group: G must be >= 2");
  std::vector<Completion> cs;
  cs.reserve(group_size);
  for (int i = 0; i < group_size; ++i)
    cs.push_back(sample(behavior, prompt_id, rng));
  return make_group(spec, behavior, std::move(cs));
}

}  // namespace dppo
