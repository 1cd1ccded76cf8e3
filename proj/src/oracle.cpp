#include "dppo/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dppo/error.hpp"
#include "dppo/parallel.hpp"
#include "dppo/rng.hpp"
#include "dppo/trainer.hpp"

namespace dppo {

std::string_view to_string(PruneLevel level) {
  switch (level) {
    case PruneLevel::completion:
      return "completion";
    case PruneLevel::prompt:
      return "prompt";
    case PruneLevel::hierarchical:
      return "hierarchical";
  }
  return "?";
}

std::string_view to_string(PruneMode mode) {
  return mode == PruneMode::bernoulli ? "bernoulli" : "deterministic_fraction";
}

namespace {

std::vector<std::size_t> candidate_indices(const std::vector<bool>& candidate) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < candidate.size(); ++i)
    if (candidate[i]) idx.push_back(i);
  return idx;
}

std::size_t drops_for(std::size_t num_candidates, double rate) {
  return static_cast<std::size_t>(
      std::floor(rate * static_cast<double>(num_candidates) + 1e-9));
}

std::size_t binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i)
    r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  if (r > 1e18) return std::numeric_limits<std::size_t>::max();
  return static_cast<std::size_t>(std::llround(r));
}

std::size_t saturating_mul(std::size_t a, std::size_t b) {
  if (a != 0 && b > std::numeric_limits<std::size_t>::max() / a)
    return std::numeric_limits<std::size_t>::max();
  return a * b;
}

void add_into(GradientVector& acc, const GradientVector& x, double scale) {
  if (acc.size() == 0) acc = GradientVector(x.size());
  acc.add_scaled(x, scale);
}

}  // namespace

std::size_t level_plan_count(const std::vector<bool>& candidate, double rate,
                             PruneMode mode) {
  const std::size_t c = candidate_indices(candidate).size();
  const std::size_t n = candidate.size();
  if (mode == PruneMode::deterministic_fraction)
    return binomial(c, drops_for(c, rate));
  if (rate == 0.0 || c == 0) return 1;
  if (c >= 60) return std::numeric_limits<std::size_t>::max();
  std::size_t count = std::size_t{1} << c;
  if (c == n) count += n - 1;  // the all-dropped outcome splits n ways
  return count;
}

std::vector<LevelPlan> enumerate_level_plans(const std::vector<bool>& candidate,
                                             double rate, PruneMode mode,
                                             std::size_t cap) {
  const std::size_t count = level_plan_count(candidate, rate, mode);
  if (count > cap)
    throw CapacityError("plan enumeration: " + std::to_string(count) +
                        " outcomes exceed the cap " + std::to_string(cap));
  const auto idx = candidate_indices(candidate);
  const std::size_t n = candidate.size();
  const std::size_t c = idx.size();
  std::vector<LevelPlan> plans;

  if (mode == PruneMode::deterministic_fraction) {
    const std::size_t m = drops_for(c, rate);
    const double p = 1.0 / static_cast<double>(binomial(c, m));
    // Lexicographic m-combinations of the candidate positions.
    std::vector<std::size_t> comb(m);
    for (std::size_t j = 0; j < m; ++j) comb[j] = j;
    for (;;) {
      LevelPlan plan{std::vector<bool>(n, true), p};
      for (std::size_t j : comb) plan.keep[idx[j]] = false;
      plans.push_back(std::move(plan));
      std::size_t j = m;
      while (j > 0 && comb[j - 1] == c - m + (j - 1)) --j;
      if (j == 0) break;
      ++comb[j - 1];
      for (std::size_t l = j; l < m; ++l) comb[l] = comb[l - 1] + 1;
    }
    return plans;
  }

  if (rate == 0.0 || c == 0) {
    plans.push_back({std::vector<bool>(n, true), 1.0});
    return plans;
  }
  for (std::size_t mask = 0; mask < (std::size_t{1} << c); ++mask) {
    std::vector<bool> keep(n, true);
    std::size_t dropped = 0;
    for (std::size_t j = 0; j < c; ++j)
      if (mask >> j & 1U) {
        keep[idx[j]] = false;
        ++dropped;
      }
    const double p = std::pow(rate, static_cast<double>(dropped)) *
                     std::pow(1.0 - rate, static_cast<double>(c - dropped));
    if (dropped == n) {
      for (std::size_t j = 0; j < n; ++j) {
        std::vector<bool> single(n, false);
        single[j] = true;
        plans.push_back({std::move(single), p / static_cast<double>(n)});
      }
    } else {
      plans.push_back({std::move(keep), p});
    }
  }
  return plans;
}

PruningConfig level_config(const PruningConfig& cfg, PruneLevel level) {
  PruningConfig out = cfg;
  if (level == PruneLevel::completion) out.r_q = 0.0;
  if (level == PruneLevel::prompt) out.r_o = 0.0;
  return out;
}

GradientVector unpruned_average(
    std::span<const std::vector<GradientVector>> per_completion) {
  GradientVector total;
  for (const auto& group : per_completion) {
    GradientVector mean;
    for (const auto& x : group) add_into(mean, x, 1.0);
    for (double& v : mean.values) v /= static_cast<double>(group.size());
    add_into(total, mean, 1.0);
  }
  for (double& v : total.values) v /= static_cast<double>(per_completion.size());
  return total;
}

GradientVector expected_pruned_estimate(
    std::span<const std::vector<GradientVector>> per_completion,
    std::span<const std::vector<bool>> completion_candidates,
    const std::vector<bool>& prompt_candidates, const PruningConfig& cfg,
    PruneLevel level, std::size_t* plans, std::size_t cap) {
  const PruningConfig lc = level_config(cfg, level);
  const std::size_t k_groups = per_completion.size();
  if (completion_candidates.size() != k_groups ||
      prompt_candidates.size() != k_groups)
    throw InvalidInput("expected_pruned_estimate: size mismatch");

  std::size_t largest = 1;
  for (const auto& cand : completion_candidates)
    largest = std::max(largest, level_plan_count(cand, lc.r_o, lc.mode));
  const std::size_t prompt_count =
      level_plan_count(prompt_candidates, lc.r_q, lc.mode);
  if (saturating_mul(prompt_count, largest) > cap)
    throw CapacityError("plan enumeration: " + std::to_string(prompt_count) +
                        " prompt plans x " + std::to_string(largest) +
                        " completion plans exceed the cap " +
                        std::to_string(cap));

  std::size_t visited = 0;
  std::vector<GradientVector> expected_group(k_groups);
  for (std::size_t k = 0; k < k_groups; ++k) {
    for (const auto& plan :
         enumerate_level_plans(completion_candidates[k], lc.r_o, lc.mode, cap)) {
      const LevelDecision d = make_decision(completion_candidates[k], plan.keep,
                                            lc.r_o, lc.mode, lc.weights);
      add_into(expected_group[k], combine_group(per_completion[k], d),
               plan.probability);
      ++visited;
    }
  }
  const std::vector<bool>& prompt_flags = prompt_candidates;
  GradientVector total;
  for (const auto& plan :
       enumerate_level_plans(prompt_flags, lc.r_q, lc.mode, cap)) {
    const LevelDecision d =
        make_decision(prompt_flags, plan.keep, lc.r_q, lc.mode, lc.weights);
    add_into(total, combine_prompts(expected_group, d), plan.probability);
    ++visited;
  }
  if (plans) *plans = visited;
  return total;
}

namespace {

std::size_t joint_plan_count(const UnbiasednessProblem& problem,
                             const PruningConfig& lc,
                             const std::vector<LevelPlan>& prompt_plans) {
  std::vector<std::size_t> per_group;
  for (const auto& g : problem.groups)
    per_group.push_back(
        level_plan_count(completion_candidates(g.advantages), lc.r_o, lc.mode));
  std::size_t total = 0;
  for (const auto& pp : prompt_plans) {
    std::size_t prod = 1;
    for (std::size_t k = 0; k < per_group.size(); ++k)
      if (pp.keep[k]) prod = saturating_mul(prod, per_group[k]);
    total = prod > std::numeric_limits<std::size_t>::max() - total
                ? std::numeric_limits<std::size_t>::max()
                : total + prod;
  }
  return total;
}

}  // namespace

GradientVector expected_pruned_estimate_joint(const UnbiasednessProblem& problem,
                                              const PruningConfig& cfg,
                                              PruneLevel level,
                                              std::size_t* plans,
                                              std::size_t cap) {
  const PruningConfig lc = level_config(cfg, level);
  const std::size_t k_groups = problem.groups.size();
  const auto prompt_plans =
      enumerate_level_plans(problem.prompt_candidates, lc.r_q, lc.mode, cap);
  const std::size_t count = joint_plan_count(problem, lc, prompt_plans);
  if (count > cap)
    throw CapacityError("joint plan enumeration: " + std::to_string(count) +
                        " plans exceed the cap " + std::to_string(cap));

  std::vector<std::vector<bool>> cands(k_groups);
  std::vector<std::vector<LevelPlan>> group_plans(k_groups);
  for (std::size_t k = 0; k < k_groups; ++k) {
    cands[k] = completion_candidates(problem.groups[k].advantages);
    group_plans[k] = enumerate_level_plans(cands[k], lc.r_o, lc.mode, cap);
  }

  PruningPlan plan;
  for (const auto& g : problem.groups) plan.prompt_ids.push_back(g.prompt_id);
  plan.completions.resize(k_groups);

  GradientVector total;
  std::size_t visited = 0;
  for (const auto& pp : prompt_plans) {
    plan.prompts = make_decision(problem.prompt_candidates, pp.keep, lc.r_q,
                                 lc.mode, lc.weights);
    std::vector<std::size_t> kept;
    for (std::size_t k = 0; k < k_groups; ++k) {
      plan.completions[k] = LevelDecision{};
      if (pp.keep[k]) kept.push_back(k);
    }
    // Odometer over the completion plans of the kept prompts.
    std::vector<std::size_t> digit(kept.size(), 0);
    for (;;) {
      double p = pp.probability;
      for (std::size_t j = 0; j < kept.size(); ++j) {
        const std::size_t k = kept[j];
        const LevelPlan& gp = group_plans[k][digit[j]];
        p *= gp.probability;
        plan.completions[k] =
            make_decision(cands[k], gp.keep, lc.r_o, lc.mode, lc.weights);
      }
      add_into(total,
               estimate_gradient(problem.groups, plan, problem.params,
                                 problem.surrogate),
               p);
      ++visited;
      std::size_t j = 0;
      while (j < kept.size() && ++digit[j] == group_plans[kept[j]].size()) {
        digit[j] = 0;
        ++j;
      }
      if (j == kept.size()) break;
    }
  }
  if (plans) *plans = visited;
  return total;
}

UnbiasednessReport exact_unbiasedness(const UnbiasednessProblem& problem,
                                      const PruningConfig& cfg,
                                      PruneLevel level,
                                      std::size_t joint_limit,
                                      std::size_t cap) {
  cfg.validate();
  if (problem.prompt_candidates.size() != problem.groups.size())
    throw InvalidInput("exact_unbiasedness: prompt candidate flags mismatch");
  const PruningConfig lc = level_config(cfg, level);

  std::vector<std::vector<GradientVector>> contributions;
  std::vector<std::vector<bool>> cands;
  for (const auto& g : problem.groups) {
    g.validate();
    std::vector<GradientVector> xs;
    for (std::size_t i = 0; i < g.size(); ++i)
      xs.push_back(completion_gradient(problem.params, entry_of(g, i),
                                       problem.surrogate, nullptr));
    contributions.push_back(std::move(xs));
    cands.push_back(completion_candidates(g.advantages));
  }
  const GradientVector reference = unpruned_average(contributions);

  UnbiasednessReport report;
  report.mode = cfg.mode;
  report.level = level;
  report.r_o = lc.r_o;
  report.r_q = lc.r_q;

  const auto prompt_plans = enumerate_level_plans(problem.prompt_candidates,
                                                  lc.r_q, lc.mode, cap);
  GradientVector expected;
  if (joint_plan_count(problem, lc, prompt_plans) <= joint_limit) {
    report.joint = true;
    expected = expected_pruned_estimate_joint(
        problem, cfg, level, &report.num_plans_enumerated, cap);
  } else {
    expected = expected_pruned_estimate(contributions, cands,
                                        problem.prompt_candidates, cfg, level,
                                        &report.num_plans_enumerated, cap);
  }
  for (std::size_t j = 0; j < reference.size(); ++j)
    report.max_abs_deviation = std::max(
        report.max_abs_deviation, std::abs(expected[j] - reference[j]));
  return report;
}

double variance_factor(double beta, double r_q) {
  if (!(r_q >= 0.0 && r_q < 1.0))
    throw DomainError("variance_factor: r_q must be in [0, 1)");
  if (!(beta > 0.0 && beta <= 1.0))
    throw DomainError("variance_factor: beta must be in (0, 1]");
  return (1.0 - beta * r_q) * (1.0 - (1.0 - beta) * r_q) / (1.0 - r_q);
}

GradientVector central_difference(
    const PolicyParams& params,
    const std::function<double(const PolicyParams&)>& objective, double h) {
  if (!(h > 0.0)) throw InvalidInput("central_difference: h must be > 0");
  PolicyParams probe = params;
  GradientVector g(params.shape().size());
  for (std::size_t j = 0; j < g.size(); ++j) {
    const double x = params.logits()[j];
    probe.logits()[j] = x + h;
    const double up = objective(probe);
    probe.logits()[j] = x - h;
    const double down = objective(probe);
    probe.logits()[j] = x;
    g[j] = (up - down) / (2.0 * h);
  }
  return g;
}

double finite_diff_check(
    const PolicyParams& params,
    const std::function<double(const PolicyParams&)>& objective,
    const GradientVector& analytic, double h) {
  const GradientVector fd = central_difference(params, objective, h);
  if (fd.size() != analytic.size())
    throw InvalidInput("finite_diff_check: gradient size mismatch");
  double scale = 0.0, err = 0.0;
  for (std::size_t j = 0; j < fd.size(); ++j) {
    scale = std::max({scale, std::abs(fd[j]), std::abs(analytic[j])});
    err = std::max(err, std::abs(fd[j] - analytic[j]));
  }
  return scale > 0.0 ? err / scale : 0.0;
}

GradientVector exact_grpo_gradient(const TaskSpec& spec,
                                   const PolicyParams& behavior,
                                   const PolicyParams& params, int group_size,
                                   std::size_t cap) {
  if (group_size < 2) throw InvalidInput("exact_grpo_gradient: G must be >= 2");
  GradientVector total(params.shape().size());
  for (int q = 0; q < spec.num_prompts; ++q) {
    const auto completions = enumerate_completions(spec, q);
    const std::size_t m = completions.size();
    std::size_t tuples = 1;
    for (int i = 0; i < group_size; ++i) tuples = saturating_mul(tuples, m);
    if (tuples > cap)
      throw CapacityError("exact_grpo_gradient: " + std::to_string(tuples) +
                          " rollout tuples per prompt exceed the cap " +
                          std::to_string(cap));
    std::vector<double> prob(m), rew(m), old_lp(m);
    for (std::size_t c = 0; c < m; ++c) {
      old_lp[c] = log_prob(behavior, completions[c]);
      prob[c] = std::exp(old_lp[c]);
      rew[c] = reward(spec, completions[c]);
    }
    // coef[c] = E[(1/G) sum_{i: o_i = c} A_i]; Psi is linear in A.
    std::vector<double> coef(m, 0.0);
    std::vector<std::size_t> digit(group_size, 0);
    std::vector<double> rewards(group_size);
    for (std::size_t n = 0; n < tuples; ++n) {
      double p = 1.0;
      for (int i = 0; i < group_size; ++i) {
        p *= prob[digit[i]];
        rewards[i] = rew[digit[i]];
      }
      if (p > 0.0) {
        const auto adv = compute_advantages(rewards);
        for (int i = 0; i < group_size; ++i)
          coef[digit[i]] += p * adv[i] / group_size;
      }
      for (int i = 0; i < group_size; ++i) {
        if (++digit[i] < m) break;
        digit[i] = 0;
      }
    }
    for (std::size_t c = 0; c < m; ++c)
      add_psi(params, PsiEntry{completions[c], coef[c], old_lp[c]}, {},
              1.0 / spec.num_prompts, total);
  }
  return total;
}

namespace {

// Running mean and sum of squared deviations per coordinate.
struct Moments {
  double count = 0.0;
  std::vector<double> mean;
  std::vector<double> m2;

  explicit Moments(std::size_t d = 0) : mean(d, 0.0), m2(d, 0.0) {}

  void push(const GradientVector& x) {
    count += 1.0;
    for (std::size_t j = 0; j < mean.size(); ++j) {
      const double delta = x[j] - mean[j];
      mean[j] += delta / count;
      m2[j] += delta * (x[j] - mean[j]);
    }
  }

  void merge(const Moments& o) {
    if (o.count == 0.0) return;
    const double n = count + o.count;
    for (std::size_t j = 0; j < mean.size(); ++j) {
      const double delta = o.mean[j] - mean[j];
      mean[j] += delta * o.count / n;
      m2[j] += o.m2[j] + delta * delta * count * o.count / n;
    }
    count = n;
  }
};

constexpr std::size_t kBlock = 1000;

}  // namespace

SamplingReport sampling_unbiasedness(const TaskSpec& spec,
                                     const PolicyParams& behavior,
                                     const PolicyParams& params,
                                     const HistoryStore& history,
                                     const PruningConfig& cfg, int group_size,
                                     std::size_t trials, std::uint64_t seed,
                                     int workers) {
  cfg.validate();
  if (trials < 2) throw InvalidInput("sampling_unbiasedness: trials must be >= 2");
  std::vector<int> batch(spec.num_prompts);
  for (int q = 0; q < spec.num_prompts; ++q) batch[q] = q;
  const auto candidates = select_prompt_candidates(history, batch, cfg.beta);
  const std::size_t d = params.shape().size();

  const std::size_t blocks = (trials + kBlock - 1) / kBlock;
  std::vector<Moments> partial(blocks, Moments(d));
  parallel_for(blocks, workers, [&](std::size_t blk) {
    const std::size_t end = std::min(trials, (blk + 1) * kBlock);
    for (std::size_t t = blk * kBlock; t < end; ++t) {
      RngStream prompt_rng(seed, "mc_prompt_prune", t);
      PruningPlan plan;
      plan.prompt_ids = batch;
      plan.prompts = prune_prompts(batch, candidates, cfg, prompt_rng);
      plan.completions.resize(batch.size());
      std::vector<Group> groups(batch.size());
      for (std::size_t k = 0; k < batch.size(); ++k) {
        if (!plan.prompts.keep[k]) continue;
        RngStream roll(seed, "mc_rollout", t, batch[k]);
        groups[k] = rollout_group(spec, behavior, batch[k], group_size, roll);
        RngStream prune_rng(seed, "mc_completion_prune", t, batch[k]);
        plan.completions[k] = prune_completions(groups[k], cfg, prune_rng);
      }
      partial[blk].push(estimate_gradient(groups, plan, params, {}));
    }
  });
  Moments all(d);
  for (const auto& p : partial) all.merge(p);

  SamplingReport report;
  report.trials = trials;
  report.exact = exact_grpo_gradient(spec, behavior, params, group_size);
  report.mean = GradientVector(d);
  report.standard_error = GradientVector(d);
  const double n = static_cast<double>(trials);
  for (std::size_t j = 0; j < d; ++j) {
    report.mean[j] = all.mean[j];
    report.standard_error[j] = std::sqrt(all.m2[j] / (n - 1.0) / n);
    const double diff = std::abs(report.mean[j] - report.exact[j]);
    report.max_abs_deviation = std::max(report.max_abs_deviation, diff);
    double z = 0.0;
    if (report.standard_error[j] > 0.0)
      z = diff / report.standard_error[j];
    else if (diff > 1e-12)
      z = std::numeric_limits<double>::infinity();
    report.max_z = std::max(report.max_z, z);
  }
  return report;
}

namespace {

double squared_norm(const GradientVector& x) {
  double s = 0.0;
  for (double v : x.values) s += v * v;
  return s;
}

}  // namespace

SingleDrawVariance single_draw_variance(std::span<const GradientVector> values,
                                        std::span<const double> base,
                                        std::span<const double> drop) {
  if (values.size() != base.size() || values.size() != drop.size() ||
      values.empty())
    throw InvalidInput("single_draw_variance: size mismatch");
  GradientVector mean(values.front().size());
  double second = 0.0, rescaled_second = 0.0, keep_mass = 0.0;
  double cand_mass = 0.0, cand_second = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(drop[i] >= 0.0 && drop[i] < 1.0))
      throw InvalidInput("single_draw_variance: drop probability outside [0, 1)");
    if (base[i] == 0.0) continue;
    const double sq = squared_norm(values[i]);
    mean.add_scaled(values[i], base[i]);
    second += base[i] * sq;
    rescaled_second += base[i] * sq / (1.0 - drop[i]);
    keep_mass += base[i] * (1.0 - drop[i]);
    if (drop[i] > 0.0) {
      cand_mass += base[i];
      cand_second += base[i] * sq / (1.0 - drop[i]);
    }
  }
  const double mean_sq = squared_norm(mean);
  SingleDrawVariance out;
  out.var_full = second - mean_sq;
  out.var_pruned = keep_mass * rescaled_second - mean_sq;
  if (cand_mass > 0.0)
    out.condition_holds = cand_second / cand_mass <= second * (1.0 + 1e-12);
  return out;
}

VarianceInstance build_variance_instance(const TaskSpec& spec,
                                         const PolicyParams& behavior,
                                         const PolicyParams& params,
                                         double beta) {
  VarianceInstance inst;
  const std::size_t d = params.shape().size();
  HistoryStore history(spec.num_prompts);
  for (int q = 0; q < spec.num_prompts; ++q) {
    const auto completions = enumerate_completions(spec, q);
    std::vector<double> prob, rew, old_lp;
    double mu = 0.0;
    for (const auto& c : completions) {
      old_lp.push_back(log_prob(behavior, c));
      prob.push_back(std::exp(old_lp.back()));
      rew.push_back(reward(spec, c));
      mu += prob.back() * rew.back();
    }
    double var = 0.0;
    for (std::size_t c = 0; c < completions.size(); ++c)
      var += prob[c] * (rew[c] - mu) * (rew[c] - mu);
    const double sd = std::sqrt(var);
    std::vector<double> adv(completions.size(), 0.0);
    double score = 0.0;
    for (std::size_t c = 0; c < completions.size(); ++c) {
      if (sd >= 1e-12) adv[c] = (rew[c] - mu) / sd;
      score += prob[c] * std::abs(adv[c]);
    }
    std::vector<GradientVector> psis;
    std::vector<bool> cand;
    GradientVector mean(d);
    for (std::size_t c = 0; c < completions.size(); ++c) {
      psis.push_back(psi(params, PsiEntry{completions[c], adv[c], old_lp[c]}));
      cand.push_back(std::abs(adv[c]) <= score);
      mean.add_scaled(psis.back(), prob[c]);
    }
    inst.probs.push_back(std::move(prob));
    inst.advantages.push_back(std::move(adv));
    inst.psi.push_back(std::move(psis));
    inst.completion_candidates.push_back(std::move(cand));
    inst.scores.push_back(score);
    inst.prompt_means.push_back(std::move(mean));
    history.set_score(q, score);
  }
  history.advance_epoch();
  std::vector<int> batch(spec.num_prompts);
  for (int q = 0; q < spec.num_prompts; ++q) batch[q] = q;
  inst.prompt_candidates.assign(spec.num_prompts, false);
  for (int q : select_prompt_candidates(history, batch, beta))
    inst.prompt_candidates[q] = true;
  return inst;
}

LevelVarianceReport per_level_variance(const VarianceInstance& inst,
                                       const PruningConfig& cfg) {
  LevelVarianceReport out;
  const std::size_t n = inst.psi.size();
  for (std::size_t q = 0; q < n; ++q) {
    std::vector<double> drop(inst.psi[q].size(), 0.0);
    for (std::size_t c = 0; c < drop.size(); ++c)
      if (inst.completion_candidates[q][c]) drop[c] = cfg.r_o;
    out.completion.push_back(
        single_draw_variance(inst.psi[q], inst.probs[q], drop));
  }
  std::vector<double> base(n, 1.0 / static_cast<double>(n)), drop(n, 0.0);
  for (std::size_t q = 0; q < n; ++q)
    if (inst.prompt_candidates[q]) drop[q] = cfg.r_q;
  out.prompt = single_draw_variance(inst.prompt_means, base, drop);
  return out;
}

VarianceReport empirical_variance(const TaskSpec& spec,
                                  const PolicyParams& behavior,
                                  const PolicyParams& params,
                                  const PruningConfig& cfg, std::size_t trials,
                                  std::uint64_t seed, int workers) {
  cfg.validate();
  if (trials < 3) throw InvalidInput("empirical_variance: trials must be >= 3");
  const VarianceInstance inst =
      build_variance_instance(spec, behavior, params, cfg.beta);
  const std::size_t n_prompts = inst.psi.size();
  const std::size_t d = params.shape().size();
  const double inv_n = 1.0 / static_cast<double>(n_prompts);

  VarianceReport report;
  report.trials = trials;

  // Exact population terms.
  GradientVector grand(d);
  double between_second = 0.0, within = 0.0;
  for (std::size_t q = 0; q < n_prompts; ++q) {
    grand.add_scaled(inst.prompt_means[q], inv_n);
    between_second += inv_n * squared_norm(inst.prompt_means[q]);
    double second = 0.0;
    for (std::size_t c = 0; c < inst.psi[q].size(); ++c)
      second += inst.probs[q][c] * squared_norm(inst.psi[q][c]);
    within += inv_n * (second - squared_norm(inst.prompt_means[q]));
  }
  report.var_between = between_second - squared_norm(grand);
  report.mean_within = within;
  report.bound_factor = variance_factor(cfg.beta, cfg.r_q);
  report.bound_value =
      report.var_between + report.bound_factor * report.mean_within;

  const auto levels = per_level_variance(inst, cfg);
  report.prompt_condition = levels.prompt.condition_holds;
  for (const auto& c : levels.completion)
    report.completion_condition = report.completion_condition && c.condition_holds;

  // Pruned sampling distributions and rescaling factors.
  std::vector<double> prompt_drop(n_prompts, 0.0);
  double c_q = 0.0;
  for (std::size_t q = 0; q < n_prompts; ++q) {
    if (inst.prompt_candidates[q]) prompt_drop[q] = cfg.r_q;
    c_q += inv_n * (1.0 - prompt_drop[q]);
  }
  std::vector<double> prompt_cdf(n_prompts), gamma_q(n_prompts);
  double cum = 0.0;
  for (std::size_t q = 0; q < n_prompts; ++q) {
    cum += inv_n * (1.0 - prompt_drop[q]) / c_q;
    prompt_cdf[q] = cum;
    gamma_q[q] = c_q / (1.0 - prompt_drop[q]);
  }
  std::vector<std::vector<double>> comp_drop(n_prompts), gamma_o(n_prompts);
  for (std::size_t q = 0; q < n_prompts; ++q) {
    const std::size_t m = inst.psi[q].size();
    comp_drop[q].assign(m, 0.0);
    double c_o = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      if (inst.completion_candidates[q][c]) comp_drop[q][c] = cfg.r_o;
      c_o += inst.probs[q][c] * (1.0 - comp_drop[q][c]);
    }
    gamma_o[q].resize(m);
    for (std::size_t c = 0; c < m; ++c)
      gamma_o[q][c] = c_o / (1.0 - comp_drop[q][c]);
  }

  // Exact variance of the estimator by enumeration.
  double second = 0.0;
  for (std::size_t q = 0; q < n_prompts; ++q) {
    const double p_q = inv_n * (1.0 - prompt_drop[q]) / c_q;
    double inner = 0.0, c_o = 0.0;
    for (std::size_t c = 0; c < inst.psi[q].size(); ++c)
      c_o += inst.probs[q][c] * (1.0 - comp_drop[q][c]);
    for (std::size_t c = 0; c < inst.psi[q].size(); ++c) {
      const double p_c = inst.probs[q][c] * (1.0 - comp_drop[q][c]) / c_o;
      inner += p_c * gamma_o[q][c] * gamma_o[q][c] * squared_norm(inst.psi[q][c]);
    }
    second += p_q * gamma_q[q] * gamma_q[q] * inner;
  }
  report.var_pruned_exact = second - squared_norm(grand);

  // Monte-Carlo draws: prompt from the pruned prompt distribution, completion
  // from the behavior policy by rejection with the completion keep probability.
  const int vocab = spec.vocab_size;
  std::vector<double> samples(trials * d, 0.0);
  const std::size_t blocks = (trials + kBlock - 1) / kBlock;
  parallel_for(blocks, workers, [&](std::size_t blk) {
    RngStream rng(seed, "variance", blk);
    const std::size_t end = std::min(trials, (blk + 1) * kBlock);
    for (std::size_t t = blk * kBlock; t < end; ++t) {
      const double u = rng.uniform();
      std::size_t q = 0;
      while (q + 1 < n_prompts && u >= prompt_cdf[q]) ++q;
      std::size_t idx = 0;
      for (;;) {
        const Completion c = sample(behavior, static_cast<int>(q), rng);
        idx = 0;
        for (int tok : c.tokens) idx = idx * vocab + tok;
        if (rng.uniform() >= comp_drop[q][idx]) break;
      }
      const double scale = gamma_q[q] * gamma_o[q][idx];
      const auto& x = inst.psi[q][idx];
      for (std::size_t j = 0; j < d; ++j) samples[t * d + j] = scale * x[j];
    }
  });

  // Trace of the sample covariance and its delete-one jackknife error.
  const double n = static_cast<double>(trials);
  std::vector<double> mean(d, 0.0);
  for (std::size_t t = 0; t < trials; ++t)
    for (std::size_t j = 0; j < d; ++j) mean[j] += samples[t * d + j];
  for (double& v : mean) v /= n;
  std::vector<double> sum_sq(d, 0.0);
  for (std::size_t t = 0; t < trials; ++t)
    for (std::size_t j = 0; j < d; ++j) {
      double& v = samples[t * d + j];
      v -= mean[j];
      sum_sq[j] += v * v;
    }
  double total_sq = 0.0;
  for (double s : sum_sq) total_sq += s;
  report.var_pruned = total_sq / (n - 1.0);

  // Leave-one-out trace variance; centered sums are zero up to rounding.
  std::vector<double> col_sum(d, 0.0);
  for (std::size_t t = 0; t < trials; ++t)
    for (std::size_t j = 0; j < d; ++j) col_sum[j] += samples[t * d + j];
  std::vector<double> loo(trials);
  double loo_mean = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    double v = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double x = samples[t * d + j];
      const double s = col_sum[j] - x;
      v += ((sum_sq[j] - x * x) - s * s / (n - 1.0));
    }
    loo[t] = v / (n - 2.0);
    loo_mean += loo[t];
  }
  loo_mean /= n;
  double jk = 0.0;
  for (double v : loo) jk += (v - loo_mean) * (v - loo_mean);
  report.var_pruned_se = std::sqrt((n - 1.0) / n * jk);
  report.satisfied =
      report.var_pruned <= report.bound_value + 3.0 * report.var_pruned_se;
  return report;
}

PolicyParams low_score_instance(const TaskSpec& spec) {
  if (spec.vocab_size < 2)
    throw InvalidInput("low_score_instance: needs a vocabulary of at least 2");
  PolicyParams params(shape_of(spec));
  const double half_logit =
      std::log(0.45 * (spec.vocab_size - 1) / 0.55);
  for (int q = 0; q < spec.num_prompts; ++q)
    for (int t = 0; t < spec.completion_len; ++t) {
      auto row = params.row(q, t);
      row[spec.target_map[q][t]] = q % 2 == 0 ? 800.0 : half_logit;
    }
  return params;
}

}  // namespace dppo
