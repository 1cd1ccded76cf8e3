#include "dppo/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <map>

#include "dppo/error.hpp"
#include "dppo/parallel.hpp"
#include "dppo/rng.hpp"

namespace dppo {

void TrainConfig::validate() const {
  if (epochs < 1) throw InvalidInput("train: epochs must be >= 1");
  if (group_size < 2) throw InvalidInput("train: group_size must be >= 2");
  if (!(learning_rate > 0.0))
    throw InvalidInput("train: learning_rate must be > 0");
  if (batch_prompts < 1) throw InvalidInput("train: batch_prompts must be >= 1");
  if (l_max < 0) throw InvalidInput("packing: l_max must be >= 0");
  if (n_win < 1) throw InvalidInput("packing: n_win must be >= 1");
  if (workers < 1) throw InvalidInput("workers must be >= 1");
  if (!(init_scale >= 0.0)) throw InvalidInput("train: init_scale must be >= 0");
  surrogate.validate();
  pruning.validate();
}

GradientVector combine_group(std::span<const GradientVector> per_completion,
                             const LevelDecision& decision) {
  if (per_completion.size() != decision.size())
    throw ConsistencyError("combine_group: decision size mismatch");
  const std::size_t kept = decision.kept_count();
  if (kept == 0) throw DegenerateBatch("combine_group: no completion kept");
  GradientVector acc(per_completion.front().size());
  for (std::size_t i = 0; i < per_completion.size(); ++i)
    if (decision.keep[i]) acc.add_scaled(per_completion[i], decision.weight[i]);
  for (double& v : acc.values) v /= static_cast<double>(kept);
  return acc;
}

GradientVector combine_prompts(std::span<const GradientVector> per_prompt,
                               const LevelDecision& decision) {
  if (per_prompt.size() != decision.size())
    throw ConsistencyError("combine_prompts: decision size mismatch");
  const std::size_t kept = decision.kept_count();
  if (kept == 0) throw DegenerateBatch("batch has no retained prompt");
  GradientVector acc;
  for (std::size_t k = 0; k < per_prompt.size(); ++k) {
    if (!decision.keep[k]) continue;
    if (acc.size() == 0) acc = GradientVector(per_prompt[k].size());
    acc.add_scaled(per_prompt[k], decision.weight[k]);
  }
  for (double& v : acc.values) v /= static_cast<double>(kept);
  return acc;
}

GradientVector completion_gradient(const PolicyParams& params,
                                   const PsiEntry& entry,
                                   const SurrogateConfig& cfg,
                                   const PolicyParams* ref) {
  if (!cfg.use_clip && cfg.kl_beta == 0.0) return psi(params, entry, cfg);
  return surrogate_gradient(params, entry, cfg, ref);
}

namespace {

std::vector<GradientVector> group_contributions(const Group& g,
                                                const PolicyParams& params,
                                                const SurrogateConfig& cfg,
                                                const PolicyParams* ref) {
  std::vector<GradientVector> out;
  out.reserve(g.size());
  for (std::size_t i = 0; i < g.size(); ++i)
    out.push_back(completion_gradient(params, entry_of(g, i), cfg, ref));
  return out;
}

}  // namespace

GradientVector estimate_gradient(std::span<const Group> groups,
                                 const PruningPlan& plan,
                                 const PolicyParams& params,
                                 const SurrogateConfig& cfg,
                                 const PolicyParams* ref) {
  plan.check_against(groups);
  std::vector<GradientVector> per_prompt(groups.size());
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (!plan.prompts.keep[k]) continue;
    per_prompt[k] = combine_group(group_contributions(groups[k], params, cfg, ref),
                                  plan.completions[k]);
  }
  return combine_prompts(per_prompt, plan.prompts);
}

std::vector<std::vector<int>> make_batches(const TaskSpec& spec,
                                           const TrainConfig& cfg) {
  std::vector<int> ids(spec.num_prompts);
  for (int q = 0; q < spec.num_prompts; ++q) ids[q] = q;
  std::vector<std::vector<int>> slots;
  if (cfg.pack_strategy == PackStrategy::off) {
    for (int q : ids) slots.push_back({q});
  } else {
    const int l_max =
        cfg.l_max > 0 ? cfg.l_max
                      : *std::max_element(spec.prompt_lengths.begin(),
                                          spec.prompt_lengths.end());
    slots = pack(ids, spec.prompt_lengths, l_max, cfg.n_win, cfg.pack_strategy)
                .sequences;
  }
  std::vector<std::vector<int>> batches;
  for (std::size_t s = 0; s < slots.size(); ++s) {
    if (s % static_cast<std::size_t>(cfg.batch_prompts) == 0) batches.emplace_back();
    auto& b = batches.back();
    b.insert(b.end(), slots[s].begin(), slots[s].end());
  }
  return batches;
}

PolicyParams initial_params(const TaskSpec& spec, const TrainConfig& cfg) {
  PolicyParams params(shape_of(spec));
  if (cfg.init_scale > 0.0) {
    RngStream rng(cfg.seed, "init");
    for (double& v : params.logits())
      v = cfg.init_scale * (2.0 * rng.uniform() - 1.0);
  }
  return params;
}

double expected_reward(const TaskSpec& spec, const PolicyParams& params) {
  double total = 0.0;
  for (int q = 0; q < spec.num_prompts; ++q) {
    double per_prompt = 0.0;
    for (int t = 0; t < spec.completion_len; ++t)
      per_prompt += softmax(params.row(q, t))[spec.target_map[q][t]];
    total += per_prompt / spec.completion_len;
  }
  return total / spec.num_prompts;
}

namespace {

struct PromptWork {
  Group group;
  LevelDecision decision;
  double threshold = 0.0;
  GradientVector gradient;
  GradientVector objective;  // length 1: rescaled surrogate value
  double kl_sum = 0.0;
  int kl_count = 0;
};

PromptWork run_prompt(const TaskSpec& spec, const TrainConfig& cfg,
                      const PolicyParams& params, const PolicyParams& old,
                      const PolicyParams& ref, int epoch, int prompt_id) {
  PromptWork w;
  RngStream rollout(cfg.seed, "rollout", epoch, prompt_id);
  w.group = rollout_group(spec, old, prompt_id, cfg.group_size, rollout);
  RngStream prune_rng(cfg.seed, "completion_prune", epoch, prompt_id);
  w.decision = prune_completions(w.group, cfg.pruning, prune_rng);
  w.threshold = completion_threshold(w.group.advantages);

  std::vector<GradientVector> grads;
  std::vector<GradientVector> values;
  for (std::size_t i = 0; i < w.group.size(); ++i) {
    if (!w.decision.keep[i]) {
      // Dropped rollouts get no backward work.
      grads.emplace_back(params.shape().size());
      values.emplace_back(1);
      continue;
    }
    const PsiEntry e = entry_of(w.group, i);
    grads.push_back(completion_gradient(params, e, cfg.surrogate, &ref));
    GradientVector v(1);
    v[0] = surrogate_objective(params, e, cfg.surrogate, &ref);
    values.push_back(std::move(v));
    w.kl_sum += completion_kl(params, ref, w.group.completions[i]);
    ++w.kl_count;
  }
  w.gradient = combine_group(grads, w.decision);
  w.objective = combine_group(values, w.decision);
  return w;
}

}  // namespace

TrainResult train(const TaskSpec& spec, const TrainConfig& cfg) {
  spec.validate();
  cfg.validate();
  using clock = std::chrono::steady_clock;

  TrainResult result;
  result.params = initial_params(spec, cfg);
  const PolicyParams ref = result.params;
  HistoryStore history(spec.num_prompts);
  std::vector<int> written_at(spec.num_prompts, 0);
  const auto batches = make_batches(spec, cfg);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const PolicyParams old = result.params;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto start = clock::now();
      const auto& batch = batches[b];
      StepMetrics m;
      m.epoch = epoch;
      m.batch = static_cast<int>(b);
      m.prompts_total = static_cast<int>(batch.size());
      m.completions_total = m.prompts_total * cfg.group_size;
      result.completions_unpruned += m.completions_total;
      ++result.total_batches;

      const auto candidates =
          select_prompt_candidates(history, batch, cfg.pruning.beta);
      RngStream prompt_rng(cfg.seed, "prompt_prune", epoch, b);
      const LevelDecision prompts =
          prune_prompts(batch, candidates, cfg.pruning, prompt_rng);

      std::vector<PromptWork> work(batch.size());
      parallel_for(batch.size(), cfg.workers, [&](std::size_t k) {
        if (prompts.keep[k])
          work[k] = run_prompt(spec, cfg, result.params, old, ref, epoch,
                               batch[k]);
      });

      std::vector<int> selected;
      std::map<int, double> thresholds;
      std::vector<GradientVector> grads(batch.size());
      std::vector<GradientVector> values(batch.size());
      double reward_sum = 0.0, kl_sum = 0.0;
      int reward_count = 0, kl_count = 0;
      for (std::size_t k = 0; k < batch.size(); ++k) {
        if (!prompts.keep[k]) continue;
        const auto& w = work[k];
        selected.push_back(batch[k]);
        thresholds[batch[k]] = w.threshold;
        grads[k] = w.gradient;
        values[k] = w.objective;
        for (double r : w.group.rewards) reward_sum += r;
        reward_count += static_cast<int>(w.group.size());
        kl_sum += w.kl_sum;
        kl_count += w.kl_count;
        m.completions_kept += static_cast<int>(w.decision.kept_count());
      }
      m.prompts_kept = static_cast<int>(selected.size());
      history = update_history(history, selected, thresholds);
      for (int q : selected) written_at[q] = epoch;

      try {
        const GradientVector g = combine_prompts(grads, prompts);
        m.pg_loss = -combine_prompts(values, prompts)[0];
        m.grad_norm = g.norm();
        result.params.step(g, cfg.learning_rate);
        result.completions_used += m.completions_kept;
      } catch (const DegenerateBatch&) {
        m.skipped = true;
        ++result.skipped_batches;
      }
      m.mean_reward = reward_count > 0 ? reward_sum / reward_count : 0.0;
      m.expected_reward = expected_reward(spec, result.params);
      m.kl = kl_count > 0 ? kl_sum / kl_count : 0.0;
      if (cfg.record_wallclock)
        m.wallclock_micros =
            std::chrono::duration_cast<std::chrono::microseconds>(clock::now() -
                                                                  start)
                .count();
      result.metrics.push_back(m);
    }
    history.advance_epoch();
  }
  result.history = history;
  result.history_written_at = std::move(written_at);
  return result;
}

}  // namespace dppo
