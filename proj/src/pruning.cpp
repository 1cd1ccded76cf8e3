#include "dppo/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dppo/error.hpp"

namespace dppo {

void PruningConfig::validate() const {
  if (!(r_o >= 0.0 && r_o < 1.0))
    throw InvalidInput("pruning: r_o must be in [0, 1)");
  if (!(r_q >= 0.0 && r_q < 1.0))
    throw InvalidInput("pruning: r_q must be in [0, 1)");
  if (!(beta > 0.0 && beta <= 1.0))
    throw InvalidInput("pruning: beta must be in (0, 1]");
}

std::size_t LevelDecision::kept_count() const {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
}

double HistoryStore::score(int prompt_id) const {
  if (prompt_id < 0 || static_cast<std::size_t>(prompt_id) >= scores_.size())
    throw InvalidInput("history: prompt_id out of range");
  return scores_[prompt_id];
}

void HistoryStore::set_score(int prompt_id, double value) {
  if (prompt_id < 0 || static_cast<std::size_t>(prompt_id) >= scores_.size())
    throw InvalidInput("history: prompt_id out of range");
  if (!(value >= 0.0)) throw InvalidInput("history: scores must be >= 0");
  scores_[prompt_id] = value;
}

double completion_threshold(std::span<const double> advantages) {
  if (advantages.empty())
    throw InvalidInput("completion_threshold: no advantages");
  double s = 0.0;
  for (double a : advantages) s += std::abs(a);
  return s / static_cast<double>(advantages.size());
}

std::vector<bool> completion_candidates(std::span<const double> advantages) {
  const double threshold = completion_threshold(advantages);
  std::vector<bool> out(advantages.size());
  for (std::size_t i = 0; i < advantages.size(); ++i)
    out[i] = std::abs(advantages[i]) <= threshold;
  return out;
}

std::size_t deterministic_drop_count(std::size_t num_candidates, double rate) {
  const double x = rate * static_cast<double>(num_candidates);
  return static_cast<std::size_t>(std::floor(x + 1e-9));
}

double candidate_drop_probability(std::size_t num_items,
                                  std::size_t num_candidates, double rate,
                                  PruneMode mode) {
  if (num_candidates == 0) return 0.0;
  if (mode == PruneMode::deterministic_fraction)
    return static_cast<double>(deterministic_drop_count(num_candidates, rate)) /
           static_cast<double>(num_candidates);
  if (num_candidates < num_items) return rate;
  // All-dropped outcome (prob rate^N) resurrects one of the N uniformly.
  const double n = static_cast<double>(num_items);
  return rate - std::pow(rate, n) / n;
}

LevelDecision make_decision(std::vector<bool> candidate, std::vector<bool> keep,
                            double rate, PruneMode mode, WeightRule rule) {
  if (candidate.size() != keep.size())
    throw InvalidInput("make_decision: mask sizes differ");
  const std::size_t n = keep.size();
  const std::size_t num_candidates =
      static_cast<std::size_t>(std::count(candidate.begin(), candidate.end(), true));
  const double p_candidate =
      rule == WeightRule::nominal
          ? rate
          : candidate_drop_probability(n, num_candidates, rate, mode);

  LevelDecision d;
  d.candidate = std::move(candidate);
  d.keep = std::move(keep);
  d.drop_probability.assign(n, 0.0);
  d.weight.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!d.keep[i] && !d.candidate[i])
      throw InvalidInput("make_decision: a non-candidate was dropped");
    if (d.candidate[i]) d.drop_probability[i] = p_candidate;
  }
  const double kept_share =
      static_cast<double>(d.kept_count()) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    if (d.keep[i]) d.weight[i] = kept_share / (1.0 - d.drop_probability[i]);
  return d;
}

LevelDecision prune_level(std::vector<bool> candidate, double rate,
                          PruneMode mode, WeightRule rule, RngStream& rng) {
  const std::size_t n = candidate.size();
  std::vector<bool> keep(n, true);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i)
    if (candidate[i]) idx.push_back(i);

  if (mode == PruneMode::bernoulli) {
    for (std::size_t i : idx)
      if (rng.uniform() < rate) keep[i] = false;
    if (n > 0 && std::none_of(keep.begin(), keep.end(), [](bool k) { return k; }))
      keep[idx[rng.below(idx.size())]] = true;
  } else {
    const std::size_t m = deterministic_drop_count(idx.size(), rate);
    for (std::size_t j : rng.choose(idx.size(), m)) keep[idx[j]] = false;
  }
  return make_decision(std::move(candidate), std::move(keep), rate, mode, rule);
}

LevelDecision prune_completions(const Group& group, const PruningConfig& cfg,
                                RngStream& rng) {
  return prune_level(completion_candidates(group.advantages), cfg.r_o,
                     cfg.mode, cfg.weights, rng);
}

std::vector<int> select_prompt_candidates(const HistoryStore& history,
                                          std::span<const int> batch,
                                          double beta) {
  if (history.epoch() < 2) return {};
  std::vector<int> order(batch.begin(), batch.end());
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double ha = history.score(a), hb = history.score(b);
    return ha != hb ? ha < hb : a < b;
  });
  const auto count = static_cast<std::size_t>(
      std::floor(beta * static_cast<double>(batch.size()) + 1e-9));
  order.resize(std::min(count, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

LevelDecision prune_prompts(std::span<const int> batch,
                            std::span<const int> candidates,
                            const PruningConfig& cfg, RngStream& rng) {
  std::vector<bool> flags(batch.size(), false);
  for (int q : candidates) {
    auto it = std::find(batch.begin(), batch.end(), q);
    if (it == batch.end())
      throw InvalidInput("prune_prompts: candidate " + std::to_string(q) +
                         " is not in the batch");
    flags[static_cast<std::size_t>(it - batch.begin())] = true;
  }
  return prune_level(std::move(flags), cfg.r_q, cfg.mode, cfg.weights, rng);
}

HistoryStore update_history(const HistoryStore& history,
                            std::span<const int> selected,
                            const std::map<int, double>& thresholds) {
  HistoryStore next = history;
  for (int q : selected) {
    auto it = thresholds.find(q);
    if (it == thresholds.end())
      throw ConsistencyError("update_history: no threshold for selected prompt " +
                             std::to_string(q));
    next.set_score(q, it->second);
  }
  return next;
}

void PruningPlan::check_against(std::span<const Group> groups) const {
  if (prompts.size() != prompt_ids.size() ||
      completions.size() != prompt_ids.size() ||
      groups.size() != prompt_ids.size())
    throw ConsistencyError("plan: level sizes do not match the batch");
  for (std::size_t k = 0; k < prompt_ids.size(); ++k) {
    if (!prompts.keep[k]) continue;
    if (groups[k].prompt_id != prompt_ids[k])
      throw ConsistencyError("plan: group order does not match prompt ids");
    if (completions[k].size() != groups[k].size())
      throw ConsistencyError("plan: completion decision size mismatch");
  }
}

LevelDecision keep_all(std::size_t n) {
  LevelDecision d;
  d.candidate.assign(n, false);
  d.keep.assign(n, true);
  d.drop_probability.assign(n, 0.0);
  d.weight.assign(n, 1.0);
  return d;
}

}  // namespace dppo
