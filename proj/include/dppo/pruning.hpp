#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "dppo/grpo.hpp"
#include "dppo/rng.hpp"

namespace dppo {

enum class PruneMode { bernoulli, deterministic_fraction };

// Which drop probability enters the rescaling factor. inclusion_exact uses the
// realized design (floor arithmetic, empty-retention guard); nominal uses the
// configured rate as-is and is biased whenever the two differ.
enum class WeightRule { inclusion_exact, nominal };

struct PruningConfig {
  double r_o = 0.0;
  double r_q = 0.0;
  double beta = 0.5;
  PruneMode mode = PruneMode::deterministic_fraction;
  WeightRule weights = WeightRule::inclusion_exact;

  void validate() const;
};

// Keep/drop outcome for one level (the prompts of a batch, or the completions
// of one group). All vectors are aligned with the items of that level.
struct LevelDecision {
  std::vector<bool> candidate;
  std::vector<bool> keep;
  std::vector<double> drop_probability;  // the value used in the weight
  std::vector<double> weight;            // gamma; exactly 0 for dropped items

  std::size_t size() const { return keep.size(); }
  std::size_t kept_count() const;
};

// Per-prompt scores H_t(q) with carry-forward. `epoch` is the current training
// epoch, starting at 1; prompt-level pruning is inactive while it is 1.
class HistoryStore {
 public:
  explicit HistoryStore(int num_prompts)
      : scores_(static_cast<std::size_t>(num_prompts), 0.0) {}

  int epoch() const { return epoch_; }
  void advance_epoch() { ++epoch_; }
  double score(int prompt_id) const;
  std::span<const double> scores() const { return scores_; }
  std::size_t size() const { return scores_.size(); }

  void set_score(int prompt_id, double value);

 private:
  std::vector<double> scores_;
  int epoch_ = 1;
};

// Mean absolute advantage.
double completion_threshold(std::span<const double> advantages);

// |A_i| <= threshold
std::vector<bool> completion_candidates(std::span<const double> advantages);

// Probability that a single candidate is dropped under the realized design:
//   bernoulli:               rate, less rate^N / N when every item is a
//                            candidate (one candidate is resurrected if all
//                            N would be dropped)
//   deterministic_fraction:  floor(rate * C) / C
double candidate_drop_probability(std::size_t num_items,
                                  std::size_t num_candidates, double rate,
                                  PruneMode mode);

// floor(rate * C), robust to representation error in rate * C.
std::size_t deterministic_drop_count(std::size_t num_candidates, double rate);

// Rescaling factors for a realized keep mask:
//   gamma_i = (|S| / N) / (1 - p_i)  for kept items, 0 for dropped,
// with p_i from candidate_drop_probability (or the nominal rate), 0 for
// non-candidates.
LevelDecision make_decision(std::vector<bool> candidate, std::vector<bool> keep,
                            double rate, PruneMode mode, WeightRule rule);

// Draws a keep mask over the candidates and returns it with its weights.
LevelDecision prune_level(std::vector<bool> candidate, double rate,
                          PruneMode mode, WeightRule rule, RngStream& rng);

LevelDecision prune_completions(const Group& group, const PruningConfig& cfg,
                                RngStream& rng);

// The floor(beta * |batch|) prompts with the smallest scores, ties broken by
// ascending prompt id; empty while history.epoch() < 2. Returned sorted.
std::vector<int> select_prompt_candidates(const HistoryStore& history,
                                          std::span<const int> batch,
                                          double beta);

LevelDecision prune_prompts(std::span<const int> batch,
                            std::span<const int> candidates,
                            const PruningConfig& cfg, RngStream& rng);

// H(q) = threshold for selected prompts, carried forward otherwise.
HistoryStore update_history(const HistoryStore& history,
                            std::span<const int> selected,
                            const std::map<int, double>& thresholds);

// Hierarchical plan for one batch. completions[k] belongs to prompt_ids[k] and
// is empty when that prompt was dropped.
struct PruningPlan {
  std::vector<int> prompt_ids;
  LevelDecision prompts;
  std::vector<LevelDecision> completions;

  // Throws ConsistencyError when the levels disagree with the groups.
  void check_against(std::span<const Group> groups) const;
};

// Decision that keeps everything with weight 1.
LevelDecision keep_all(std::size_t n);

}  // namespace dppo
