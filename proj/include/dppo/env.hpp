#pragma once

#include <cstddef>
#include <vector>

namespace dppo {

// A synthetic prompt/reward task with an enumerable completion space.
struct TaskSpec {
  int num_prompts = 0;
  int vocab_size = 0;
  int completion_len = 0;
  std::vector<int> prompt_lengths;           // tokens per prompt, for packing
  std::vector<std::vector<int>> target_map;  // per-prompt target completion
  bool enumerable = true;
  std::size_t enumeration_cap = 10'000;

  // Throws InvalidInput (or CapacityError for an enumerable spec whose
  // completion space exceeds the cap).
  void validate() const;

  // vocab_size^completion_len, saturating at SIZE_MAX.
  std::size_t completion_space_size() const;
};

struct Completion {
  int prompt_id = 0;
  std::vector<int> tokens;

  friend bool operator==(const Completion&, const Completion&) = default;
};

// 8 prompts, vocabulary 3, two tokens per completion.
TaskSpec default_task_spec();

// Deterministic targets and prompt lengths for a task of the given shape.
TaskSpec make_task_spec(int num_prompts, int vocab_size, int completion_len);

void validate_completion(const TaskSpec& spec, const Completion& c);

// Fraction of positions where the completion matches the prompt's target.
double reward(const TaskSpec& spec, const Completion& c);

// All completions of a prompt in lexicographic token order.
std::vector<Completion> enumerate_completions(const TaskSpec& spec,
                                              int prompt_id);

}  // namespace dppo
