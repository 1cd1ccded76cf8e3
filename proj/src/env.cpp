#include "dppo/env.hpp"

#include <cstdint>
#include <string>

#include "dppo/error.hpp"

namespace dppo {

void TaskSpec::validate() const {
  if (num_prompts < 1) throw InvalidInput("task: num_prompts must be >= 1");
  if (vocab_size < 1) throw InvalidInput("task: vocab_size must be >= 1");
  if (completion_len < 1)
    throw InvalidInput("task: completion_len must be >= 1");
  if (prompt_lengths.size() != static_cast<std::size_t>(num_prompts))
    throw InvalidInput("task: prompt_lengths must have num_prompts entries");
  for (int len : prompt_lengths)
    if (len < 1) throw InvalidInput("task: every prompt length must be >= 1");
  if (target_map.size() != static_cast<std::size_t>(num_prompts))
    throw InvalidInput("task: target_map must have num_prompts entries");
  for (const auto& target : target_map) {
    if (target.size() != static_cast<std::size_t>(completion_len))
      throw InvalidInput("task: each target must have completion_len tokens");
    for (int tok : target)
      if (tok < 0 || tok >= vocab_size)
        throw InvalidInput("task: target token out of range");
  }
  if (enumerable && completion_space_size() > enumeration_cap)
    throw CapacityError("task: vocab_size^completion_len = " +
                        std::to_string(completion_space_size()) +
                        " exceeds the enumeration cap " +
                        std::to_string(enumeration_cap));
}

std::size_t TaskSpec::completion_space_size() const {
  std::size_t n = 1;
  for (int i = 0; i < completion_len; ++i) {
    if (n > SIZE_MAX / static_cast<std::size_t>(vocab_size)) return SIZE_MAX;
    n *= static_cast<std::size_t>(vocab_size);
  }
  return n;
}

TaskSpec make_task_spec(int num_prompts, int vocab_size, int completion_len) {
  TaskSpec spec;
  spec.num_prompts = num_prompts;
  spec.vocab_size = vocab_size;
  spec.completion_len = completion_len;
  for (int q = 0; q < num_prompts; ++q) {
    spec.prompt_lengths.push_back(2 + (5 * q + 3) % 7);
    std::vector<int> target;
    for (int t = 0; t < completion_len; ++t)
      target.push_back((q + 2 * t + q / 3) % vocab_size);
    spec.target_map.push_back(std::move(target));
  }
  return spec;
}

TaskSpec default_task_spec() { return make_task_spec(8, 3, 2); }

void validate_completion(const TaskSpec& spec, const Completion& c) {
  if (c.prompt_id < 0 || c.prompt_id >= spec.num_prompts)
    throw InvalidInput("completion: prompt_id out of range");
  if (c.tokens.size() != static_cast<std::size_t>(spec.completion_len))
    throw InvalidInput("completion: wrong number of tokens");
  for (int tok : c.tokens)
    if (tok < 0 || tok >= spec.vocab_size)
      throw InvalidInput("completion: token out of range");
}

double reward(const TaskSpec& spec, const Completion& c) {
  validate_completion(spec, c);
  const auto& target = spec.target_map[c.prompt_id];
  int matches = 0;
  for (std::size_t t = 0; t < c.tokens.size(); ++t)
    matches += c.tokens[t] == target[t] ? 1 : 0;
  return static_cast<double>(matches) / static_cast<double>(c.tokens.size());
}

std::vector<Completion> enumerate_completions(const TaskSpec& spec,
                                              int prompt_id) {
  if (prompt_id < 0 || prompt_id >= spec.num_prompts)
    throw InvalidInput("enumerate_completions: prompt_id out of range");
  const std::size_t total = spec.completion_space_size();
  if (total > spec.enumeration_cap)
    throw CapacityError("enumerate_completions: " + std::to_string(total) +
                        " completions exceed the cap " +
                        std::to_string(spec.enumeration_cap));
  std::vector<Completion> out;
  out.reserve(total);
  Completion c{prompt_id, std::vector<int>(spec.completion_len, 0)};
  for (std::size_t n = 0; n < total; ++n) {
    out.push_back(c);
    // Odometer increment, last position fastest.
    for (int t = spec.completion_len - 1; t >= 0; --t) {
      if (++c.tokens[t] < spec.vocab_size) break;
      c.tokens[t] = 0;
    }
  }
  return out;
}

}  // namespace dppo
