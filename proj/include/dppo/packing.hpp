#pragma once

#include <span>
#include <string_view>
#include <vector>

namespace dppo {

enum class PackStrategy { off, first_fit, best_fit_decreasing };

PackStrategy parse_pack_strategy(std::string_view name);
std::string_view to_string(PackStrategy s);

struct PackedBatch {
  std::vector<std::vector<int>> sequences;  // prompt ids per sequence slot
  int l_max = 0;
  int n_win = 1;
};

// Packs prompts into sequences of at most l_max tokens. `lengths` is indexed
// by prompt id.
//
// first_fit keeps a FIFO pool of up to n_win prompts, refilled from the
// remaining stream in input order. Each sequence repeatedly takes the first
// pool member that fits the remaining budget and closes once none does.
// best_fit_decreasing ignores the window and places prompts, longest first,
// into the open sequence with the least remaining room. off emits one prompt
// per sequence.
//
// Throws InvalidInput if any length exceeds l_max.
PackedBatch pack(std::span<const int> prompt_ids, std::span<const int> lengths,
                 int l_max, int n_win,
                 PackStrategy strategy = PackStrategy::first_fit);

// Valid tokens over allocated tokens; 1.0 for an empty batch.
double density(const PackedBatch& batch, std::span<const int> lengths);

// Throws ConsistencyError unless every sequence fits and the sequences
// partition `prompt_ids`.
void check_packing(const PackedBatch& batch, std::span<const int> prompt_ids,
                   std::span<const int> lengths);

}  // namespace dppo
