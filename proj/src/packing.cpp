#include "dppo/packing.hpp"

#include <algorithm>
#include <deque>
#include <string>

#include "dppo/error.hpp"

namespace dppo {

PackStrategy parse_pack_strategy(std::string_view name) {
  if (name == "off") return PackStrategy::off;
  if (name == "first_fit") return PackStrategy::first_fit;
  if (name == "best_fit_decreasing") return PackStrategy::best_fit_decreasing;
  throw InvalidInput("unknown pack strategy '" + std::string(name) + "'");
}

std::string_view to_string(PackStrategy s) {
  switch (s) {
    case PackStrategy::off:
      return "off";
    case PackStrategy::first_fit:
      return "first_fit";
    case PackStrategy::best_fit_decreasing:
      return "best_fit_decreasing";
  }
  return "?";
}

namespace {

int length_of(std::span<const int> lengths, int id) {
  if (id < 0 || static_cast<std::size_t>(id) >= lengths.size())
    throw InvalidInput("pack: prompt id " + std::to_string(id) +
                       " has no length");
  return lengths[id];
}

std::vector<std::vector<int>> pack_first_fit(std::span<const int> ids,
                                             std::span<const int> lengths,
                                             int l_max, int n_win) {
  std::vector<std::vector<int>> out;
  std::deque<int> pool;
  std::size_t next = 0;
  auto refill = [&] {
    while (pool.size() < static_cast<std::size_t>(n_win) && next < ids.size())
      pool.push_back(ids[next++]);
  };
  refill();
  while (!pool.empty()) {
    std::vector<int> seq;
    int remaining = l_max;
    for (;;) {
      auto it = std::find_if(pool.begin(), pool.end(), [&](int id) {
        return length_of(lengths, id) <= remaining;
      });
      if (it == pool.end()) break;
      remaining -= length_of(lengths, *it);
      seq.push_back(*it);
      pool.erase(it);
      refill();
    }
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<std::vector<int>> pack_best_fit_decreasing(
    std::span<const int> ids, std::span<const int> lengths, int l_max) {
  std::vector<int> order(ids.begin(), ids.end());
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return length_of(lengths, a) > length_of(lengths, b);
  });
  std::vector<std::vector<int>> out;
  std::vector<int> room;
  for (int id : order) {
    const int len = length_of(lengths, id);
    std::size_t best = out.size();
    for (std::size_t s = 0; s < out.size(); ++s)
      if (room[s] >= len && (best == out.size() || room[s] < room[best]))
        best = s;
    if (best == out.size()) {
      out.emplace_back();
      room.push_back(l_max);
    }
    out[best].push_back(id);
    room[best] -= len;
  }
  return out;
}

}  // namespace

PackedBatch pack(std::span<const int> prompt_ids, std::span<const int> lengths,
                 int l_max, int n_win, PackStrategy strategy) {
  if (l_max < 1) throw InvalidInput("pack: l_max must be >= 1");
  if (n_win < 1) throw InvalidInput("pack: n_win must be >= 1");
  for (int id : prompt_ids) {
    const int len = length_of(lengths, id);
    if (len > l_max)
      throw InvalidInput("pack: prompt " + std::to_string(id) + " of length " +
                         std::to_string(len) + " is unpackable into l_max " +
                         std::to_string(l_max));
  }
  PackedBatch batch;
  batch.l_max = l_max;
  batch.n_win = n_win;
  switch (strategy) {
    case PackStrategy::off:
      for (int id : prompt_ids) batch.sequences.push_back({id});
      break;
    case PackStrategy::first_fit:
      batch.sequences = pack_first_fit(prompt_ids, lengths, l_max, n_win);
      break;
    case PackStrategy::best_fit_decreasing:
      batch.sequences = pack_best_fit_decreasing(prompt_ids, lengths, l_max);
      break;
  }
  return batch;
}

double density(const PackedBatch& batch, std::span<const int> lengths) {
  if (batch.sequences.empty()) return 1.0;
  long long tokens = 0;
  for (const auto& seq : batch.sequences)
    for (int id : seq) tokens += length_of(lengths, id);
  return static_cast<double>(tokens) /
         (static_cast<double>(batch.sequences.size()) * batch.l_max);
}

void check_packing(const PackedBatch& batch, std::span<const int> prompt_ids,
                   std::span<const int> lengths) {
  std::vector<int> seen;
  for (const auto& seq : batch.sequences) {
    int used = 0;
    for (int id : seq) {
      used += length_of(lengths, id);
      seen.push_back(id);
    }
    if (used > batch.l_max)
      throw ConsistencyError("packing: a sequence exceeds l_max");
    if (seq.empty()) throw ConsistencyError("packing: empty sequence");
  }
  std::vector<int> expected(prompt_ids.begin(), prompt_ids.end());
  std::sort(seen.begin(), seen.end());
  std::sort(expected.begin(), expected.end());
  if (seen != expected)
    throw ConsistencyError("packing: sequences do not partition the input");
}

}  // namespace dppo
