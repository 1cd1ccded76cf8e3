#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dppo/error.hpp"
#include "dppo/trainer.hpp"

using namespace dppo;

namespace {

struct Batch {
  TaskSpec spec = default_task_spec();
  PolicyParams old;
  PolicyParams now;
  std::vector<Group> groups;
};

Batch make_batch(std::uint64_t seed) {
  Batch b;
  b.old = PolicyParams(shape_of(b.spec));
  RngStream init(seed, "init");
  for (double& v : b.old.logits()) v = 2.0 * init.uniform() - 1.0;
  b.now = b.old;
  for (double& v : b.now.logits()) v += 0.1 * init.uniform();
  for (int q = 0; q < b.spec.num_prompts; ++q) {
    RngStream roll(seed, "rollout", 1, q);
    b.groups.push_back(rollout_group(b.spec, b.old, q, 5, roll));
  }
  return b;
}

PruningPlan keep_everything(const std::vector<Group>& groups) {
  PruningPlan plan;
  for (const auto& g : groups) {
    plan.prompt_ids.push_back(g.prompt_id);
    plan.completions.push_back(keep_all(g.size()));
  }
  plan.prompts = keep_all(groups.size());
  return plan;
}

}  // namespace

TEST_CASE("unpruned estimate is the GRPO batch gradient") {
  const Batch b = make_batch(3);
  const GradientVector g = estimate_gradient(b.groups, keep_everything(b.groups), b.now, {});
  GradientVector ref(b.now.shape().size());
  for (const auto& grp : b.groups) {
    GradientVector mean(ref.size());
    for (std::size_t i = 0; i < grp.size(); ++i) mean.add_scaled(psi(b.now, entry_of(grp, i)), 1.0);
    for (double& v : mean.values) v /= static_cast<double>(grp.size());
    ref.add_scaled(mean, 1.0);
  }
  for (double& v : ref.values) v /= static_cast<double>(b.groups.size());
  CHECK(g.values == ref.values);
}

TEST_CASE("single group rescaling is inverse-inclusion weighting") {
  const Batch b = make_batch(5);
  Group g = b.groups[0];
  g.advantages = {3, .5, -.5, .5, -.5};  // four candidates
  const LevelDecision d = make_decision({false, true, true, true, true},
                                        {true, false, true, true, false}, 0.5,
                                        PruneMode::deterministic_fraction,
                                        WeightRule::inclusion_exact);
  PruningPlan plan;
  plan.prompt_ids = {g.prompt_id};
  plan.prompts = keep_all(1);
  plan.completions = {d};
  const std::vector<Group> groups = {g};
  const GradientVector est = estimate_gradient(groups, plan, b.now, {});

  GradientVector expect(est.size());
  const double p[] = {0.0, 0.5, 0.5, 0.5, 0.5};
  for (std::size_t i = 0; i < 5; ++i)
    if (d.keep[i]) expect.add_scaled(psi(b.now, entry_of(g, i)), 0.2 / (1.0 - p[i]));
  for (std::size_t j = 0; j < est.size(); ++j)
    CHECK(est[j] == doctest::Approx(expect[j]).epsilon(1e-12));
}

TEST_CASE("zero advantages give a zero gradient under any plan") {
  Batch b = make_batch(7);
  for (auto& g : b.groups) std::fill(g.advantages.begin(), g.advantages.end(), 0.0);
  PruningConfig cfg;
  cfg.r_o = cfg.r_q = 0.5;
  PruningPlan plan;
  std::vector<int> batch;
  for (const auto& g : b.groups) batch.push_back(g.prompt_id);
  plan.prompt_ids = batch;
  RngStream rng(1);
  plan.prompts = prune_prompts(batch, std::vector<int>{1, 2}, cfg, rng);
  for (const auto& g : b.groups) plan.completions.push_back(prune_completions(g, cfg, rng));
  for (double v : estimate_gradient(b.groups, plan, b.now, {}).values) CHECK(v == 0.0);
}

TEST_CASE("degenerate and inconsistent plans") {
  const Batch b = make_batch(9);
  PruningPlan plan = keep_everything(b.groups);
  plan.prompts.keep.assign(plan.prompts.size(), false);
  CHECK_THROWS_AS(estimate_gradient(b.groups, plan, b.now, {}), DegenerateBatch);
  PruningPlan short_plan = keep_everything(b.groups);
  short_plan.completions.pop_back();
  CHECK_THROWS_AS(estimate_gradient(b.groups, short_plan, b.now, {}), ConsistencyError);
  PruningPlan swapped = keep_everything(b.groups);
  std::swap(swapped.prompt_ids[0], swapped.prompt_ids[1]);
  CHECK_THROWS_AS(estimate_gradient(b.groups, swapped, b.now, {}), ConsistencyError);
}

TEST_CASE("training is reproducible and independent of worker count") {
  const TaskSpec spec = default_task_spec();
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.seed = 17;
  cfg.pruning.r_o = cfg.pruning.r_q = 0.5;
  const TrainResult a = train(spec, cfg);
  const TrainResult b = train(spec, cfg);
  CHECK(a.params == b.params);
  cfg.workers = 4;
  const TrainResult c = train(spec, cfg);
  CHECK(a.params == c.params);
  REQUIRE(a.metrics.size() == c.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(a.metrics[i].grad_norm == c.metrics[i].grad_norm);
    CHECK(a.metrics[i].completions_kept == c.metrics[i].completions_kept);
  }
}

TEST_CASE("unpruned training converges on the default task") {
  const TaskSpec spec = default_task_spec();
  TrainConfig cfg;
  cfg.seed = 0;
  const TrainResult r = train(spec, cfg);
  // Exact expected reward at the end of each epoch.
  std::vector<double> per_epoch;
  for (const auto& m : r.metrics)
    if (per_epoch.size() < static_cast<std::size_t>(m.epoch)) per_epoch.push_back(m.expected_reward);
    else per_epoch.back() = m.expected_reward;
  REQUIRE(per_epoch.size() == 60);
  double prev = expected_reward(spec, initial_params(spec, cfg));
  for (int e = 0; e < 10; ++e) {
    CHECK(per_epoch[e] > prev);
    prev = per_epoch[e];
  }
  CHECK(per_epoch.back() > 0.9);
  CHECK(expected_reward(spec, r.params) == per_epoch.back());
  CHECK(r.skipped_batches == 0);
  CHECK(r.completions_used == r.completions_unpruned);
}

TEST_CASE("pruned training bookkeeping") {
  const TaskSpec spec = default_task_spec();
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.seed = 4;
  cfg.pruning.r_o = cfg.pruning.r_q = 0.5;
  const TrainResult r = train(spec, cfg);
  long long kept = 0;
  for (const auto& m : r.metrics) {
    CHECK(m.prompts_kept <= m.prompts_total);
    CHECK(m.completions_kept <= m.completions_total);
    CHECK(m.prompts_kept >= 1);
    if (m.epoch == 1) CHECK(m.prompts_kept == m.prompts_total);
    kept += m.completions_kept;
  }
  CHECK(kept == r.completions_used);
  CHECK(r.completions_used < r.completions_unpruned);
  // Every score came from some epoch's threshold.
  for (int at : r.history_written_at) {
    CHECK(at >= 1);
    CHECK(at <= cfg.epochs);
  }
}

TEST_CASE("batches partition the prompts") {
  TaskSpec spec = make_task_spec(13, 3, 2);
  TrainConfig cfg;
  for (PackStrategy s :
       {PackStrategy::off, PackStrategy::first_fit, PackStrategy::best_fit_decreasing}) {
    cfg.pack_strategy = s;
    cfg.l_max = 10;
    std::vector<int> seen;
    for (const auto& batch : make_batches(spec, cfg)) seen.insert(seen.end(), batch.begin(), batch.end());
    std::sort(seen.begin(), seen.end());
    for (int q = 0; q < 13; ++q) CHECK(seen[q] == q);
    CHECK(seen.size() == 13);
  }
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.group_size = 1;
  CHECK_THROWS_AS(cfg.validate(), InvalidInput);
  cfg = TrainConfig{};
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidInput);
}
