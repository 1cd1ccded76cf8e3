#include "dppo/commands.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "dppo/error.hpp"
#include "dppo/io.hpp"
#include "dppo/oracle.hpp"
#include "dppo/packing.hpp"
#include "dppo/trainer.hpp"

namespace dppo {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

RunConfig resolve_config(const CommandOptions& opts) {
  RunConfig cfg = load_config(opts.config);
  if (opts.out) cfg.output_dir = opts.out->string();
  if (opts.workers) {
    if (*opts.workers < 1) throw ConfigError(0, "--workers must be >= 1");
    cfg.train.workers = *opts.workers;
  }
  if (opts.seed) cfg.train.seed = *opts.seed;
  return cfg;
}

namespace {

// Maps library errors to exit codes around a command body.
int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CapacityError& e) {
    err << "capacity error: " << e.what() << "\n";
    return kExitCapacity;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

void write_effective_config(const RunConfig& cfg) {
  atomic_write(fs::path(cfg.output_dir) / "effective_config.cfg",
               format_config(cfg));
}

}  // namespace

int cmd_train(const CommandOptions& opts, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(opts);
    const TrainResult result = train(cfg.task, cfg.train);
    const fs::path dir(cfg.output_dir);

    std::string metrics;
    std::int64_t wallclock = 0;
    for (const auto& m : result.metrics) {
      json j;
      j["epoch"] = m.epoch;
      j["batch"] = m.batch;
      j["mean_reward"] = m.mean_reward;
      j["expected_reward"] = m.expected_reward;
      j["pg_loss"] = m.pg_loss;
      j["kl"] = m.kl;
      j["prompts_kept"] = m.prompts_kept;
      j["prompts_total"] = m.prompts_total;
      j["completions_kept"] = m.completions_kept;
      j["completions_total"] = m.completions_total;
      j["grad_norm"] = m.grad_norm;
      j["wallclock_micros"] = m.wallclock_micros;
      j["skipped"] = m.skipped;
      metrics += j.dump() + "\n";
      wallclock += m.wallclock_micros;
    }

    std::map<int, std::array<double, 4>> per_epoch;  // reward, loss, kl, count
    for (const auto& m : result.metrics) {
      auto& acc = per_epoch[m.epoch];
      acc[0] += m.mean_reward;
      acc[1] += m.pg_loss;
      acc[2] += m.kl;
      acc[3] += 1.0;
    }
    std::string curves = "epoch,mean_reward,pg_loss,kl\n";
    for (const auto& [epoch, acc] : per_epoch)
      curves += std::to_string(epoch) + "," + format_real(acc[0] / acc[3]) +
                "," + format_real(acc[1] / acc[3]) + "," +
                format_real(acc[2] / acc[3]) + "\n";

    const double final_reward = expected_reward(cfg.task, result.params);
    std::string summary =
        "r_q,r_o,seed,final_reward,completions_used,wallclock_micros\n";
    summary += format_real(cfg.train.pruning.r_q) + "," +
               format_real(cfg.train.pruning.r_o) + "," +
               std::to_string(cfg.train.seed) + "," + format_real(final_reward) +
               "," + std::to_string(result.completions_used) + "," +
               std::to_string(wallclock) + "\n";

    write_effective_config(cfg);
    atomic_write(dir / "metrics.jsonl", metrics);
    atomic_write(dir / "curves.csv", curves);
    atomic_write(dir / "summary.csv", summary);

    log << "train: final_reward=" << format_real(final_reward)
        << " completions_used=" << result.completions_used << "/"
        << result.completions_unpruned << " skipped_batches="
        << result.skipped_batches << "/" << result.total_batches << "\n";
    if (2 * result.skipped_batches > result.total_batches) {
      err << "train: " << result.skipped_batches << " of " << result.total_batches
          << " batches were degenerate (more than 50%)\n";
      return static_cast<int>(kExitDegenerate);
    }
    return static_cast<int>(kExitOk);
  });
}

VerifyFixture make_verify_fixture(const TaskSpec& spec, const TrainConfig& cfg) {
  VerifyFixture f;
  f.behavior = PolicyParams(shape_of(spec));
  RngStream init(cfg.seed, "verify_behavior");
  for (double& v : f.behavior.logits()) v = 2.0 * init.uniform() - 1.0;
  f.params = f.behavior;
  RngStream drift(cfg.seed, "verify_params");
  for (double& v : f.params.logits()) v += 0.2 * drift.uniform() - 0.1;

  f.history = HistoryStore(spec.num_prompts);
  std::vector<int> batch;
  for (int q = 0; q < spec.num_prompts; ++q) {
    RngStream roll(cfg.seed, "verify_rollout", 0, q);
    f.groups.push_back(rollout_group(spec, f.behavior, q, cfg.group_size, roll));
    f.history.set_score(q, completion_threshold(f.groups.back().advantages));
    batch.push_back(q);
  }
  f.history.advance_epoch();
  f.prompt_candidates.assign(spec.num_prompts, false);
  for (int q : select_prompt_candidates(f.history, batch, cfg.pruning.beta))
    f.prompt_candidates[q] = true;
  return f;
}

namespace {

struct Suite {
  json checks = json::array();
  std::vector<std::string> failures;

  void add(const std::string& name, bool passed, double value,
           double threshold, json extra = json::object()) {
    json j;
    j["name"] = name;
    j["passed"] = passed;
    j["value"] = value;
    j["threshold"] = threshold;
    for (auto& [k, v] : extra.items()) j[k] = v;
    checks.push_back(std::move(j));
    if (!passed) failures.push_back(name);
  }
};

double batch_surrogate(const std::vector<Group>& groups, const PolicyParams& p,
                       const SurrogateConfig& sc, const PolicyParams* ref) {
  double total = 0.0;
  for (const auto& g : groups) {
    double s = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i)
      s += surrogate_objective(p, entry_of(g, i), sc, ref);
    total += s / static_cast<double>(g.size());
  }
  return total / static_cast<double>(groups.size());
}

GradientVector batch_surrogate_gradient(const std::vector<Group>& groups,
                                        const PolicyParams& p,
                                        const SurrogateConfig& sc,
                                        const PolicyParams* ref) {
  GradientVector total(p.shape().size());
  for (const auto& g : groups)
    for (std::size_t i = 0; i < g.size(); ++i)
      total.add_scaled(surrogate_gradient(p, entry_of(g, i), sc, ref),
                       1.0 / (static_cast<double>(groups.size()) * g.size()));
  return total;
}

void run_unbiasedness(Suite& s, const TaskSpec& spec, const TrainConfig& tc,
                      const VerifyFixture& f) {
  UnbiasednessProblem problem{f.groups, f.params, {}, f.prompt_candidates};
  {
    PruningConfig none = tc.pruning;
    none.r_o = none.r_q = 0.0;
    const auto rep = exact_unbiasedness(problem, none, PruneLevel::hierarchical);
    s.add("unbiasedness/no_pruning", rep.max_abs_deviation == 0.0 &&
                                         rep.num_plans_enumerated >= 1,
          rep.max_abs_deviation, 0.0,
          {{"plans", rep.num_plans_enumerated}});
  }
  for (PruneLevel level :
       {PruneLevel::completion, PruneLevel::prompt, PruneLevel::hierarchical})
    for (PruneMode mode : {PruneMode::bernoulli, PruneMode::deterministic_fraction})
      for (double r : {0.3, 0.5, 0.7, 0.9}) {
        PruningConfig pc = tc.pruning;
        pc.mode = mode;
        pc.r_o = pc.r_q = r;
        const auto rep = exact_unbiasedness(problem, pc, level);
        s.add("unbiasedness/" + std::string(to_string(level)) + "/" +
                  std::string(to_string(mode)) + "/r=" + format_real(r),
              rep.max_abs_deviation < 1e-10, rep.max_abs_deviation, 1e-10,
              {{"plans", rep.num_plans_enumerated}, {"joint", rep.joint}});
      }
  // Joint enumeration through estimate_gradient on a small batch.
  if (spec.num_prompts >= 3) {
    UnbiasednessProblem small{{f.groups.begin(), f.groups.begin() + 3},
                              f.params,
                              {},
                              {true, true, false}};
    for (PruneMode mode : {PruneMode::bernoulli, PruneMode::deterministic_fraction}) {
      PruningConfig pc = tc.pruning;
      pc.mode = mode;
      pc.r_o = pc.r_q = 0.5;
      const auto rep = exact_unbiasedness(small, pc, PruneLevel::hierarchical,
                                          kPlanCap, kPlanCap);
      s.add("unbiasedness_joint/hierarchical/" + std::string(to_string(mode)) +
                "/3_prompts",
            rep.joint && rep.max_abs_deviation < 1e-12, rep.max_abs_deviation,
            1e-12, {{"plans", rep.num_plans_enumerated}});
    }
  }
}

void run_gradient_checks(Suite& s, const TaskSpec& spec, const RunConfig& cfg,
                         const VerifyFixture& f) {
  const double h = cfg.verify.fd_step;
  double worst = 0.0;
  for (int q = 0; q < spec.num_prompts; ++q)
    for (const auto& c : enumerate_completions(spec, q))
      worst = std::max(
          worst, finite_diff_check(
                     f.params,
                     [&](const PolicyParams& p) { return log_prob(p, c); },
                     score_gradient(f.params, c), h));
  s.add("finite_difference/score_gradient", worst < 1e-5, worst, 1e-5);

  struct Variant {
    const char* name;
    SurrogateConfig sc;
  };
  const Variant variants[] = {
      {"plain", {0.2, 0.0, false, false}},
      {"clip", {0.2, 0.0, true, false}},
      {"kl", {0.2, 0.1, false, false}},
      {"token_level", {0.2, 0.0, false, true}},
      {"clip_kl_token_level", {0.2, 0.1, true, true}},
  };
  for (const auto& v : variants) {
    const double err = finite_diff_check(
        f.params,
        [&](const PolicyParams& p) {
          return batch_surrogate(f.groups, p, v.sc, &f.behavior);
        },
        batch_surrogate_gradient(f.groups, f.params, v.sc, &f.behavior), h);
    s.add(std::string("finite_difference/surrogate/") + v.name, err < 1e-5, err,
          1e-5);
  }

  // Full-batch GRPO objective at the behavior policy against the estimator.
  {
    PruningPlan plan;
    for (const auto& g : f.groups) {
      plan.prompt_ids.push_back(g.prompt_id);
      plan.completions.push_back(keep_all(g.size()));
    }
    plan.prompts = keep_all(f.groups.size());
    const GradientVector analytic =
        estimate_gradient(f.groups, plan, f.behavior, {});
    const double err = finite_diff_check(
        f.behavior,
        [&](const PolicyParams& p) {
          return batch_surrogate(f.groups, p, {}, nullptr);
        },
        analytic, h);
    s.add("finite_difference/grpo_batch_objective", err < 1e-5, err, 1e-5);
  }

  // Plan-enumerated DPPO objective.
  {
    PruningConfig pc = cfg.train.pruning;
    pc.r_o = pc.r_q = 0.5;
    std::vector<std::vector<bool>> cands;
    for (const auto& g : f.groups) cands.push_back(completion_candidates(g.advantages));
    auto per_completion = [&](const PolicyParams& p, bool gradient) {
      std::vector<std::vector<GradientVector>> out;
      for (const auto& g : f.groups) {
        std::vector<GradientVector> xs;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const PsiEntry e = entry_of(g, i);
          if (gradient) {
            xs.push_back(psi(p, e));
          } else {
            GradientVector v(1);
            v[0] = ratio(p, e.old_log_prob, e.completion) * e.advantage;
            xs.push_back(std::move(v));
          }
        }
        out.push_back(std::move(xs));
      }
      return out;
    };
    const GradientVector analytic = expected_pruned_estimate(
        per_completion(f.params, true), cands, f.prompt_candidates, pc,
        PruneLevel::hierarchical);
    const double err = finite_diff_check(
        f.params,
        [&](const PolicyParams& p) {
          return expected_pruned_estimate(per_completion(p, false), cands,
                                          f.prompt_candidates, pc,
                                          PruneLevel::hierarchical)[0];
        },
        analytic, h);
    s.add("finite_difference/dppo_expected_objective", err < 1e-5, err, 1e-5);
  }
}

json run_variance(Suite& s, const TaskSpec& spec, const RunConfig& cfg) {
  json table = json::array();
  const double beta = 0.5;
  double previous = 0.0;
  bool monotone = true;
  for (double r : {0.0, 0.1, 0.3, 0.5, 0.7, 0.9}) {
    const double v = variance_factor(beta, r);
    if (v < previous) monotone = false;
    previous = v;
    table.push_back({{"beta", beta}, {"r_q", r}, {"factor", v}});
  }
  const double f9 = variance_factor(0.5, 0.9), f7 = variance_factor(0.5, 0.7);
  s.add("variance_factor/beta=0.5/r_q=0.9", std::abs(f9 - 3.025) < 1e-12, f9,
        3.025);
  s.add("variance_factor/beta=0.5/r_q=0.7", f7 <= 1.42, f7, 1.42);
  s.add("variance_factor/r_q=0", variance_factor(beta, 0.0) == 1.0,
        variance_factor(beta, 0.0), 1.0);
  s.add("variance_factor/monotone_in_r_q", monotone, previous, 0.0);

  const PolicyParams low = low_score_instance(spec);
  const int workers = cfg.train.workers;
  const std::uint64_t seed = cfg.train.seed;

  PruningConfig none = cfg.train.pruning;
  none.beta = beta;
  none.r_o = none.r_q = 0.0;
  {
    const auto rep = empirical_variance(spec, low, low, none, cfg.verify.trials,
                                        seed, workers);
    const double gap = std::abs(rep.var_pruned - rep.var_pruned_exact);
    s.add("variance/no_pruning_matches_exact", gap <= 4.0 * rep.var_pruned_se,
          gap, 4.0 * rep.var_pruned_se,
          {{"var_pruned", rep.var_pruned}, {"exact", rep.var_pruned_exact}});
  }
  for (double r : {0.7, 0.9}) {
    PruningConfig pc = none;
    pc.r_o = pc.r_q = r;
    const auto rep =
        empirical_variance(spec, low, low, pc, cfg.verify.trials, seed, workers);
    s.add("variance/bound/beta=0.5/r=" + format_real(r), rep.satisfied,
          rep.var_pruned, rep.bound_value,
          {{"var_pruned_se", rep.var_pruned_se},
           {"var_pruned_exact", rep.var_pruned_exact},
           {"var_between", rep.var_between},
           {"mean_within", rep.mean_within},
           {"bound_factor", rep.bound_factor}});

    const auto inst = build_variance_instance(spec, low, low, beta);
    const auto levels = per_level_variance(inst, pc);
    double worst = -std::numeric_limits<double>::infinity();
    bool cond = true;
    for (const auto& c : levels.completion) {
      worst = std::max(worst, c.var_pruned - c.var_full);
      cond = cond && c.condition_holds;
    }
    s.add("variance/completion_level/r=" + format_real(r),
          cond && worst <= 1e-12, worst, 1e-12);
    s.add("variance/prompt_level/r=" + format_real(r),
          levels.prompt.condition_holds &&
              levels.prompt.var_pruned - levels.prompt.var_full <= 1e-12,
          levels.prompt.var_pruned - levels.prompt.var_full, 1e-12);
  }
  return table;
}

void run_sampling(Suite& s, const TaskSpec& spec, const RunConfig& cfg,
                  const VerifyFixture& f) {
  PruningConfig pc = cfg.train.pruning;
  pc.r_o = pc.r_q = 0.5;
  const auto rep = sampling_unbiasedness(
      spec, f.behavior, f.params, f.history, pc, cfg.train.group_size,
      cfg.verify.trials, cfg.train.seed, cfg.train.workers);
  s.add("sampling_unbiasedness/hierarchical/r=0.5", rep.within(4.0), rep.max_z,
        4.0, {{"trials", rep.trials}, {"max_abs_deviation", rep.max_abs_deviation}});
}

}  // namespace

int cmd_verify(const CommandOptions& opts, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(opts);
    const TaskSpec& spec = cfg.task;
    if (!spec.enumerable)
      throw CapacityError("verify needs an enumerable task");
    spec.validate();
    const VerifyFixture fixture = make_verify_fixture(spec, cfg.train);

    Suite suite;
    run_unbiasedness(suite, spec, cfg.train, fixture);
    run_gradient_checks(suite, spec, cfg, fixture);
    const json table = run_variance(suite, spec, cfg);
    run_sampling(suite, spec, cfg, fixture);

    json report;
    report["passed"] = suite.failures.empty();
    report["num_checks"] = suite.checks.size();
    report["failures"] = suite.failures;
    report["variance_factor_table"] = table;
    report["checks"] = suite.checks;
    write_effective_config(cfg);
    atomic_write(fs::path(cfg.output_dir) / "verify_report.json",
                 report.dump(2) + "\n");

    log << "verify: " << suite.checks.size() - suite.failures.size() << "/"
        << suite.checks.size() << " checks passed\n";
    if (!suite.failures.empty()) {
      err << "verify: failed checks:\n";
      for (const auto& name : suite.failures) err << "  " << name << "\n";
      return static_cast<int>(kExitCheckFailed);
    }
    return static_cast<int>(kExitOk);
  });
}

std::vector<int> pack_profile(const std::string& distribution, int num_prompts,
                              int l_max, std::uint64_t seed, int profile) {
  int index = 0;
  if (distribution == "mixed") index = 1;
  else if (distribution == "short_heavy") index = 2;
  else if (distribution != "uniform_max")
    throw InvalidInput("unknown length distribution '" + distribution + "'");
  RngStream rng(seed, "pack_bench", index, profile);
  const auto span = [&](int lo, int hi) {
    return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  };
  std::vector<int> lengths(num_prompts);
  for (int& len : lengths) {
    if (index == 0) len = l_max;
    else if (index == 1) len = span(2, l_max);
    else len = rng.uniform() < 0.75 ? span(2, std::max(2, l_max / 4)) : span(2, l_max);
  }
  return lengths;
}

int cmd_pack_bench(const CommandOptions& opts, std::ostream& log,
                   std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(opts);
    const PackBenchConfig& pb = cfg.pack_bench;
    std::string csv =
        "distribution,strategy,num_profiles,num_prompts,l_max,n_win,sequences,"
        "valid_tokens,allocated_tokens,density\n";
    if (pb.num_prompts > 0) {
      std::vector<int> ids(pb.num_prompts);
      for (int i = 0; i < pb.num_prompts; ++i) ids[i] = i;
      for (const auto& dist : pb.distributions)
        for (PackStrategy strategy : {PackStrategy::off, PackStrategy::first_fit,
                                      PackStrategy::best_fit_decreasing}) {
          long long sequences = 0, valid = 0, allocated = 0;
          for (int p = 0; p < pb.num_profiles; ++p) {
            const auto lengths =
                pack_profile(dist, pb.num_prompts, pb.l_max, cfg.train.seed, p);
            const PackedBatch packed =
                pack(ids, lengths, pb.l_max, cfg.train.n_win, strategy);
            check_packing(packed, ids, lengths);
            sequences += static_cast<long long>(packed.sequences.size());
            for (int len : lengths) valid += len;
            allocated += static_cast<long long>(packed.sequences.size()) * pb.l_max;
          }
          const double dens = allocated > 0 ? static_cast<double>(valid) /
                                                  static_cast<double>(allocated)
                                            : 1.0;
          csv += dist + "," + std::string(to_string(strategy)) + "," +
                 std::to_string(pb.num_profiles) + "," +
                 std::to_string(pb.num_prompts) + "," + std::to_string(pb.l_max) +
                 "," + std::to_string(cfg.train.n_win) + "," +
                 std::to_string(sequences) + "," + std::to_string(valid) + "," +
                 std::to_string(allocated) + "," + format_real(dens) + "\n";
        }
    }
    write_effective_config(cfg);
    atomic_write(fs::path(cfg.output_dir) / "pack_bench.csv", csv);
    log << "pack-bench: wrote " << (fs::path(cfg.output_dir) / "pack_bench.csv").string()
        << "\n";
    return static_cast<int>(kExitOk);
  });
}

}  // namespace dppo
