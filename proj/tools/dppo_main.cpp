#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dppo/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"dppo: dynamic pruning policy optimization on a synthetic task"};
  app.require_subcommand(1);

  dppo::CommandOptions opts;
  std::string config, out;
  int workers = 0;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "run configuration (key=value)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out", out, "output directory (overrides output_dir)");
    sub->add_option("--workers", workers, "worker threads (overrides workers)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed, "root seed (overrides seed)");
  };
  auto* train = app.add_subcommand("train", "run the trainer");
  auto* verify = app.add_subcommand("verify", "run the oracle suite");
  auto* bench = app.add_subcommand("pack-bench", "compare packing strategies");
  for (auto* sub : {train, verify, bench}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : dppo::kExitUsage;
  }

  auto* sub = app.get_subcommands().front();
  opts.config = config;
  if (sub->count("--out")) opts.out = out;
  if (sub->count("--workers")) opts.workers = workers;
  if (sub->count("--seed")) opts.seed = seed;

  if (sub == train) return dppo::cmd_train(opts, std::cout, std::cerr);
  if (sub == verify) return dppo::cmd_verify(opts, std::cout, std::cerr);
  return dppo::cmd_pack_bench(opts, std::cout, std::cerr);
}
