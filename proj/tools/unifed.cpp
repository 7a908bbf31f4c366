#include <cmath>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "unifed/config.hpp"
#include "unifed/parallel.hpp"

namespace {

namespace cf = unifed::config;

cf::ExperimentConfig load_with_seed(const std::string& path, std::int64_t seed) {
  auto cfg = cf::load_config(path);
  if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
  return cfg;
}

void print_report(const char* arm, const unifed::fedtest::EvalReport& r) {
  std::cout << arm << ": loss " << r.loss;
  if (std::isfinite(r.accuracy)) std::cout << ", accuracy " << r.accuracy;
  std::cout << " (" << r.n_samples << " samples)\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"config driven federated training with client-local batch norm"};
  app.require_subcommand(1);
  // global flags may follow the subcommand; fallthrough_ is INHERITABLE, so
  // subcommands created below pick it up
  app.fallthrough();

  int threads = 0;
  app.add_option("--threads", threads, "worker threads; results do not depend on it")
      ->envname("UNIFED_THREADS");

  std::string config_path, run_dir, which;
  std::string out_root = "runs";
  std::string checkpoint = "final";
  std::int64_t seed = -1;
  double scale = 0.0;
  std::size_t samples = 0;
  std::vector<double> grid;

  auto* train = app.add_subcommand("train", "federated training run");
  train->add_option("--config", config_path, "experiment config (json)")
      ->required()
      ->check(CLI::ExistingFile);
  train->add_option("--out", out_root, "output root directory");
  train->add_option("--seed", seed, "override the config seed");

  auto* test = app.add_subcommand("test-external",
                                  "frozen vs re-estimated evaluation on an unseen client");
  test->add_option("--run", run_dir, "training run directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  test->add_option("--scale", scale, "unseen covariance scale (default from the config)");
  test->add_option("--samples", samples, "unseen sample count (default from the config)");
  test->add_option("--checkpoint", checkpoint, "final or best")
      ->check(CLI::IsMember({"final", "best"}));

  auto* ntk = app.add_subcommand("ntk", "kernel analysis of the two-layer model");
  ntk->add_option("--config", config_path, "experiment config (json)")
      ->required()
      ->check(CLI::ExistingFile);
  ntk->add_option("--out", out_root, "output root directory");
  ntk->add_option("--seed", seed, "override the config seed");

  auto* ablate = app.add_subcommand("ablate", "re-estimation ablations on a trained run");
  ablate->add_option("--run", run_dir, "training run directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  ablate->add_option("--which", which, "batch, momentum or order")
      ->required()
      ->check(CLI::IsMember({"batch", "momentum", "order"}));
  ablate->add_option("--grid", grid, "grid values (defaults when omitted)")->delimiter(',');

  auto* verify = app.add_subcommand("verify", "run the built-in invariant suite");

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) unifed::set_thread_count(threads);

  try {
    if (app.got_subcommand(train)) {
      const auto cfg = load_with_seed(config_path, seed);
      std::cout << "run written to " << cf::cmd_train(cfg, out_root) << "\n";
    } else if (app.got_subcommand(test)) {
      const auto cmp = cf::cmd_test_external(run_dir, scale, samples, checkpoint);
      print_report("frozen", cmp.frozen);
      print_report("reestimated", cmp.reestimated);
      std::cout << "comparison written to " << run_dir << "/comparison.json\n";
    } else if (app.got_subcommand(ntk)) {
      const auto cfg = load_with_seed(config_path, seed);
      std::cout << "analysis written to " << cf::cmd_ntk(cfg, out_root) << "\n";
    } else if (app.got_subcommand(ablate)) {
      std::cout << "ablation written to " << cf::cmd_ablate(run_dir, which, grid) << "\n";
    } else if (app.got_subcommand(verify)) {
      return cf::verify_suite(std::cout) ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
