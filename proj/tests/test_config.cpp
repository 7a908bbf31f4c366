#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "unifed/config.hpp"

namespace cf = unifed::config;
namespace dg = unifed::datagen;
namespace fl = unifed::fl;
namespace nn = unifed::nn;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void expect_error_with(const std::string& text, const std::string& needle) {
  try {
    cf::parse_config(text);
    FAIL("expected a config error for: " << text);
  } catch (const cf::ConfigError& e) {
    CHECK(std::string(e.what()).find(needle) != std::string::npos);
  }
}

cf::ExperimentConfig small_config() {
  cf::ExperimentConfig cfg;
  cfg.run_id = "small";
  cfg.seed = 5;
  cfg.data.clients = 2;
  cfg.data.dim = 4;
  cfg.data.samples_per_client = 40;
  cfg.data.severity = 1.0;
  cfg.model.hidden = {6};
  cfg.fl.rounds = 3;
  cfg.fl.local_lr = 0.01;
  cfg.fl.batch_size = 16;
  cfg.test.external_samples = 64;
  cfg.test.reestimation.batch_size = 16;
  return cfg;
}

struct TrainedRun {
  fs::path root_a, root_b;
  std::string dir_a, dir_b;
  cf::ExperimentConfig cfg;
};

const TrainedRun& trained_run() {
  static TrainedRun r = [] {
    TrainedRun t;
    t.cfg = small_config();
    const fs::path base = fs::temp_directory_path() / "unifed_cfg_tests";
    fs::remove_all(base);
    t.root_a = base / "a";
    t.root_b = base / "b";
    t.dir_a = cf::cmd_train(t.cfg, t.root_a.string());
    t.dir_b = cf::cmd_train(t.cfg, t.root_b.string());
    return t;
  }();
  return r;
}

}  // namespace

TEST_CASE("minimal config fills every default") {
  const auto cfg = cf::parse_config(R"({"format_version": 1})");
  CHECK(cfg.run_id == "run");
  CHECK(cfg.seed == 1);
  CHECK(cfg.data.clients == 3);
  CHECK(cfg.data.dim == 16);
  CHECK(cfg.data.samples_per_client == 200);
  CHECK(cfg.data.shift == dg::ShiftKind::Scale);
  CHECK(cfg.model.hidden == std::vector<std::size_t>{32, 16});
  CHECK(cfg.fl.strategy == fl::Strategy::FedAvg);
  CHECK(cfg.fl.rounds == 200);
  CHECK(cfg.fl.local_lr == 0.001);
  CHECK(cfg.fl.batch_size == 32);
  CHECK(cfg.test.reestimation.tau == 0.9);
  CHECK(cfg.test.external_scale == 4.0);
  CHECK_FALSE(cfg.analysis.ntk);
}

TEST_CASE("strict schema reports the key path") {
  expect_error_with(R"({})", "format_version");
  expect_error_with(R"({"format_version": 1, "fromat_version": 1})", "fromat_version");
  expect_error_with(R"({"format_version": 2})", "format_version");
  expect_error_with(R"({"format_version": 1, "data": {"shiftt": "scale"}})", "data.shiftt");
  expect_error_with(R"({"format_version": 1, "data": {"shift": "scele"}})", "data.shift");
  expect_error_with(R"({"format_version": 1, "fl": {"rounds": "two"}})", "fl.rounds");
  expect_error_with(R"({"format_version": 1, "fl": {"strategy": "fedsgd"}})", "fl.strategy");
  expect_error_with(
      R"({"format_version": 1, "test": {"reestimation": {"tau": 1.0}}})",
      "test.reestimation.tau");
  expect_error_with(R"({"format_version": 1, "run_id": "a/b"})", "run_id");
  expect_error_with(R"({"format_version": 1, "fl": {"loss": "cross_entropy"}})", "fl.loss");
  expect_error_with(
      R"({"format_version": 1, "data": {"clients": 2}, "fl": {"client_weights": [1.0]}})",
      "fl.client_weights");
  expect_error_with(R"({"format_version": 1, "data": {"samples_per_client": 5}})",
                    "data.samples_per_client");
  expect_error_with(
      R"({"format_version": 1, "data": {"split": {"train": 0.5, "val": 0.2, "test": 0.2}}})",
      "data.split");
  expect_error_with(R"({"format_version": 1, "model": {"bn_eps": 0.0}})", "model.bn_eps");
  expect_error_with(R"({"format_version": 1, "analysis": {"ntk_mc_samples": 1}})",
                    "analysis.ntk_mc_samples");
  expect_error_with(R"({"format_version": 1,)", "invalid JSON");
  expect_error_with(R"(["format_version"])", "expected a JSON object");
}

TEST_CASE("resolved config round trips byte for byte") {
  const auto cfg = cf::parse_config(R"({
    "format_version": 1,
    "run_id": "rt",
    "seed": 42,
    "data": {"clients": 2, "dim": 6, "teacher": "linear_classification", "shift": "rotate"},
    "fl": {"strategy": "scaffold", "exclude_bn": true, "rounds": 7, "loss": "cross_entropy",
           "client_weights": [0.25, 0.75]},
    "test": {"reestimation": {"tau": 0.5, "variance_term": "batch_mean"}},
    "analysis": {"ntk": true, "ntk_alpha": 0.5}
  })");
  CHECK(cfg.fl.strategy == fl::Strategy::Scaffold);
  CHECK(cfg.test.reestimation.variance_term == nn::VarianceTerm::BatchMean);

  const std::string emitted = cf::resolved_config_json(cfg);
  const auto back = cf::parse_config(emitted);
  CHECK(cf::resolved_config_json(back) == emitted);
  CHECK(back.seed == 42);
  CHECK(back.data.shift == dg::ShiftKind::Rotate);
  CHECK(back.fl.client_weights == std::vector<double>{0.25, 0.75});
  CHECK(back.analysis.ntk_alpha == 0.5);

  // emitted text mentions every section
  for (const char* key : {"format_version", "data", "model", "fl", "test", "analysis"})
    CHECK(emitted.find(std::string("\"") + key + "\"") != std::string::npos);
}

TEST_CASE("derived datasets and model follow the config") {
  const auto cfg = small_config();
  const auto a = cf::build_datasets(cfg);
  const auto b = cf::build_datasets(cfg);
  REQUIRE(a.train.size() == 2);
  REQUIRE(a.val.size() == 2);
  REQUIRE(a.test.size() == 2);
  CHECK(a.train[0].inputs.size() == 28);  // largest remainder of 0.7/0.1/0.2 on 40
  CHECK(a.val[0].inputs.size() == 4);
  CHECK(a.test[0].inputs.size() == 8);
  CHECK(a.train[1].client_id == 1);
  CHECK(a.train[0].inputs[0].size() == 4);
  CHECK(a.train[0].inputs == b.train[0].inputs);
  CHECK(a.train[0].labels == b.train[0].labels);

  auto other = cfg;
  other.seed = 6;
  const auto c = cf::build_datasets(other);
  CHECK(a.train[0].inputs != c.train[0].inputs);

  auto net = cf::build_model(cfg);
  REQUIRE(net.layers.size() == 4);  // dense bn relu dense
  CHECK(nn::is_bn_layer(net, 1));
  auto custom = cfg;
  custom.model.bn_eps = 1e-3;
  custom.model.bn_train_momentum = 0.5;
  auto net2 = cf::build_model(custom);
  const auto& bn = std::get<nn::BNLayer>(net2.layers[1]);
  CHECK(bn.eps == 1e-3);
  CHECK(bn.train_momentum == 0.5);

  const auto ext = cf::build_external_dataset(cfg, 4.0, 64);
  CHECK(ext.inputs.size() == 64);
  CHECK(ext.client_id == 2);
}

TEST_CASE("train command writes a reproducible run directory") {
  const auto& run = trained_run();
  for (const char* file : {"resolved_config.json", "metrics.csv", "summary.json",
                           "checkpoints/final/global.json", "checkpoints/final/client_0.json",
                           "checkpoints/final/client_1.json", "checkpoints/best/global.json",
                           "checkpoints/best/client_1.json"})
    CHECK(fs::exists(fs::path(run.dir_a) / file));

  // same config, fresh process state: byte-identical artifacts
  CHECK(slurp(fs::path(run.dir_a) / "metrics.csv") ==
        slurp(fs::path(run.dir_b) / "metrics.csv"));
  CHECK(slurp(fs::path(run.dir_a) / "resolved_config.json") ==
        slurp(fs::path(run.dir_b) / "resolved_config.json"));
  CHECK(slurp(fs::path(run.dir_a) / "checkpoints/final/global.json") ==
        slurp(fs::path(run.dir_b) / "checkpoints/final/global.json"));

  const std::string metrics = slurp(fs::path(run.dir_a) / "metrics.csv");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 1 + 2 * 2 * 3);
  CHECK(metrics.rfind("round,client_id,split,loss,accuracy\n", 0) == 0);

  const auto summary = nlohmann::json::parse(slurp(fs::path(run.dir_a) / "summary.json"));
  CHECK(summary["rounds"] == 3);
  CHECK(summary["clients"] == 2);
  CHECK(summary["final"]["train_loss"].size() == 2);
  CHECK(summary["best_round"] == summary["best"]["round"]);
  CHECK(summary["final"]["mean_val_accuracy"].is_null());  // regression task

  // a different seed moves the metrics
  auto other = run.cfg;
  other.seed = 6;
  other.run_id = "other";
  const auto dir = cf::cmd_train(other, run.root_a.string());
  CHECK(slurp(fs::path(dir) / "metrics.csv") != metrics);
}

TEST_CASE("external command reads the run back") {
  const auto& run = trained_run();
  const auto cmp = cf::cmd_test_external(run.dir_a, 0.0, 0, "final");
  CHECK(cmp.scale == 4.0);
  CHECK(cmp.frozen.n_samples == 64);
  CHECK(cmp.reestimated.n_samples == 64);
  CHECK(std::isfinite(cmp.frozen.loss));
  CHECK(std::isfinite(cmp.reestimated.loss));

  const auto parsed = nlohmann::json::parse(slurp(fs::path(run.dir_a) / "comparison.json"));
  CHECK(parsed["checkpoint"] == "final");
  CHECK(parsed["frozen"]["n_samples"] == 64);
  CHECK(parsed["reestimated"]["n_samples"] == 64);

  const auto best = cf::cmd_test_external(run.dir_a, 2.0, 32, "best");
  CHECK(best.frozen.n_samples == 32);
  CHECK(best.scale == 2.0);
  CHECK_THROWS_AS(cf::cmd_test_external(run.dir_a, 0.0, 0, "latest"), cf::ConfigError);
}

TEST_CASE("ablate command writes the requested grid") {
  const auto& run = trained_run();
  const auto path = cf::cmd_ablate(run.dir_a, "momentum", {0.0, 0.9});
  const std::string csv = slurp(path);
  CHECK(csv.rfind("param,value,accuracy,loss,seed\n", 0) == 0);
  CHECK(csv.find("momentum,0,") != std::string::npos);
  CHECK(csv.find("momentum,0.9") != std::string::npos);

  const auto batch_path = cf::cmd_ablate(run.dir_a, "batch", {4, 8});
  const std::string batch_csv = slurp(batch_path);
  CHECK(batch_csv.find("batch_size,4,") != std::string::npos);
  CHECK(batch_csv.find("batch_size_frozen,") != std::string::npos);

  const auto order_path = cf::cmd_ablate(run.dir_a, "order", {3});
  const std::string order_csv = slurp(order_path);
  CHECK(std::count(order_csv.begin(), order_csv.end(), '\n') == 4);

  CHECK_THROWS_AS(cf::cmd_ablate(run.dir_a, "batch", {2.5}), cf::ConfigError);
  CHECK_THROWS_AS(cf::cmd_ablate(run.dir_a, "momentum", {1.5}), cf::ConfigError);
  CHECK_THROWS_AS(cf::cmd_ablate(run.dir_a, "order", {2, 3}), cf::ConfigError);
  CHECK_THROWS_AS(cf::cmd_ablate(run.dir_a, "width", {}), cf::ConfigError);
}

TEST_CASE("ntk command writes the analysis and enforces the ordering") {
  auto cfg = small_config();
  cfg.run_id = "kernel";
  cfg.analysis.ntk_width = 64;
  cfg.analysis.ntk_steps = 2;
  cfg.analysis.ntk_points_per_client = 3;
  const fs::path root = fs::temp_directory_path() / "unifed_cfg_tests" / "ntk";
  fs::remove_all(root);
  const auto dir = cf::cmd_ntk(cfg, root.string());
  CHECK(fs::exists(fs::path(dir) / "gram_report.json"));
  CHECK(fs::exists(fs::path(dir) / "resolved_config.json"));

  const auto ordering = nlohmann::json::parse(slurp(fs::path(dir) / "ordering.json"));
  CHECK(ordering["ordered"] == true);
  CHECK(ordering["block_identity"] == true);
  CHECK(ordering["e0_star"].get<double>() >=
        ordering["e0"].get<double>() - ordering["tolerance"].get<double>());

  const std::string dynamics = slurp(fs::path(dir) / "dynamics.csv");
  CHECK(std::count(dynamics.begin(), dynamics.end(), '\n') == 1 + cfg.analysis.ntk_steps + 1);
}

TEST_CASE("verify suite passes and logs one line per check") {
  std::ostringstream log;
  CHECK(cf::verify_suite(log));
  const std::string text = log.str();
  CHECK(text.find("FAIL") == std::string::npos);
  std::size_t oks = 0, pos = 0;
  while ((pos = text.find("ok: ", pos)) != std::string::npos) {
    ++oks;
    pos += 4;
  }
  CHECK(oks == 8);
}
