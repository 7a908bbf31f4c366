#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "unifed/datagen.hpp"
#include "unifed/divergence.hpp"
#include "unifed/fedtest.hpp"
#include "unifed/fl.hpp"
#include "unifed/nn.hpp"
#include "unifed/ntk.hpp"

namespace unifed::config {

// Strict JSON experiment description. Parsing rejects unknown keys and type
// mismatches with the offending key path in the message; everything except
// format_version has a default, and the resolved form written next to every
// run spells all defaults out.

struct DataSection {
  std::size_t clients = 3;
  std::size_t dim = 16;
  std::size_t samples_per_client = 200;
  datagen::ShiftKind shift = datagen::ShiftKind::Scale;
  double severity = 3.0;
  datagen::TeacherKind teacher = datagen::TeacherKind::LinearRegression;
  std::size_t teacher_hidden = 16;  // two_layer teacher only
  double noise_std = 0.1;
  datagen::SplitFractions split;
};

struct ModelSection {
  std::vector<std::size_t> hidden = {32, 16};
  bool batch_norm = true;
  double bn_eps = 1e-5;
  double bn_train_momentum = 0.9;
};

struct TestSection {
  double external_scale = 4.0;  // unseen covariance = scale * mean(train covs)
  std::size_t external_samples = 4096;
  fedtest::ReestimationConfig reestimation;
};

struct AnalysisSection {
  bool ntk = false;         // run the kernel analysis after training
  bool divergence = false;  // run the feature-divergence measurement
  std::size_t ntk_width = 2048;
  double ntk_alpha = 1.0;
  std::size_t ntk_points_per_client = 4;
  int ntk_steps = 0;  // descent steps in the dynamics trace (0 = skip)
  double ntk_lr = 0.05;
  std::size_t ntk_mc_samples = 0;  // 0 = closed form only
};

struct ExperimentConfig {
  int format_version = 1;
  std::string run_id = "run";
  std::uint64_t seed = 1;
  DataSection data;
  ModelSection model;
  fl::TrainConfig fl;
  TestSection test;
  AnalysisSection analysis;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Every field spelled out; parse(resolved_config_json(c)) reproduces c.
std::string resolved_config_json(const ExperimentConfig& cfg);

// Derived inputs, all pure functions of the config.
struct ClientData {
  std::vector<datagen::ClientDistributionSpec> specs;
  datagen::TeacherSpec teacher;
  std::vector<datagen::Dataset> train, val, test;
};

ClientData build_datasets(const ExperimentConfig& cfg);
nn::Network build_model(const ExperimentConfig& cfg);
datagen::Dataset build_external_dataset(const ExperimentConfig& cfg, double scale,
                                        std::size_t samples);

// Runs federated training and writes resolved_config.json, metrics.csv,
// summary.json and final/best checkpoints under out_root/run_id. The
// analysis toggles append ntk/ and divergence outputs. Returns the run
// directory; throws ConfigError if an artifact fails its readback check.
std::string cmd_train(const ExperimentConfig& cfg, const std::string& out_root);

struct ExternalComparison {
  fedtest::EvalReport frozen, reestimated;
  double scale = 0.0;
  std::string checkpoint;  // "final" or "best"
};

// Rebuilds the unseen client from the run's resolved config, evaluates the
// frozen and re-estimated arms, writes comparison.json into the run dir.
// scale <= 0 and samples == 0 fall back to the config's test section.
ExternalComparison cmd_test_external(const std::string& run_dir, double scale,
                                     std::size_t samples,
                                     const std::string& checkpoint);

// Writes gram_report.json, ordering.json and (width > 0, steps > 0)
// dynamics.csv under out_dir/run_id-ntk. Throws if the block-diagonal
// eigenvalue ordering fails its guarantee.
std::string cmd_ntk(const ExperimentConfig& cfg, const std::string& out_root);

// which in {batch, momentum, order}; empty grid picks the default grid.
// Returns the path of the written CSV.
std::string cmd_ablate(const std::string& run_dir, const std::string& which,
                       const std::vector<double>& grid);

// Built-in invariant suite; prints one line per check. True iff all pass.
bool verify_suite(std::ostream& log);

}  // namespace unifed::config
