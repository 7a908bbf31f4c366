#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unifed/datagen.hpp"
#include "unifed/nn.hpp"

namespace unifed::fedtest {

// Controls the streaming statistics re-estimation pass on an external client.
struct ReestimationConfig {
  double tau = 0.9;             // fraction of the old running value kept
  std::size_t batch_size = 32;  // >= 1
  std::uint64_t order_seed = 0;
  bool shuffle = false;     // false = natural dataset order
  // true: discard the stored statistics; the first batch then sets the
  // running values outright and momentum blends in the batches after it.
  // false: warm-start the stream from the stored values.
  bool reset_stats = true;
  nn::VarianceTerm variance_term = nn::VarianceTerm::UpdatedRunningMean;
};

struct LayerStats {
  std::size_t layer = 0;  // index into Network::layers
  Vector mean, var;       // running statistics after the pass
  Vector feat_mean, feat_var;  // moments of the normalized features, whole stream
};

struct EvalReport {
  std::size_t client_id = 0;
  std::size_t n_samples = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // NaN for regression
  std::vector<LayerStats> bn_layers;
};

// Eval-mode pass over the whole set with the model's own statistics.
EvalReport test_internal(const nn::Network& model, const datagen::Dataset& data,
                         nn::LossKind kind);

// Streams the data in batches; every BN layer folds the batch statistics
// into its running statistics (momentum tau) and normalizes the batch by
// the updated values, so predictions for a batch always see its own data.
// Learnable parameters are never touched. The adapted clone is written to
// *adapted when given.
EvalReport test_external(const nn::Network& global, const datagen::Dataset& data,
                         const ReestimationConfig& cfg, nn::LossKind kind,
                         nn::Network* adapted = nullptr);

// Baseline arm: same streaming, but eval mode with the stored statistics.
EvalReport test_external_frozen(const nn::Network& global, const datagen::Dataset& data,
                                std::size_t batch_size, nn::LossKind kind);

struct AblationRow {
  std::string param;
  double value = 0.0;
  double accuracy = 0.0;
  double loss = 0.0;
  std::uint64_t seed = 0;
};

// Single-batch (tau = 0) re-estimation at each size, plus a frozen baseline
// row per size (constant by construction).
std::vector<AblationRow> ablate_batch_size(const nn::Network& global,
                                           const datagen::Dataset& data,
                                           const std::vector<std::size_t>& sizes,
                                           nn::LossKind kind, std::uint64_t seed);

std::vector<AblationRow> ablate_momentum(const nn::Network& global,
                                         const datagen::Dataset& data,
                                         const std::vector<double>& taus,
                                         std::size_t batch_size, nn::LossKind kind,
                                         std::uint64_t seed);

// base.tau and base.batch_size fixed, n_orders shuffled visit orders.
std::vector<AblationRow> ablate_order(const nn::Network& global,
                                      const datagen::Dataset& data, std::size_t n_orders,
                                      const ReestimationConfig& base, nn::LossKind kind,
                                      std::uint64_t seed);

std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string report_to_json(const EvalReport& report);

}  // namespace unifed::fedtest
