#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unifed/datagen.hpp"
#include "unifed/fedtest.hpp"
#include "unifed/fl.hpp"
#include "unifed/linalg.hpp"
#include "unifed/nn.hpp"

namespace unifed::divergence {

struct FeatureMoments {
  std::size_t layer_id = 0;
  Vector mean;
  Matrix covariance;  // biased (1/n), symmetric PSD up to clamping
  std::size_t n_samples = 0;
};

// Captures the normalized features (x-hat, before scale and shift) at the
// requested BN layers and reduces them to sample moments. An empty layer
// list means every BN layer. The model is cloned; Train mode probes batch
// statistics without touching the running values, Reestimate adapts the
// clone's statistics while streaming.
std::vector<FeatureMoments> collect_feature_moments(const nn::Network& model,
                                                    const datagen::Dataset& data,
                                                    std::vector<std::size_t> layers,
                                                    nn::BNMode mode,
                                                    std::size_t batch_size = 0);

FeatureMoments standard_moments(std::size_t layer_id, std::size_t dim);

// Squared Gaussian 2-Wasserstein distance between the moment pairs:
//   |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sb^1/2 Sa Sb^1/2)^1/2).
// Matrix square roots go through the symmetric eigensolver; eigenvalues in
// [-1e-10, 0) are clamped to zero, anything more negative is an error.
double gaussian_w2(const FeatureMoments& a, const FeatureMoments& b);

struct LayerDivergence {
  std::size_t layer_id = 0;
  double frozen_seen_unseen = 0.0;
  double frozen_to_standard = 0.0;
  double reestimated_seen_unseen = 0.0;
  double reestimated_to_standard = 0.0;
};

struct DivergenceReport {
  std::vector<LayerDivergence> layers;
};

struct ExperimentConfig {
  fedtest::ReestimationConfig reestimation;
  std::size_t capture_batch = 0;  // 0 = whole set in one batch
};

// Seen side: every client's personalized model capturing its own training
// data (eval mode), pooled. Unseen side: the global model on the unseen
// dataset, once with frozen statistics and once after re-estimation.
DivergenceReport divergence_experiment(const fl::RunResult& run,
                                       const datagen::Dataset& unseen,
                                       const ExperimentConfig& cfg);

// Columns: layer_id,mode,w2_seen_unseen,w2_to_standard
std::string divergence_csv(const DivergenceReport& report);
std::string divergence_json(const DivergenceReport& report);

}  // namespace unifed::divergence
