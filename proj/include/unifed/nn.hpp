#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "unifed/linalg.hpp"

namespace unifed::nn {

// How a batch-norm layer treats its statistics during a forward pass.
//   Train:      normalize by batch stats, fold batch stats into running stats
//   Eval:       normalize by running stats, mutate nothing
//   Reestimate: fold batch stats into running stats first, then normalize by
//               the updated running stats (equals Train normalization at tau=0)
enum class BNMode { Train, Eval, Reestimate };

// Anchor of the deviation term when re-estimating variance. The default uses
// the just-updated running mean (mean update happens first and feeds the
// variance pass); the alternative anchors deviations at the batch mean.
enum class VarianceTerm { UpdatedRunningMean, BatchMean };

struct BNLayer {
  Vector gamma, beta;
  Vector running_mean, running_var;
  double eps = 1e-5;
  double train_momentum = 0.9;  // fraction of the old running value kept

  BNLayer() = default;
  explicit BNLayer(std::size_t features)
      : gamma(features, 1.0),
        beta(features, 0.0),
        running_mean(features, 0.0),
        running_var(features, 1.0) {}

  std::size_t features() const { return gamma.size(); }
  void reset_stats() {
    running_mean.assign(running_mean.size(), 0.0);
    running_var.assign(running_var.size(), 1.0);
  }
};

struct BNOptions {
  BNMode mode = BNMode::Train;
  double reestimate_momentum = 0.9;  // tau used by Reestimate
  VarianceTerm variance_term = VarianceTerm::UpdatedRunningMean;
  bool update_running = true;  // Train-mode probe passes disable this
};

// Internals captured for backprop and feature probes.
struct BNCache {
  Matrix normalized;  // x-hat, before scale and shift
  Vector batch_mean, batch_var;
  Vector used_mean, used_var;  // what the normalization divided by
};

// Rows are samples. Throws on an empty batch in Train/Reestimate mode.
Matrix bn_forward(BNLayer& layer, const Matrix& batch, const BNOptions& opts,
                  BNCache* cache = nullptr);

struct DenseLayer {
  Matrix w;  // out x in
  Vector b;
};

struct ReluLayer {};

using Layer = std::variant<DenseLayer, BNLayer, ReluLayer>;

struct Network {
  std::vector<Layer> layers;
  std::size_t input_dim = 0;
};

// Dense(d->h) [BN ReLU] ... Dense(h->out). Gaussian fan-in init.
Network make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                 std::size_t output_dim, bool batch_norm, std::uint64_t seed);

// Streaming first and second moments of probed features.
struct FeatureAccumulator {
  std::size_t count = 0;
  Vector sum;
  Matrix outer;

  void add(const Matrix& features);
  Vector mean() const;
  Vector variance() const;    // biased, 1/n
  Matrix covariance() const;  // biased, 1/n
};

struct ForwardOptions {
  BNOptions bn;
  // Normalized features (x-hat) of the BN layers whose indices appear as
  // keys are accumulated into the mapped sinks.
  std::map<std::size_t, FeatureAccumulator>* capture = nullptr;
};

Matrix mlp_forward(Network& net, const Matrix& batch, const ForwardOptions& opts = {});

enum class LossKind { Squared, CrossEntropy };

// Squared: mean over the batch of (f - y)^2. CrossEntropy: logistic loss
// mean(log(1 + exp(-y f))) with labels in {-1,+1}. Output width must be 1.
double loss_value(const Matrix& out, const Vector& labels, LossKind kind);

// Fraction of sign matches; labels in {-1,+1}, sign(0) counts as +1.
double accuracy(const Matrix& out, const Vector& labels);

// Per-layer gradients, slots aligned with the layer kind:
// Dense -> {a: dW flat, b: db}, BatchNorm -> {a: dgamma, b: dbeta}.
struct LayerGrad {
  Vector a, b;
};

struct BackwardResult {
  std::vector<LayerGrad> layers;
  double loss = 0.0;
};

// Train-mode forward (batch statistics) followed by reverse mode.
// `update_running` controls whether the pass also folds batch stats into
// the running stats, as a live training step would.
BackwardResult mlp_backward(Network& net, const Matrix& batch, const Vector& labels,
                            LossKind kind, bool update_running = true,
                            double train_momentum = -1.0);

Matrix batch_from(const std::vector<Vector>& inputs);

// Parameter plumbing shared by the federation code. Slot 0 is W or gamma,
// slot 1 is b or beta; statistics are the BN running mean/var.
struct ParamArray {
  std::size_t layer;
  int slot;
  std::vector<double>* values;
};

std::vector<ParamArray> parameter_arrays(Network& net, bool include_bn);
std::vector<ParamArray> statistic_arrays(Network& net);
bool is_bn_layer(const Network& net, std::size_t layer_index);

// Value-exact JSON checkpoint (doubles serialized as 17-digit strings).
void save_checkpoint(const Network& net, const std::string& path);
Network load_checkpoint(const std::string& path);
std::string checkpoint_to_string(const Network& net);
Network checkpoint_from_string(const std::string& text);

}  // namespace unifed::nn
