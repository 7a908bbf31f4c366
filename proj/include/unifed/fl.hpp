#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unifed/datagen.hpp"
#include "unifed/nn.hpp"

namespace unifed::fl {

enum class Strategy { FedAvg, FedProx, Scaffold, FedAdam, FedNova };

struct TrainConfig {
  Strategy strategy = Strategy::FedAvg;
  // Client-specific BN: broadcast and aggregation skip BN layers entirely
  // (parameters and statistics), leaving them local to each client.
  bool exclude_bn = false;
  std::vector<double> client_weights;  // empty = uniform; must sum to 1
  int rounds = 200;
  int local_epochs = 1;
  double local_lr = 0.001;
  double sgd_momentum = 0.9;
  std::size_t batch_size = 32;
  nn::LossKind loss = nn::LossKind::Squared;
  double prox_mu = 0.0;     // fedprox
  double server_lr = 0.1;   // fedadam
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double adam_eps = 1e-3;
};

struct ClientState {
  std::size_t client_id = 0;
  nn::Network model;
  datagen::Dataset train;
  datagen::Dataset val;
  std::vector<Vector> momentum;       // per learnable array
  std::vector<Vector> control;        // scaffold c_i, per aggregated array
  std::vector<Vector> control_delta;  // scaffold c_i(new) - c_i(old)
  std::size_t steps_taken = 0;        // local steps in the last round
  double train_loss = 0.0;            // mean minibatch loss of the last round
};

struct ServerState {
  nn::Network global;
  std::vector<Vector> control;  // scaffold server variate
  std::vector<Vector> adam_m, adam_v;
  std::uint64_t round = 0;
};

// Deterministic per-(round, client, epoch) sample order.
std::vector<std::size_t> batch_order(std::uint64_t run_seed, std::uint64_t round,
                                     std::size_t client_id, int epoch,
                                     std::size_t n_samples);

// Copies the global parameters (and BN statistics) into the client model.
// With exclude_bn the BN layers are not touched.
void broadcast(nn::Network& client_model, const nn::Network& global, bool exclude_bn);

// One round of local training: broadcast, then local_epochs passes of
// minibatch SGD with momentum (plus the strategy's local term).
void local_update(ClientState& client, const ServerState& server,
                  const TrainConfig& cfg, std::uint64_t run_seed);

// Folds the clients back into the global model under cfg.strategy.
// BN statistics are weight-averaged when included, never adapted.
void aggregate(ServerState& server, std::vector<ClientState>& clients,
               const TrainConfig& cfg);

struct RoundMetrics {
  std::size_t round = 0;
  Vector train_loss;    // per client
  Vector val_loss;      // per client
  Vector val_accuracy;  // per client, NaN for regression
  double wall_seconds = 0.0;
};

struct RunResult {
  nn::Network global;
  std::vector<ClientState> clients;
  std::vector<RoundMetrics> metrics;
  std::size_t best_round = 0;  // lowest mean val loss (or highest accuracy)
  nn::Network best_global;
  std::vector<nn::Network> best_client_models;
};

RunResult run_federated_training(const std::vector<datagen::Dataset>& train,
                                 const std::vector<datagen::Dataset>& val,
                                 const nn::Network& init, const TrainConfig& cfg,
                                 std::uint64_t seed);

// Columns: round,client_id,split,loss,accuracy. Accuracy cells are empty for
// regression runs. Output is a pure function of the metrics.
std::string metrics_csv(const std::vector<RoundMetrics>& metrics);

}  // namespace unifed::fl
