#include "unifed/fl.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "unifed/parallel.hpp"
#include "unifed/rng.hpp"

namespace unifed::fl {

namespace {

constexpr std::uint64_t kOrderTag = 0x10ca1;

std::vector<double> resolved_weights(const TrainConfig& cfg, std::size_t n) {
  if (cfg.client_weights.empty())
    return std::vector<double>(n, 1.0 / static_cast<double>(n));
  if (cfg.client_weights.size() != n)
    throw std::invalid_argument("client_weights size does not match client count");
  double sum = 0.0;
  for (double w : cfg.client_weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("client_weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("client_weights must sum to 1");
  return cfg.client_weights;
}

std::vector<nn::ParamArray> arrays_of(const nn::Network& net, bool include_bn) {
  return nn::parameter_arrays(const_cast<nn::Network&>(net), include_bn);
}

std::vector<nn::ParamArray> stats_of(const nn::Network& net) {
  return nn::statistic_arrays(const_cast<nn::Network&>(net));
}

// Maps each entry of the full learnable list to its position in the
// aggregated sublist, or -1 for a BN parameter kept local.
std::vector<int> aggregated_index(const std::vector<nn::ParamArray>& all,
                                  const std::vector<nn::ParamArray>& agg) {
  std::vector<int> idx(all.size(), -1);
  std::size_t j = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (j < agg.size() && agg[j].layer == all[i].layer && agg[j].slot == all[i].slot) {
      idx[i] = static_cast<int>(j);
      ++j;
    }
  }
  if (j != agg.size()) throw std::logic_error("parameter lists out of order");
  return idx;
}

void ensure_buffers(std::vector<Vector>& bufs, const std::vector<nn::ParamArray>& arrays) {
  if (bufs.size() == arrays.size()) return;
  bufs.clear();
  bufs.reserve(arrays.size());
  for (const auto& a : arrays) bufs.emplace_back(a.values->size(), 0.0);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::vector<std::size_t> batch_order(std::uint64_t run_seed, std::uint64_t round,
                                     std::size_t client_id, int epoch,
                                     std::size_t n_samples) {
  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed_stream(run_seed, kOrderTag, round, client_id,
                      static_cast<std::uint64_t>(epoch)));
  shuffle(order, rng);
  return order;
}

void broadcast(nn::Network& client_model, const nn::Network& global, bool exclude_bn) {
  auto dst = nn::parameter_arrays(client_model, !exclude_bn);
  auto src = arrays_of(global, !exclude_bn);
  if (dst.size() != src.size()) throw std::invalid_argument("broadcast: model mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].values->size() != src[i].values->size())
      throw std::invalid_argument("broadcast: parameter shape mismatch");
    *dst[i].values = *src[i].values;
  }
  if (!exclude_bn) {
    auto dstats = nn::statistic_arrays(client_model);
    auto sstats = stats_of(global);
    for (std::size_t i = 0; i < dstats.size(); ++i) *dstats[i].values = *sstats[i].values;
  }
}

void local_update(ClientState& client, const ServerState& server,
                  const TrainConfig& cfg, std::uint64_t run_seed) {
  broadcast(client.model, server.global, cfg.exclude_bn);

  auto all = nn::parameter_arrays(client.model, true);
  auto agg = nn::parameter_arrays(client.model, !cfg.exclude_bn);
  auto agg_idx = aggregated_index(all, agg);
  ensure_buffers(client.momentum, all);

  std::vector<Vector> anchor;
  anchor.reserve(agg.size());
  for (const auto& a : agg) anchor.push_back(*a.values);

  const bool scaffold = cfg.strategy == Strategy::Scaffold;
  if (scaffold) ensure_buffers(client.control, agg);
  const std::vector<Vector>* server_control =
      (scaffold && !server.control.empty()) ? &server.control : nullptr;

  const std::size_t m = client.train.inputs.size();
  const std::size_t d = client.model.input_dim;
  double loss_sum = 0.0;
  std::size_t batches = 0;
  client.steps_taken = 0;

  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    auto order = batch_order(run_seed, server.round, client.client_id, epoch, m);
    for (std::size_t start = 0; start < m; start += cfg.batch_size) {
      const std::size_t bs = std::min(cfg.batch_size, m - start);
      Matrix x(bs, d);
      Vector y(bs);
      for (std::size_t r = 0; r < bs; ++r) {
        const std::size_t s = order[start + r];
        for (std::size_t c = 0; c < d; ++c) x(r, c) = client.train.inputs[s][c];
        y[r] = client.train.labels[s];
      }
      auto grads = nn::mlp_backward(client.model, x, y, cfg.loss);
      if (!std::isfinite(grads.loss)) {
        throw std::runtime_error(
            "local training diverged: round " + std::to_string(server.round) +
            ", client " + std::to_string(client.client_id) + ", epoch " +
            std::to_string(epoch) + ", batch at " + std::to_string(start) +
            " (size " + std::to_string(bs) + "), loss " + fmt_double(grads.loss));
      }
      loss_sum += grads.loss;
      ++batches;

      for (std::size_t i = 0; i < all.size(); ++i) {
        Vector& w = *all[i].values;
        Vector& buf = client.momentum[i];
        const Vector& g0 =
            all[i].slot == 0 ? grads.layers[all[i].layer].a : grads.layers[all[i].layer].b;
        const int ai = agg_idx[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
          double g = g0[j];
          if (ai >= 0) {
            if (cfg.prox_mu != 0.0) g += cfg.prox_mu * (w[j] - anchor[ai][j]);
            if (scaffold) {
              const double cg = server_control ? (*server_control)[ai][j] : 0.0;
              g += cg - client.control[ai][j];
            }
          }
          buf[j] = cfg.sgd_momentum * buf[j] + g;
          w[j] -= cfg.local_lr * buf[j];
        }
      }
      ++client.steps_taken;
    }
  }
  client.train_loss =
      batches ? loss_sum / static_cast<double>(batches)
              : std::numeric_limits<double>::quiet_NaN();

  if (scaffold) {
    client.control_delta.assign(agg.size(), Vector{});
    const std::size_t k = client.steps_taken;
    for (std::size_t i = 0; i < agg.size(); ++i) {
      client.control_delta[i].assign(agg[i].values->size(), 0.0);
      if (k == 0) continue;
      const double inv = 1.0 / (static_cast<double>(k) * cfg.local_lr);
      for (std::size_t j = 0; j < agg[i].values->size(); ++j) {
        const double cg = server_control ? (*server_control)[i][j] : 0.0;
        const double c_new =
            client.control[i][j] - cg + (anchor[i][j] - (*agg[i].values)[j]) * inv;
        client.control_delta[i][j] = c_new - client.control[i][j];
        client.control[i][j] = c_new;
      }
    }
  }
}

void aggregate(ServerState& server, std::vector<ClientState>& clients,
               const TrainConfig& cfg) {
  const std::size_t n = clients.size();
  if (n == 0) throw std::invalid_argument("aggregate: no clients");
  const auto weights = resolved_weights(cfg, n);

  auto global = nn::parameter_arrays(server.global, !cfg.exclude_bn);
  std::vector<std::vector<nn::ParamArray>> locals;
  locals.reserve(n);
  for (auto& c : clients) locals.push_back(nn::parameter_arrays(c.model, !cfg.exclude_bn));

  switch (cfg.strategy) {
    case Strategy::FedAvg:
    case Strategy::FedProx:
    case Strategy::Scaffold: {
      for (std::size_t a = 0; a < global.size(); ++a) {
        Vector& g = *global[a].values;
        for (std::size_t j = 0; j < g.size(); ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < n; ++i) acc += weights[i] * (*locals[i][a].values)[j];
          g[j] = acc;
        }
      }
      if (cfg.strategy == Strategy::Scaffold) {
        if (server.control.size() != global.size()) ensure_buffers(server.control, global);
        for (std::size_t a = 0; a < global.size(); ++a)
          for (std::size_t j = 0; j < server.control[a].size(); ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i)
              acc += weights[i] * clients[i].control_delta[a][j];
            server.control[a][j] += acc;
          }
      }
      break;
    }
    case Strategy::FedAdam: {
      if (server.adam_m.size() != global.size()) {
        ensure_buffers(server.adam_m, global);
        ensure_buffers(server.adam_v, global);
      }
      for (std::size_t a = 0; a < global.size(); ++a) {
        Vector& g = *global[a].values;
        for (std::size_t j = 0; j < g.size(); ++j) {
          double delta = 0.0;
          for (std::size_t i = 0; i < n; ++i)
            delta += weights[i] * ((*locals[i][a].values)[j] - g[j]);
          double& mj = server.adam_m[a][j];
          double& vj = server.adam_v[a][j];
          mj = cfg.adam_beta1 * mj + (1.0 - cfg.adam_beta1) * delta;
          vj = cfg.adam_beta2 * vj + (1.0 - cfg.adam_beta2) * delta * delta;
          g[j] += cfg.server_lr * mj / (std::sqrt(vj) + cfg.adam_eps);
        }
      }
      break;
    }
    case Strategy::FedNova: {
      double tau_eff = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (clients[i].steps_taken == 0)
          throw std::invalid_argument("normalized averaging needs at least one local step");
        tau_eff += weights[i] * static_cast<double>(clients[i].steps_taken);
      }
      for (std::size_t a = 0; a < global.size(); ++a) {
        Vector& g = *global[a].values;
        for (std::size_t j = 0; j < g.size(); ++j) {
          double dnorm = 0.0;
          for (std::size_t i = 0; i < n; ++i)
            dnorm += weights[i] * ((*locals[i][a].values)[j] - g[j]) /
                     static_cast<double>(clients[i].steps_taken);
          g[j] += tau_eff * dnorm;
        }
      }
      break;
    }
  }

  if (!cfg.exclude_bn) {
    auto gstats = nn::statistic_arrays(server.global);
    std::vector<std::vector<nn::ParamArray>> lstats;
    lstats.reserve(n);
    for (auto& c : clients) lstats.push_back(nn::statistic_arrays(c.model));
    for (std::size_t a = 0; a < gstats.size(); ++a) {
      Vector& g = *gstats[a].values;
      for (std::size_t j = 0; j < g.size(); ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += weights[i] * (*lstats[i][a].values)[j];
        g[j] = acc;
      }
    }
  }
  server.round += 1;
}

RunResult run_federated_training(const std::vector<datagen::Dataset>& train,
                                 const std::vector<datagen::Dataset>& val,
                                 const nn::Network& init, const TrainConfig& cfg,
                                 std::uint64_t seed) {
  const std::size_t n = train.size();
  if (n == 0) throw std::invalid_argument("run_federated_training: no clients");
  if (val.size() != n)
    throw std::invalid_argument("run_federated_training: train/val client mismatch");
  if (cfg.rounds <= 0) throw std::invalid_argument("run_federated_training: rounds must be positive");
  resolved_weights(cfg, n);  // validate up front

  const bool classification = cfg.loss == nn::LossKind::CrossEntropy;

  RunResult out;
  ServerState server;
  server.global = init;
  std::vector<ClientState> clients(n);
  for (std::size_t i = 0; i < n; ++i) {
    clients[i].client_id = train[i].client_id;
    clients[i].model = init;
    clients[i].train = train[i];
    clients[i].val = val[i];
  }

  std::vector<Matrix> val_x(n);
  for (std::size_t i = 0; i < n; ++i) val_x[i] = nn::batch_from(val[i].inputs);

  double best_score = classification ? -std::numeric_limits<double>::infinity()
                                     : std::numeric_limits<double>::infinity();
  out.metrics.reserve(static_cast<std::size_t>(cfg.rounds));

  for (int t = 0; t < cfg.rounds; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    parallel_for(n, [&](std::size_t i) { local_update(clients[i], server, cfg, seed); });
    aggregate(server, clients, cfg);

    RoundMetrics rm;
    rm.round = static_cast<std::size_t>(t);
    rm.train_loss.resize(n);
    rm.val_loss.resize(n);
    rm.val_accuracy.assign(n, std::numeric_limits<double>::quiet_NaN());

    // Deploy the per-client view (global parameters, local BN when excluded)
    // and score the validation split in eval mode.
    parallel_for(n, [&](std::size_t i) {
      broadcast(clients[i].model, server.global, cfg.exclude_bn);
      rm.train_loss[i] = clients[i].train_loss;
      nn::ForwardOptions opts;
      opts.bn.mode = nn::BNMode::Eval;
      Matrix outp = nn::mlp_forward(clients[i].model, val_x[i], opts);
      rm.val_loss[i] = nn::loss_value(outp, val[i].labels, cfg.loss);
      if (classification) rm.val_accuracy[i] = nn::accuracy(outp, val[i].labels);
    });
    rm.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    double mean_val = 0.0, mean_acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mean_val += rm.val_loss[i] / static_cast<double>(n);
      mean_acc += rm.val_accuracy[i] / static_cast<double>(n);
    }
    const double score = classification ? mean_acc : mean_val;
    const bool better = classification ? score > best_score : score < best_score;
    if (better) {
      best_score = score;
      out.best_round = static_cast<std::size_t>(t);
      out.best_global = server.global;
      out.best_client_models.clear();
      for (const auto& c : clients) out.best_client_models.push_back(c.model);
    }
    out.metrics.push_back(std::move(rm));
  }

  out.global = server.global;
  out.clients = std::move(clients);
  return out;
}

std::string metrics_csv(const std::vector<RoundMetrics>& metrics) {
  std::string csv = "round,client_id,split,loss,accuracy\n";
  for (const auto& rm : metrics) {
    for (std::size_t i = 0; i < rm.train_loss.size(); ++i) {
      csv += std::to_string(rm.round) + "," + std::to_string(i) + ",train," +
             fmt_double(rm.train_loss[i]) + ",\n";
      csv += std::to_string(rm.round) + "," + std::to_string(i) + ",val," +
             fmt_double(rm.val_loss[i]) + ",";
      if (std::isfinite(rm.val_accuracy[i])) csv += fmt_double(rm.val_accuracy[i]);
      csv += "\n";
    }
  }
  return csv;
}

}  // namespace unifed::fl
