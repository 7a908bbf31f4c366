#include "unifed/fedtest.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "unifed/rng.hpp"

namespace unifed::fedtest {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::size_t> visit_order(std::size_t n, bool shuffle, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(seed_stream(seed, 0xf3d7e57));
    unifed::shuffle(order, rng);
  }
  return order;
}

Matrix gather(const datagen::Dataset& data, const std::vector<std::size_t>& order,
              std::size_t start, std::size_t count, Vector& labels) {
  const std::size_t d = data.inputs.empty() ? 0 : data.inputs.front().size();
  Matrix x(count, d);
  labels.resize(count);
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t s = order[start + r];
    for (std::size_t c = 0; c < d; ++c) x(r, c) = data.inputs[s][c];
    labels[r] = data.labels[s];
  }
  return x;
}

// Shared streaming pass; `opts.bn.mode` decides between adaptation and the
// frozen baseline. Fills the report from the capture sinks and final stats.
EvalReport streamed_eval(nn::Network& model, const datagen::Dataset& data,
                         std::size_t batch_size, bool shuffle, std::uint64_t order_seed,
                         const nn::BNOptions& bn, nn::LossKind kind,
                         bool init_first_batch = false) {
  if (data.inputs.empty()) throw std::invalid_argument("evaluation needs at least one batch");
  if (batch_size == 0) throw std::invalid_argument("batch size must be at least 1");

  std::map<std::size_t, nn::FeatureAccumulator> sinks;
  for (std::size_t l = 0; l < model.layers.size(); ++l)
    if (nn::is_bn_layer(model, l)) sinks[l] = {};

  nn::ForwardOptions opts;
  opts.bn = bn;
  opts.capture = &sinks;

  const std::size_t m = data.inputs.size();
  const auto order = visit_order(m, shuffle, order_seed);
  const bool classification = kind == nn::LossKind::CrossEntropy;

  double loss_sum = 0.0;
  double correct = 0.0;
  for (std::size_t start = 0; start < m; start += batch_size) {
    const std::size_t bs = std::min(batch_size, m - start);
    Vector y;
    Matrix x = gather(data, order, start, bs, y);
    // with no usable prior statistics the first batch sets them outright;
    // momentum only blends batches that both came from the test stream
    opts.bn.reestimate_momentum =
        init_first_batch && start == 0 ? 0.0 : bn.reestimate_momentum;
    Matrix out = nn::mlp_forward(model, x, opts);
    loss_sum += nn::loss_value(out, y, kind) * static_cast<double>(bs);
    if (classification) correct += nn::accuracy(out, y) * static_cast<double>(bs);
  }

  EvalReport report;
  report.client_id = data.client_id;
  report.n_samples = m;
  report.loss = loss_sum / static_cast<double>(m);
  report.accuracy = classification ? correct / static_cast<double>(m)
                                   : std::numeric_limits<double>::quiet_NaN();
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (!nn::is_bn_layer(model, l)) continue;
    const auto& layer = std::get<nn::BNLayer>(model.layers[l]);
    LayerStats ls;
    ls.layer = l;
    ls.mean = layer.running_mean;
    ls.var = layer.running_var;
    ls.feat_mean = sinks[l].mean();
    ls.feat_var = sinks[l].variance();
    report.bn_layers.push_back(std::move(ls));
  }
  return report;
}

}  // namespace

EvalReport test_internal(const nn::Network& model, const datagen::Dataset& data,
                         nn::LossKind kind) {
  nn::Network clone = model;
  nn::BNOptions bn;
  bn.mode = nn::BNMode::Eval;
  return streamed_eval(clone, data, data.inputs.size(), false, 0, bn, kind);
}

EvalReport test_external(const nn::Network& global, const datagen::Dataset& data,
                         const ReestimationConfig& cfg, nn::LossKind kind,
                         nn::Network* adapted) {
  if (!(cfg.tau >= 0.0 && cfg.tau < 1.0))
    throw std::invalid_argument("re-estimation momentum must lie in [0, 1)");
  nn::Network clone = global;
  if (cfg.reset_stats)
    for (auto& layer : clone.layers)
      if (auto* bnl = std::get_if<nn::BNLayer>(&layer)) bnl->reset_stats();

  nn::BNOptions bn;
  bn.mode = nn::BNMode::Reestimate;
  bn.reestimate_momentum = cfg.tau;
  bn.variance_term = cfg.variance_term;
  EvalReport report = streamed_eval(clone, data, cfg.batch_size, cfg.shuffle,
                                    cfg.order_seed, bn, kind, cfg.reset_stats);
  if (adapted) *adapted = std::move(clone);
  return report;
}

EvalReport test_external_frozen(const nn::Network& global, const datagen::Dataset& data,
                                std::size_t batch_size, nn::LossKind kind) {
  nn::Network clone = global;
  nn::BNOptions bn;
  bn.mode = nn::BNMode::Eval;
  return streamed_eval(clone, data, batch_size, false, 0, bn, kind);
}

std::vector<AblationRow> ablate_batch_size(const nn::Network& global,
                                           const datagen::Dataset& data,
                                           const std::vector<std::size_t>& sizes,
                                           nn::LossKind kind, std::uint64_t seed) {
  std::vector<AblationRow> rows;
  for (std::size_t size : sizes) {
    ReestimationConfig cfg;
    cfg.tau = 0.0;
    cfg.batch_size = size;
    cfg.order_seed = seed;
    auto rep = test_external(global, data, cfg, kind);
    rows.push_back({"batch_size", static_cast<double>(size), rep.accuracy, rep.loss, seed});
  }
  for (std::size_t size : sizes) {
    auto rep = test_external_frozen(global, data, size, kind);
    rows.push_back(
        {"batch_size_frozen", static_cast<double>(size), rep.accuracy, rep.loss, seed});
  }
  return rows;
}

std::vector<AblationRow> ablate_momentum(const nn::Network& global,
                                         const datagen::Dataset& data,
                                         const std::vector<double>& taus,
                                         std::size_t batch_size, nn::LossKind kind,
                                         std::uint64_t seed) {
  std::vector<AblationRow> rows;
  for (double tau : taus) {
    ReestimationConfig cfg;
    cfg.tau = tau;
    cfg.batch_size = batch_size;
    cfg.order_seed = seed;
    auto rep = test_external(global, data, cfg, kind);
    rows.push_back({"momentum", tau, rep.accuracy, rep.loss, seed});
  }
  return rows;
}

std::vector<AblationRow> ablate_order(const nn::Network& global,
                                      const datagen::Dataset& data, std::size_t n_orders,
                                      const ReestimationConfig& base, nn::LossKind kind,
                                      std::uint64_t seed) {
  std::vector<AblationRow> rows;
  for (std::size_t k = 0; k < n_orders; ++k) {
    ReestimationConfig cfg = base;
    cfg.shuffle = true;
    cfg.order_seed = seed_stream(seed, 0x04de4, k);
    auto rep = test_external(global, data, cfg, kind);
    rows.push_back({"order", static_cast<double>(k), rep.accuracy, rep.loss, cfg.order_seed});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string csv = "param,value,accuracy,loss,seed\n";
  for (const auto& row : rows) {
    csv += row.param + "," + fmt_double(row.value) + ",";
    if (std::isfinite(row.accuracy)) csv += fmt_double(row.accuracy);
    csv += "," + fmt_double(row.loss) + "," + std::to_string(row.seed) + "\n";
  }
  return csv;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["client_id"] = report.client_id;
  j["n_samples"] = report.n_samples;
  j["loss"] = report.loss;
  if (std::isfinite(report.accuracy))
    j["accuracy"] = report.accuracy;
  else
    j["accuracy"] = nullptr;
  j["bn_layers"] = nlohmann::json::array();
  for (const auto& ls : report.bn_layers) {
    nlohmann::json layer;
    layer["layer"] = ls.layer;
    layer["mean"] = ls.mean;
    layer["var"] = ls.var;
    layer["feat_mean"] = ls.feat_mean;
    layer["feat_var"] = ls.feat_var;
    j["bn_layers"].push_back(layer);
  }
  return j.dump(2);
}

}  // namespace unifed::fedtest
