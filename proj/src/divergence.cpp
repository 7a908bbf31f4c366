#include "unifed/divergence.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace unifed::divergence {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::size_t> bn_layers_of(const nn::Network& net) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    if (nn::is_bn_layer(net, l)) out.push_back(l);
  return out;
}

// Symmetric PSD square root; eigenvalues slightly below zero are treated as
// exact zeros, anything below -1e-10 rejects the input.
Matrix sym_sqrt(const Matrix& s) {
  auto eig = linalg::jacobi_eigen(s);
  for (auto& ev : eig.values) {
    if (ev < -1e-10) throw std::invalid_argument("covariance is not positive semidefinite");
    ev = ev < 0.0 ? 0.0 : std::sqrt(ev);
  }
  const std::size_t n = s.rows();
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k)
        acc += eig.vectors(i, k) * eig.values[k] * eig.vectors(j, k);
      out(i, j) = out(j, i) = acc;
    }
  return out;
}

// Streams the dataset through a clone, accumulating x-hat moments at the
// requested layers.
std::map<std::size_t, nn::FeatureAccumulator> capture(nn::Network model,
                                                      const datagen::Dataset& data,
                                                      const std::vector<std::size_t>& layers,
                                                      nn::BNMode mode,
                                                      std::size_t batch_size,
                                                      const fedtest::ReestimationConfig* re) {
  std::map<std::size_t, nn::FeatureAccumulator> sinks;
  for (std::size_t l : layers) sinks[l] = {};

  nn::ForwardOptions opts;
  opts.bn.mode = mode;
  opts.bn.update_running = mode == nn::BNMode::Reestimate;
  if (re) {
    opts.bn.reestimate_momentum = re->tau;
    opts.bn.variance_term = re->variance_term;
  }
  opts.capture = &sinks;

  const std::size_t m = data.inputs.size();
  const std::size_t chunk = batch_size == 0 ? m : batch_size;
  const std::size_t d = data.inputs.front().size();
  for (std::size_t start = 0; start < m; start += chunk) {
    const std::size_t bs = std::min(chunk, m - start);
    Matrix x(bs, d);
    for (std::size_t r = 0; r < bs; ++r)
      for (std::size_t c = 0; c < d; ++c) x(r, c) = data.inputs[start + r][c];
    nn::mlp_forward(model, x, opts);
  }
  return sinks;
}

FeatureMoments moments_from(std::size_t layer, const nn::FeatureAccumulator& acc) {
  if (acc.count < 2) throw std::invalid_argument("need at least two samples for moments");
  FeatureMoments fm;
  fm.layer_id = layer;
  fm.mean = acc.mean();
  fm.covariance = acc.covariance();
  fm.n_samples = acc.count;
  return fm;
}

}  // namespace

std::vector<FeatureMoments> collect_feature_moments(const nn::Network& model,
                                                    const datagen::Dataset& data,
                                                    std::vector<std::size_t> layers,
                                                    nn::BNMode mode,
                                                    std::size_t batch_size) {
  if (data.inputs.empty()) throw std::invalid_argument("dataset is empty");
  if (layers.empty()) layers = bn_layers_of(model);
  if (layers.empty()) throw std::invalid_argument("model has no normalization layers");
  for (std::size_t l : layers)
    if (l >= model.layers.size() || !nn::is_bn_layer(model, l))
      throw std::invalid_argument("layer " + std::to_string(l) + " is not a BN layer");

  auto sinks = capture(model, data, layers, mode, batch_size, nullptr);
  std::vector<FeatureMoments> out;
  for (std::size_t l : layers) out.push_back(moments_from(l, sinks[l]));
  return out;
}

FeatureMoments standard_moments(std::size_t layer_id, std::size_t dim) {
  FeatureMoments fm;
  fm.layer_id = layer_id;
  fm.mean.assign(dim, 0.0);
  fm.covariance = Matrix::identity(dim);
  fm.n_samples = 2;
  return fm;
}

double gaussian_w2(const FeatureMoments& a, const FeatureMoments& b) {
  if (a.mean.size() != b.mean.size())
    throw std::invalid_argument("moment dimensions differ");
  double mean_term = 0.0;
  for (std::size_t i = 0; i < a.mean.size(); ++i) {
    const double d = a.mean[i] - b.mean[i];
    mean_term += d * d;
  }
  Matrix rb = sym_sqrt(b.covariance);
  Matrix inner = linalg::matmul(rb, linalg::matmul(a.covariance, rb));
  // symmetrize against roundoff before taking the root
  for (std::size_t i = 0; i < inner.rows(); ++i)
    for (std::size_t j = i + 1; j < inner.cols(); ++j) {
      const double s = 0.5 * (inner(i, j) + inner(j, i));
      inner(i, j) = inner(j, i) = s;
    }
  Matrix cross = sym_sqrt(inner);
  double trace_term = 0.0;
  for (std::size_t i = 0; i < a.covariance.rows(); ++i)
    trace_term += a.covariance(i, i) + b.covariance(i, i) - 2.0 * cross(i, i);
  const double w2 = mean_term + trace_term;
  return w2 < 0.0 ? 0.0 : w2;
}

DivergenceReport divergence_experiment(const fl::RunResult& run,
                                       const datagen::Dataset& unseen,
                                       const ExperimentConfig& cfg) {
  if (run.clients.empty()) throw std::invalid_argument("run has no clients");
  if (unseen.inputs.empty()) throw std::invalid_argument("unseen dataset is empty");
  const auto layers = bn_layers_of(run.global);
  if (layers.empty()) throw std::invalid_argument("model has no normalization layers");

  // Pool the personalized captures over all seen clients.
  std::map<std::size_t, nn::FeatureAccumulator> seen;
  for (std::size_t l : layers) seen[l] = {};
  for (const auto& client : run.clients) {
    auto part = capture(client.model, client.train, layers, nn::BNMode::Eval,
                        cfg.capture_batch, nullptr);
    for (std::size_t l : layers) {
      if (seen[l].count == 0) {
        seen[l] = part[l];
      } else {
        auto& dst = seen[l];
        const auto& src = part[l];
        dst.count += src.count;
        for (std::size_t i = 0; i < dst.sum.size(); ++i) dst.sum[i] += src.sum[i];
        for (std::size_t i = 0; i < dst.outer.data().size(); ++i)
          dst.outer.data()[i] += src.outer.data()[i];
      }
    }
  }

  auto frozen = capture(run.global, unseen, layers, nn::BNMode::Eval,
                        cfg.capture_batch, nullptr);

  nn::Network adapted;
  fedtest::test_external(run.global, unseen, cfg.reestimation, nn::LossKind::Squared,
                         &adapted);
  auto reestimated = capture(adapted, unseen, layers, nn::BNMode::Eval,
                             cfg.capture_batch, nullptr);

  DivergenceReport report;
  for (std::size_t l : layers) {
    auto seen_m = moments_from(l, seen[l]);
    auto frozen_m = moments_from(l, frozen[l]);
    auto reest_m = moments_from(l, reestimated[l]);
    auto standard = standard_moments(l, seen_m.mean.size());
    LayerDivergence ld;
    ld.layer_id = l;
    ld.frozen_seen_unseen = gaussian_w2(seen_m, frozen_m);
    ld.frozen_to_standard = gaussian_w2(frozen_m, standard);
    ld.reestimated_seen_unseen = gaussian_w2(seen_m, reest_m);
    ld.reestimated_to_standard = gaussian_w2(reest_m, standard);
    report.layers.push_back(ld);
  }
  return report;
}

std::string divergence_csv(const DivergenceReport& report) {
  std::string csv = "layer_id,mode,w2_seen_unseen,w2_to_standard\n";
  for (const auto& ld : report.layers) {
    csv += std::to_string(ld.layer_id) + ",frozen," + fmt_double(ld.frozen_seen_unseen) +
           "," + fmt_double(ld.frozen_to_standard) + "\n";
    csv += std::to_string(ld.layer_id) + ",reestimated," +
           fmt_double(ld.reestimated_seen_unseen) + "," +
           fmt_double(ld.reestimated_to_standard) + "\n";
  }
  return csv;
}

std::string divergence_json(const DivergenceReport& report) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& ld : report.layers) {
    nlohmann::json layer;
    layer["layer_id"] = ld.layer_id;
    layer["frozen"] = {{"w2_seen_unseen", ld.frozen_seen_unseen},
                       {"w2_to_standard", ld.frozen_to_standard}};
    layer["reestimated"] = {{"w2_seen_unseen", ld.reestimated_seen_unseen},
                            {"w2_to_standard", ld.reestimated_to_standard}};
    j.push_back(layer);
  }
  return j.dump(2);
}

}  // namespace unifed::divergence
