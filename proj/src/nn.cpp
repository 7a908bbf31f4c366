#include "unifed/nn.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "unifed/rng.hpp"

namespace unifed::nn {

namespace {

using nlohmann::json;

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json values_to_json(const Vector& v) {
  json arr = json::array();
  for (double x : v) arr.push_back(fmt17(x));
  return arr;
}

Vector values_from_json(const json& arr, const char* what) {
  if (!arr.is_array()) throw std::runtime_error(std::string(what) + ": expected array");
  Vector v;
  v.reserve(arr.size());
  for (const auto& item : arr) {
    if (!item.is_string())
      throw std::runtime_error(std::string(what) + ": expected decimal string");
    v.push_back(std::strtod(item.get<std::string>().c_str(), nullptr));
  }
  return v;
}

Matrix dense_apply(const DenseLayer& d, const Matrix& x) {
  const std::size_t n = x.rows();
  const std::size_t in = d.w.cols();
  const std::size_t out = d.w.rows();
  if (x.cols() != in) throw std::invalid_argument("dense: input width mismatch");
  Matrix y(n, out);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out; ++o) {
      double s = d.b[o];
      for (std::size_t k = 0; k < in; ++k) s += x(i, k) * d.w(o, k);
      y(i, o) = s;
    }
  return y;
}

Matrix relu_apply(const Matrix& x) {
  Matrix y = x;
  for (auto& v : y.data())
    if (v < 0.0) v = 0.0;
  return y;
}

}  // namespace

Matrix bn_forward(BNLayer& layer, const Matrix& batch, const BNOptions& opts,
                  BNCache* cache) {
  const std::size_t n = batch.rows();
  const std::size_t c = batch.cols();
  if (c != layer.features()) throw std::invalid_argument("bn_forward: feature mismatch");
  if (n == 0 && opts.mode != BNMode::Eval)
    throw std::invalid_argument("bn_forward: empty batch");
  linalg::require_finite(batch, "bn_forward");

  Vector batch_mean(c, 0.0), batch_var(c, 0.0);
  if (opts.mode != BNMode::Eval) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) batch_mean[j] += batch(i, j);
    for (auto& v : batch_mean) v /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = batch(i, j) - batch_mean[j];
        batch_var[j] += d * d;
      }
    for (auto& v : batch_var) v /= static_cast<double>(n);
  }

  Vector use_mean, use_var;
  switch (opts.mode) {
    case BNMode::Train: {
      use_mean = batch_mean;
      use_var = batch_var;
      if (opts.update_running) {
        const double tau = layer.train_momentum;
        for (std::size_t j = 0; j < c; ++j) {
          layer.running_mean[j] = tau * layer.running_mean[j] + (1.0 - tau) * batch_mean[j];
          layer.running_var[j] = tau * layer.running_var[j] + (1.0 - tau) * batch_var[j];
        }
      }
      break;
    }
    case BNMode::Eval: {
      use_mean = layer.running_mean;
      use_var = layer.running_var;
      break;
    }
    case BNMode::Reestimate: {
      const double tau = opts.reestimate_momentum;
      for (std::size_t j = 0; j < c; ++j)
        layer.running_mean[j] = tau * layer.running_mean[j] + (1.0 - tau) * batch_mean[j];
      for (std::size_t j = 0; j < c; ++j) {
        const double anchor = opts.variance_term == VarianceTerm::UpdatedRunningMean
                                  ? layer.running_mean[j]
                                  : batch_mean[j];
        double dev = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = batch(i, j) - anchor;
          dev += d * d;
        }
        dev /= static_cast<double>(n);
        layer.running_var[j] = tau * layer.running_var[j] + (1.0 - tau) * dev;
      }
      use_mean = layer.running_mean;
      use_var = layer.running_var;
      break;
    }
  }

  Matrix normalized(n, c);
  Matrix out(n, c);
  for (std::size_t j = 0; j < c; ++j) {
    const double inv = 1.0 / std::sqrt(use_var[j] + layer.eps);
    for (std::size_t i = 0; i < n; ++i) {
      const double xh = (batch(i, j) - use_mean[j]) * inv;
      normalized(i, j) = xh;
      out(i, j) = layer.gamma[j] * xh + layer.beta[j];
    }
  }
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->batch_mean = std::move(batch_mean);
    cache->batch_var = std::move(batch_var);
    cache->used_mean = std::move(use_mean);
    cache->used_var = std::move(use_var);
  }
  return out;
}

Network make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                 std::size_t output_dim, bool batch_norm, std::uint64_t seed) {
  Network net;
  net.input_dim = input_dim;
  std::size_t in = input_dim;
  std::size_t layer_tag = 0;
  for (std::size_t h : hidden) {
    DenseLayer d;
    d.w = Matrix(h, in);
    d.b.assign(h, 0.0);
    Rng rng(seed_stream(seed, 0x312a5, layer_tag++));
    const double scale = std::sqrt(2.0 / static_cast<double>(in));
    for (auto& v : d.w.data()) v = scale * rng.normal();
    net.layers.emplace_back(std::move(d));
    if (batch_norm) net.layers.emplace_back(BNLayer(h));
    net.layers.emplace_back(ReluLayer{});
    in = h;
  }
  DenseLayer head;
  head.w = Matrix(output_dim, in);
  head.b.assign(output_dim, 0.0);
  Rng rng(seed_stream(seed, 0x312a5, layer_tag++));
  const double scale = std::sqrt(1.0 / static_cast<double>(in));
  for (auto& v : head.w.data()) v = scale * rng.normal();
  net.layers.emplace_back(std::move(head));
  return net;
}

void FeatureAccumulator::add(const Matrix& features) {
  const std::size_t n = features.rows();
  const std::size_t c = features.cols();
  if (sum.empty()) {
    sum.assign(c, 0.0);
    outer = Matrix(c, c);
  }
  if (sum.size() != c) throw std::invalid_argument("FeatureAccumulator: width changed");
  count += n;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) sum[j] += features(i, j);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < c; ++a) {
      const double fa = features(i, a);
      if (fa == 0.0) continue;
      for (std::size_t b = 0; b < c; ++b) outer(a, b) += fa * features(i, b);
    }
}

Vector FeatureAccumulator::mean() const {
  Vector m = sum;
  for (auto& v : m) v /= static_cast<double>(count);
  return m;
}

Matrix FeatureAccumulator::covariance() const {
  const Vector m = mean();
  const std::size_t c = m.size();
  Matrix cov(c, c);
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = 0; b < c; ++b)
      cov(a, b) = outer(a, b) / static_cast<double>(count) - m[a] * m[b];
  return cov;
}

Vector FeatureAccumulator::variance() const {
  const Matrix cov = covariance();
  Vector v(cov.rows());
  for (std::size_t j = 0; j < v.size(); ++j) v[j] = cov(j, j);
  return v;
}

Matrix mlp_forward(Network& net, const Matrix& batch, const ForwardOptions& opts) {
  Matrix x = batch;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (auto* d = std::get_if<DenseLayer>(&net.layers[i])) {
      x = dense_apply(*d, x);
    } else if (auto* bn = std::get_if<BNLayer>(&net.layers[i])) {
      const bool want_capture = opts.capture && opts.capture->count(i) > 0;
      BNCache cache;
      x = bn_forward(*bn, x, opts.bn, want_capture ? &cache : nullptr);
      if (want_capture) (*opts.capture)[i].add(cache.normalized);
    } else {
      x = relu_apply(x);
    }
  }
  return x;
}

double loss_value(const Matrix& out, const Vector& labels, LossKind kind) {
  const std::size_t n = out.rows();
  if (out.cols() != 1) throw std::invalid_argument("loss_value: output width must be 1");
  if (labels.size() != n) throw std::invalid_argument("loss_value: label count mismatch");
  if (n == 0) throw std::invalid_argument("loss_value: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double f = out(i, 0);
    if (kind == LossKind::Squared) {
      const double d = f - labels[i];
      total += d * d;
    } else {
      const double t = labels[i] * f;
      total += t > 0.0 ? std::log1p(std::exp(-t)) : -t + std::log1p(std::exp(t));
    }
  }
  return total / static_cast<double>(n);
}

double accuracy(const Matrix& out, const Vector& labels) {
  const std::size_t n = out.rows();
  if (out.cols() != 1) throw std::invalid_argument("accuracy: output width must be 1");
  if (labels.size() != n) throw std::invalid_argument("accuracy: label count mismatch");
  if (n == 0) throw std::invalid_argument("accuracy: empty batch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pred = out(i, 0) < 0.0 ? -1.0 : 1.0;
    if (pred == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

BackwardResult mlp_backward(Network& net, const Matrix& batch, const Vector& labels,
                            LossKind kind, bool update_running, double train_momentum) {
  const std::size_t n = batch.rows();
  if (n == 0) throw std::invalid_argument("mlp_backward: empty batch");

  const std::size_t depth = net.layers.size();
  std::vector<Matrix> inputs(depth);
  std::vector<BNCache> caches(depth);

  Matrix x = batch;
  for (std::size_t i = 0; i < depth; ++i) {
    inputs[i] = x;
    if (auto* d = std::get_if<DenseLayer>(&net.layers[i])) {
      x = dense_apply(*d, x);
    } else if (auto* bn = std::get_if<BNLayer>(&net.layers[i])) {
      const double saved = bn->train_momentum;
      if (train_momentum >= 0.0) bn->train_momentum = train_momentum;
      BNOptions o;
      o.mode = BNMode::Train;
      o.update_running = update_running;
      x = bn_forward(*bn, x, o, &caches[i]);
      bn->train_momentum = saved;
    } else {
      x = relu_apply(x);
    }
  }

  BackwardResult result;
  result.loss = loss_value(x, labels, kind);
  result.layers.resize(depth);

  Matrix grad(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double f = x(i, 0);
    if (kind == LossKind::Squared) {
      grad(i, 0) = 2.0 * (f - labels[i]) / static_cast<double>(n);
    } else {
      grad(i, 0) = -labels[i] / ((1.0 + std::exp(labels[i] * f)) * static_cast<double>(n));
    }
  }

  for (std::size_t idx = depth; idx-- > 0;) {
    if (auto* d = std::get_if<DenseLayer>(&net.layers[idx])) {
      const Matrix& in = inputs[idx];
      const std::size_t out_w = d->w.rows();
      const std::size_t in_w = d->w.cols();
      LayerGrad& g = result.layers[idx];
      g.a.assign(out_w * in_w, 0.0);
      g.b.assign(out_w, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out_w; ++o) {
          const double gy = grad(i, o);
          if (gy == 0.0) continue;
          g.b[o] += gy;
          for (std::size_t k = 0; k < in_w; ++k) g.a[o * in_w + k] += gy * in(i, k);
        }
      Matrix gx(n, in_w);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < in_w; ++k) {
          double s = 0.0;
          for (std::size_t o = 0; o < out_w; ++o) s += grad(i, o) * d->w(o, k);
          gx(i, k) = s;
        }
      grad = std::move(gx);
    } else if (auto* bn = std::get_if<BNLayer>(&net.layers[idx])) {
      const BNCache& cache = caches[idx];
      const Matrix& in = inputs[idx];
      const std::size_t c = bn->features();
      LayerGrad& g = result.layers[idx];
      g.a.assign(c, 0.0);
      g.b.assign(c, 0.0);
      Matrix gx(n, c);
      for (std::size_t j = 0; j < c; ++j) {
        const double inv = 1.0 / std::sqrt(cache.batch_var[j] + bn->eps);
        double dgamma = 0.0, dbeta = 0.0, dvar_sum = 0.0, dxhat_sum = 0.0, xc_sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double gy = grad(i, j);
          dgamma += gy * cache.normalized(i, j);
          dbeta += gy;
          const double dxhat = gy * bn->gamma[j];
          const double xc = in(i, j) - cache.batch_mean[j];
          dvar_sum += dxhat * xc;
          dxhat_sum += dxhat;
          xc_sum += xc;
        }
        g.a[j] = dgamma;
        g.b[j] = dbeta;
        const double dvar = dvar_sum * -0.5 * inv * inv * inv;
        const double dmean =
            -inv * dxhat_sum + dvar * (-2.0 / static_cast<double>(n)) * xc_sum;
        for (std::size_t i = 0; i < n; ++i) {
          const double dxhat = grad(i, j) * bn->gamma[j];
          const double xc = in(i, j) - cache.batch_mean[j];
          gx(i, j) = dxhat * inv + dvar * 2.0 * xc / static_cast<double>(n) +
                     dmean / static_cast<double>(n);
        }
      }
      grad = std::move(gx);
    } else {
      const Matrix& in = inputs[idx];
      for (std::size_t k = 0; k < grad.data().size(); ++k)
        if (in.data()[k] <= 0.0) grad.data()[k] = 0.0;
    }
  }
  return result;
}

Matrix batch_from(const std::vector<Vector>& inputs) {
  if (inputs.empty()) return Matrix(0, 0);
  Matrix b(inputs.size(), inputs.front().size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].size() != inputs.front().size())
      throw std::invalid_argument("batch_from: ragged inputs");
    for (std::size_t j = 0; j < inputs[i].size(); ++j) b(i, j) = inputs[i][j];
  }
  return b;
}

std::vector<ParamArray> parameter_arrays(Network& net, bool include_bn) {
  std::vector<ParamArray> out;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (auto* d = std::get_if<DenseLayer>(&net.layers[i])) {
      out.push_back({i, 0, &d->w.data()});
      out.push_back({i, 1, &d->b});
    } else if (auto* bn = std::get_if<BNLayer>(&net.layers[i])) {
      if (include_bn) {
        out.push_back({i, 0, &bn->gamma});
        out.push_back({i, 1, &bn->beta});
      }
    }
  }
  return out;
}

std::vector<ParamArray> statistic_arrays(Network& net) {
  std::vector<ParamArray> out;
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (auto* bn = std::get_if<BNLayer>(&net.layers[i])) {
      out.push_back({i, 0, &bn->running_mean});
      out.push_back({i, 1, &bn->running_var});
    }
  return out;
}

bool is_bn_layer(const Network& net, std::size_t layer_index) {
  return std::holds_alternative<BNLayer>(net.layers[layer_index]);
}

std::string checkpoint_to_string(const Network& net) {
  json doc;
  doc["format_version"] = 1;
  doc["input_dim"] = net.input_dim;
  json layers = json::array();
  for (const auto& layer : net.layers) {
    json entry;
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      entry["kind"] = "dense";
      entry["out"] = d->w.rows();
      entry["in"] = d->w.cols();
      entry["w"] = values_to_json(d->w.data());
      entry["b"] = values_to_json(d->b);
    } else if (const auto* bn = std::get_if<BNLayer>(&layer)) {
      entry["kind"] = "batch_norm";
      entry["features"] = bn->features();
      entry["gamma"] = values_to_json(bn->gamma);
      entry["beta"] = values_to_json(bn->beta);
      entry["running_mean"] = values_to_json(bn->running_mean);
      entry["running_var"] = values_to_json(bn->running_var);
      entry["eps"] = fmt17(bn->eps);
      entry["train_momentum"] = fmt17(bn->train_momentum);
    } else {
      entry["kind"] = "relu";
    }
    layers.push_back(std::move(entry));
  }
  doc["layers"] = std::move(layers);
  return doc.dump(2);
}

Network checkpoint_from_string(const std::string& text) {
  json doc = json::parse(text);
  if (!doc.contains("format_version") || doc["format_version"].get<int>() != 1)
    throw std::runtime_error("checkpoint: unsupported format_version");
  Network net;
  net.input_dim = doc.value("input_dim", std::size_t{0});
  for (const auto& entry : doc.at("layers")) {
    const std::string kind = entry.at("kind").get<std::string>();
    if (kind == "dense") {
      DenseLayer d;
      const std::size_t out = entry.at("out").get<std::size_t>();
      const std::size_t in = entry.at("in").get<std::size_t>();
      const Vector w = values_from_json(entry.at("w"), "checkpoint dense w");
      if (w.size() != out * in) throw std::runtime_error("checkpoint: dense shape mismatch");
      d.w = Matrix(out, in);
      d.w.data() = w;
      d.b = values_from_json(entry.at("b"), "checkpoint dense b");
      if (d.b.size() != out) throw std::runtime_error("checkpoint: dense bias mismatch");
      net.layers.emplace_back(std::move(d));
    } else if (kind == "batch_norm") {
      BNLayer bn;
      bn.gamma = values_from_json(entry.at("gamma"), "checkpoint bn gamma");
      bn.beta = values_from_json(entry.at("beta"), "checkpoint bn beta");
      bn.running_mean = values_from_json(entry.at("running_mean"), "checkpoint bn mean");
      bn.running_var = values_from_json(entry.at("running_var"), "checkpoint bn var");
      const std::size_t c = entry.at("features").get<std::size_t>();
      if (bn.gamma.size() != c || bn.beta.size() != c || bn.running_mean.size() != c ||
          bn.running_var.size() != c)
        throw std::runtime_error("checkpoint: bn shape mismatch");
      bn.eps = std::strtod(entry.at("eps").get<std::string>().c_str(), nullptr);
      bn.train_momentum =
          std::strtod(entry.at("train_momentum").get<std::string>().c_str(), nullptr);
      net.layers.emplace_back(std::move(bn));
    } else if (kind == "relu") {
      net.layers.emplace_back(ReluLayer{});
    } else {
      throw std::runtime_error("checkpoint: unknown layer kind '" + kind + "'");
    }
  }
  return net;
}

void save_checkpoint(const Network& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << checkpoint_to_string(net) << "\n";
}

Network load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return checkpoint_from_string(text.str());
}

}  // namespace unifed::nn
