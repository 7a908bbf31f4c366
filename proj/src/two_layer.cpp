#include "unifed/two_layer.hpp"

#include <cmath>
#include <stdexcept>

#include "unifed/rng.hpp"

namespace unifed::nn {

namespace {

double relu(double z) { return z > 0.0 ? z : 0.0; }

// Row k of model.v as a vector view copy.
Vector row_of(const Matrix& m, std::size_t k) {
  Vector v(m.cols());
  for (std::size_t j = 0; j < m.cols(); ++j) v[j] = m(k, j);
  return v;
}

}  // namespace

TwoLayerBNModel two_layer_init(std::size_t width, std::size_t dim,
                               std::vector<Matrix> covariances, double alpha,
                               bool client_specific, std::uint64_t seed) {
  if (width == 0 || dim == 0) throw std::invalid_argument("two_layer_init: empty model");
  if (covariances.empty())
    throw std::invalid_argument("two_layer_init: need at least one covariance");
  if (!(alpha > 0.0)) throw std::invalid_argument("two_layer_init: alpha must be > 0");
  for (const auto& s : covariances)
    if (s.rows() != dim || s.cols() != dim)
      throw std::invalid_argument("two_layer_init: covariance dimension mismatch");

  TwoLayerBNModel model;
  model.alpha = alpha;
  model.client_specific = client_specific;
  model.covariances = std::move(covariances);
  model.v = Matrix(width, dim);
  model.sign.resize(width);
  const std::size_t cols = client_specific ? model.covariances.size() : 1;
  model.gamma = Matrix(width, cols);

  Rng rng(seed_stream(seed, 0x21a7e5));
  for (std::size_t k = 0; k < width; ++k) {
    double norm_sq = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double vkj = alpha * rng.normal();
      model.v(k, j) = vkj;
      norm_sq += vkj * vkj;
    }
    model.sign[k] = rng.rademacher();
    const double g = std::sqrt(norm_sq) / alpha;
    for (std::size_t c = 0; c < cols; ++c) model.gamma(k, c) = g;
  }
  return model;
}

double two_layer_forward(const TwoLayerBNModel& model, const Vector& x,
                         std::size_t client) {
  if (client >= model.clients())
    throw std::out_of_range("two_layer_forward: bad client id");
  if (x.size() != model.dim())
    throw std::invalid_argument("two_layer_forward: input dimension mismatch");

  const Matrix& s = model.covariances[client];
  const std::size_t m = model.width();
  double acc = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    const Vector vk = row_of(model.v, k);
    const double norm = linalg::s_norm(vk, s);
    if (norm < 1e-12)
      throw std::runtime_error("two_layer_forward: degenerate direction " +
                               std::to_string(k));
    const double z = linalg::dot(vk, x) / norm;
    acc += model.sign[k] * relu(model.gamma_at(k, client) * z);
  }
  return acc / std::sqrt(static_cast<double>(m));
}

Vector two_layer_forward_batch(const TwoLayerBNModel& model,
                               const std::vector<Vector>& xs,
                               const std::vector<std::size_t>& clients) {
  if (xs.size() != clients.size())
    throw std::invalid_argument("two_layer_forward_batch: size mismatch");
  const std::size_t m = model.width();
  const std::size_t n_clients = model.clients();
  const double root_m = std::sqrt(static_cast<double>(m));

  Vector out(xs.size(), 0.0);
  for (std::size_t k = 0; k < m; ++k) {
    const Vector vk = row_of(model.v, k);
    Vector norms(n_clients);
    for (std::size_t i = 0; i < n_clients; ++i) {
      norms[i] = linalg::s_norm(vk, model.covariances[i]);
      if (norms[i] < 1e-12)
        throw std::runtime_error("two_layer_forward_batch: degenerate direction " +
                                 std::to_string(k));
    }
    for (std::size_t q = 0; q < xs.size(); ++q) {
      const std::size_t i = clients[q];
      if (i >= n_clients)
        throw std::out_of_range("two_layer_forward_batch: bad client id");
      const double z = linalg::dot(vk, xs[q]) / norms[i];
      out[q] += model.sign[k] * relu(model.gamma_at(k, i) * z);
    }
  }
  for (auto& v : out) v /= root_m;
  return out;
}

TwoLayerGradients two_layer_gradients(const TwoLayerBNModel& model,
                                      const std::vector<Vector>& xs,
                                      const std::vector<std::size_t>& clients,
                                      const Vector& y) {
  const std::size_t n = xs.size();
  if (clients.size() != n || y.size() != n)
    throw std::invalid_argument("two_layer_gradients: size mismatch");
  const std::size_t m = model.width();
  const std::size_t d = model.dim();
  const double root_m = std::sqrt(static_cast<double>(m));

  TwoLayerGradients out;
  out.residuals = two_layer_forward_batch(model, xs, clients);
  for (std::size_t q = 0; q < n; ++q) {
    out.residuals[q] -= y[q];
    out.loss += 0.5 * out.residuals[q] * out.residuals[q];
  }
  out.dv = Matrix(m, d);
  out.dgamma = Matrix(model.gamma.rows(), model.gamma.cols());

  for (std::size_t k = 0; k < m; ++k) {
    const Vector vk = row_of(model.v, k);
    const std::size_t n_clients = model.clients();
    // Per-client S v_k and ||v_k||_{S_i}.
    std::vector<Vector> sv(n_clients);
    Vector norms(n_clients);
    for (std::size_t i = 0; i < n_clients; ++i) {
      sv[i] = linalg::matvec(model.covariances[i], vk);
      const double q = linalg::dot(vk, sv[i]);
      if (q < 1e-24)
        throw std::runtime_error("two_layer_gradients: degenerate direction " +
                                 std::to_string(k));
      norms[i] = std::sqrt(q);
    }

    for (std::size_t q = 0; q < n; ++q) {
      const std::size_t i = clients[q];
      const double vx = linalg::dot(vk, xs[q]);
      if (vx < 0.0) continue;  // inactive: 1{v_k.x_q >= 0} = 0
      const double r = out.residuals[q];
      const double c = static_cast<double>(model.sign[k]);
      const double norm = norms[i];
      const double g = model.gamma_at(k, i);

      // x_q projected against v_k under S_i: x - S v (v.x) / ||v||_S^2.
      const double scale = vx / (norm * norm);
      const double coeff = r * c * g / (root_m * norm);
      for (std::size_t j = 0; j < d; ++j)
        out.dv(k, j) += coeff * (xs[q][j] - sv[i][j] * scale);

      const double dgamma = r * c * relu(vx) / (root_m * norm);
      out.dgamma(k, model.client_specific ? i : 0) += dgamma;
    }
  }
  return out;
}

void two_layer_step(TwoLayerBNModel& model, const TwoLayerGradients& grads, double lr) {
  for (std::size_t idx = 0; idx < model.v.data().size(); ++idx)
    model.v.data()[idx] -= lr * grads.dv.data()[idx];
  for (std::size_t idx = 0; idx < model.gamma.data().size(); ++idx)
    model.gamma.data()[idx] -= lr * grads.dgamma.data()[idx];
}

}  // namespace unifed::nn
