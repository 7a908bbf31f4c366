#pragma once

#include <cstdint>
#include <vector>

#include "unifed/linalg.hpp"

namespace unifed::nn {

// Width-m one-hidden-layer network with normalized first-layer directions:
//   f(x; client i) = (1/sqrt(m)) sum_k c_k relu(gamma_{k,i} v_k.x / ||v_k||_{S_i})
// where S_i is client i's input covariance. The shared variant ties
// gamma_{k,i} across clients (one column); the client-specific variant keeps
// one gamma column per client.
struct TwoLayerBNModel {
  double alpha = 1.0;
  bool client_specific = false;
  Matrix v;                         // m x d, row k is v_k
  Matrix gamma;                     // m x N, or m x 1 when shared
  std::vector<int> sign;            // c_k in {-1,+1}
  std::vector<Matrix> covariances;  // S_i per client

  std::size_t width() const { return v.rows(); }
  std::size_t dim() const { return v.cols(); }
  std::size_t clients() const { return covariances.size(); }
  double gamma_at(std::size_t k, std::size_t client) const {
    return gamma(k, client_specific ? client : 0);
  }
};

// v_k ~ N(0, alpha^2 I), c_k ~ U{-1,+1}, gamma_{k,*} = ||v_k(0)||_2 / alpha.
TwoLayerBNModel two_layer_init(std::size_t width, std::size_t dim,
                               std::vector<Matrix> covariances, double alpha,
                               bool client_specific, std::uint64_t seed);

double two_layer_forward(const TwoLayerBNModel& model, const Vector& x,
                         std::size_t client);

Vector two_layer_forward_batch(const TwoLayerBNModel& model,
                               const std::vector<Vector>& xs,
                               const std::vector<std::size_t>& clients);

struct TwoLayerGradients {
  Matrix dv;      // m x d
  Matrix dgamma;  // same shape as model.gamma
  double loss = 0.0;
  Vector residuals;  // f - y
};

// Gradients of L = (1/2) sum_q (f_q - y_q)^2. Client-specific gamma columns
// receive contributions only from their own client's points.
TwoLayerGradients two_layer_gradients(const TwoLayerBNModel& model,
                                      const std::vector<Vector>& xs,
                                      const std::vector<std::size_t>& clients,
                                      const Vector& y);

// One full-batch gradient descent step in place.
void two_layer_step(TwoLayerBNModel& model, const TwoLayerGradients& grads,
                    double lr);

}  // namespace unifed::nn
