#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "unifed/linalg.hpp"
#include "unifed/rng.hpp"
#include "unifed/two_layer.hpp"

using unifed::Matrix;
using unifed::Rng;
using unifed::Vector;
namespace nn = unifed::nn;
namespace la = unifed::linalg;

namespace {

Matrix random_pd(std::size_t n, Rng& rng, double ridge = 0.5) {
  Matrix b(n, n);
  for (auto& x : b.data()) x = rng.normal();
  Matrix s = la::matmul(la::transpose(b), b);
  for (std::size_t i = 0; i < n; ++i) s(i, i) += ridge;
  return s;
}

struct Problem {
  nn::TwoLayerBNModel model;
  std::vector<Vector> xs;
  std::vector<std::size_t> clients;
  Vector y;
};

Problem make_problem(bool client_specific, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t d = 4, m = 8, n_clients = 2, per_client = 3;
  std::vector<Matrix> covs;
  for (std::size_t i = 0; i < n_clients; ++i) covs.push_back(random_pd(d, rng));

  Problem p;
  p.model = nn::two_layer_init(m, d, covs, 1.0, client_specific, seed);
  for (std::size_t i = 0; i < n_clients; ++i)
    for (std::size_t q = 0; q < per_client; ++q) {
      Vector x(d);
      for (auto& v : x) v = rng.normal();
      p.xs.push_back(x);
      p.clients.push_back(i);
      p.y.push_back(rng.normal());
    }
  return p;
}

double problem_loss(const Problem& p, const nn::TwoLayerBNModel& model) {
  const Vector f = nn::two_layer_forward_batch(model, p.xs, p.clients);
  double loss = 0.0;
  for (std::size_t q = 0; q < f.size(); ++q) {
    const double r = f[q] - p.y[q];
    loss += 0.5 * r * r;
  }
  return loss;
}

// Distance from any pre-activation kink, for finite-difference safety.
double min_preactivation(const Problem& p) {
  double lo = 1e300;
  for (std::size_t k = 0; k < p.model.width(); ++k)
    for (const auto& x : p.xs) {
      double vx = 0.0;
      for (std::size_t j = 0; j < x.size(); ++j) vx += p.model.v(k, j) * x[j];
      lo = std::min(lo, std::fabs(vx));
    }
  return lo;
}

}  // namespace

TEST_CASE("forward matches the single-unit hand computation") {
  // m = 1, c = +1, gamma = 1, S = I, v = (1,0), x = (2,0) -> relu(2) = 2.
  nn::TwoLayerBNModel model;
  model.alpha = 1.0;
  model.client_specific = false;
  model.v = Matrix(1, 2);
  model.v(0, 0) = 1.0;
  model.gamma = Matrix(1, 1);
  model.gamma(0, 0) = 1.0;
  model.sign = {1};
  model.covariances = {Matrix::identity(2)};
  CHECK(nn::two_layer_forward(model, Vector{2.0, 0.0}, 0) == doctest::Approx(2.0));
  // Negative side is inactive.
  CHECK(nn::two_layer_forward(model, Vector{-2.0, 0.0}, 0) == 0.0);
  // c = -1 flips the sign.
  model.sign = {-1};
  CHECK(nn::two_layer_forward(model, Vector{2.0, 0.0}, 0) == doctest::Approx(-2.0));
}

TEST_CASE("initialization matches its distributional contract") {
  const std::size_t m = 10000, d = 6;
  const double alpha = 0.7;
  const auto model = nn::two_layer_init(m, d, {Matrix::identity(d)}, alpha, false, 51);

  // E ||v_k||^2 = alpha^2 d (chi-squared mean).
  double mean_sq = 0.0;
  int plus = 0, minus = 0;
  for (std::size_t k = 0; k < m; ++k) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += model.v(k, j) * model.v(k, j);
    mean_sq += sq / (alpha * alpha);
    // gamma_k = ||v_k(0)||_2 / alpha exactly.
    CHECK(model.gamma(k, 0) == doctest::Approx(std::sqrt(sq) / alpha).epsilon(1e-12));
    (model.sign[k] > 0 ? plus : minus) += 1;
  }
  mean_sq /= static_cast<double>(m);
  CHECK(mean_sq == doctest::Approx(static_cast<double>(d)).epsilon(0.05));
  CHECK(plus > 4000);
  CHECK(minus > 4000);

  // Client-specific init carries identical columns.
  const auto cs = nn::two_layer_init(16, d,
                                     {Matrix::identity(d), Matrix::identity(d)},
                                     alpha, true, 51);
  REQUIRE(cs.gamma.cols() == 2);
  for (std::size_t k = 0; k < 16; ++k) CHECK(cs.gamma(k, 0) == cs.gamma(k, 1));

  // Same seed, same model.
  const auto again = nn::two_layer_init(16, d,
                                        {Matrix::identity(d), Matrix::identity(d)},
                                        alpha, true, 51);
  CHECK(cs.v.data() == again.v.data());
  CHECK(cs.sign == again.sign);
}

TEST_CASE("forward is invariant to rescaling a direction") {
  Problem p = make_problem(false, 61);
  const Vector before = nn::two_layer_forward_batch(p.model, p.xs, p.clients);
  nn::TwoLayerBNModel scaled = p.model;
  for (std::size_t j = 0; j < scaled.dim(); ++j) scaled.v(2, j) *= 3.7;
  const Vector after = nn::two_layer_forward_batch(scaled, p.xs, p.clients);
  for (std::size_t q = 0; q < before.size(); ++q)
    CHECK(after[q] == doctest::Approx(before[q]).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central finite differences") {
  for (const bool client_specific : {false, true}) {
    Problem p;
    std::uint64_t seed = client_specific ? 71 : 62;
    // Stay away from relu kinks so finite differences are trustworthy.
    do {
      p = make_problem(client_specific, seed++);
    } while (min_preactivation(p) < 5e-3);

    const nn::TwoLayerGradients g =
        nn::two_layer_gradients(p.model, p.xs, p.clients, p.y);
    CHECK(g.loss == doctest::Approx(problem_loss(p, p.model)).epsilon(1e-12));

    const double h = 1e-4;
    double max_rel = 0.0;
    nn::TwoLayerBNModel probe = p.model;
    for (std::size_t k = 0; k < probe.width(); ++k)
      for (std::size_t j = 0; j < probe.dim(); ++j) {
        const double saved = probe.v(k, j);
        probe.v(k, j) = saved + h;
        const double up = problem_loss(p, probe);
        probe.v(k, j) = saved - h;
        const double down = problem_loss(p, probe);
        probe.v(k, j) = saved;
        const double fd = (up - down) / (2.0 * h);
        const double an = g.dv(k, j);
        max_rel = std::max(max_rel, std::fabs(fd - an) /
                                        std::max({std::fabs(fd), std::fabs(an), 1e-8}));
      }
    for (std::size_t k = 0; k < probe.gamma.rows(); ++k)
      for (std::size_t c = 0; c < probe.gamma.cols(); ++c) {
        const double saved = probe.gamma(k, c);
        probe.gamma(k, c) = saved + h;
        const double up = problem_loss(p, probe);
        probe.gamma(k, c) = saved - h;
        const double down = problem_loss(p, probe);
        probe.gamma(k, c) = saved;
        const double fd = (up - down) / (2.0 * h);
        const double an = g.dgamma(k, c);
        max_rel = std::max(max_rel, std::fabs(fd - an) /
                                        std::max({std::fabs(fd), std::fabs(an), 1e-8}));
      }
    CHECK(max_rel < 1e-5);
  }
}

TEST_CASE("client-specific gamma columns only hear their own client") {
  Problem p = make_problem(true, 81);
  // All points from client 0.
  std::vector<std::size_t> only(p.clients.size(), 0);
  const nn::TwoLayerGradients g = nn::two_layer_gradients(p.model, p.xs, only, p.y);
  bool any_nonzero = false;
  for (std::size_t k = 0; k < g.dgamma.rows(); ++k) {
    any_nonzero = any_nonzero || g.dgamma(k, 0) != 0.0;
    CHECK(g.dgamma(k, 1) == 0.0);
  }
  CHECK(any_nonzero);
}

TEST_CASE("direction gradients are Euclidean-orthogonal to their direction") {
  for (const bool client_specific : {false, true}) {
    Problem p = make_problem(client_specific, 91);
    const nn::TwoLayerGradients g =
        nn::two_layer_gradients(p.model, p.xs, p.clients, p.y);
    for (std::size_t k = 0; k < p.model.width(); ++k) {
      double dot = 0.0, scale = 0.0;
      for (std::size_t j = 0; j < p.model.dim(); ++j) {
        dot += g.dv(k, j) * p.model.v(k, j);
        scale += std::fabs(g.dv(k, j) * p.model.v(k, j));
      }
      CHECK(std::fabs(dot) <= 1e-12 * std::max(1.0, scale));
    }
  }
}

TEST_CASE("degenerate directions are rejected") {
  Problem p = make_problem(false, 95);
  for (std::size_t j = 0; j < p.model.dim(); ++j) p.model.v(3, j) = 0.0;
  CHECK_THROWS(nn::two_layer_forward(p.model, p.xs[0], 0));
  CHECK_THROWS(nn::two_layer_gradients(p.model, p.xs, p.clients, p.y));
}

TEST_CASE("shared model equals the client-specific model with tied columns") {
  Problem p = make_problem(true, 97);  // init keeps columns identical
  nn::TwoLayerBNModel shared = p.model;
  shared.client_specific = false;
  Matrix one_col(shared.gamma.rows(), 1);
  for (std::size_t k = 0; k < shared.gamma.rows(); ++k) one_col(k, 0) = p.model.gamma(k, 0);
  shared.gamma = one_col;

  const Vector a = nn::two_layer_forward_batch(p.model, p.xs, p.clients);
  const Vector b = nn::two_layer_forward_batch(shared, p.xs, p.clients);
  for (std::size_t q = 0; q < a.size(); ++q) CHECK(a[q] == b[q]);

  // And the shared gamma gradient is the row sum of the client-specific one.
  const nn::TwoLayerGradients gc = nn::two_layer_gradients(p.model, p.xs, p.clients, p.y);
  const nn::TwoLayerGradients gs = nn::two_layer_gradients(shared, p.xs, p.clients, p.y);
  for (std::size_t k = 0; k < shared.gamma.rows(); ++k)
    CHECK(gs.dgamma(k, 0) ==
          doctest::Approx(gc.dgamma(k, 0) + gc.dgamma(k, 1)).epsilon(1e-12));
}

TEST_CASE("gradient descent steps reduce the loss") {
  Problem p = make_problem(false, 99);
  double loss = problem_loss(p, p.model);
  for (int step = 0; step < 25; ++step) {
    const nn::TwoLayerGradients g = nn::two_layer_gradients(p.model, p.xs, p.clients, p.y);
    nn::two_layer_step(p.model, g, 0.05);
  }
  CHECK(problem_loss(p, p.model) < 0.5 * loss);
}
