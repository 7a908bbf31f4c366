#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unifed/linalg.hpp"
#include "unifed/two_layer.hpp"

namespace unifed::ntk {

struct PointSet {
  std::vector<Vector> points;
  std::vector<std::size_t> clients;  // owner of each point

  std::size_t size() const { return points.size(); }
};

enum class GramEstimator { ClosedForm, MonteCarlo };

// Infinite-width kernel matrices for the normalized two-layer model:
// entry (p,q) is E_{v~N(0, a^2 I)} relu(v.x_p) relu(v.x_q); the starred
// variant masks entries of points from different clients, which makes it
// block-diagonal after grouping points by client.
struct GramReport {
  Matrix g_inf;
  Matrix g_star_inf;
  double e0 = 0.0;       // smallest eigenvalue of g_inf
  double e0_star = 0.0;  // smallest eigenvalue of g_star_inf
  GramEstimator estimator = GramEstimator::ClosedForm;
  double alpha = 1.0;
  std::size_t mc_samples = 0;
  Matrix mc_stderr;  // per-entry standard error; zero matrix for closed form
};

// Closed form: (a^2 |x_p||x_q| / 2pi)(sin t + (pi - t) cos t), t the angle
// between the points. Monte-Carlo averages over sampled v in fixed-size
// shards with per-shard seeds, so any thread count gives identical output.
GramReport gram_infinity(const PointSet& ps, double alpha,
                         GramEstimator estimator = GramEstimator::ClosedForm,
                         std::size_t mc_samples = 0, std::uint64_t seed = 0);

struct OrderingVerdict {
  double e0 = 0.0;
  double e0_star = 0.0;
  double min_block_eig = 0.0;  // min over per-client diagonal blocks of g_inf
  double tolerance = 0.0;
  bool ordered = false;         // e0_star >= e0 - tolerance
  bool block_identity = false;  // e0_star equals min_block_eig within 1e-9
};

OrderingVerdict compare_min_eigenvalues(const GramReport& report, const PointSet& ps);

// Exact finite-width kernel matrices of a model instance. For a
// client-specific model these are the starred versions (per-client gamma
// factors in v, client mask in g). g_stderr is the empirical standard error
// of the g entries over the width-m neuron sum.
struct FiniteWidthGrams {
  Matrix v, g;
  Matrix g_stderr;
};

FiniteWidthGrams finite_width_grams(const nn::TwoLayerBNModel& model,
                                    const PointSet& ps);

// v / alpha^2 + g, the matrix driving df/dt = -(v/alpha^2 + g)(f - y).
Matrix evolution_matrix(const FiniteWidthGrams& fw, double alpha);

struct DynamicsTrace {
  Vector lambda_min_lambda;
  Vector lambda_min_v_over_alpha2;
  Vector lambda_min_g;
  Vector loss;  // sum of squared residuals
};

// Full-batch gradient descent on the squared loss; records the eigenvalue
// trajectory at steps 0..steps inclusive (the last entry is the final state).
DynamicsTrace track_dynamics(nn::TwoLayerBNModel& model, const PointSet& ps,
                             const Vector& labels, int steps, double lr);

// Columns: step,lambda_min_Lambda,lambda_min_V_over_alpha2,lambda_min_G,loss
std::string dynamics_csv(const DynamicsTrace& trace);
std::string gram_report_json(const GramReport& report);

}  // namespace unifed::ntk
