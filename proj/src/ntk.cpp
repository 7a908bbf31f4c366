#include "unifed/ntk.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include <json.hpp>

#include "unifed/parallel.hpp"
#include "unifed/rng.hpp"

namespace unifed::ntk {

namespace {

constexpr std::size_t kMcShard = 65536;
constexpr std::size_t kNeuronShard = 1024;

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void validate_points(const PointSet& ps) {
  if (ps.points.empty()) throw std::invalid_argument("point set is empty");
  if (ps.clients.size() != ps.points.size())
    throw std::invalid_argument("every point needs a client id");
  const std::size_t d = ps.points.front().size();
  for (const auto& x : ps.points) {
    if (x.size() != d) throw std::invalid_argument("points differ in dimension");
    if (linalg::dot(x, x) < 1e-24) throw std::invalid_argument("zero-norm point");
  }
}

Matrix masked(const Matrix& g, const PointSet& ps) {
  Matrix star = g;
  for (std::size_t p = 0; p < g.rows(); ++p)
    for (std::size_t q = 0; q < g.cols(); ++q)
      if (ps.clients[p] != ps.clients[q]) star(p, q) = 0.0;
  return star;
}

Matrix closed_form_gram(const PointSet& ps, double alpha) {
  const std::size_t n = ps.size();
  Matrix g(n, n);
  Vector norms(n);
  for (std::size_t p = 0; p < n; ++p)
    norms[p] = std::sqrt(linalg::dot(ps.points[p], ps.points[p]));
  const double pi = std::acos(-1.0);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = p; q < n; ++q) {
      double c = linalg::dot(ps.points[p], ps.points[q]) / (norms[p] * norms[q]);
      c = std::clamp(c, -1.0, 1.0);
      const double theta = std::acos(c);
      const double value = alpha * alpha * norms[p] * norms[q] / (2.0 * pi) *
                           (std::sin(theta) + (pi - theta) * c);
      g(p, q) = value;
      g(q, p) = value;
    }
  return g;
}

struct McAccum {
  Matrix sum, sumsq;
};

void mc_gram(const PointSet& ps, double alpha, std::size_t samples, std::uint64_t seed,
             Matrix& mean, Matrix& stderr_out) {
  const std::size_t n = ps.size();
  const std::size_t d = ps.points.front().size();
  const std::size_t shards = (samples + kMcShard - 1) / kMcShard;
  std::vector<McAccum> slots(shards, {Matrix(n, n), Matrix(n, n)});

  parallel_for(shards, [&](std::size_t s) {
    Rng rng(seed_stream(seed, 0x9ca10, s));
    const std::size_t count = std::min(kMcShard, samples - s * kMcShard);
    Vector v(d), act(n);
    auto& slot = slots[s];
    for (std::size_t it = 0; it < count; ++it) {
      for (auto& c : v) c = alpha * rng.normal();
      for (std::size_t p = 0; p < n; ++p)
        act[p] = std::max(0.0, linalg::dot(v, ps.points[p]));
      for (std::size_t p = 0; p < n; ++p)
        for (std::size_t q = p; q < n; ++q) {
          const double prod = act[p] * act[q];
          slot.sum(p, q) += prod;
          slot.sumsq(p, q) += prod * prod;
        }
    }
  });

  Matrix sum(n, n), sumsq(n, n);
  for (const auto& slot : slots)
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p; q < n; ++q) {
        sum(p, q) += slot.sum(p, q);
        sumsq(p, q) += slot.sumsq(p, q);
      }

  mean = Matrix(n, n);
  stderr_out = Matrix(n, n);
  const double ns = static_cast<double>(samples);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = p; q < n; ++q) {
      const double m = sum(p, q) / ns;
      const double var = std::max(0.0, (sumsq(p, q) - ns * m * m) / (ns - 1.0));
      mean(p, q) = mean(q, p) = m;
      stderr_out(p, q) = stderr_out(q, p) = std::sqrt(var / ns);
    }
}

}  // namespace

GramReport gram_infinity(const PointSet& ps, double alpha, GramEstimator estimator,
                         std::size_t mc_samples, std::uint64_t seed) {
  validate_points(ps);
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");

  GramReport report;
  report.estimator = estimator;
  report.alpha = alpha;
  const std::size_t n = ps.size();
  if (estimator == GramEstimator::ClosedForm) {
    report.g_inf = closed_form_gram(ps, alpha);
    report.mc_stderr = Matrix(n, n);
  } else {
    if (mc_samples < 2) throw std::invalid_argument("need at least 2 Monte-Carlo samples");
    report.mc_samples = mc_samples;
    mc_gram(ps, alpha, mc_samples, seed, report.g_inf, report.mc_stderr);
  }
  report.g_star_inf = masked(report.g_inf, ps);
  report.e0 = linalg::smallest_eigenvalue(report.g_inf);
  report.e0_star = linalg::smallest_eigenvalue(report.g_star_inf);
  return report;
}

OrderingVerdict compare_min_eigenvalues(const GramReport& report, const PointSet& ps) {
  OrderingVerdict verdict;
  verdict.e0 = report.e0;
  verdict.e0_star = report.e0_star;

  double min_block = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> ids = ps.clients;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  for (std::size_t id : ids) {
    std::vector<std::size_t> rows;
    for (std::size_t p = 0; p < ps.size(); ++p)
      if (ps.clients[p] == id) rows.push_back(p);
    Matrix block(rows.size(), rows.size());
    for (std::size_t a = 0; a < rows.size(); ++a)
      for (std::size_t b = 0; b < rows.size(); ++b)
        block(a, b) = report.g_inf(rows[a], rows[b]);
    min_block = std::min(min_block, linalg::smallest_eigenvalue(block));
  }
  verdict.min_block_eig = min_block;

  double tol = 1e-9 * std::max(1.0, std::abs(report.e0));
  if (report.estimator == GramEstimator::MonteCarlo) {
    double max_se = 0.0;
    for (double se : report.mc_stderr.data()) max_se = std::max(max_se, se);
    tol += 3.0 * static_cast<double>(ps.size()) * max_se;
  }
  verdict.tolerance = tol;
  verdict.ordered = report.e0_star >= report.e0 - tol;
  verdict.block_identity =
      std::abs(report.e0_star - min_block) <= 1e-9 * std::max(1.0, std::abs(min_block));
  return verdict;
}

FiniteWidthGrams finite_width_grams(const nn::TwoLayerBNModel& model,
                                    const PointSet& ps) {
  validate_points(ps);
  const std::size_t n = ps.size();
  const std::size_t d = model.dim();
  const std::size_t m = model.width();
  if (ps.points.front().size() != d)
    throw std::invalid_argument("points do not match the model dimension");
  for (std::size_t c : ps.clients)
    if (c >= model.clients())
      throw std::invalid_argument("point assigned to an unknown client");

  struct Slot {
    Matrix v, g, gsq;
  };
  const std::size_t shards = (m + kNeuronShard - 1) / kNeuronShard;
  std::vector<Slot> slots(shards, {Matrix(n, n), Matrix(n, n), Matrix(n, n)});

  parallel_for(shards, [&](std::size_t s) {
    auto& slot = slots[s];
    const std::size_t k_end = std::min(m, (s + 1) * kNeuronShard);
    std::vector<Vector> proj(n, Vector(d));
    Vector act(n), zeta(n);  // relu value and projected-feature norm factors
    std::vector<double> norms(model.clients());
    std::vector<Vector> sv(model.clients(), Vector(d));
    for (std::size_t k = s * kNeuronShard; k < k_end; ++k) {
      Vector vk(d);
      for (std::size_t c = 0; c < d; ++c) vk[c] = model.v(k, c);
      for (std::size_t i = 0; i < model.clients(); ++i) {
        sv[i] = linalg::matvec(model.covariances[i], vk);
        const double q = linalg::dot(vk, sv[i]);
        if (q < 1e-24) throw std::domain_error("degenerate neuron norm");
        norms[i] = std::sqrt(q);
      }
      for (std::size_t p = 0; p < n; ++p) {
        const std::size_t i = ps.clients[p];
        const double a = linalg::dot(vk, ps.points[p]);
        act[p] = std::max(0.0, a);
        zeta[p] = a >= 0.0 ? 1.0 : 0.0;
        const double scale = a / (norms[i] * norms[i]);
        for (std::size_t c = 0; c < d; ++c)
          proj[p][c] = ps.points[p][c] - sv[i][c] * scale;
      }
      const double a2 = model.alpha * model.alpha;
      for (std::size_t p = 0; p < n; ++p) {
        const std::size_t ip = ps.clients[p];
        for (std::size_t q = p; q < n; ++q) {
          const std::size_t iq = ps.clients[q];
          const double inv = 1.0 / (norms[ip] * norms[iq]);
          double gterm = act[p] * act[q] * inv;
          if (model.client_specific && ip != iq) gterm = 0.0;
          slot.g(p, q) += gterm;
          slot.gsq(p, q) += gterm * gterm;
          if (zeta[p] > 0.0 && zeta[q] > 0.0) {
            const double coeff =
                a2 * model.gamma_at(k, ip) * model.gamma_at(k, iq) * inv;
            slot.v(p, q) += coeff * linalg::dot(proj[p], proj[q]);
          }
        }
      }
    }
  });

  FiniteWidthGrams fw{Matrix(n, n), Matrix(n, n), Matrix(n, n)};
  Matrix gsq(n, n);
  for (const auto& slot : slots)
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p; q < n; ++q) {
        fw.v(p, q) += slot.v(p, q);
        fw.g(p, q) += slot.g(p, q);
        gsq(p, q) += slot.gsq(p, q);
      }
  const double mm = static_cast<double>(m);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = p; q < n; ++q) {
      const double gmean = fw.g(p, q) / mm;
      const double var = std::max(0.0, (gsq(p, q) - mm * gmean * gmean) / (mm - 1.0));
      fw.v(p, q) /= mm;
      fw.g(p, q) = gmean;
      fw.g_stderr(p, q) = fw.g_stderr(q, p) = std::sqrt(var / mm);
      fw.v(q, p) = fw.v(p, q);
      fw.g(q, p) = fw.g(p, q);
    }
  return fw;
}

Matrix evolution_matrix(const FiniteWidthGrams& fw, double alpha) {
  Matrix lambda = fw.g;
  const double inv_a2 = 1.0 / (alpha * alpha);
  for (std::size_t i = 0; i < lambda.rows(); ++i)
    for (std::size_t j = 0; j < lambda.cols(); ++j)
      lambda(i, j) += fw.v(i, j) * inv_a2;
  return lambda;
}

DynamicsTrace track_dynamics(nn::TwoLayerBNModel& model, const PointSet& ps,
                             const Vector& labels, int steps, double lr) {
  validate_points(ps);
  if (labels.size() != ps.size())
    throw std::invalid_argument("labels do not match the point set");
  if (steps < 0) throw std::invalid_argument("steps must be non-negative");

  DynamicsTrace trace;
  for (int t = 0; t <= steps; ++t) {
    auto fw = finite_width_grams(model, ps);
    Matrix lambda = evolution_matrix(fw, model.alpha);
    trace.lambda_min_lambda.push_back(linalg::smallest_eigenvalue(lambda));
    const double a2 = model.alpha * model.alpha;
    Matrix v_scaled = fw.v;
    for (auto& x : v_scaled.data()) x /= a2;
    trace.lambda_min_v_over_alpha2.push_back(linalg::smallest_eigenvalue(v_scaled));
    trace.lambda_min_g.push_back(linalg::smallest_eigenvalue(fw.g));

    auto grads = nn::two_layer_gradients(model, ps.points, ps.clients, labels);
    double sq = 0.0;
    for (double r : grads.residuals) sq += r * r;
    trace.loss.push_back(sq);
    if (t < steps) nn::two_layer_step(model, grads, lr);
  }
  return trace;
}

std::string dynamics_csv(const DynamicsTrace& trace) {
  std::string csv = "step,lambda_min_Lambda,lambda_min_V_over_alpha2,lambda_min_G,loss\n";
  for (std::size_t t = 0; t < trace.loss.size(); ++t) {
    csv += std::to_string(t) + "," + fmt_double(trace.lambda_min_lambda[t]) + "," +
           fmt_double(trace.lambda_min_v_over_alpha2[t]) + "," +
           fmt_double(trace.lambda_min_g[t]) + "," + fmt_double(trace.loss[t]) + "\n";
  }
  return csv;
}

std::string gram_report_json(const GramReport& report) {
  auto to_rows = [](const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < m.rows(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
      rows.push_back(row);
    }
    return rows;
  };
  nlohmann::json j;
  j["g_inf"] = to_rows(report.g_inf);
  j["g_star_inf"] = to_rows(report.g_star_inf);
  j["e0"] = report.e0;
  j["e0_star"] = report.e0_star;
  j["alpha"] = report.alpha;
  if (report.estimator == GramEstimator::ClosedForm) {
    j["estimator"] = "closed-form";
  } else {
    j["estimator"] = "monte-carlo";
    j["mc_samples"] = report.mc_samples;
    j["mc_stderr"] = to_rows(report.mc_stderr);
  }
  return j.dump(2);
}

}  // namespace unifed::ntk
