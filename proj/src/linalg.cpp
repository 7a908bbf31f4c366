#include "unifed/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace unifed::linalg {

namespace {

constexpr std::size_t kMaxEigenSize = 1024;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace

void require_finite(const Vector& v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) fail(std::string(what) + ": non-finite entry");
}

void require_finite(const Matrix& m, const char* what) {
  for (double x : m.data())
    if (!std::isfinite(x)) fail(std::string(what) + ": non-finite entry");
}

void require_symmetric(const Matrix& a, const char* what) {
  if (a.rows() != a.cols()) fail(std::string(what) + ": matrix not square");
  double max_abs = 0.0;
  for (double x : a.data()) max_abs = std::max(max_abs, std::fabs(x));
  const double tol = 1e-9 * std::max(1.0, max_abs);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j)
      if (std::fabs(a(i, j) - a(j, i)) > tol)
        fail(std::string(what) + ": matrix not symmetric at (" + std::to_string(i) +
             "," + std::to_string(j) + ")");
}

double dot(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) fail("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Vector matvec(const Matrix& a, const Vector& x) {
  if (a.cols() != x.size()) fail("matvec: dimension mismatch");
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) fail("matmul: dimension mismatch");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

double frobenius(const Matrix& a) {
  double s = 0.0;
  for (double x : a.data()) s += x * x;
  return std::sqrt(s);
}

double s_norm(const Vector& w, const Matrix& s) {
  if (s.rows() != w.size() || s.cols() != w.size()) fail("s_norm: dimension mismatch");
  require_finite(w, "s_norm");
  require_finite(s, "s_norm");
  require_symmetric(s, "s_norm");
  double q = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) row += s(i, j) * w[j];
    q += w[i] * row;
  }
  if (q < -1e-12) fail("s_norm: weight matrix is not positive definite (w'Sw = " +
                       std::to_string(q) + ")");
  return std::sqrt(std::max(q, 0.0));
}

Matrix cholesky(const Matrix& s) {
  if (s.rows() != s.cols()) fail("cholesky: matrix not square");
  require_finite(s, "cholesky");
  require_symmetric(s, "cholesky");
  const std::size_t n = s.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = s(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (d <= 0.0 || !std::isfinite(d))
      throw std::domain_error("cholesky: not positive definite at pivot " +
                              std::to_string(j));
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = s(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= l(i, k) * l(j, k);
      l(i, j) = v / l(j, j);
    }
  }
  return l;
}

namespace {

double off_diagonal_frobenius(const Matrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

}  // namespace

EigenSym jacobi_eigen(Matrix a, const JacobiOptions& opts) {
  if (a.rows() != a.cols()) fail("jacobi_eigen: matrix not square");
  if (a.rows() > kMaxEigenSize) fail("jacobi_eigen: size exceeds 1024");
  require_finite(a, "jacobi_eigen");
  require_symmetric(a, "jacobi_eigen");

  const std::size_t n = a.rows();
  Matrix v = Matrix::identity(n);
  if (n == 0) return {Vector{}, v};

  const double norm_a = frobenius(a);
  const double stop = opts.rel_tol * norm_a;
  bool converged = norm_a == 0.0 || off_diagonal_frobenius(a) <= stop;

  for (int sweep = 0; sweep < opts.max_sweeps && !converged; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        double t;
        if (std::fabs(theta) > 1e150) {
          t = 1.0 / (2.0 * theta);
        } else {
          t = 1.0 / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
          if (theta < 0.0) t = -t;
        }
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        const double tau = s / (1.0 + c);

        const double app = a(p, p);
        const double aqq = a(q, q);
        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          if (r == p || r == q) continue;
          const double arp = a(r, p);
          const double arq = a(r, q);
          a(r, p) = arp - s * (arq + tau * arp);
          a(p, r) = a(r, p);
          a(r, q) = arq + s * (arp - tau * arq);
          a(q, r) = a(r, q);
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double vrp = v(r, p);
          const double vrq = v(r, q);
          v(r, p) = vrp - s * (vrq + tau * vrp);
          v(r, q) = vrq + s * (vrp - tau * vrq);
        }
      }
    }
    converged = off_diagonal_frobenius(a) <= stop;
  }
  if (!converged)
    throw std::runtime_error("jacobi_eigen: no convergence after " +
                             std::to_string(opts.max_sweeps) + " sweeps");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) < a(j, j); });

  EigenSym out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, k) = v(r, order[k]);
  }
  return out;
}

double smallest_eigenvalue(const Matrix& a, const JacobiOptions& opts) {
  return jacobi_eigen(a, opts).values.front();
}

}  // namespace unifed::linalg
