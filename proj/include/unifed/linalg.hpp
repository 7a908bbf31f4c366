#pragma once

#include <cstddef>
#include <vector>

namespace unifed {

using Vector = std::vector<double>;

// Dense row-major matrix. Eigensolver paths accept sizes up to 1024.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace linalg {

void require_finite(const Vector& v, const char* what);
void require_finite(const Matrix& m, const char* what);

// Rejects |A(i,j) - A(j,i)| > 1e-9 * max(1, max|A|).
void require_symmetric(const Matrix& a, const char* what);

double dot(const Vector& a, const Vector& b);
Vector matvec(const Matrix& a, const Vector& x);
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
double frobenius(const Matrix& a);

// sqrt(w' S w). Throws on dimension mismatch, non-finite input, asymmetric S,
// or w' S w < -1e-12; values in [-1e-12, 0] clamp to zero.
double s_norm(const Vector& w, const Matrix& s);

// Lower-triangular L with L L' = S. Reports the failing pivot on non-PD input.
Matrix cholesky(const Matrix& s);

struct JacobiOptions {
  int max_sweeps = 64;
  // Converged when off-diagonal Frobenius norm < rel_tol * ||A||_F.
  double rel_tol = 1e-12;
};

struct EigenSym {
  Vector values;   // ascending
  Matrix vectors;  // column k pairs with values[k]
};

// Cyclic Jacobi for symmetric matrices. Throws if max_sweeps is exhausted.
EigenSym jacobi_eigen(Matrix a, const JacobiOptions& opts = {});

double smallest_eigenvalue(const Matrix& a, const JacobiOptions& opts = {});

}  // namespace linalg
}  // namespace unifed
