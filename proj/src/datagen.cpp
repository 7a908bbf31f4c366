#include "unifed/datagen.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "unifed/rng.hpp"

namespace unifed::datagen {

namespace {

Vector random_unit(std::size_t dim, Rng& rng) {
  Vector w(dim);
  double norm = 0.0;
  while (norm < 1e-12) {
    for (auto& x : w) x = rng.normal();
    norm = std::sqrt(linalg::dot(w, w));
  }
  for (auto& x : w) x /= norm;
  return w;
}

double relu(double x) { return x > 0.0 ? x : 0.0; }

bool collinear(const Vector& a, double norm_a, const Vector& b, double norm_b) {
  const double cosine = std::fabs(linalg::dot(a, b)) / (norm_a * norm_b);
  return cosine >= 1.0 - 1e-9;
}

// Haar-ish rotation via Gram-Schmidt on a Gaussian matrix.
Matrix random_rotation(std::size_t dim, Rng& rng) {
  Matrix q(dim, dim);
  for (std::size_t col = 0; col < dim; ++col) {
    Vector v(dim);
    for (auto& x : v) x = rng.normal();
    for (std::size_t prev = 0; prev < col; ++prev) {
      double proj = 0.0;
      for (std::size_t r = 0; r < dim; ++r) proj += q(r, prev) * v[r];
      for (std::size_t r = 0; r < dim; ++r) v[r] -= proj * q(r, prev);
    }
    double norm = std::sqrt(linalg::dot(v, v));
    if (norm < 1e-9) {
      // Degenerate draw; retry the column.
      --col;
      continue;
    }
    for (std::size_t r = 0; r < dim; ++r) q(r, col) = v[r] / norm;
  }
  return q;
}

}  // namespace

TeacherSpec make_linear_teacher(std::size_t dim, TeacherKind kind, double noise_std,
                                std::uint64_t seed) {
  if (kind == TeacherKind::TwoLayerTeacher)
    throw std::invalid_argument("make_linear_teacher: wrong kind");
  TeacherSpec t;
  t.kind = kind;
  t.noise_std = noise_std;
  Rng rng(seed_stream(seed, 0x7eac4e6));
  t.weights = random_unit(dim, rng);
  return t;
}

TeacherSpec make_two_layer_teacher(std::size_t dim, std::size_t hidden_units,
                                   double noise_std, std::uint64_t seed) {
  TeacherSpec t;
  t.kind = TeacherKind::TwoLayerTeacher;
  t.noise_std = noise_std;
  Rng rng(seed_stream(seed, 0x7eac4e6));
  t.hidden = Matrix(hidden_units, dim);
  for (auto& x : t.hidden.data()) x = rng.normal();
  t.output.resize(hidden_units);
  for (auto& x : t.output) x = rng.rademacher();
  return t;
}

double teacher_value(const TeacherSpec& teacher, const Vector& x) {
  switch (teacher.kind) {
    case TeacherKind::LinearRegression:
    case TeacherKind::LinearClassification:
      return linalg::dot(teacher.weights, x);
    case TeacherKind::TwoLayerTeacher: {
      double y = 0.0;
      for (std::size_t j = 0; j < teacher.output.size(); ++j) {
        double z = 0.0;
        for (std::size_t k = 0; k < x.size(); ++k) z += teacher.hidden(j, k) * x[k];
        y += teacher.output[j] * relu(z);
      }
      return y / std::sqrt(static_cast<double>(teacher.output.size()));
    }
  }
  throw std::logic_error("teacher_value: unknown kind");
}

Dataset sample_client_dataset(const ClientDistributionSpec& spec,
                              const TeacherSpec& teacher, std::size_t m,
                              std::uint64_t seed) {
  if (m == 0) throw std::invalid_argument("sample_client_dataset: m must be positive");
  const std::size_t dim = spec.covariance.rows();
  const Matrix l = linalg::cholesky(spec.covariance);

  Rng rng(seed_stream(seed, 0x5a3a1e5, spec.client_id));
  Dataset out;
  out.client_id = spec.client_id;
  out.inputs.reserve(m);
  out.labels.reserve(m);

  std::vector<double> norms;
  norms.reserve(m);
  const std::size_t budget = 100 * m;
  std::size_t draws = 0;
  while (out.inputs.size() < m) {
    if (draws >= budget)
      throw std::runtime_error(
          "sample_client_dataset: collinearity rejection budget exhausted (" +
          std::to_string(budget) + " draws)");
    ++draws;
    Vector z(dim);
    for (auto& v : z) v = rng.normal();
    Vector x = linalg::matvec(l, z);
    const double norm = std::sqrt(linalg::dot(x, x));
    if (norm < 1e-12) continue;
    bool reject = false;
    for (std::size_t p = 0; p < out.inputs.size() && !reject; ++p)
      reject = collinear(out.inputs[p], norms[p], x, norm);
    if (reject) continue;

    double y = teacher_value(teacher, x);
    if (teacher.noise_std > 0.0) y += teacher.noise_std * rng.normal();
    if (teacher.kind == TeacherKind::LinearClassification) y = y < 0.0 ? -1.0 : 1.0;

    norms.push_back(norm);
    out.inputs.push_back(std::move(x));
    out.labels.push_back(y);
  }
  return out;
}

std::vector<ClientDistributionSpec> make_feature_shift_suite(std::size_t n_clients,
                                                             std::size_t dim,
                                                             ShiftKind kind,
                                                             double severity,
                                                             std::uint64_t seed) {
  if (n_clients == 0 || dim == 0)
    throw std::invalid_argument("make_feature_shift_suite: empty suite");
  if (!(severity > 0.0))
    throw std::invalid_argument("make_feature_shift_suite: severity must be > 0");

  std::vector<ClientDistributionSpec> specs(n_clients);
  Rng rng(seed_stream(seed, 0x5417e));
  for (std::size_t i = 0; i < n_clients; ++i) {
    specs[i].client_id = i;
    Matrix s(dim, dim);
    switch (kind) {
      case ShiftKind::Scale: {
        const double factor =
            1.0 + severity * static_cast<double>(i + 1) / static_cast<double>(n_clients);
        for (std::size_t j = 0; j < dim; ++j) s(j, j) = factor;
        break;
      }
      case ShiftKind::Rotate: {
        const Matrix r = random_rotation(dim, rng);
        Vector profile(dim);
        for (std::size_t j = 0; j < dim; ++j)
          profile[j] =
              1.0 + (dim > 1 ? severity * static_cast<double>(j) / (dim - 1.0) : severity);
        // R diag(profile) R'
        for (std::size_t a = 0; a < dim; ++a)
          for (std::size_t b = 0; b < dim; ++b) {
            double v = 0.0;
            for (std::size_t j = 0; j < dim; ++j) v += r(a, j) * profile[j] * r(b, j);
            s(a, b) = v;
          }
        // Exact symmetry despite rounding.
        for (std::size_t a = 0; a < dim; ++a)
          for (std::size_t b = a + 1; b < dim; ++b) {
            const double v = 0.5 * (s(a, b) + s(b, a));
            s(a, b) = v;
            s(b, a) = v;
          }
        break;
      }
      case ShiftKind::Anisotropic: {
        for (std::size_t j = 0; j < dim; ++j) s(j, j) = 1.0 + severity * rng.uniform();
        break;
      }
    }
    linalg::cholesky(s);  // positive definiteness guard
    specs[i].covariance = std::move(s);
  }
  return specs;
}

Holdout holdout_split(const Dataset& data, const SplitFractions& fractions,
                      std::uint64_t seed) {
  const double sum = fractions.train + fractions.val + fractions.test;
  if (std::fabs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("holdout_split: fractions sum to " + std::to_string(sum));
  const std::size_t m = data.inputs.size();

  const double want[3] = {fractions.train, fractions.val, fractions.test};
  std::size_t counts[3];
  double remainders[3];
  std::size_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = want[k] * static_cast<double>(m);
    counts[k] = static_cast<std::size_t>(std::floor(exact));
    remainders[k] = exact - std::floor(exact);
    assigned += counts[k];
  }
  while (assigned < m) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (remainders[k] > remainders[best]) best = k;
    ++counts[best];
    remainders[best] = -1.0;
    ++assigned;
  }
  if (counts[0] == 0 || counts[1] == 0 || counts[2] == 0)
    throw std::invalid_argument("holdout_split: a split would be empty");

  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed_stream(seed, 0x5b117, data.client_id));
  shuffle(idx, rng);

  Holdout out;
  Dataset* parts[3] = {&out.train, &out.val, &out.test};
  std::size_t pos = 0;
  for (int k = 0; k < 3; ++k) {
    parts[k]->client_id = data.client_id;
    for (std::size_t c = 0; c < counts[k]; ++c, ++pos) {
      parts[k]->inputs.push_back(data.inputs[idx[pos]]);
      parts[k]->labels.push_back(data.labels[idx[pos]]);
    }
  }
  return out;
}

Matrix mean_covariance(const std::vector<ClientDistributionSpec>& specs) {
  if (specs.empty()) throw std::invalid_argument("mean_covariance: no specs");
  const std::size_t dim = specs.front().covariance.rows();
  Matrix mean(dim, dim);
  for (const auto& spec : specs)
    for (std::size_t k = 0; k < dim * dim; ++k)
      mean.data()[k] += spec.covariance.data()[k];
  for (auto& v : mean.data()) v /= static_cast<double>(specs.size());
  return mean;
}

ClientDistributionSpec scaled_external_spec(
    const std::vector<ClientDistributionSpec>& train_specs, double factor) {
  if (!(factor > 0.0))
    throw std::invalid_argument("scaled_external_spec: factor must be > 0");
  ClientDistributionSpec spec;
  spec.client_id = train_specs.size();
  spec.covariance = mean_covariance(train_specs);
  for (auto& v : spec.covariance.data()) v *= factor;
  return spec;
}

void write_csv(const std::string& path, const std::vector<Dataset>& datasets) {
  if (datasets.empty()) throw std::invalid_argument("write_csv: no datasets");
  const std::size_t dim = datasets.front().inputs.empty()
                              ? 0
                              : datasets.front().inputs.front().size();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_csv: cannot open " + path);
  out << "client_id,y";
  for (std::size_t j = 0; j < dim; ++j) out << ",x" << j;
  out << "\n";
  char buf[40];
  for (const auto& ds : datasets) {
    for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
      if (ds.inputs[i].size() != dim)
        throw std::invalid_argument("write_csv: inconsistent input dimension");
      out << ds.client_id;
      std::snprintf(buf, sizeof buf, "%.17g", ds.labels[i]);
      out << ',' << buf;
      for (double x : ds.inputs[i]) {
        std::snprintf(buf, sizeof buf, "%.17g", x);
        out << ',' << buf;
      }
      out << "\n";
    }
  }
}

}  // namespace unifed::datagen
