#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unifed/linalg.hpp"

namespace unifed::datagen {

enum class ShiftKind { Scale, Rotate, Anisotropic };

struct ClientDistributionSpec {
  std::size_t client_id = 0;
  Matrix covariance;  // d x d, positive definite
};

enum class TeacherKind { LinearRegression, LinearClassification, TwoLayerTeacher };

// Shared labeling function p(y|x). Linear teachers use `weights`; the
// two-layer teacher is sum_j out[j] * relu(hidden_j . x) / sqrt(h).
struct TeacherSpec {
  TeacherKind kind = TeacherKind::LinearRegression;
  Vector weights;
  Matrix hidden;
  Vector output;
  double noise_std = 0.0;
};

struct Dataset {
  std::size_t client_id = 0;
  std::vector<Vector> inputs;
  Vector labels;
};

TeacherSpec make_linear_teacher(std::size_t dim, TeacherKind kind, double noise_std,
                                std::uint64_t seed);
TeacherSpec make_two_layer_teacher(std::size_t dim, std::size_t hidden_units,
                                   double noise_std, std::uint64_t seed);

// Clean teacher value before label noise (and before the classification sign).
double teacher_value(const TeacherSpec& teacher, const Vector& x);

// Draws x = L z with z standard normal and L the Cholesky factor of the
// client covariance. Pairwise collinear draws (|cos| >= 1 - 1e-9) are
// rejected and resampled; more than 100 * m draws total is an error.
Dataset sample_client_dataset(const ClientDistributionSpec& spec,
                              const TeacherSpec& teacher, std::size_t m,
                              std::uint64_t seed);

// Client covariances for a synthetic cross-client feature shift.
//   scale:       S_i = (1 + severity * rank / N) * I, rank = 1..N
//   rotate:      S_i = R_i L R_i' with shared eigenvalue profile
//                L_jj = 1 + severity * j / (d - 1) and per-client random R_i
//   anisotropic: S_i diagonal with entries 1 + severity * u_ij, u ~ U(0,1)
std::vector<ClientDistributionSpec> make_feature_shift_suite(std::size_t n_clients,
                                                             std::size_t dim,
                                                             ShiftKind kind,
                                                             double severity,
                                                             std::uint64_t seed);

struct SplitFractions {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct Holdout {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Seeded shuffle, then largest-remainder apportionment of the fractions.
// Fractions must sum to 1 within 1e-9 and every split must be non-empty.
Holdout holdout_split(const Dataset& data, const SplitFractions& fractions,
                      std::uint64_t seed);

// Average of the client covariances.
Matrix mean_covariance(const std::vector<ClientDistributionSpec>& specs);

// Unseen-client spec with covariance factor * mean(train covariances).
ClientDistributionSpec scaled_external_spec(
    const std::vector<ClientDistributionSpec>& train_specs, double factor);

// Header: client_id,y,x0,...,x{d-1}. One row per sample.
void write_csv(const std::string& path, const std::vector<Dataset>& datasets);

}  // namespace unifed::datagen
