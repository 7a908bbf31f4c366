#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "unifed/datagen.hpp"
#include "unifed/linalg.hpp"

using unifed::Matrix;
using unifed::Vector;
namespace dg = unifed::datagen;
namespace la = unifed::linalg;

namespace {

Matrix empirical_covariance(const std::vector<Vector>& xs) {
  const std::size_t d = xs.front().size();
  Vector mean(d, 0.0);
  for (const auto& x : xs)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x[j];
  for (auto& v : mean) v /= static_cast<double>(xs.size());
  Matrix cov(d, d);
  for (const auto& x : xs)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov(a, b) += (x[a] - mean[a]) * (x[b] - mean[b]);
  for (auto& v : cov.data()) v /= static_cast<double>(xs.size());
  return cov;
}

}  // namespace

TEST_CASE("sampled data matches the requested covariance at M = 1e4") {
  dg::ClientDistributionSpec spec;
  spec.client_id = 0;
  spec.covariance = Matrix::identity(4);
  const dg::TeacherSpec teacher =
      dg::make_linear_teacher(4, dg::TeacherKind::LinearRegression, 0.0, 7);
  const dg::Dataset ds = dg::sample_client_dataset(spec, teacher, 10000, 7);
  REQUIRE(ds.inputs.size() == 10000);

  const Matrix cov = empirical_covariance(ds.inputs);
  double diff = 0.0;
  for (std::size_t k = 0; k < 16; ++k) {
    const double d = cov.data()[k] - spec.covariance.data()[k];
    diff += d * d;
  }
  CHECK(std::sqrt(diff) < 0.1);

  Vector mean(4, 0.0);
  for (const auto& x : ds.inputs)
    for (std::size_t j = 0; j < 4; ++j) mean[j] += x[j];
  for (auto& v : mean) v /= 10000.0;
  CHECK(std::sqrt(la::dot(mean, mean)) < 0.05);
}

TEST_CASE("labels follow the teacher exactly when noise is zero") {
  dg::ClientDistributionSpec spec;
  spec.covariance = Matrix::identity(5);
  SUBCASE("regression") {
    const dg::TeacherSpec t =
        dg::make_linear_teacher(5, dg::TeacherKind::LinearRegression, 0.0, 3);
    const dg::Dataset ds = dg::sample_client_dataset(spec, t, 64, 11);
    for (std::size_t i = 0; i < ds.inputs.size(); ++i)
      CHECK(ds.labels[i] == la::dot(t.weights, ds.inputs[i]));
  }
  SUBCASE("classification gives signs in {-1,+1}") {
    const dg::TeacherSpec t =
        dg::make_linear_teacher(5, dg::TeacherKind::LinearClassification, 0.0, 3);
    const dg::Dataset ds = dg::sample_client_dataset(spec, t, 64, 11);
    for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
      const double raw = la::dot(t.weights, ds.inputs[i]);
      CHECK(ds.labels[i] == (raw < 0.0 ? -1.0 : 1.0));
    }
  }
  SUBCASE("two-layer teacher is deterministic in the seed") {
    const dg::TeacherSpec t = dg::make_two_layer_teacher(5, 8, 0.0, 3);
    const dg::Dataset a = dg::sample_client_dataset(spec, t, 32, 11);
    const dg::Dataset b = dg::sample_client_dataset(spec, t, 32, 11);
    for (std::size_t i = 0; i < a.labels.size(); ++i) {
      CHECK(a.labels[i] == b.labels[i]);
      CHECK(a.labels[i] == dg::teacher_value(t, a.inputs[i]));
    }
  }
}

TEST_CASE("no two sampled inputs are collinear") {
  dg::ClientDistributionSpec spec;
  spec.covariance = Matrix::identity(2);
  const dg::TeacherSpec t =
      dg::make_linear_teacher(2, dg::TeacherKind::LinearRegression, 0.0, 5);
  const dg::Dataset ds = dg::sample_client_dataset(spec, t, 200, 13);
  for (std::size_t p = 0; p < ds.inputs.size(); ++p)
    for (std::size_t q = p + 1; q < ds.inputs.size(); ++q) {
      const double na = std::sqrt(la::dot(ds.inputs[p], ds.inputs[p]));
      const double nb = std::sqrt(la::dot(ds.inputs[q], ds.inputs[q]));
      const double cosine = std::fabs(la::dot(ds.inputs[p], ds.inputs[q])) / (na * nb);
      CHECK(cosine < 1.0 - 1e-9);
    }
}

TEST_CASE("1-D sampling cannot satisfy non-collinearity and exhausts its budget") {
  dg::ClientDistributionSpec spec;
  spec.covariance = Matrix::identity(1);
  const dg::TeacherSpec t =
      dg::make_linear_teacher(1, dg::TeacherKind::LinearRegression, 0.0, 5);
  CHECK_THROWS_AS(dg::sample_client_dataset(spec, t, 3, 1), std::runtime_error);
}

TEST_CASE("scale shift suite matches its closed form") {
  const auto specs = dg::make_feature_shift_suite(2, 3, dg::ShiftKind::Scale, 3.0, 21);
  REQUIRE(specs.size() == 2);
  // Ranks 1..N: factors 1 + 3*(1/2) = 2.5 and 1 + 3*(2/2) = 4.
  CHECK(specs[0].covariance(0, 0) == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(specs[1].covariance(0, 0) == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(specs[1].covariance(0, 0) / specs[0].covariance(0, 0) ==
        doctest::Approx(4.0 / 2.5).epsilon(1e-12));
  CHECK(specs[0].covariance(0, 1) == 0.0);
}

TEST_CASE("rotate shift suite keeps the eigenvalue profile and rotates per client") {
  const std::size_t d = 5;
  const auto specs = dg::make_feature_shift_suite(3, d, dg::ShiftKind::Rotate, 2.0, 22);
  Vector profile(d);
  for (std::size_t j = 0; j < d; ++j)
    profile[j] = 1.0 + 2.0 * static_cast<double>(j) / (d - 1.0);
  for (const auto& spec : specs) {
    const la::EigenSym e = la::jacobi_eigen(spec.covariance);
    for (std::size_t j = 0; j < d; ++j)
      CHECK(e.values[j] == doctest::Approx(profile[j]).epsilon(1e-9));
  }
  // Rotations differ across clients.
  double diff = 0.0;
  for (std::size_t k = 0; k < d * d; ++k)
    diff += std::fabs(specs[0].covariance.data()[k] - specs[1].covariance.data()[k]);
  CHECK(diff > 1e-3);
}

TEST_CASE("anisotropic shift suite keeps diagonal entries in range") {
  const auto specs =
      dg::make_feature_shift_suite(4, 6, dg::ShiftKind::Anisotropic, 1.5, 23);
  for (const auto& spec : specs)
    for (std::size_t a = 0; a < 6; ++a)
      for (std::size_t b = 0; b < 6; ++b) {
        if (a == b) {
          CHECK(spec.covariance(a, a) >= 1.0);
          CHECK(spec.covariance(a, a) <= 2.5);
        } else {
          CHECK(spec.covariance(a, b) == 0.0);
        }
      }
}

TEST_CASE("shift suites are deterministic in the seed and reject severity <= 0") {
  const auto a = dg::make_feature_shift_suite(3, 4, dg::ShiftKind::Rotate, 2.0, 31);
  const auto b = dg::make_feature_shift_suite(3, 4, dg::ShiftKind::Rotate, 2.0, 31);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < 16; ++k)
      CHECK(a[i].covariance.data()[k] == b[i].covariance.data()[k]);
  CHECK_THROWS(dg::make_feature_shift_suite(3, 4, dg::ShiftKind::Scale, 0.0, 31));
  CHECK_THROWS(dg::make_feature_shift_suite(3, 4, dg::ShiftKind::Scale, -1.0, 31));
}

TEST_CASE("holdout split apportions counts exactly") {
  dg::Dataset ds;
  ds.client_id = 2;
  for (int i = 0; i < 10; ++i) {
    ds.inputs.push_back(Vector{static_cast<double>(i)});
    ds.labels.push_back(static_cast<double>(i));
  }
  const dg::Holdout h = dg::holdout_split(ds, {0.7, 0.1, 0.2}, 17);
  CHECK(h.train.inputs.size() == 7);
  CHECK(h.val.inputs.size() == 1);
  CHECK(h.test.inputs.size() == 2);
  CHECK(h.train.client_id == 2);

  // Partition: every sample appears exactly once.
  std::vector<int> seen(10, 0);
  for (const auto* part : {&h.train, &h.val, &h.test})
    for (const auto& x : part->inputs) seen[static_cast<int>(x[0])] += 1;
  for (int c : seen) CHECK(c == 1);

  CHECK_THROWS(dg::holdout_split(ds, {0.5, 0.2, 0.2}, 17));

  dg::Dataset tiny;
  tiny.inputs = {Vector{0.0}, Vector{1.0}};
  tiny.labels = {0.0, 1.0};
  CHECK_THROWS(dg::holdout_split(tiny, {0.5, 0.25, 0.25}, 17));
}

TEST_CASE("csv export writes the documented header and row layout") {
  dg::Dataset ds;
  ds.client_id = 1;
  ds.inputs = {Vector{1.5, -2.0}, Vector{0.25, 3.0}};
  ds.labels = {0.5, -1.0};
  const std::string path = "datagen_test.csv";
  dg::write_csv(path, {ds});

  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line == "client_id,y,x0,x1");
  std::getline(in, line);
  CHECK(line == "1,0.5,1.5,-2");
  std::getline(in, line);
  CHECK(line == "1,-1,0.25,3");
  CHECK(!std::getline(in, line));
  std::remove(path.c_str());
}

TEST_CASE("external spec scales the mean training covariance") {
  const auto specs = dg::make_feature_shift_suite(2, 3, dg::ShiftKind::Scale, 3.0, 41);
  const Matrix mean = dg::mean_covariance(specs);
  CHECK(mean(0, 0) == doctest::Approx(0.5 * (2.5 + 4.0)).epsilon(1e-12));
  const dg::ClientDistributionSpec ext = dg::scaled_external_spec(specs, 4.0);
  CHECK(ext.covariance(0, 0) == doctest::Approx(4.0 * 3.25).epsilon(1e-12));
  CHECK(ext.client_id == 2);
}
