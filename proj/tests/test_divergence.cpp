#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include <json.hpp>

#include "unifed/datagen.hpp"
#include "unifed/divergence.hpp"
#include "unifed/fl.hpp"
#include "unifed/nn.hpp"
#include "unifed/rng.hpp"

using unifed::Matrix;
using unifed::Rng;
using unifed::Vector;
namespace dg = unifed::datagen;
namespace dv = unifed::divergence;
namespace fl = unifed::fl;
namespace ft = unifed::fedtest;
namespace nn = unifed::nn;
namespace la = unifed::linalg;

namespace {

dv::FeatureMoments scalar_moments(double mean, double var) {
  dv::FeatureMoments fm;
  fm.mean = {mean};
  fm.covariance = Matrix(1, 1);
  fm.covariance(0, 0) = var;
  fm.n_samples = 2;
  return fm;
}

// Scalar oracle: (m1 - m2)^2 + (s1 - s2)^2 with s the standard deviations.
double w2_1d_oracle(double m1, double v1, double m2, double v2) {
  const double ds = std::sqrt(v1) - std::sqrt(v2);
  return (m1 - m2) * (m1 - m2) + ds * ds;
}

dv::FeatureMoments random_moments(std::size_t d, Rng& rng) {
  dv::FeatureMoments fm;
  fm.mean.resize(d);
  for (auto& m : fm.mean) m = rng.normal();
  Matrix b(d, d);
  for (auto& x : b.data()) x = rng.normal();
  fm.covariance = la::matmul(la::transpose(b), b);
  for (std::size_t i = 0; i < d; ++i) fm.covariance(i, i) += 0.3;
  fm.n_samples = 16;
  return fm;
}

dg::Dataset gaussian_set(std::size_t d, std::size_t m, double var, std::uint64_t seed) {
  dg::ClientDistributionSpec spec{0, Matrix::identity(d)};
  for (std::size_t i = 0; i < d; ++i) spec.covariance(i, i) = var;
  auto teacher = dg::make_linear_teacher(d, dg::TeacherKind::LinearRegression, 0.0, 9);
  return dg::sample_client_dataset(spec, teacher, m, seed);
}

nn::Network probe_net(std::size_t d) {
  nn::Network net = nn::make_mlp(d, {d}, 1, true, 3);
  auto& dense = std::get<nn::DenseLayer>(net.layers[0]);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) dense.w(i, j) = i == j ? 1.0 : 0.0;
  for (auto& b : dense.b) b = 0.0;
  return net;
}

struct Fixture {
  fl::RunResult run;
  dg::TeacherSpec teacher;
  Matrix covariance;
};

const Fixture& trained() {
  static Fixture fx = [] {
    Fixture f;
    const std::size_t d = 6;
    f.covariance = Matrix::identity(d);
    f.teacher = dg::make_linear_teacher(d, dg::TeacherKind::LinearRegression, 0.1, 15);
    std::vector<dg::Dataset> train, val;
    for (std::size_t i = 0; i < 2; ++i) {
      dg::ClientDistributionSpec spec{i, f.covariance};
      auto data = dg::sample_client_dataset(spec, f.teacher, 400, 700 + i);
      auto split = dg::holdout_split(data, {0.7, 0.1, 0.2}, 80 + i);
      train.push_back(std::move(split.train));
      val.push_back(std::move(split.val));
    }
    nn::Network init = nn::make_mlp(d, {8, 6}, 1, true, 33);
    fl::TrainConfig cfg;
    cfg.rounds = 10;
    cfg.local_lr = 0.01;
    f.run = fl::run_federated_training(train, val, init, cfg, 19);
    return f;
  }();
  return fx;
}

}  // namespace

TEST_CASE("one dimensional closed form") {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const double m1 = 6.0 * rng.uniform() - 3.0, m2 = 6.0 * rng.uniform() - 3.0;
    const double v1 = 0.1 + 4.0 * rng.uniform(), v2 = 0.1 + 4.0 * rng.uniform();
    const double got = dv::gaussian_w2(scalar_moments(m1, v1), scalar_moments(m2, v2));
    const double want = w2_1d_oracle(m1, v1, m2, v2);
    CHECK(got == doctest::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("identical moments and bad inputs") {
  Rng rng(2);
  auto a = random_moments(4, rng);
  CHECK(dv::gaussian_w2(a, a) <= 1e-10);

  auto bad = a;
  bad.covariance(0, 0) = -1.0;  // indefinite
  CHECK_THROWS_AS(dv::gaussian_w2(bad, a), std::invalid_argument);

  auto narrow = scalar_moments(0.0, 1.0);
  CHECK_THROWS_AS(dv::gaussian_w2(a, narrow), std::invalid_argument);
}

TEST_CASE("pure mean shift") {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    auto a = random_moments(5, rng);
    auto b = a;
    double want = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      const double delta = rng.normal();
      b.mean[j] += delta;
      want += delta * delta;
    }
    const double got = dv::gaussian_w2(a, b);
    CHECK(got == doctest::Approx(want).epsilon(1e-8));
  }
}

TEST_CASE("diagonal variance shift") {
  const std::size_t d = 6;
  dv::FeatureMoments a, b;
  a.mean.assign(d, 0.0);
  b.mean.assign(d, 0.0);
  a.covariance = Matrix::identity(d);
  b.covariance = Matrix::identity(d);
  for (std::size_t i = 0; i < d; ++i) a.covariance(i, i) = 4.0;
  a.n_samples = b.n_samples = 2;
  // per coordinate (2 - 1)^2
  CHECK(dv::gaussian_w2(a, b) == doctest::Approx(6.0).epsilon(1e-10));
  CHECK(dv::gaussian_w2(b, a) == doctest::Approx(6.0).epsilon(1e-10));
}

TEST_CASE("metric properties in one dimension") {
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const double m[3] = {rng.normal(), rng.normal(), rng.normal()};
    const double v[3] = {0.05 + rng.uniform(), 0.05 + rng.uniform(), 0.05 + rng.uniform()};
    auto A = scalar_moments(m[0], v[0]);
    auto B = scalar_moments(m[1], v[1]);
    auto C = scalar_moments(m[2], v[2]);
    const double ab = dv::gaussian_w2(A, B);
    const double ba = dv::gaussian_w2(B, A);
    const double bc = dv::gaussian_w2(B, C);
    const double ac = dv::gaussian_w2(A, C);
    CHECK(std::abs(ab - ba) <= 1e-12);
    CHECK(std::sqrt(ac) <= std::sqrt(ab) + std::sqrt(bc) + 1e-10);
  }
}

TEST_CASE("train probe sees unit moments") {
  const std::size_t d = 5;
  auto data = gaussian_set(d, 256, 2.0, 21);
  auto net = probe_net(d);
  auto moments = dv::collect_feature_moments(net, data, {}, nn::BNMode::Train);
  REQUIRE(moments.size() == 1);
  CHECK(moments[0].layer_id == 1);
  CHECK(moments[0].n_samples == 256);
  for (std::size_t i = 0; i < d; ++i) {
    CHECK(std::abs(moments[0].mean[i]) < 1e-6);
    CHECK(std::abs(moments[0].covariance(i, i) - 1.0) < 1e-4);
  }

  CHECK_THROWS_AS(dv::collect_feature_moments(net, data, {0}, nn::BNMode::Train),
                  std::invalid_argument);
}

TEST_CASE("adapted capture approaches the standard gaussian") {
  const std::size_t d = 5;
  auto data = gaussian_set(d, 4096, 9.0, 23);
  auto net = probe_net(d);

  nn::Network adapted;
  ft::ReestimationConfig cfg;  // tau 0.9, batch 32
  ft::test_external(net, data, cfg, nn::LossKind::Squared, &adapted);
  auto moments = dv::collect_feature_moments(adapted, data, {}, nn::BNMode::Eval);
  auto standard = dv::standard_moments(1, d);
  CHECK(dv::gaussian_w2(moments[0], standard) < 0.2);

  auto frozen = dv::collect_feature_moments(net, data, {}, nn::BNMode::Eval);
  CHECK(dv::gaussian_w2(frozen[0], standard) > 1.0);
}

TEST_CASE("moments ignore the sample order") {
  const std::size_t d = 4;
  auto data = gaussian_set(d, 128, 1.0, 27);
  auto net = probe_net(d);
  dg::Dataset shuffled = data;
  Rng rng(5);
  for (std::size_t i = shuffled.inputs.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(shuffled.inputs[i - 1], shuffled.inputs[j]);
    std::swap(shuffled.labels[i - 1], shuffled.labels[j]);
  }
  auto a = dv::collect_feature_moments(net, data, {}, nn::BNMode::Eval);
  auto b = dv::collect_feature_moments(net, shuffled, {}, nn::BNMode::Eval);
  for (std::size_t i = 0; i < d; ++i) {
    CHECK(a[0].mean[i] == doctest::Approx(b[0].mean[i]).epsilon(1e-12));
    for (std::size_t j = 0; j < d; ++j)
      CHECK(a[0].covariance(i, j) == doctest::Approx(b[0].covariance(i, j)).epsilon(1e-12));
  }
}

TEST_CASE("experiment separates control from shift") {
  const auto& fx = trained();
  const std::size_t d = 6;

  dg::ClientDistributionSpec same{9, fx.covariance};
  auto control_data = dg::sample_client_dataset(same, fx.teacher, 512, 2024);
  dv::ExperimentConfig cfg;
  auto control = dv::divergence_experiment(fx.run, control_data, cfg);
  REQUIRE(control.layers.size() == 2);

  dg::ClientDistributionSpec shifted{9, fx.covariance};
  for (std::size_t i = 0; i < d; ++i) shifted.covariance(i, i) = 5.0;
  auto shifted_data = dg::sample_client_dataset(shifted, fx.teacher, 512, 2025);
  auto report = dv::divergence_experiment(fx.run, shifted_data, cfg);
  REQUIRE(report.layers.size() == 2);

  // no-shift control stays close; the shift blows the frozen divergence up
  CHECK(control.layers[0].frozen_seen_unseen < 0.5);
  CHECK(report.layers[0].frozen_seen_unseen > control.layers[0].frozen_seen_unseen);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(report.layers[l].reestimated_seen_unseen < report.layers[l].frozen_seen_unseen);
    CHECK(report.layers[l].reestimated_to_standard < report.layers[l].frozen_to_standard);
  }

  auto csv = dv::divergence_csv(report);
  CHECK(csv.rfind("layer_id,mode,w2_seen_unseen,w2_to_standard\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(csv.find(",frozen,") != std::string::npos);
  CHECK(csv.find(",reestimated,") != std::string::npos);

  auto parsed = nlohmann::json::parse(dv::divergence_json(report));
  REQUIRE(parsed.size() == 2);
  CHECK(parsed[0]["frozen"]["w2_seen_unseen"].get<double>() ==
        report.layers[0].frozen_seen_unseen);
}
