#include "unifed/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "unifed/parallel.hpp"
#include "unifed/rng.hpp"

namespace unifed::config {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr std::uint64_t kTeacherTag = 0x7eac4;
constexpr std::uint64_t kSuiteTag = 0x5417e;
constexpr std::uint64_t kDataTag = 0xda7a0;
constexpr std::uint64_t kSplitTag = 0x5b117;
constexpr std::uint64_t kModelTag = 0x30de1;
constexpr std::uint64_t kExternalTag = 0xe47e4;
constexpr std::uint64_t kAblateTag = 0xab1a7;
constexpr std::uint64_t kPointsTag = 0x90175;
constexpr std::uint64_t kTwoLayerTag = 0x72a9e;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError("config error at " + (path.empty() ? "<root>" : path) + ": " + what);
}

std::string joined(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

void reject_unknown(const json& j, const std::string& path,
                    std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* k) { return it.key() == k; });
    if (!known) fail(joined(path, it.key()), "unknown key");
  }
}

const json* opt(const json& j, const char* key) {
  const auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

const json& section(const json& j, const std::string& path, const char* key,
                    bool& present) {
  static const json empty = json::object();
  const json* v = opt(j, key);
  present = v != nullptr;
  if (!present) return empty;
  if (!v->is_object()) fail(joined(path, key), "expected an object");
  return *v;
}

double get_num(const json& j, const std::string& path, const char* key, double def) {
  const json* v = opt(j, key);
  if (!v) return def;
  if (!v->is_number()) fail(joined(path, key), "expected a number");
  return v->get<double>();
}

std::int64_t get_int(const json& j, const std::string& path, const char* key,
                     std::int64_t def) {
  const json* v = opt(j, key);
  if (!v) return def;
  if (!v->is_number_integer()) fail(joined(path, key), "expected an integer");
  return v->get<std::int64_t>();
}

std::size_t get_size(const json& j, const std::string& path, const char* key,
                     std::size_t def) {
  const json* v = opt(j, key);
  if (!v) return def;
  if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() &&
                                  v->get<std::int64_t>() < 0))
    fail(joined(path, key), "expected a non-negative integer");
  return v->get<std::size_t>();
}

std::uint64_t get_u64(const json& j, const std::string& path, const char* key,
                      std::uint64_t def) {
  const json* v = opt(j, key);
  if (!v) return def;
  if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<std::int64_t>() < 0))
    fail(joined(path, key), "expected a non-negative integer");
  return v->get<std::uint64_t>();
}

bool get_bool(const json& j, const std::string& path, const char* key, bool def) {
  const json* v = opt(j, key);
  if (!v) return def;
  if (!v->is_boolean()) fail(joined(path, key), "expected a boolean");
  return v->get<bool>();
}

std::string get_str(const json& j, const std::string& path, const char* key,
                    const std::string& def) {
  const json* v = opt(j, key);
  if (!v) return def;
  if (!v->is_string()) fail(joined(path, key), "expected a string");
  return v->get<std::string>();
}

std::vector<double> get_dvec(const json& j, const std::string& path, const char* key,
                             std::vector<double> def) {
  const json* v = opt(j, key);
  if (!v) return def;
  if (!v->is_array()) fail(joined(path, key), "expected an array of numbers");
  std::vector<double> out;
  for (const auto& e : *v) {
    if (!e.is_number()) fail(joined(path, key), "expected an array of numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

std::vector<std::size_t> get_svec(const json& j, const std::string& path,
                                  const char* key, std::vector<std::size_t> def) {
  const json* v = opt(j, key);
  if (!v) return def;
  if (!v->is_array()) fail(joined(path, key), "expected an array of positive integers");
  std::vector<std::size_t> out;
  for (const auto& e : *v) {
    if (!e.is_number_integer() || e.get<std::int64_t>() < 1)
      fail(joined(path, key), "expected an array of positive integers");
    out.push_back(e.get<std::size_t>());
  }
  return out;
}

template <class T>
struct EnumName {
  const char* name;
  T value;
};

template <class T, std::size_t N>
T enum_from(const std::string& s, const EnumName<T> (&table)[N],
            const std::string& path) {
  for (const auto& e : table)
    if (s == e.name) return e.value;
  std::string expected;
  for (const auto& e : table) {
    if (!expected.empty()) expected += ", ";
    expected += e.name;
  }
  fail(path, "unknown value '" + s + "' (expected one of: " + expected + ")");
}

template <class T, std::size_t N>
const char* enum_name(T v, const EnumName<T> (&table)[N]) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

constexpr EnumName<datagen::ShiftKind> kShiftNames[] = {
    {"scale", datagen::ShiftKind::Scale},
    {"rotate", datagen::ShiftKind::Rotate},
    {"anisotropic", datagen::ShiftKind::Anisotropic},
};

constexpr EnumName<datagen::TeacherKind> kTeacherNames[] = {
    {"linear_regression", datagen::TeacherKind::LinearRegression},
    {"linear_classification", datagen::TeacherKind::LinearClassification},
    {"two_layer", datagen::TeacherKind::TwoLayerTeacher},
};

constexpr EnumName<fl::Strategy> kStrategyNames[] = {
    {"fedavg", fl::Strategy::FedAvg},   {"fedprox", fl::Strategy::FedProx},
    {"scaffold", fl::Strategy::Scaffold}, {"fedadam", fl::Strategy::FedAdam},
    {"fednova", fl::Strategy::FedNova},
};

constexpr EnumName<nn::LossKind> kLossNames[] = {
    {"squared", nn::LossKind::Squared},
    {"cross_entropy", nn::LossKind::CrossEntropy},
};

constexpr EnumName<nn::VarianceTerm> kVarianceNames[] = {
    {"updated_running_mean", nn::VarianceTerm::UpdatedRunningMean},
    {"batch_mean", nn::VarianceTerm::BatchMean},
};

void require_pos(double v, const std::string& path) {
  if (!(v > 0.0)) fail(path, "must be > 0");
}

void require_nonneg(double v, const std::string& path) {
  if (!(v >= 0.0)) fail(path, "must be >= 0");
}

void require_unit(double v, const std::string& path) {
  if (!(v >= 0.0 && v < 1.0)) fail(path, "must be in [0, 1)");
}

DataSection parse_data(const json& j) {
  const std::string p = "data";
  reject_unknown(j, p,
                 {"clients", "dim", "samples_per_client", "shift", "severity", "teacher",
                  "teacher_hidden", "noise_std", "split"});
  DataSection d;
  d.clients = get_size(j, p, "clients", d.clients);
  d.dim = get_size(j, p, "dim", d.dim);
  d.samples_per_client = get_size(j, p, "samples_per_client", d.samples_per_client);
  d.shift = enum_from(get_str(j, p, "shift", enum_name(d.shift, kShiftNames)),
                      kShiftNames, joined(p, "shift"));
  d.severity = get_num(j, p, "severity", d.severity);
  d.teacher = enum_from(get_str(j, p, "teacher", enum_name(d.teacher, kTeacherNames)),
                        kTeacherNames, joined(p, "teacher"));
  d.teacher_hidden = get_size(j, p, "teacher_hidden", d.teacher_hidden);
  d.noise_std = get_num(j, p, "noise_std", d.noise_std);

  bool present = false;
  const json& sp = section(j, p, "split", present);
  if (present) {
    reject_unknown(sp, joined(p, "split"), {"train", "val", "test"});
    d.split.train = get_num(sp, joined(p, "split"), "train", d.split.train);
    d.split.val = get_num(sp, joined(p, "split"), "val", d.split.val);
    d.split.test = get_num(sp, joined(p, "split"), "test", d.split.test);
  }

  if (d.clients < 1) fail(joined(p, "clients"), "must be >= 1");
  if (d.dim < 1) fail(joined(p, "dim"), "must be >= 1");
  if (d.samples_per_client < 10)
    fail(joined(p, "samples_per_client"), "must be >= 10 so every split is non-empty");
  require_nonneg(d.severity, joined(p, "severity"));
  require_nonneg(d.noise_std, joined(p, "noise_std"));
  if (d.teacher_hidden < 1) fail(joined(p, "teacher_hidden"), "must be >= 1");
  const std::pair<double, const char*> fracs[] = {
      {d.split.train, "train"}, {d.split.val, "val"}, {d.split.test, "test"}};
  for (const auto& [frac, name] : fracs)
    if (!(frac > 0.0 && frac < 1.0)) fail(joined(joined(p, "split"), name), "must be in (0, 1)");
  if (std::abs(d.split.train + d.split.val + d.split.test - 1.0) > 1e-9)
    fail(joined(p, "split"), "fractions must sum to 1");
  return d;
}

ModelSection parse_model(const json& j) {
  const std::string p = "model";
  reject_unknown(j, p, {"hidden", "batch_norm", "bn_eps", "bn_train_momentum"});
  ModelSection m;
  m.hidden = get_svec(j, p, "hidden", m.hidden);
  m.batch_norm = get_bool(j, p, "batch_norm", m.batch_norm);
  m.bn_eps = get_num(j, p, "bn_eps", m.bn_eps);
  m.bn_train_momentum = get_num(j, p, "bn_train_momentum", m.bn_train_momentum);
  if (m.hidden.empty()) fail(joined(p, "hidden"), "must name at least one hidden layer");
  require_pos(m.bn_eps, joined(p, "bn_eps"));
  require_unit(m.bn_train_momentum, joined(p, "bn_train_momentum"));
  return m;
}

fl::TrainConfig parse_fl(const json& j) {
  const std::string p = "fl";
  reject_unknown(j, p, {"strategy", "exclude_bn", "client_weights", "rounds",
                        "local_epochs", "local_lr", "sgd_momentum", "batch_size", "loss",
                        "prox_mu", "server_lr", "adam_beta1", "adam_beta2", "adam_eps"});
  fl::TrainConfig f;
  f.strategy = enum_from(get_str(j, p, "strategy", enum_name(f.strategy, kStrategyNames)),
                         kStrategyNames, joined(p, "strategy"));
  f.exclude_bn = get_bool(j, p, "exclude_bn", f.exclude_bn);
  f.client_weights = get_dvec(j, p, "client_weights", f.client_weights);
  f.rounds = static_cast<int>(get_int(j, p, "rounds", f.rounds));
  f.local_epochs = static_cast<int>(get_int(j, p, "local_epochs", f.local_epochs));
  f.local_lr = get_num(j, p, "local_lr", f.local_lr);
  f.sgd_momentum = get_num(j, p, "sgd_momentum", f.sgd_momentum);
  f.batch_size = get_size(j, p, "batch_size", f.batch_size);
  f.loss = enum_from(get_str(j, p, "loss", enum_name(f.loss, kLossNames)), kLossNames,
                     joined(p, "loss"));
  f.prox_mu = get_num(j, p, "prox_mu", f.prox_mu);
  f.server_lr = get_num(j, p, "server_lr", f.server_lr);
  f.adam_beta1 = get_num(j, p, "adam_beta1", f.adam_beta1);
  f.adam_beta2 = get_num(j, p, "adam_beta2", f.adam_beta2);
  f.adam_eps = get_num(j, p, "adam_eps", f.adam_eps);

  if (f.rounds < 1) fail(joined(p, "rounds"), "must be >= 1");
  if (f.local_epochs < 0) fail(joined(p, "local_epochs"), "must be >= 0");
  require_pos(f.local_lr, joined(p, "local_lr"));
  require_unit(f.sgd_momentum, joined(p, "sgd_momentum"));
  if (f.batch_size < 1) fail(joined(p, "batch_size"), "must be >= 1");
  require_nonneg(f.prox_mu, joined(p, "prox_mu"));
  require_pos(f.server_lr, joined(p, "server_lr"));
  require_unit(f.adam_beta1, joined(p, "adam_beta1"));
  require_unit(f.adam_beta2, joined(p, "adam_beta2"));
  require_pos(f.adam_eps, joined(p, "adam_eps"));
  for (double w : f.client_weights)
    require_nonneg(w, joined(p, "client_weights"));
  return f;
}

fedtest::ReestimationConfig parse_reestimation(const json& j, const std::string& p) {
  reject_unknown(j, p, {"tau", "batch_size", "order_seed", "shuffle", "reset_stats",
                        "variance_term"});
  fedtest::ReestimationConfig r;
  r.tau = get_num(j, p, "tau", r.tau);
  r.batch_size = get_size(j, p, "batch_size", r.batch_size);
  r.order_seed = get_u64(j, p, "order_seed", r.order_seed);
  r.shuffle = get_bool(j, p, "shuffle", r.shuffle);
  r.reset_stats = get_bool(j, p, "reset_stats", r.reset_stats);
  r.variance_term =
      enum_from(get_str(j, p, "variance_term", enum_name(r.variance_term, kVarianceNames)),
                kVarianceNames, joined(p, "variance_term"));
  require_unit(r.tau, joined(p, "tau"));
  if (r.batch_size < 1) fail(joined(p, "batch_size"), "must be >= 1");
  return r;
}

TestSection parse_test(const json& j) {
  const std::string p = "test";
  reject_unknown(j, p, {"external_scale", "external_samples", "reestimation"});
  TestSection t;
  t.external_scale = get_num(j, p, "external_scale", t.external_scale);
  t.external_samples = get_size(j, p, "external_samples", t.external_samples);
  bool present = false;
  const json& re = section(j, p, "reestimation", present);
  if (present) t.reestimation = parse_reestimation(re, joined(p, "reestimation"));
  require_pos(t.external_scale, joined(p, "external_scale"));
  if (t.external_samples < 1) fail(joined(p, "external_samples"), "must be >= 1");
  return t;
}

AnalysisSection parse_analysis(const json& j) {
  const std::string p = "analysis";
  reject_unknown(j, p, {"ntk", "divergence", "ntk_width", "ntk_alpha",
                        "ntk_points_per_client", "ntk_steps", "ntk_lr", "ntk_mc_samples"});
  AnalysisSection a;
  a.ntk = get_bool(j, p, "ntk", a.ntk);
  a.divergence = get_bool(j, p, "divergence", a.divergence);
  a.ntk_width = get_size(j, p, "ntk_width", a.ntk_width);
  a.ntk_alpha = get_num(j, p, "ntk_alpha", a.ntk_alpha);
  a.ntk_points_per_client = get_size(j, p, "ntk_points_per_client", a.ntk_points_per_client);
  a.ntk_steps = static_cast<int>(get_int(j, p, "ntk_steps", a.ntk_steps));
  a.ntk_lr = get_num(j, p, "ntk_lr", a.ntk_lr);
  a.ntk_mc_samples = get_size(j, p, "ntk_mc_samples", a.ntk_mc_samples);
  require_pos(a.ntk_alpha, joined(p, "ntk_alpha"));
  if (a.ntk_points_per_client < 1) fail(joined(p, "ntk_points_per_client"), "must be >= 1");
  if (a.ntk_steps < 0) fail(joined(p, "ntk_steps"), "must be >= 0");
  require_pos(a.ntk_lr, joined(p, "ntk_lr"));
  if (a.ntk_mc_samples == 1) fail(joined(p, "ntk_mc_samples"), "must be 0 or >= 2");
  return a;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read file: " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out.good()) throw ConfigError("cannot write file: " + path.string());
}

json num_or_null(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

json vec_or_nulls(const Vector& v) {
  json arr = json::array();
  for (double x : v) arr.push_back(num_or_null(x));
  return arr;
}

double mean_of(const Vector& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

json round_summary(const fl::RoundMetrics& rm) {
  json e;
  e["round"] = rm.round;
  e["train_loss"] = rm.train_loss;
  e["val_loss"] = rm.val_loss;
  e["val_accuracy"] = vec_or_nulls(rm.val_accuracy);
  e["mean_train_loss"] = num_or_null(mean_of(rm.train_loss));
  e["mean_val_loss"] = num_or_null(mean_of(rm.val_loss));
  e["mean_val_accuracy"] = num_or_null(mean_of(rm.val_accuracy));
  return e;
}

datagen::TeacherSpec make_teacher(const ExperimentConfig& cfg) {
  const std::uint64_t s = seed_stream(cfg.seed, kTeacherTag, 0);
  if (cfg.data.teacher == datagen::TeacherKind::TwoLayerTeacher)
    return datagen::make_two_layer_teacher(cfg.data.dim, cfg.data.teacher_hidden,
                                           cfg.data.noise_std, s);
  return datagen::make_linear_teacher(cfg.data.dim, cfg.data.teacher, cfg.data.noise_std, s);
}

std::vector<datagen::ClientDistributionSpec> make_specs(const ExperimentConfig& cfg) {
  return datagen::make_feature_shift_suite(cfg.data.clients, cfg.data.dim, cfg.data.shift,
                                           cfg.data.severity,
                                           seed_stream(cfg.seed, kSuiteTag, 0));
}

// Points for the kernel analysis: unit-norm draws from each client's
// covariance, labeled by the clean teacher value.
void ntk_point_set(const ExperimentConfig& cfg,
                   const std::vector<datagen::ClientDistributionSpec>& specs,
                   const datagen::TeacherSpec& teacher, ntk::PointSet& ps, Vector& y) {
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto data = datagen::sample_client_dataset(specs[i], teacher,
                                               cfg.analysis.ntk_points_per_client,
                                               seed_stream(cfg.seed, kPointsTag, i));
    for (auto& x : data.inputs) {
      double norm = 0.0;
      for (double v : x) norm += v * v;
      norm = std::sqrt(norm);
      for (auto& v : x) v /= norm;
      double label = datagen::teacher_value(teacher, x);
      if (cfg.data.teacher == datagen::TeacherKind::LinearClassification)
        label = label < 0.0 ? -1.0 : 1.0;
      ps.points.push_back(x);
      ps.clients.push_back(i);
      y.push_back(label);
    }
  }
}

void write_ntk_outputs(const ExperimentConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  write_file(dir / "resolved_config.json", resolved_config_json(cfg));

  const auto specs = make_specs(cfg);
  const auto teacher = make_teacher(cfg);
  ntk::PointSet ps;
  Vector y;
  ntk_point_set(cfg, specs, teacher, ps, y);

  const auto report = ntk::gram_infinity(ps, cfg.analysis.ntk_alpha);
  write_file(dir / "gram_report.json", ntk::gram_report_json(report));

  const auto verdict = ntk::compare_min_eigenvalues(report, ps);
  json v;
  v["e0"] = verdict.e0;
  v["e0_star"] = verdict.e0_star;
  v["min_block_eig"] = verdict.min_block_eig;
  v["tolerance"] = verdict.tolerance;
  v["ordered"] = verdict.ordered;
  v["block_identity"] = verdict.block_identity;
  write_file(dir / "ordering.json", v.dump(2) + "\n");
  if (!verdict.ordered || !verdict.block_identity)
    throw ConfigError("eigenvalue ordering invariant failed in " + dir.string());

  if (cfg.analysis.ntk_mc_samples > 0) {
    const auto mc = ntk::gram_infinity(ps, cfg.analysis.ntk_alpha,
                                       ntk::GramEstimator::MonteCarlo,
                                       cfg.analysis.ntk_mc_samples, cfg.seed);
    write_file(dir / "gram_report_mc.json", ntk::gram_report_json(mc));
  }

  if (cfg.analysis.ntk_width > 0) {
    std::vector<Matrix> covs;
    for (const auto& s : specs) covs.push_back(s.covariance);
    auto model = nn::two_layer_init(cfg.analysis.ntk_width, cfg.data.dim, covs,
                                    cfg.analysis.ntk_alpha, true,
                                    seed_stream(cfg.seed, kTwoLayerTag, 0));
    const auto trace =
        ntk::track_dynamics(model, ps, y, cfg.analysis.ntk_steps, cfg.analysis.ntk_lr);
    write_file(dir / "dynamics.csv", ntk::dynamics_csv(trace));
  }
}

std::string checkpoint_path(const std::string& run_dir, const std::string& which,
                            const std::string& file) {
  return (fs::path(run_dir) / "checkpoints" / which / file).string();
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config error: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) fail("", "expected a JSON object");
  reject_unknown(j, "", {"format_version", "run_id", "seed", "data", "model", "fl",
                         "test", "analysis"});
  if (!opt(j, "format_version")) fail("format_version", "missing required key");

  ExperimentConfig cfg;
  cfg.format_version = static_cast<int>(get_int(j, "", "format_version", 0));
  if (cfg.format_version != 1) fail("format_version", "unsupported value (expected 1)");
  cfg.run_id = get_str(j, "", "run_id", cfg.run_id);
  if (cfg.run_id.empty() ||
      cfg.run_id.find_first_not_of(
          "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-") !=
          std::string::npos)
    fail("run_id", "must be non-empty and use only [A-Za-z0-9._-]");
  cfg.seed = get_u64(j, "", "seed", cfg.seed);

  bool present = false;
  const json& data = section(j, "", "data", present);
  if (present) cfg.data = parse_data(data);
  const json& model = section(j, "", "model", present);
  if (present) cfg.model = parse_model(model);
  const json& flj = section(j, "", "fl", present);
  if (present) cfg.fl = parse_fl(flj);
  const json& test = section(j, "", "test", present);
  if (present) cfg.test = parse_test(test);
  const json& analysis = section(j, "", "analysis", present);
  if (present) cfg.analysis = parse_analysis(analysis);

  if (!cfg.fl.client_weights.empty() && cfg.fl.client_weights.size() != cfg.data.clients)
    fail("fl.client_weights", "must be empty or match data.clients");
  if (cfg.fl.loss == nn::LossKind::CrossEntropy &&
      cfg.data.teacher != datagen::TeacherKind::LinearClassification)
    fail("fl.loss", "cross_entropy needs data.teacher = linear_classification");
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  return parse_config(read_file(path));
}

std::string resolved_config_json(const ExperimentConfig& cfg) {
  json j;
  j["format_version"] = cfg.format_version;
  j["run_id"] = cfg.run_id;
  j["seed"] = cfg.seed;

  json d;
  d["clients"] = cfg.data.clients;
  d["dim"] = cfg.data.dim;
  d["samples_per_client"] = cfg.data.samples_per_client;
  d["shift"] = enum_name(cfg.data.shift, kShiftNames);
  d["severity"] = cfg.data.severity;
  d["teacher"] = enum_name(cfg.data.teacher, kTeacherNames);
  d["teacher_hidden"] = cfg.data.teacher_hidden;
  d["noise_std"] = cfg.data.noise_std;
  d["split"] = {{"train", cfg.data.split.train},
                {"val", cfg.data.split.val},
                {"test", cfg.data.split.test}};
  j["data"] = d;

  json m;
  m["hidden"] = cfg.model.hidden;
  m["batch_norm"] = cfg.model.batch_norm;
  m["bn_eps"] = cfg.model.bn_eps;
  m["bn_train_momentum"] = cfg.model.bn_train_momentum;
  j["model"] = m;

  json f;
  f["strategy"] = enum_name(cfg.fl.strategy, kStrategyNames);
  f["exclude_bn"] = cfg.fl.exclude_bn;
  f["client_weights"] = cfg.fl.client_weights;
  f["rounds"] = cfg.fl.rounds;
  f["local_epochs"] = cfg.fl.local_epochs;
  f["local_lr"] = cfg.fl.local_lr;
  f["sgd_momentum"] = cfg.fl.sgd_momentum;
  f["batch_size"] = cfg.fl.batch_size;
  f["loss"] = enum_name(cfg.fl.loss, kLossNames);
  f["prox_mu"] = cfg.fl.prox_mu;
  f["server_lr"] = cfg.fl.server_lr;
  f["adam_beta1"] = cfg.fl.adam_beta1;
  f["adam_beta2"] = cfg.fl.adam_beta2;
  f["adam_eps"] = cfg.fl.adam_eps;
  j["fl"] = f;

  json t;
  t["external_scale"] = cfg.test.external_scale;
  t["external_samples"] = cfg.test.external_samples;
  t["reestimation"] = {
      {"tau", cfg.test.reestimation.tau},
      {"batch_size", cfg.test.reestimation.batch_size},
      {"order_seed", cfg.test.reestimation.order_seed},
      {"shuffle", cfg.test.reestimation.shuffle},
      {"reset_stats", cfg.test.reestimation.reset_stats},
      {"variance_term", enum_name(cfg.test.reestimation.variance_term, kVarianceNames)}};
  j["test"] = t;

  json a;
  a["ntk"] = cfg.analysis.ntk;
  a["divergence"] = cfg.analysis.divergence;
  a["ntk_width"] = cfg.analysis.ntk_width;
  a["ntk_alpha"] = cfg.analysis.ntk_alpha;
  a["ntk_points_per_client"] = cfg.analysis.ntk_points_per_client;
  a["ntk_steps"] = cfg.analysis.ntk_steps;
  a["ntk_lr"] = cfg.analysis.ntk_lr;
  a["ntk_mc_samples"] = cfg.analysis.ntk_mc_samples;
  j["analysis"] = a;

  return j.dump(2) + "\n";
}

ClientData build_datasets(const ExperimentConfig& cfg) {
  ClientData out;
  out.specs = make_specs(cfg);
  out.teacher = make_teacher(cfg);
  for (std::size_t i = 0; i < cfg.data.clients; ++i) {
    auto data = datagen::sample_client_dataset(out.specs[i], out.teacher,
                                               cfg.data.samples_per_client,
                                               seed_stream(cfg.seed, kDataTag, i));
    auto split = datagen::holdout_split(data, cfg.data.split,
                                        seed_stream(cfg.seed, kSplitTag, i));
    out.train.push_back(std::move(split.train));
    out.val.push_back(std::move(split.val));
    out.test.push_back(std::move(split.test));
  }
  return out;
}

nn::Network build_model(const ExperimentConfig& cfg) {
  nn::Network net = nn::make_mlp(cfg.data.dim, cfg.model.hidden, 1, cfg.model.batch_norm,
                                 seed_stream(cfg.seed, kModelTag, 0));
  for (auto& layer : net.layers)
    if (auto* bn = std::get_if<nn::BNLayer>(&layer)) {
      bn->eps = cfg.model.bn_eps;
      bn->train_momentum = cfg.model.bn_train_momentum;
    }
  return net;
}

datagen::Dataset build_external_dataset(const ExperimentConfig& cfg, double scale,
                                        std::size_t samples) {
  auto spec = datagen::scaled_external_spec(make_specs(cfg), scale);
  spec.client_id = cfg.data.clients;
  return datagen::sample_client_dataset(spec, make_teacher(cfg), samples,
                                        seed_stream(cfg.seed, kExternalTag, 0));
}

std::string cmd_train(const ExperimentConfig& cfg, const std::string& out_root) {
  const fs::path run_dir = fs::path(out_root) / cfg.run_id;
  fs::create_directories(run_dir / "checkpoints" / "final");
  fs::create_directories(run_dir / "checkpoints" / "best");

  const std::string resolved = resolved_config_json(cfg);
  write_file(run_dir / "resolved_config.json", resolved);

  const ClientData data = build_datasets(cfg);
  const nn::Network init = build_model(cfg);
  const fl::RunResult run =
      fl::run_federated_training(data.train, data.val, init, cfg.fl, cfg.seed);

  const std::string metrics = fl::metrics_csv(run.metrics);
  write_file(run_dir / "metrics.csv", metrics);

  nn::save_checkpoint(run.global, checkpoint_path(run_dir.string(), "final", "global.json"));
  nn::save_checkpoint(run.best_global,
                      checkpoint_path(run_dir.string(), "best", "global.json"));
  for (std::size_t i = 0; i < run.clients.size(); ++i) {
    const std::string file = "client_" + std::to_string(i) + ".json";
    nn::save_checkpoint(run.clients[i].model,
                        checkpoint_path(run_dir.string(), "final", file));
    nn::save_checkpoint(run.best_client_models[i],
                        checkpoint_path(run_dir.string(), "best", file));
  }

  double wall = 0.0;
  for (const auto& rm : run.metrics) wall += rm.wall_seconds;
  json s;
  s["run_id"] = cfg.run_id;
  s["seed"] = cfg.seed;
  s["clients"] = cfg.data.clients;
  s["rounds"] = cfg.fl.rounds;
  s["best_round"] = run.best_round;
  s["final"] = round_summary(run.metrics.back());
  s["best"] = round_summary(run.metrics.at(run.best_round));
  s["wall_seconds"] = wall;
  write_file(run_dir / "summary.json", s.dump(2) + "\n");

  // Readback checks: the run dir must reproduce what is in memory.
  if (parse_config(read_file((run_dir / "resolved_config.json").string())).seed != cfg.seed ||
      resolved_config_json(load_config((run_dir / "resolved_config.json").string())) !=
          resolved)
    throw ConfigError("resolved config readback mismatch in " + run_dir.string());
  const auto reloaded =
      nn::load_checkpoint(checkpoint_path(run_dir.string(), "final", "global.json"));
  if (nn::checkpoint_to_string(reloaded) != nn::checkpoint_to_string(run.global))
    throw ConfigError("checkpoint readback mismatch in " + run_dir.string());
  const auto rows = static_cast<std::size_t>(std::count(metrics.begin(), metrics.end(), '\n'));
  if (rows != 1 + 2 * cfg.data.clients * static_cast<std::size_t>(cfg.fl.rounds))
    throw ConfigError("metrics row count mismatch in " + run_dir.string());

  if (cfg.analysis.ntk) write_ntk_outputs(cfg, run_dir / "ntk");
  if (cfg.analysis.divergence) {
    const auto unseen =
        build_external_dataset(cfg, cfg.test.external_scale, cfg.test.external_samples);
    divergence::ExperimentConfig dcfg;
    dcfg.reestimation = cfg.test.reestimation;
    const auto report = divergence::divergence_experiment(run, unseen, dcfg);
    write_file(run_dir / "divergence.csv", divergence::divergence_csv(report));
    write_file(run_dir / "divergence.json", divergence::divergence_json(report));
  }
  return run_dir.string();
}

ExternalComparison cmd_test_external(const std::string& run_dir, double scale,
                                     std::size_t samples, const std::string& checkpoint) {
  if (checkpoint != "final" && checkpoint != "best")
    throw ConfigError("checkpoint must be 'final' or 'best', got '" + checkpoint + "'");
  const ExperimentConfig cfg =
      load_config((fs::path(run_dir) / "resolved_config.json").string());
  if (scale <= 0.0) scale = cfg.test.external_scale;
  if (samples == 0) samples = cfg.test.external_samples;

  const nn::Network global =
      nn::load_checkpoint(checkpoint_path(run_dir, checkpoint, "global.json"));
  const auto data = build_external_dataset(cfg, scale, samples);

  ExternalComparison out;
  out.scale = scale;
  out.checkpoint = checkpoint;
  out.frozen = fedtest::test_external_frozen(global, data,
                                             cfg.test.reestimation.batch_size, cfg.fl.loss);
  out.reestimated = fedtest::test_external(global, data, cfg.test.reestimation, cfg.fl.loss);
  if (out.frozen.n_samples != out.reestimated.n_samples)
    throw ConfigError("arm sample counts diverged");

  json c;
  c["checkpoint"] = checkpoint;
  c["scale"] = scale;
  c["n_samples"] = out.frozen.n_samples;
  c["frozen"] = json::parse(fedtest::report_to_json(out.frozen));
  c["reestimated"] = json::parse(fedtest::report_to_json(out.reestimated));
  write_file(fs::path(run_dir) / "comparison.json", c.dump(2) + "\n");
  return out;
}

std::string cmd_ntk(const ExperimentConfig& cfg, const std::string& out_root) {
  const fs::path dir = fs::path(out_root) / (cfg.run_id + "-ntk");
  write_ntk_outputs(cfg, dir);
  return dir.string();
}

std::string cmd_ablate(const std::string& run_dir, const std::string& which,
                       const std::vector<double>& grid) {
  const ExperimentConfig cfg =
      load_config((fs::path(run_dir) / "resolved_config.json").string());
  const nn::Network global =
      nn::load_checkpoint(checkpoint_path(run_dir, "final", "global.json"));
  const auto data =
      build_external_dataset(cfg, cfg.test.external_scale, cfg.test.external_samples);
  const std::uint64_t seed = seed_stream(cfg.seed, kAblateTag, 0);

  std::vector<fedtest::AblationRow> rows;
  if (which == "batch") {
    std::vector<std::size_t> sizes = {2, 4, 8, 16, 32, 64, 128, 256, 512};
    if (!grid.empty()) {
      sizes.clear();
      for (double v : grid) {
        if (!(v >= 1.0) || v != std::floor(v))
          throw ConfigError("batch grid values must be positive integers");
        sizes.push_back(static_cast<std::size_t>(v));
      }
    }
    rows = fedtest::ablate_batch_size(global, data, sizes, cfg.fl.loss, seed);
  } else if (which == "momentum") {
    std::vector<double> taus = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    if (!grid.empty()) {
      taus = grid;
      for (double t : taus)
        if (!(t >= 0.0 && t < 1.0)) throw ConfigError("momentum grid values must be in [0, 1)");
    }
    rows = fedtest::ablate_momentum(global, data, taus, cfg.test.reestimation.batch_size,
                                    cfg.fl.loss, seed);
  } else if (which == "order") {
    std::size_t n_orders = 10;
    if (!grid.empty()) {
      if (grid.size() != 1 || !(grid[0] >= 1.0) || grid[0] != std::floor(grid[0]))
        throw ConfigError("order grid takes a single positive count");
      n_orders = static_cast<std::size_t>(grid[0]);
    }
    rows = fedtest::ablate_order(global, data, n_orders, cfg.test.reestimation, cfg.fl.loss,
                                 seed);
  } else {
    throw ConfigError("unknown ablation '" + which + "' (expected batch, momentum or order)");
  }

  const fs::path out = fs::path(run_dir) / ("ablation_" + which + ".csv");
  write_file(out, fedtest::ablation_csv(rows));
  return out.string();
}

namespace {

void expect(bool cond, const std::string& what) {
  if (!cond) throw std::runtime_error(what);
}

void fill_params(nn::Network& net, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& arr : nn::parameter_arrays(net, true))
    for (auto& v : *arr.values) v = rng.normal();
  for (auto& arr : nn::statistic_arrays(net))
    for (auto& v : *arr.values) v = 0.5 + rng.uniform();
}

double max_param_diff(nn::Network& a, nn::Network& b) {
  double out = 0.0;
  const auto pa = nn::parameter_arrays(a, true), pb = nn::parameter_arrays(b, true);
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t k = 0; k < pa[i].values->size(); ++k)
      out = std::max(out, std::abs((*pa[i].values)[k] - (*pb[i].values)[k]));
  const auto sa = nn::statistic_arrays(a), sb = nn::statistic_arrays(b);
  for (std::size_t i = 0; i < sa.size(); ++i)
    for (std::size_t k = 0; k < sa[i].values->size(); ++k)
      out = std::max(out, std::abs((*sa[i].values)[k] - (*sb[i].values)[k]));
  return out;
}

ExperimentConfig tiny_config(fl::Strategy strategy, int rounds) {
  ExperimentConfig cfg;
  cfg.seed = 3;
  cfg.data.clients = 2;
  cfg.data.dim = 4;
  cfg.data.samples_per_client = 40;
  cfg.data.severity = 1.0;
  cfg.model.hidden = {6};
  cfg.fl.strategy = strategy;
  cfg.fl.exclude_bn = true;
  cfg.fl.rounds = rounds;
  cfg.fl.local_lr = 0.01;
  cfg.fl.batch_size = 16;
  return cfg;
}

fl::RunResult tiny_run(const ExperimentConfig& cfg) {
  const auto data = build_datasets(cfg);
  return fl::run_federated_training(data.train, data.val, build_model(cfg), cfg.fl,
                                    cfg.seed);
}

}  // namespace

bool verify_suite(std::ostream& log) {
  int failed = 0;
  const auto check = [&](const char* name, const std::function<void()>& body) {
    try {
      body();
      log << "ok: " << name << "\n";
    } catch (const std::exception& e) {
      ++failed;
      log << "FAIL: " << name << " (" << e.what() << ")\n";
    }
  };

  check("broadcast leaves excluded bn layers untouched", [] {
    nn::Network global = nn::make_mlp(4, {6}, 1, true, 11);
    nn::Network client = nn::make_mlp(4, {6}, 1, true, 12);
    fill_params(client, 13);
    nn::Network saved = client;
    fl::broadcast(client, global, true);
    const auto pc = nn::parameter_arrays(client, true);
    const auto ps = nn::parameter_arrays(saved, true);
    const auto pg = nn::parameter_arrays(global, true);
    for (std::size_t i = 0; i < pc.size(); ++i) {
      const auto& want = nn::is_bn_layer(client, pc[i].layer) ? *ps[i].values : *pg[i].values;
      expect(*pc[i].values == want, "parameter array mismatch");
    }
    const auto sc = nn::statistic_arrays(client);
    const auto ss = nn::statistic_arrays(saved);
    for (std::size_t i = 0; i < sc.size(); ++i)
      expect(*sc[i].values == *ss[i].values, "statistics were touched");
    fl::broadcast(client, global, false);
    expect(max_param_diff(client, global) == 0.0, "full broadcast mismatch");
  });

  check("fedavg aggregation is the weighted parameter mean", [] {
    const nn::Network init = nn::make_mlp(3, {4}, 1, true, 5);
    fl::ServerState server;
    server.global = init;
    std::vector<fl::ClientState> clients(2);
    for (std::size_t i = 0; i < 2; ++i) {
      clients[i].client_id = i;
      clients[i].model = init;
      fill_params(clients[i].model, 100 + i);
      clients[i].steps_taken = 1;
    }
    std::vector<Vector> want;
    {
      const auto p0 = nn::parameter_arrays(clients[0].model, true);
      const auto p1 = nn::parameter_arrays(clients[1].model, true);
      for (std::size_t i = 0; i < p0.size(); ++i) {
        Vector w(p0[i].values->size());
        for (std::size_t k = 0; k < w.size(); ++k)
          w[k] = 0.3 * (*p0[i].values)[k] + 0.7 * (*p1[i].values)[k];
        want.push_back(std::move(w));
      }
    }
    fl::TrainConfig cfg;
    cfg.client_weights = {0.3, 0.7};
    fl::aggregate(server, clients, cfg);
    const auto pg = nn::parameter_arrays(server.global, true);
    for (std::size_t i = 0; i < pg.size(); ++i)
      for (std::size_t k = 0; k < want[i].size(); ++k)
        expect(std::abs((*pg[i].values)[k] - want[i][k]) <= 1e-12,
               "aggregate is off the weighted mean");
  });

  check("degenerate strategies reduce to fedavg", [] {
    auto avg = tiny_run(tiny_config(fl::Strategy::FedAvg, 2));
    auto prox = tiny_run(tiny_config(fl::Strategy::FedProx, 2));
    auto nova = tiny_run(tiny_config(fl::Strategy::FedNova, 2));
    expect(max_param_diff(avg.global, prox.global) == 0.0, "fedprox(0) != fedavg");
    expect(max_param_diff(avg.global, nova.global) <= 1e-10,
           "fednova(equal steps) != fedavg");
  });

  check("thread count does not change the metrics", [] {
    const int saved = thread_count();
    const auto cfg = tiny_config(fl::Strategy::FedAvg, 3);
    set_thread_count(1);
    auto a = tiny_run(cfg);
    set_thread_count(4);
    auto b = tiny_run(cfg);
    set_thread_count(saved);
    expect(fl::metrics_csv(a.metrics) == fl::metrics_csv(b.metrics),
           "metrics csv differs across thread counts");
    expect(max_param_diff(a.global, b.global) == 0.0,
           "final parameters differ across thread counts");
  });

  check("analytic gradients match central differences", [] {
    Rng rng(7);
    Matrix batch(5, 3);
    for (auto& v : batch.data()) v = rng.normal();
    Vector labels(5);
    for (auto& y : labels) y = rng.rademacher();
    for (const auto kind : {nn::LossKind::Squared, nn::LossKind::CrossEntropy}) {
      nn::Network net = nn::make_mlp(3, {4}, 1, true, 17);
      const auto grads = nn::mlp_backward(net, batch, labels, kind, false);
      const auto probe = [&]() {
        nn::ForwardOptions opts;
        opts.bn.update_running = false;
        return nn::loss_value(nn::mlp_forward(net, batch, opts), labels, kind);
      };
      const auto arrays = nn::parameter_arrays(net, true);
      const double h = 1e-4;
      for (std::size_t i = 0; i < arrays.size(); ++i) {
        const Vector& g = arrays[i].slot == 0 ? grads.layers[arrays[i].layer].a
                                              : grads.layers[arrays[i].layer].b;
        for (std::size_t k = 0; k < arrays[i].values->size(); ++k) {
          double& w = (*arrays[i].values)[k];
          const double w0 = w;
          w = w0 + h;
          const double up = probe();
          w = w0 - h;
          const double dn = probe();
          w = w0;
          const double fd = (up - dn) / (2.0 * h);
          expect(std::abs(g[k] - fd) <= 1e-5 * std::max(1.0, std::abs(fd)),
                 "gradient mismatch vs finite differences");
        }
      }
    }
  });

  check("closed form kernel matches monte carlo", [] {
    ntk::PointSet ps;
    Rng rng(9);
    for (std::size_t p = 0; p < 3; ++p) {
      Vector x(4);
      double norm = 0.0;
      for (auto& v : x) {
        v = rng.normal();
        norm += v * v;
      }
      for (auto& v : x) v /= std::sqrt(norm);
      ps.points.push_back(x);
      ps.clients.push_back(p < 2 ? 0 : 1);
    }
    const auto cf = ntk::gram_infinity(ps, 1.0);
    const auto mc =
        ntk::gram_infinity(ps, 1.0, ntk::GramEstimator::MonteCarlo, 200000, 11);
    for (std::size_t p = 0; p < 3; ++p)
      for (std::size_t q = 0; q < 3; ++q) {
        expect(mc.mc_stderr(p, q) > 0.0, "stderr must be positive");
        expect(std::abs(cf.g_inf(p, q) - mc.g_inf(p, q)) <= 4.0 * mc.mc_stderr(p, q),
               "monte carlo disagrees with the closed form");
      }
  });

  check("gaussian distance matches the scalar closed form", [] {
    divergence::FeatureMoments a, b;
    a.mean = {0.3};
    a.covariance = Matrix(1, 1);
    a.covariance(0, 0) = 1.44;
    a.n_samples = b.n_samples = 2;
    b.mean = {-0.2};
    b.covariance = Matrix(1, 1);
    b.covariance(0, 0) = 0.25;
    const double want = 0.5 * 0.5 + 0.7 * 0.7;
    expect(std::abs(divergence::gaussian_w2(a, b) - want) <= 1e-10,
           "scalar closed form violated");
    expect(divergence::gaussian_w2(a, a) <= 1e-12, "self distance not zero");
  });

  check("checkpoints round trip bit exactly", [] {
    nn::Network net = nn::make_mlp(5, {7}, 1, true, 9);
    Rng rng(19);
    Matrix batch(6, 5);
    for (auto& v : batch.data()) v = rng.normal();
    Vector labels(6, 0.0);
    nn::mlp_backward(net, batch, labels, nn::LossKind::Squared, true);
    const std::string s = nn::checkpoint_to_string(net);
    nn::Network back = nn::checkpoint_from_string(s);
    expect(nn::checkpoint_to_string(back) == s, "checkpoint text changed");
  });

  return failed == 0;
}

}  // namespace unifed::config
