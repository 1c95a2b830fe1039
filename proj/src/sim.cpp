#include "tetris/sim.hpp"

#include <cmath>
#include <cstdio>

#include <spdlog/spdlog.h>

#include "tetris/errors.hpp"
#include "tetris/io.hpp"

namespace tetris {

namespace {

struct ColumnSpec {
  FactorType type;
  int row_begin;
  int row_end;
};

std::vector<std::string> feature_labels(int p) {
  std::vector<std::string> names;
  for (int j = 0; j < p; ++j) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "feature_%03d", j + 1);
    names.emplace_back(buf);
  }
  return names;
}

FactorType all_studies(int s_count) {
  std::vector<int> members(static_cast<std::size_t>(s_count));
  for (int s = 0; s < s_count; ++s) members[static_cast<std::size_t>(s)] = s;
  return FactorType::from_studies(s_count, members);
}

FactorType first_studies(int s_count, int count) {
  std::vector<int> members;
  for (int s = 0; s < count; ++s) members.push_back(s);
  return FactorType::from_studies(s_count, members);
}

SimResult build(const ScenarioConfig& config, const std::vector<ColumnSpec>& columns, RandomSource& source) {
  if (config.n < 1 || config.p < 1) throw ParameterError("simulation needs n >= 1 and p >= 1");
  if (!(config.sparsity >= 0.0 && config.sparsity < 1.0)) throw ParameterError("sparsity must lie in [0, 1)");
  const int s_count = config.num_studies;
  const int p = config.p;
  const auto k = static_cast<Eigen::Index>(columns.size());

  SimResult out;
  SimTruth& truth = out.truth;
  truth.config = config;
  truth.lambda = Eigen::MatrixXd::Zero(p, k);
  truth.indicator = IndicatorMatrix::identity(s_count);
  for (Eigen::Index j = 0; j < k; ++j) {
    const ColumnSpec& spec = columns[static_cast<std::size_t>(j)];
    if (j >= s_count) truth.indicator.append_column(spec.type);
    const int eligible = spec.row_end - spec.row_begin;
    const int nonzero = static_cast<int>(std::lround((1.0 - config.sparsity) * eligible));
    for (int r : draw_subset(source, eligible, nonzero)) {
      truth.lambda(spec.row_begin + r, j) = 2.0 * source.uniform() - 1.0;
    }
  }
  truth.indicator.validate();

  truth.psi.resize(s_count, p);
  for (int s = 0; s < s_count; ++s) {
    for (int r = 0; r < p; ++r) {
      double v = 0.0;
      while (v == 0.0) v = 0.5 * source.uniform();
      truth.psi(s, r) = v;
    }
  }
  for (int s = 0; s < s_count; ++s) {
    const Eigen::VectorXd a = truth.indicator.row_as_diagonal(s);
    Eigen::MatrixXd sigma = truth.lambda * a.asDiagonal() * truth.lambda.transpose();
    sigma.diagonal() += truth.psi.row(s).transpose();
    truth.sigma.push_back(std::move(sigma));
  }
  out.data = regenerate_data(truth, config.n, source);
  return out;
}

std::vector<ColumnSpec> specific_columns(int s_count, int p) {
  std::vector<ColumnSpec> cols;
  for (int s = 0; s < s_count; ++s) cols.push_back({FactorType::from_studies(s_count, {s}), 0, p});
  return cols;
}

void warn_unless(bool ok, const char* what) {
  if (!ok) spdlog::warn("simulation parameter outside the standard grid: {}", what);
}

}  // namespace

nlohmann::json ScenarioConfig::to_json() const {
  return {{"scenario", scenario}, {"n", n},
          {"p", p},               {"num_studies", num_studies},
          {"sparsity", sparsity}, {"n_partial", n_partial},
          {"seed", seed}};
}

ScenarioConfig ScenarioConfig::from_json(const nlohmann::json& j) {
  ScenarioConfig c;
  c.scenario = j.at("scenario").get<int>();
  c.n = j.at("n").get<int>();
  c.p = j.at("p").get<int>();
  c.num_studies = j.at("num_studies").get<int>();
  c.sparsity = j.at("sparsity").get<double>();
  c.n_partial = j.at("n_partial").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

SimResult generate_scenario1(double sparsity, int n, int p, RandomSource& source) {
  if (p % 2 != 0) throw ParameterError("scenario 1 needs an even number of features");
  warn_unless(sparsity == 0.5 || sparsity == 0.8, "scenario 1 sparsity");
  ScenarioConfig config{1, n, p, 4, sparsity, 3, source.seed()};
  auto cols = specific_columns(4, p);
  for (int j = 0; j < 3; ++j) cols.push_back({all_studies(4), 0, p / 2});
  for (int j = 0; j < 3; ++j) cols.push_back({first_studies(4, 2), p / 2, p});
  return build(config, cols, source);
}

SimResult generate_scenario2(int n, int p, double sparsity, int n_partial, RandomSource& source, int num_studies) {
  warn_unless((n == 60 && p == 10) || (n == 35 && p == 35) || (n == 10 && p == 60), "scenario 2 (n, p)");
  warn_unless(sparsity == 0.2 || sparsity == 0.5 || sparsity == 0.8, "scenario 2 sparsity");
  warn_unless(n_partial >= 0 && n_partial <= 2, "scenario 2 partial factor count");
  warn_unless(num_studies == 4, "scenario 2 study count");
  if (n_partial < 0) throw ParameterError("n_partial must be non-negative");
  if (num_studies < 2) throw ParameterError("scenario 2 needs at least two studies");
  if (num_studies < 3 && n_partial > 0) throw ParameterError("partial factors need at least three studies");
  ScenarioConfig config{2, n, p, num_studies, sparsity, n_partial, source.seed()};
  auto cols = specific_columns(num_studies, p);
  for (int j = 0; j < 3; ++j) cols.push_back({all_studies(num_studies), 0, p});
  for (int j = 0; j < n_partial; ++j) cols.push_back({first_studies(num_studies, 2), 0, p});
  return build(config, cols, source);
}

SimResult generate_scenario3(int n_partial, double sparsity, RandomSource& source) {
  warn_unless(n_partial == 0 || n_partial == 1, "scenario 3 partial factor count");
  if (n_partial < 0) throw ParameterError("n_partial must be non-negative");
  ScenarioConfig config{3, 10, 60, 16, sparsity, n_partial, source.seed()};
  auto cols = specific_columns(16, 60);
  for (int j = 0; j < 3; ++j) cols.push_back({all_studies(16), 0, 60});
  for (int j = 0; j < n_partial; ++j) cols.push_back({first_studies(16, 8), 0, 60});
  return build(config, cols, source);
}

SimResult generate_scenario(const ScenarioConfig& config) {
  RandomSource source(config.seed);
  switch (config.scenario) {
    case 1:
      return generate_scenario1(config.sparsity, config.n, config.p, source);
    case 2:
      return generate_scenario2(config.n, config.p, config.sparsity, config.n_partial, source, config.num_studies);
    case 3:
      return generate_scenario3(config.n_partial, config.sparsity, source);
    default:
      throw ParameterError("scenario must be 1, 2 or 3");
  }
}

MultiStudyDataset regenerate_data(const SimTruth& truth, int n, RandomSource& source) {
  MultiStudyDataset data;
  data.feature_names = feature_labels(static_cast<int>(truth.lambda.rows()));
  for (const auto& sigma : truth.sigma) data.studies.push_back(draw_mvn_rows(source, sigma, n));
  return center_dataset(data);
}

void write_truth(const SimTruth& truth, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_matrix_csv(dir / "lambda.csv", truth.lambda);
  write_matrix_csv(dir / "psi.csv", truth.psi);
  nlohmann::json sigma = nlohmann::json::array();
  for (std::size_t s = 0; s < truth.sigma.size(); ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "sigma_%02zu.csv", s + 1);
    write_matrix_csv(dir / name, truth.sigma[s]);
    sigma.push_back(name);
  }
  write_json(dir / "truth.json", {{"tool_version", kToolVersion},
                                  {"config", truth.config.to_json()},
                                  {"indicator", matrix_to_json(truth.indicator.entries())},
                                  {"lambda", "lambda.csv"},
                                  {"psi", "psi.csv"},
                                  {"sigma", sigma}});
}

SimTruth read_truth(const std::filesystem::path& dir) {
  const auto j = read_json(dir / "truth.json");
  SimTruth truth;
  try {
    truth.config = ScenarioConfig::from_json(j.at("config"));
    truth.indicator = IndicatorMatrix(matrix_from_json(j.at("indicator")));
    truth.lambda = read_matrix_csv(dir / j.at("lambda").get<std::string>());
    truth.psi = read_matrix_csv(dir / j.at("psi").get<std::string>());
    for (const auto& name : j.at("sigma")) truth.sigma.push_back(read_matrix_csv(dir / name.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed truth.json in " + dir.string() + ": " + e.what());
  }
  if (truth.lambda.cols() != truth.indicator.num_factors() ||
      static_cast<int>(truth.sigma.size()) != truth.indicator.num_studies()) {
    throw DimensionError("truth bundle dimensions disagree");
  }
  return truth;
}

}  // namespace tetris
