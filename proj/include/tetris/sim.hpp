#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tetris/kernels.hpp"
#include "tetris/model.hpp"

namespace tetris {

struct ScenarioConfig {
  int scenario = 2;
  int n = 10;
  int p = 60;
  int num_studies = 4;
  double sparsity = 0.8;  // fraction of eligible loading entries that are zero
  int n_partial = 0;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static ScenarioConfig from_json(const nlohmann::json& j);
};

struct SimTruth {
  Eigen::MatrixXd lambda;          // P x K
  IndicatorMatrix indicator;
  Eigen::MatrixXd psi;             // S x P noise variances
  std::vector<Eigen::MatrixXd> sigma;  // Lambda A_s Lambda^T + diag(psi_s)
  ScenarioConfig config;
};

struct SimResult {
  MultiStudyDataset data;
  SimTruth truth;
};

// Four studies; 4 specific + 3 common + 3 factors shared by studies {1,2}.
// Common loadings live in the first p/2 rows, partial loadings in the last p/2.
SimResult generate_scenario1(double sparsity, int n, int p, RandomSource& source);

// Four studies; 4 specific + 3 common + n_partial factors shared by studies {1,2}.
// Other study counts are accepted for small smoke runs.
SimResult generate_scenario2(int n, int p, double sparsity, int n_partial, RandomSource& source,
                             int num_studies = 4);

// Sixteen studies at (n, p) = (10, 60); 16 specific + 3 common + n_partial
// factors shared by the first eight studies.
SimResult generate_scenario3(int n_partial, double sparsity, RandomSource& source);

// Dispatches on config.scenario with a source seeded from config.seed.
SimResult generate_scenario(const ScenarioConfig& config);

// n i.i.d. rows from N(0, sigma_s) for every study, centered.
MultiStudyDataset regenerate_data(const SimTruth& truth, int n, RandomSource& source);

void write_truth(const SimTruth& truth, const std::filesystem::path& dir);
SimTruth read_truth(const std::filesystem::path& dir);

}  // namespace tetris
