#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tetris/io.hpp"
#include "tetris/model.hpp"
#include "tetris/sim.hpp"

namespace tetris {

// Tr(S^T T) / sqrt(Tr(S^T S) Tr(T^T T)) for symmetric PSD inputs. A zero matrix
// on either side is rejected as degenerate input.
double rv_coefficient(const Eigen::MatrixXd& s, const Eigen::MatrixXd& t);

// Lambda diag(A_s) Lambda^T, plus diag(psi_hat) when given.
Eigen::MatrixXd reconstruct_study_covariance(const Eigen::MatrixXd& lambda, const IndicatorMatrix& indicator, int s,
                                             const std::optional<Eigen::VectorXd>& psi_hat = std::nullopt);

// Lambda~ Lambda~^T over the columns of one factor type, or all columns when
// `type` is empty.
Eigen::MatrixXd loading_covariance(const Eigen::MatrixXd& lambda, const IndicatorMatrix& indicator,
                                   const std::optional<FactorType>& type = std::nullopt);

// Share of the squared Frobenius norm in the leading size x size block.
double leading_block_mass_fraction(const Eigen::MatrixXd& m, int size);

struct EvaluationReport {
  double rv_full_loading = 0.0;
  std::optional<double> rv_common_loading;
  std::map<FactorType, double> rv_per_type;
  std::vector<double> rv_study_covariances;
  ScenarioConfig truth_config;

  nlohmann::json to_json() const;
  static EvaluationReport from_json(const nlohmann::json& j);
  // One row per metric: replicate, metric, target, value.
  CsvTable tidy(const std::string& replicate) const;
};

// Estimated study covariances Lambda^ A^_s Lambda^^T are compared with the
// generating Sigma_s (noise included); type RVs are reported for types present
// in both the estimate and the truth.
EvaluationReport evaluate_run(const Eigen::MatrixXd& lambda_hat, const IndicatorMatrix& indicator_hat,
                              const SimTruth& truth);

}  // namespace tetris
