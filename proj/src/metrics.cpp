#include "tetris/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "tetris/errors.hpp"

namespace tetris {

namespace {

void require_symmetric_psd(const Eigen::MatrixXd& m, const char* which) {
  const double scale = std::max(m.norm(), 1.0);
  if ((m - m.transpose()).norm() > 1e-8 * scale) {
    throw InvariantError(std::string("RV coefficient: ") + which + " is not symmetric");
  }
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-8 * scale) {
    throw InvariantError(std::string("RV coefficient: ") + which + " is not positive semi-definite");
  }
}

}  // namespace

double rv_coefficient(const Eigen::MatrixXd& s, const Eigen::MatrixXd& t) {
  if (s.rows() != t.rows() || s.cols() != t.cols() || s.rows() != s.cols()) {
    throw DimensionError("RV coefficient: matrices must be square with equal dimensions");
  }
  require_symmetric_psd(s, "first matrix");
  require_symmetric_psd(t, "second matrix");
  const double ss = s.squaredNorm();
  const double tt = t.squaredNorm();
  if (ss == 0.0 || tt == 0.0) throw InvariantError("RV coefficient: undefined for a zero matrix");
  const double st = (s.array() * t.array()).sum();
  return std::clamp(st / std::sqrt(ss * tt), 0.0, 1.0);
}

Eigen::MatrixXd reconstruct_study_covariance(const Eigen::MatrixXd& lambda, const IndicatorMatrix& indicator, int s,
                                             const std::optional<Eigen::VectorXd>& psi_hat) {
  if (lambda.cols() != indicator.num_factors()) throw DimensionError("reconstruction: loadings and indicator widths differ");
  if (s < 0 || s >= indicator.num_studies()) throw DimensionError("reconstruction: study index out of range");
  const Eigen::VectorXd a = indicator.row_as_diagonal(s);
  Eigen::MatrixXd sigma = lambda * a.asDiagonal() * lambda.transpose();
  sigma = 0.5 * (sigma + sigma.transpose());
  if (psi_hat) {
    if (psi_hat->size() != lambda.rows()) throw DimensionError("reconstruction: noise vector has the wrong length");
    sigma.diagonal() += *psi_hat;
  }
  return sigma;
}

Eigen::MatrixXd loading_covariance(const Eigen::MatrixXd& lambda, const IndicatorMatrix& indicator,
                                   const std::optional<FactorType>& type) {
  if (lambda.cols() != indicator.num_factors()) throw DimensionError("loading covariance: widths differ");
  Eigen::VectorXd select = Eigen::VectorXd::Ones(lambda.cols());
  if (type) {
    int hits = 0;
    for (int k = 0; k < indicator.num_factors(); ++k) {
      const bool match = indicator.column_type(k) == *type;
      select(k) = match ? 1.0 : 0.0;
      hits += match ? 1 : 0;
    }
    if (hits == 0) throw InvariantError("loading covariance: no columns of type " + type->to_string());
  }
  Eigen::MatrixXd c = lambda * select.asDiagonal() * lambda.transpose();
  return 0.5 * (c + c.transpose());
}

double leading_block_mass_fraction(const Eigen::MatrixXd& m, int size) {
  const double total = m.squaredNorm();
  if (total == 0.0) return 0.0;
  return m.topLeftCorner(size, size).squaredNorm() / total;
}

nlohmann::json EvaluationReport::to_json() const {
  nlohmann::json j;
  j["tool_version"] = kToolVersion;
  j["rv_full_loading"] = rv_full_loading;
  j["rv_common_loading"] = rv_common_loading ? nlohmann::json(*rv_common_loading) : nlohmann::json(nullptr);
  nlohmann::json types = nlohmann::json::object();
  for (const auto& [t, v] : rv_per_type) types[t.to_string()] = v;
  j["rv_per_type"] = types;
  j["rv_study_covariances"] = rv_study_covariances;
  j["truth_config"] = truth_config.to_json();
  return j;
}

EvaluationReport EvaluationReport::from_json(const nlohmann::json& j) {
  EvaluationReport r;
  r.rv_full_loading = j.at("rv_full_loading").get<double>();
  if (!j.at("rv_common_loading").is_null()) r.rv_common_loading = j["rv_common_loading"].get<double>();
  for (const auto& [key, value] : j.at("rv_per_type").items()) r.rv_per_type[FactorType::parse(key)] = value.get<double>();
  r.rv_study_covariances = j.at("rv_study_covariances").get<std::vector<double>>();
  r.truth_config = ScenarioConfig::from_json(j.at("truth_config"));
  return r;
}

CsvTable EvaluationReport::tidy(const std::string& replicate) const {
  CsvTable t;
  t.header = {"replicate", "metric", "target", "value"};
  t.rows.push_back({replicate, "rv_full_loading", "all", format_double(rv_full_loading)});
  if (rv_common_loading) t.rows.push_back({replicate, "rv_common_loading", "common", format_double(*rv_common_loading)});
  for (const auto& [type, v] : rv_per_type) t.rows.push_back({replicate, "rv_type_loading", type.to_string(), format_double(v)});
  for (std::size_t s = 0; s < rv_study_covariances.size(); ++s) {
    t.rows.push_back({replicate, "rv_study_covariance", "study_" + std::to_string(s + 1), format_double(rv_study_covariances[s])});
  }
  return t;
}

EvaluationReport evaluate_run(const Eigen::MatrixXd& lambda_hat, const IndicatorMatrix& indicator_hat,
                              const SimTruth& truth) {
  if (lambda_hat.rows() != truth.lambda.rows()) throw DimensionError("evaluation: feature counts differ");
  if (indicator_hat.num_studies() != truth.indicator.num_studies()) throw DimensionError("evaluation: study counts differ");
  EvaluationReport report;
  report.truth_config = truth.config;
  report.rv_full_loading = rv_coefficient(loading_covariance(lambda_hat, indicator_hat),
                                          loading_covariance(truth.lambda, truth.indicator));
  std::vector<FactorType> estimated_types;
  for (int k = 0; k < indicator_hat.num_factors(); ++k) estimated_types.push_back(indicator_hat.column_type(k));
  for (int k = 0; k < truth.indicator.num_factors(); ++k) {
    const FactorType type = truth.indicator.column_type(k);
    if (report.rv_per_type.count(type)) continue;
    if (std::find(estimated_types.begin(), estimated_types.end(), type) == estimated_types.end()) continue;
    const Eigen::MatrixXd est = loading_covariance(lambda_hat, indicator_hat, type);
    const Eigen::MatrixXd tru = loading_covariance(truth.lambda, truth.indicator, type);
    if (est.squaredNorm() == 0.0 || tru.squaredNorm() == 0.0) continue;
    report.rv_per_type[type] = rv_coefficient(est, tru);
    if (type.is_common()) report.rv_common_loading = report.rv_per_type[type];
  }
  for (int s = 0; s < truth.indicator.num_studies(); ++s) {
    report.rv_study_covariances.push_back(
        rv_coefficient(reconstruct_study_covariance(lambda_hat, indicator_hat, s), truth.sigma[static_cast<std::size_t>(s)]));
  }
  return report;
}

}  // namespace tetris
