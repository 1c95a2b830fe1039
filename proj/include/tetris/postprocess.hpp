#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "tetris/model.hpp"
#include "tetris/sampler.hpp"

namespace tetris {

// Minimum number of entry flips between two indicator matrices over all column
// permutations. The narrower matrix is padded with all-zero columns, so a real
// column matched to a pad costs its number of members.
int indicator_distance(const IndicatorMatrix& a, const IndicatorMatrix& b);

// Symmetric matrix of pairwise distances, zero diagonal.
struct DistanceMatrix {
  int n = 0;
  Eigen::MatrixXi values;
};

DistanceMatrix pairwise_distances(const std::vector<IndicatorMatrix>& samples, int jobs = 1);

// Smallest value v of the multiset with empirical CDF(v) >= level (type-1
// quantile). Empty input yields 0.
int lower_quantile(std::vector<int> values, double level);

struct PointEstimate {
  IndicatorMatrix indicator;
  int sample_index = 0;   // position in the trace
  int radius = 0;
  int neighbors = 0;      // other samples within the radius
};

// Medoid-style estimate: the sample with the most other samples within
// radius max(quantile_0.05(off-diagonal distances), S). Ties: fewest factors,
// then highest IBP prior, then earliest sample.
PointEstimate select_point_estimate(const std::vector<IndicatorMatrix>& samples, const Hyperparams& hyper,
                                    int jobs = 1);
PointEstimate select_point_estimate(const ChainTrace& trace, const Hyperparams& hyper, int jobs = 1);

struct CredibleBall {
  IndicatorMatrix center;
  double level = 0.95;
  int epsilon_star = 0;
  double coverage = 1.0;
};

// Smallest integer radius whose empirical coverage reaches `level`.
CredibleBall credible_ball_from_distances(const std::vector<int>& distances, const IndicatorMatrix& center,
                                          double level);
CredibleBall credible_ball(const std::vector<IndicatorMatrix>& samples, const IndicatorMatrix& center, double level);
CredibleBall credible_ball(const ChainTrace& trace, const IndicatorMatrix& center, double level);

// Fraction of samples containing at least one column with exactly this pattern.
double ball_membership_fraction(const std::vector<IndicatorMatrix>& samples, const FactorType& pattern);
// The same fraction for every non-identity pattern that occurs in the samples.
std::map<FactorType, double> membership_fractions(const std::vector<IndicatorMatrix>& samples);

struct RecoveredLoadings {
  IndicatorMatrix indicator;
  Eigen::MatrixXd lambda_hat;                             // P x K, indicator column order
  std::map<FactorType, Eigen::MatrixXd> type_covariances;  // elementwise median of per-sample covariances
  std::map<FactorType, Eigen::VectorXd> type_eigenvalues;  // descending, all P
};

// Per factor type: elementwise median over samples of the type's Lambda Lambda^T,
// then the top-q eigenpairs give U_q N_q^{1/2}. Negative eigenvalues are clipped
// at zero; each column's first nonzero entry is made positive.
RecoveredLoadings recover_loadings(const std::vector<Eigen::MatrixXd>& lambda_samples,
                                   const IndicatorMatrix& indicator);
RecoveredLoadings recover_loadings(const ChainTrace& fixed_trace);

struct EstimationReport {
  PointEstimate point;
  CredibleBall ball;
  std::map<FactorType, double> membership;
  std::optional<RecoveredLoadings> loadings;
};

// estimate.json plus lambda_hat.csv and cov_<pattern>.csv when loadings exist.
void write_estimate(const EstimationReport& report, const std::filesystem::path& dir);
EstimationReport read_estimate(const std::filesystem::path& dir);

}  // namespace tetris
