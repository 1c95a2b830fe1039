#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace tetris {

// Seeded stream of random variates. Not shareable between threads: every chain
// or worker owns its own source, derived from a master seed with substream().
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  // Deterministic child source for chain/replicate `index`.
  RandomSource substream(std::uint64_t index) const;

  double uniform();
  double normal();
  std::uint64_t uniform_index(std::uint64_t n);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// Gaussian with mean precision^{-1} * linear_term and covariance precision^{-1}.
struct PrecisionNormalSpec {
  Eigen::MatrixXd precision;
  Eigen::VectorXd linear_term;

  // Throws InvariantError unless square, matching sizes and symmetric to 1e-8
  // (relative Frobenius).
  void validate() const;
};

// Shape-rate parameterization: mean shape / rate.
double draw_gamma(RandomSource& source, double shape, double rate);

std::uint64_t draw_poisson(RandomSource& source, double mean);

// One Cholesky factorization, no explicit inverse.
Eigen::VectorXd draw_precision_normal(RandomSource& source, const PrecisionNormalSpec& spec);

// Column j of the result is a draw with linear term linear_terms.col(j); all
// columns share the precision and its factorization.
Eigen::MatrixXd draw_precision_normal_batch(RandomSource& source, const Eigen::MatrixXd& precision,
                                            const Eigen::MatrixXd& linear_terms);

// Returns 1 with probability odds / (1 + odds). odds may be +inf.
int draw_bernoulli_odds(RandomSource& source, double odds);
int draw_bernoulli_log_odds(RandomSource& source, double log_odds);

// Rows are i.i.d. N(0, covariance).
Eigen::MatrixXd draw_mvn_rows(RandomSource& source, const Eigen::MatrixXd& covariance, int n);

// Draws `count` distinct indices from [0, n) uniformly, returned sorted.
std::vector<int> draw_subset(RandomSource& source, int n, int count);

// Ratio of extreme eigenvalues, used in numerical error messages.
double condition_estimate(const Eigen::MatrixXd& m);

}  // namespace tetris
