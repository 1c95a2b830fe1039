#include "tetris/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tetris/errors.hpp"

namespace tetris {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

[[noreturn]] void throw_not_pd(const Eigen::MatrixXd& m, const char* what) {
  std::ostringstream msg;
  msg << what << ": matrix of size " << m.rows() << "x" << m.cols()
      << " is not positive definite (condition estimate " << condition_estimate(m) << ")";
  throw NumericalError(msg.str());
}

}  // namespace

RandomSource::RandomSource(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

RandomSource RandomSource::substream(std::uint64_t index) const {
  return RandomSource(splitmix64(seed_ ^ splitmix64(index + 0x632be59bd9b4e019ULL)));
}

double RandomSource::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

double RandomSource::normal() { return normal_(engine_); }

std::uint64_t RandomSource::uniform_index(std::uint64_t n) {
  return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
}

void PrecisionNormalSpec::validate() const {
  if (precision.rows() != precision.cols() || precision.rows() != linear_term.size()) {
    throw InvariantError("precision normal: precision must be square and match the linear term");
  }
  const double norm = precision.norm();
  const double asym = (precision - precision.transpose()).norm();
  if (!(asym <= 1e-8 * std::max(norm, 1.0))) {
    throw InvariantError("precision normal: precision is not symmetric");
  }
}

double draw_gamma(RandomSource& source, double shape, double rate) {
  if (!(shape > 0.0) || !(rate > 0.0) || !std::isfinite(shape) || !std::isfinite(rate)) {
    std::ostringstream msg;
    msg << "gamma: shape and rate must be positive and finite (shape=" << shape << ", rate=" << rate << ")";
    throw ParameterError(msg.str());
  }
  return std::gamma_distribution<double>(shape, 1.0 / rate)(source.engine());
}

std::uint64_t draw_poisson(RandomSource& source, double mean) {
  if (!(mean >= 0.0) || !std::isfinite(mean)) {
    throw ParameterError("poisson: mean must be non-negative and finite");
  }
  if (mean == 0.0) return 0;
  return std::poisson_distribution<std::uint64_t>(mean)(source.engine());
}

Eigen::VectorXd draw_precision_normal(RandomSource& source, const PrecisionNormalSpec& spec) {
  spec.validate();
  return draw_precision_normal_batch(source, spec.precision, spec.linear_term);
}

Eigen::MatrixXd draw_precision_normal_batch(RandomSource& source, const Eigen::MatrixXd& precision,
                                            const Eigen::MatrixXd& linear_terms) {
  const Eigen::LLT<Eigen::MatrixXd> llt(precision);
  if (llt.info() != Eigen::Success) throw_not_pd(precision, "precision normal");
  Eigen::MatrixXd z(linear_terms.rows(), linear_terms.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = source.normal();
  }
  // mean = P^{-1} b; noise = L^{-T} z has covariance P^{-1}.
  Eigen::MatrixXd out = llt.solve(linear_terms);
  out += llt.matrixU().solve(z);
  return out;
}

int draw_bernoulli_log_odds(RandomSource& source, double log_odds) {
  if (std::isnan(log_odds)) throw NumericalError("bernoulli: NaN odds");
  if (log_odds == std::numeric_limits<double>::infinity()) return 1;
  if (log_odds == -std::numeric_limits<double>::infinity()) return 0;
  // P(1) = 1 / (1 + exp(-log_odds)); compare in log space to avoid overflow.
  const double u = source.uniform();
  const double log_p1 = -std::log1p(std::exp(-std::abs(log_odds))) - (log_odds < 0 ? -log_odds : 0.0);
  return std::log(u) < log_p1 ? 1 : 0;
}

int draw_bernoulli_odds(RandomSource& source, double odds) {
  if (std::isnan(odds)) throw NumericalError("bernoulli: NaN odds");
  if (odds < 0.0) throw ParameterError("bernoulli: odds must be non-negative");
  if (odds == 0.0) return 0;
  return draw_bernoulli_log_odds(source, std::log(odds));
}

Eigen::MatrixXd draw_mvn_rows(RandomSource& source, const Eigen::MatrixXd& covariance, int n) {
  const Eigen::LLT<Eigen::MatrixXd> llt(covariance);
  if (llt.info() != Eigen::Success) throw_not_pd(covariance, "multivariate normal");
  Eigen::MatrixXd z(n, covariance.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = source.normal();
  }
  return z * llt.matrixU();
}

std::vector<int> draw_subset(RandomSource& source, int n, int count) {
  if (count < 0 || count > n) throw ParameterError("subset: count out of range");
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates.
  for (int i = 0; i < count; ++i) {
    const auto j = i + static_cast<int>(source.uniform_index(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  return idx;
}

double condition_estimate(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const auto& ev = es.eigenvalues();
  const double lo = ev.cwiseAbs().minCoeff();
  const double hi = ev.cwiseAbs().maxCoeff();
  return lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
}

}  // namespace tetris
