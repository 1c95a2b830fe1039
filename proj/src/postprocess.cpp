#include "tetris/postprocess.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <map>
#include <thread>

#include "tetris/errors.hpp"
#include "tetris/hungarian.hpp"
#include "tetris/io.hpp"

namespace tetris {

namespace {

std::vector<std::uint64_t> column_masks(const IndicatorMatrix& m) {
  std::vector<std::uint64_t> out(static_cast<std::size_t>(m.num_factors()));
  for (int k = 0; k < m.num_factors(); ++k) out[static_cast<std::size_t>(k)] = m.column_type(k).bits;
  return out;
}

int masks_distance(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
  const auto n = static_cast<Eigen::Index>(std::max(a.size(), b.size()));
  Eigen::MatrixXi cost(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::uint64_t ai = i < static_cast<Eigen::Index>(a.size()) ? a[static_cast<std::size_t>(i)] : 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const std::uint64_t bj = j < static_cast<Eigen::Index>(b.size()) ? b[static_cast<std::size_t>(j)] : 0;
      cost(i, j) = std::popcount(ai ^ bj);
    }
  }
  long long total = 0;
  solve_assignment(cost, &total);
  return static_cast<int>(total);
}

// Fills the upper triangle of `out` by calling fn(i, j) for i < j.
template <typename Fn>
void parallel_pairs(int n, int jobs, Eigen::MatrixXi& out, Fn fn) {
  out = Eigen::MatrixXi::Zero(n, n);
  std::atomic<int> next_row{0};
  auto worker = [&] {
    for (int i = next_row++; i < n; i = next_row++) {
      for (int j = i + 1; j < n; ++j) {
        const int d = fn(i, j);
        out(i, j) = d;
        out(j, i) = d;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < std::min(std::max(jobs, 1), n); ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
}

std::string covariance_file(const FactorType& t) { return "cov_" + t.to_string() + ".csv"; }

}  // namespace

int indicator_distance(const IndicatorMatrix& a, const IndicatorMatrix& b) {
  if (a.num_studies() != b.num_studies()) throw DimensionError("indicator distance: study counts differ");
  return masks_distance(column_masks(a), column_masks(b));
}

DistanceMatrix pairwise_distances(const std::vector<IndicatorMatrix>& samples, int jobs) {
  std::vector<std::vector<std::uint64_t>> masks;
  masks.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.num_studies() != samples.front().num_studies()) throw DimensionError("pairwise distances: study counts differ");
    masks.push_back(column_masks(s));
  }
  DistanceMatrix out;
  out.n = static_cast<int>(samples.size());
  parallel_pairs(out.n, jobs, out.values,
                 [&](int i, int j) { return masks_distance(masks[static_cast<std::size_t>(i)], masks[static_cast<std::size_t>(j)]); });
  return out;
}

int lower_quantile(std::vector<int> values, double level) {
  if (values.empty()) return 0;
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    // CDF is evaluated only at the last copy of each value.
    if (i + 1 < values.size() && values[i + 1] == values[i]) continue;
    if (static_cast<double>(i + 1) / n >= level) return values[i];
  }
  return values.back();
}

PointEstimate select_point_estimate(const std::vector<IndicatorMatrix>& samples, const Hyperparams& hyper, int jobs) {
  if (samples.empty()) throw InvariantError("point estimate: empty trace");
  const int s_count = samples.front().num_studies();

  // Distances only depend on the multiset of columns: compute them once per
  // distinct sorted column set.
  std::map<std::vector<std::uint64_t>, int> ids;
  std::vector<int> unique_of(samples.size());
  std::vector<std::vector<std::uint64_t>> unique_masks;
  std::vector<long long> multiplicity;
  for (std::size_t m = 0; m < samples.size(); ++m) {
    if (samples[m].num_studies() != s_count) throw DimensionError("point estimate: study counts differ");
    auto key = column_masks(samples[m]);
    std::sort(key.begin(), key.end());
    const auto [it, inserted] = ids.try_emplace(key, static_cast<int>(unique_masks.size()));
    if (inserted) {
      unique_masks.push_back(key);
      multiplicity.push_back(0);
    }
    unique_of[m] = it->second;
    ++multiplicity[static_cast<std::size_t>(it->second)];
  }
  const int u = static_cast<int>(unique_masks.size());
  Eigen::MatrixXi dist;
  parallel_pairs(u, jobs, dist, [&](int i, int j) {
    return masks_distance(unique_masks[static_cast<std::size_t>(i)], unique_masks[static_cast<std::size_t>(j)]);
  });

  // Off-diagonal pair distances as a weighted multiset (each unordered pair once;
  // counting ordered pairs doubles every weight and leaves the quantile unchanged).
  std::map<int, long long> pair_counts;
  long long total_pairs = 0;
  for (int i = 0; i < u; ++i) {
    const long long mi = multiplicity[static_cast<std::size_t>(i)];
    if (mi > 1) pair_counts[0] += mi * (mi - 1) / 2;
    for (int j = i + 1; j < u; ++j) pair_counts[dist(i, j)] += mi * multiplicity[static_cast<std::size_t>(j)];
  }
  for (const auto& [d, c] : pair_counts) total_pairs += c;
  int quantile = 0;
  long long cumulative = 0;
  for (const auto& [d, c] : pair_counts) {
    cumulative += c;
    quantile = d;
    if (static_cast<double>(cumulative) / static_cast<double>(total_pairs) >= 0.05) break;
  }
  const int radius = std::max(quantile, s_count);

  std::vector<long long> neighbors(static_cast<std::size_t>(u), 0);
  for (int i = 0; i < u; ++i) {
    for (int j = 0; j < u; ++j) {
      if (dist(i, j) <= radius) neighbors[static_cast<std::size_t>(i)] += multiplicity[static_cast<std::size_t>(j)];
    }
    neighbors[static_cast<std::size_t>(i)] -= 1;  // the sample itself
  }

  std::size_t best = 0;
  double best_prior = ibp_log_prior(samples[0], hyper.alpha, hyper.beta);
  for (std::size_t m = 1; m < samples.size(); ++m) {
    const long long nb = neighbors[static_cast<std::size_t>(unique_of[m])];
    const long long nb_best = neighbors[static_cast<std::size_t>(unique_of[best])];
    if (nb < nb_best) continue;
    if (nb == nb_best) {
      const int k = samples[m].num_factors();
      const int k_best = samples[best].num_factors();
      if (k > k_best) continue;
      if (k == k_best) {
        const double prior = ibp_log_prior(samples[m], hyper.alpha, hyper.beta);
        if (prior <= best_prior) continue;
        best = m;
        best_prior = prior;
        continue;
      }
    }
    best = m;
    best_prior = ibp_log_prior(samples[m], hyper.alpha, hyper.beta);
  }

  PointEstimate out;
  out.indicator = samples[best];
  out.sample_index = static_cast<int>(best);
  out.radius = radius;
  out.neighbors = static_cast<int>(neighbors[static_cast<std::size_t>(unique_of[best])]);
  return out;
}

PointEstimate select_point_estimate(const ChainTrace& trace, const Hyperparams& hyper, int jobs) {
  return select_point_estimate(trace.indicator_samples, hyper, jobs);
}

CredibleBall credible_ball_from_distances(const std::vector<int>& distances, const IndicatorMatrix& center,
                                          double level) {
  if (!(level > 0.0 && level < 1.0)) throw ParameterError("credible ball level must lie in (0, 1)");
  if (distances.empty()) throw InvariantError("credible ball: empty trace");
  std::vector<int> sorted = distances;
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  CredibleBall ball;
  ball.center = center;
  ball.level = level;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (i + 1 < sorted.size() && sorted[i + 1] == sorted[i]) continue;
    const double coverage = static_cast<double>(i + 1) / n;
    if (coverage >= level) {
      ball.epsilon_star = sorted[i];
      ball.coverage = coverage;
      return ball;
    }
  }
  ball.epsilon_star = sorted.back();
  ball.coverage = 1.0;
  return ball;
}

CredibleBall credible_ball(const std::vector<IndicatorMatrix>& samples, const IndicatorMatrix& center, double level) {
  std::vector<int> distances;
  distances.reserve(samples.size());
  std::map<std::vector<std::uint64_t>, int> cache;
  for (const auto& s : samples) {
    auto key = column_masks(s);
    std::sort(key.begin(), key.end());
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, indicator_distance(s, center)).first;
    distances.push_back(it->second);
  }
  return credible_ball_from_distances(distances, center, level);
}

CredibleBall credible_ball(const ChainTrace& trace, const IndicatorMatrix& center, double level) {
  return credible_ball(trace.indicator_samples, center, level);
}

double ball_membership_fraction(const std::vector<IndicatorMatrix>& samples, const FactorType& pattern) {
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : samples) {
    for (int k = 0; k < s.num_factors(); ++k) {
      if (s.column_type(k) == pattern) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

std::map<FactorType, double> membership_fractions(const std::vector<IndicatorMatrix>& samples) {
  std::map<FactorType, long long> hits;
  for (const auto& s : samples) {
    std::vector<FactorType> seen;
    for (int k = s.num_studies(); k < s.num_factors(); ++k) seen.push_back(s.column_type(k));
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    for (const auto& t : seen) ++hits[t];
  }
  std::map<FactorType, double> out;
  for (const auto& [t, c] : hits) out[t] = static_cast<double>(c) / static_cast<double>(samples.size());
  return out;
}

RecoveredLoadings recover_loadings(const std::vector<Eigen::MatrixXd>& lambda_samples,
                                   const IndicatorMatrix& indicator) {
  if (lambda_samples.empty()) throw InvariantError("recover loadings: no loading samples");
  indicator.validate();
  const auto p = lambda_samples.front().rows();
  const auto k = lambda_samples.front().cols();
  for (const auto& l : lambda_samples) {
    if (l.rows() != p || l.cols() != k) throw DimensionError("recover loadings: samples have different shapes");
  }
  if (k != indicator.num_factors()) throw DimensionError("recover loadings: indicator width differs from loadings");

  RecoveredLoadings out;
  out.indicator = indicator;
  out.lambda_hat = Eigen::MatrixXd::Zero(p, k);
  std::map<FactorType, std::vector<int>> columns;
  for (int j = 0; j < k; ++j) columns[indicator.column_type(j)].push_back(j);

  const auto m = lambda_samples.size();
  std::vector<double> cell(m);
  for (const auto& [type, cols] : columns) {
    std::vector<Eigen::MatrixXd> covs;
    covs.reserve(m);
    for (const auto& l : lambda_samples) {
      Eigen::MatrixXd sub(p, static_cast<Eigen::Index>(cols.size()));
      for (std::size_t c = 0; c < cols.size(); ++c) sub.col(static_cast<Eigen::Index>(c)) = l.col(cols[c]);
      covs.push_back(sub * sub.transpose());
    }
    Eigen::MatrixXd median(p, p);
    for (Eigen::Index r = 0; r < p; ++r) {
      for (Eigen::Index c = r; c < p; ++c) {
        for (std::size_t i = 0; i < m; ++i) cell[i] = covs[i](r, c);
        auto mid = cell.begin() + static_cast<std::ptrdiff_t>(m / 2);
        std::nth_element(cell.begin(), mid, cell.end());
        double value = *mid;
        if (m % 2 == 0) value = 0.5 * (value + *std::max_element(cell.begin(), mid));
        median(r, c) = value;
        median(c, r) = value;
      }
    }
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(median);
    if (es.info() != Eigen::Success) throw NumericalError("recover loadings: eigendecomposition failed");
    const Eigen::VectorXd values = es.eigenvalues().reverse();
    const Eigen::MatrixXd vectors = es.eigenvectors().rowwise().reverse();
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const auto idx = static_cast<Eigen::Index>(c);
      Eigen::VectorXd v = vectors.col(idx) * std::sqrt(std::max(values(idx), 0.0));
      for (Eigen::Index r = 0; r < p; ++r) {
        if (std::abs(v(r)) > 1e-12) {
          if (v(r) < 0) v = -v;
          break;
        }
      }
      out.lambda_hat.col(cols[c]) = v;
    }
    out.type_covariances[type] = median;
    out.type_eigenvalues[type] = values;
  }
  return out;
}

RecoveredLoadings recover_loadings(const ChainTrace& fixed_trace) {
  if (!fixed_trace.config.fixed_indicator) throw InvariantError("recover loadings: trace was not run with a fixed indicator");
  return recover_loadings(fixed_trace.lambda_samples, *fixed_trace.config.fixed_indicator);
}

void write_estimate(const EstimationReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["tool_version"] = kToolVersion;
  j["point_estimate"] = matrix_to_json(report.point.indicator.entries());
  j["sample_index"] = report.point.sample_index;
  j["radius"] = report.point.radius;
  j["neighbors"] = report.point.neighbors;
  nlohmann::json types = nlohmann::json::array();
  for (int k = 0; k < report.point.indicator.num_factors(); ++k) {
    types.push_back(report.point.indicator.column_type(k).to_string());
  }
  j["factor_types"] = types;
  j["credible_ball"] = {{"level", report.ball.level},
                        {"epsilon_star", report.ball.epsilon_star},
                        {"coverage", report.ball.coverage}};
  nlohmann::json membership = nlohmann::json::object();
  for (const auto& [t, f] : report.membership) membership[t.to_string()] = f;
  j["membership_fractions"] = membership;
  if (report.loadings) {
    const auto& rl = *report.loadings;
    write_matrix_csv(dir / "lambda_hat.csv", rl.lambda_hat);
    nlohmann::json cov = nlohmann::json::object();
    for (const auto& [t, c] : rl.type_covariances) {
      write_matrix_csv(dir / covariance_file(t), c);
      cov[t.to_string()] = covariance_file(t);
    }
    j["loadings"] = {{"lambda_hat", "lambda_hat.csv"},
                     {"indicator", matrix_to_json(rl.indicator.entries())},
                     {"type_covariances", cov}};
  }
  write_json(dir / "estimate.json", j);
}

EstimationReport read_estimate(const std::filesystem::path& dir) {
  const auto j = read_json(dir / "estimate.json");
  EstimationReport report;
  try {
    report.point.indicator = IndicatorMatrix(matrix_from_json(j.at("point_estimate")));
    report.point.sample_index = j.at("sample_index").get<int>();
    report.point.radius = j.at("radius").get<int>();
    report.point.neighbors = j.at("neighbors").get<int>();
    const auto& ball = j.at("credible_ball");
    report.ball.center = report.point.indicator;
    report.ball.level = ball.at("level").get<double>();
    report.ball.epsilon_star = ball.at("epsilon_star").get<int>();
    report.ball.coverage = ball.at("coverage").get<double>();
    for (const auto& [key, value] : j.at("membership_fractions").items()) {
      report.membership[FactorType::parse(key)] = value.get<double>();
    }
    if (j.contains("loadings")) {
      const auto& l = j["loadings"];
      RecoveredLoadings rl;
      rl.indicator = IndicatorMatrix(matrix_from_json(l.at("indicator")));
      rl.lambda_hat = read_matrix_csv(dir / l.at("lambda_hat").get<std::string>());
      for (const auto& [key, value] : l.at("type_covariances").items()) {
        rl.type_covariances[FactorType::parse(key)] = read_matrix_csv(dir / value.get<std::string>());
      }
      if (rl.lambda_hat.cols() != rl.indicator.num_factors()) {
        throw DimensionError("estimate: lambda_hat width differs from its indicator");
      }
      report.loadings = std::move(rl);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed estimate.json in " + dir.string() + ": " + e.what());
  }
  return report;
}

}  // namespace tetris
