#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "tetris/errors.hpp"
#include "tetris/sampler.hpp"

using namespace tetris;

namespace {

MultiStudyDataset noise_data(int s_count, int p, int n, std::uint64_t seed) {
  RandomSource src(seed);
  MultiStudyDataset d;
  for (int j = 0; j < p; ++j) d.feature_names.push_back("f" + std::to_string(j));
  for (int s = 0; s < s_count; ++s) {
    Eigen::MatrixXd x(n, p);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < p; ++j) x(i, j) = src.normal();
    d.studies.push_back(x);
  }
  return center_dataset(d);
}

IndicatorMatrix with_free(int s_count, const std::vector<std::vector<int>>& columns) {
  IndicatorMatrix a = IndicatorMatrix::identity(s_count);
  for (const auto& members : columns) a.append_column(FactorType::from_studies(s_count, members));
  return a;
}

ModelState state_for(const MultiStudyDataset& d, const IndicatorMatrix& a, std::uint64_t seed) {
  RandomSource src(seed);
  return initialize_state(d, Hyperparams{}, SharingMode::free, a, 30, src);
}

// One-feature, one-subject-per-study model with every parameter set by hand.
struct Scalar {
  MultiStudyDataset data;
  ModelState state;
};

Scalar scalar_model(int s_count, const IndicatorMatrix& a, const std::vector<double>& x) {
  Scalar m;
  m.data.feature_names = {"f"};
  for (int s = 0; s < s_count; ++s) m.data.studies.push_back(Eigen::MatrixXd::Constant(1, 1, x[static_cast<std::size_t>(s)]));
  m.data.centered = true;
  const int k = a.num_factors();
  m.state.indicator = a;
  m.state.lambda = Eigen::MatrixXd(1, k);
  for (int j = 0; j < k; ++j) m.state.lambda(0, j) = 0.4 + 0.3 * j;
  for (int s = 0; s < s_count; ++s) {
    Eigen::MatrixXd l(1, k);
    for (int j = 0; j < k; ++j) l(0, j) = 0.9 - 0.35 * j + 0.2 * s;
    m.state.scores.push_back(l);
  }
  m.state.psi_inv = Eigen::MatrixXd::Constant(s_count, 1, 2.5);
  m.state.omega = Eigen::MatrixXd::Constant(1, k, 1.3);
  m.state.delta = Eigen::VectorXd::Constant(k, 1.1);
  return m;
}

double log_normal_density(double x, double mean, double precision) {
  return 0.5 * std::log(precision / (2 * M_PI)) - 0.5 * precision * (x - mean) * (x - mean);
}

// Kolmogorov-Smirnov distance to the standard normal.
double ks_standard_normal(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double d = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double f = 0.5 * std::erfc(-v[i] / std::sqrt(2.0));
    d = std::max({d, std::abs(f - i / n), std::abs(f - (i + 1) / n)});
  }
  return d;
}

}  // namespace

TEST_SUITE("sampler") {

TEST_CASE("indicator update is a no-op without free columns") {
  const auto d = noise_data(3, 4, 5, 1);
  ModelState st = state_for(d, IndicatorMatrix::identity(3), 2);
  const ModelState before = st;
  RandomSource src(3);
  update_indicators(st, d, Hyperparams{}, SharingMode::free, src);
  CHECK(st.indicator == before.indicator);
  CHECK(st.lambda == before.lambda);
}

TEST_CASE("indicator update leaves the identity block and sole-owner entries alone") {
  const auto d = noise_data(3, 6, 4, 4);
  ModelState st = state_for(d, with_free(3, {{1}, {0, 2}, {0, 1, 2}}), 5);
  RandomSource src(6);
  for (int it = 0; it < 200; ++it) {
    update_indicators(st, d, Hyperparams{}, SharingMode::free, src);
    CHECK(st.indicator.entries().leftCols(3) == Eigen::MatrixXi::Identity(3, 3));
    CHECK(st.indicator(1, 3) == 1);  // column 3 belongs to study 1 alone
    CHECK(st.indicator(0, 3) == 0);
    CHECK(st.indicator(2, 3) == 0);
  }
}

TEST_CASE("indicator likelihood ratio in a scalar model") {
  const IndicatorMatrix a = with_free(2, {{0}});
  Scalar m = scalar_model(2, a, {0.7, -1.2});
  const auto& lam = m.state.lambda;
  for (int s : {0, 1}) {
    const auto& l = m.state.scores[static_cast<std::size_t>(s)];
    const double x = m.data.studies[static_cast<std::size_t>(s)](0, 0);
    const double own = lam(0, s) * l(0, s);
    const double with = log_normal_density(x, own + lam(0, 2) * l(0, 2), 2.5);
    const double without = log_normal_density(x, own, 2.5);
    CHECK(indicator_log_likelihood_ratio(m.state, m.data, s, 2) == doctest::Approx(with - without).epsilon(1e-12));
  }
}

TEST_CASE("indicator Gibbs frequency matches prior odds times likelihood ratio") {
  const IndicatorMatrix a = with_free(2, {{0}});
  Scalar m = scalar_model(2, a, {0.7, 0.3});
  Hyperparams h;
  h.beta = 0.6;
  const double lr = indicator_log_likelihood_ratio(m.state, m.data, 1, 2);
  const double odds = (1.0 / (h.beta + 2 - 1 - 1)) * std::exp(lr);
  RandomSource src(7);
  int ones = 0;
  const int n = 40000;
  for (int t = 0; t < n; ++t) {
    ModelState st = m.state;
    update_indicators(st, m.data, h, SharingMode::free, src);
    ones += st.indicator(1, 2);
  }
  const double p = odds / (1 + odds);
  CHECK(std::abs(ones / static_cast<double>(n) - p) < 5 * std::sqrt(p * (1 - p) / n));
}

TEST_CASE("constrained sharing never produces partial columns") {
  const auto d = noise_data(4, 5, 4, 8);
  ModelState st = state_for(d, with_free(4, {{0, 1, 2, 3}, {2}}), 9);
  Hyperparams h;
  SweepOptions opt;
  opt.sharing = SharingMode::common_and_specific_only;
  RandomSource src(10);
  for (int it = 0; it < 300; ++it) {
    gibbs_sweep(st, d, h, opt, src);
    for (int k = 4; k < st.num_factors(); ++k) {
      const int m = st.indicator.column_sum(k);
      CHECK((m == 1 || m == 4));
    }
  }
}

TEST_CASE("replacement move ratio agrees with quadrature in a scalar model") {
  // S = 1, P = 1, n = 1, one new column: the ratio is the marginal likelihood
  // with the new loading integrated against its N(0, 1/(omega tau)) prior
  // over the likelihood without it.
  const IndicatorMatrix a = IndicatorMatrix::identity(1);
  Scalar m = scalar_model(1, a, {1.7});
  BirthProposal prop;
  prop.study = 0;
  prop.num_new = 1;
  prop.new_positions = {0};
  prop.delta_new = Eigen::VectorXd::Constant(1, 2.4);
  prop.omega_new = Eigen::MatrixXd::Constant(1, 1, 0.8);
  prop.scores_new = {Eigen::MatrixXd::Constant(1, 1, -1.3)};

  const double x = 1.7;
  const double psi = m.state.psi_inv(0, 0);
  const double fit = m.state.lambda(0, 0) * m.state.scores[0](0, 0);
  const double prior_prec = 0.8 * m.state.delta(0) * 2.4;
  const double l_new = -1.3;
  // Trapezoid rule on a wide grid.
  const double sd = 1.0 / std::sqrt(prior_prec);
  const int steps = 200000;
  const double lo = -40 * sd, hi = 40 * sd, h = (hi - lo) / steps;
  double integral = 0.0;
  for (int i = 0; i <= steps; ++i) {
    const double lam = lo + i * h;
    const double w = (i == 0 || i == steps) ? 0.5 : 1.0;
    integral += w * std::exp(log_normal_density(x, fit + lam * l_new, psi) + log_normal_density(lam, 0.0, prior_prec));
  }
  integral *= h;
  const double expected = std::log(integral) - log_normal_density(x, fit, psi);
  CHECK(birth_log_ratio(m.state, m.data, prop) == doctest::Approx(expected).epsilon(1e-7));
}

TEST_CASE("replacement move ratio tends to one as the noise variance grows") {
  const auto d = noise_data(2, 5, 6, 11);
  ModelState st = state_for(d, with_free(2, {{0}, {0}}), 12);
  st.psi_inv.setConstant(1e-12);
  RandomSource src(13);
  Hyperparams h;
  h.alpha = 3.0;
  int tested = 0;
  for (int t = 0; t < 50; ++t) {
    const BirthProposal prop = draw_birth_proposal(st, d, h, 0, src);
    CHECK(std::abs(birth_log_ratio(st, d, prop)) < 1e-6);
    tested += prop.num_new > 0;
  }
  CHECK(tested > 0);
}

TEST_CASE("replacement move with nothing to replace leaves the state alone") {
  const auto d = noise_data(2, 3, 4, 14);
  ModelState st = state_for(d, with_free(2, {{0, 1}}), 15);
  Hyperparams h;
  h.alpha = 1e-9;  // k_new is 0 with overwhelming probability
  RandomSource src(16);
  const ModelState before = st;
  const BirthOutcome out = propose_new_factors(st, d, h, 0, 30, src);
  CHECK_FALSE(out.changed);
  CHECK(st.indicator == before.indicator);
  CHECK(st.lambda == before.lambda);
}

TEST_CASE("pruning empty columns") {
  const auto d = noise_data(2, 3, 4, 17);
  ModelState st = state_for(d, with_free(2, {{0}, {1}, {0, 1}}), 18);
  ModelState same = st;
  prune_empty_factors(same);
  CHECK(same.num_factors() == 5);

  st.indicator.set(1, 3, 0);  // empty the second free column (index 3)
  const Eigen::VectorXd delta = st.delta;
  const Eigen::MatrixXd lambda = st.lambda;
  prune_empty_factors(st);
  CHECK(st.num_factors() == 4);
  CHECK(st.lambda.cols() == 4);
  CHECK(st.omega.cols() == 4);
  CHECK(st.delta.size() == 4);
  CHECK(st.scores[0].cols() == 4);
  CHECK(st.indicator.num_factors() == 4);
  CHECK(st.lambda.col(3) == lambda.col(4));
  const Eigen::VectorXd tau = st.tau();
  double running = 1.0;
  int j = 0;
  for (int k = 0; k < 5; ++k) {
    if (k == 3) continue;
    running *= delta(k);
    CHECK(tau(j++) == doctest::Approx(running).epsilon(1e-14));
  }
}

TEST_CASE("loadings: zero data under strong shrinkage stay near zero") {
  auto d = noise_data(2, 6, 5, 19);
  for (auto& x : d.studies) x.setZero();
  ModelState st = state_for(d, with_free(2, {{0, 1}}), 20);
  st.delta.setConstant(1e4);
  RandomSource src(21);
  update_loadings(st, d, src);
  CHECK(st.lambda.cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("loadings: conjugate regression in one dimension") {
  MultiStudyDataset d;
  d.feature_names = {"f"};
  Eigen::MatrixXd x(4, 1);
  x << 1.0, -0.5, -0.8, 0.3;
  d.studies = {x};
  d.centered = true;
  ModelState st = state_for(d, IndicatorMatrix::identity(1), 22);
  Eigen::MatrixXd l(4, 1);
  l << 0.8, -0.2, 1.5, 0.1;
  st.scores = {l};
  st.psi_inv.setConstant(3.0);
  st.omega.setConstant(0.7);
  st.delta.setConstant(1.5);
  const double prec = 0.7 * 1.5 + 3.0 * l.squaredNorm();
  const double mean = 3.0 * l.col(0).dot(x.col(0)) / prec;
  RandomSource src(23);
  double s1 = 0, s2 = 0;
  const int n = 50000;
  for (int t = 0; t < n; ++t) {
    update_loadings(st, d, src);
    s1 += st.lambda(0, 0);
    s2 += st.lambda(0, 0) * st.lambda(0, 0);
  }
  const double m = s1 / n, v = s2 / n - m * m;
  CHECK(std::abs(m - mean) < 5 * std::sqrt(1 / prec / n));
  CHECK(v == doctest::Approx(1 / prec).epsilon(0.03));
}

TEST_CASE("loadings of a column no study uses come from the prior") {
  const auto d = noise_data(2, 1, 5, 24);
  ModelState st = state_for(d, with_free(2, {{0}}), 25);
  st.indicator.set(0, 2, 0);  // unchecked: column 2 now belongs to nobody
  st.omega.setConstant(2.0);
  st.delta.setConstant(1.0);
  const double var = 1.0 / (2.0 * 1.0);
  RandomSource src(26);
  double s1 = 0, s2 = 0;
  const int n = 40000;
  for (int t = 0; t < n; ++t) {
    update_loadings(st, d, src);
    s1 += st.lambda(0, 2);
    s2 += st.lambda(0, 2) * st.lambda(0, 2);
  }
  CHECK(std::abs(s1 / n) < 5 * std::sqrt(var / n));
  CHECK(s2 / n == doctest::Approx(var).epsilon(0.03));
}

TEST_CASE("scores") {
  SUBCASE("zero loadings give standard normal scores") {
    const auto d = noise_data(2, 3, 50, 27);
    ModelState st = state_for(d, with_free(2, {{0, 1}}), 28);
    st.lambda.setZero();
    RandomSource src(29);
    std::vector<double> v;
    for (int t = 0; t < 200; ++t) {
      update_scores(st, d, src);
      for (const auto& l : st.scores)
        for (Eigen::Index i = 0; i < l.size(); ++i) v.push_back(l.data()[i]);
    }
    CHECK(ks_standard_normal(v) < 1.63 / std::sqrt(static_cast<double>(v.size())));
  }
  SUBCASE("a factor absent from a study keeps its prior there") {
    const auto d = noise_data(2, 4, 3, 30);
    ModelState st = state_for(d, with_free(2, {{0}}), 31);
    st.lambda.setConstant(1.5);
    RandomSource src(32);
    std::vector<double> v;
    for (int t = 0; t < 10000; ++t) {
      update_scores(st, d, src);
      v.push_back(st.scores[1](0, 2));
    }
    CHECK(ks_standard_normal(v) < 1.63 / std::sqrt(10000.0));
  }
  SUBCASE("scalar conjugate posterior") {
    MultiStudyDataset d;
    d.feature_names = {"f"};
    Eigen::MatrixXd x(2, 1);
    x << 0.9, -0.9;
    d.studies = {x};
    d.centered = true;
    ModelState st = state_for(d, IndicatorMatrix::identity(1), 33);
    st.lambda.setConstant(1.2);
    st.psi_inv.setConstant(2.0);
    const double prec = 1 + 1.2 * 1.2 * 2.0;
    const double mean = 1.2 * 2.0 * 0.9 / prec;
    RandomSource src(34);
    double s1 = 0, s2 = 0;
    const int n = 50000;
    for (int t = 0; t < n; ++t) {
      update_scores(st, d, src);
      s1 += st.scores[0](0, 0);
      s2 += st.scores[0](0, 0) * st.scores[0](0, 0);
    }
    const double m = s1 / n;
    CHECK(std::abs(m - mean) < 5 * std::sqrt(1 / prec / n));
    CHECK(s2 / n - m * m == doctest::Approx(1 / prec).epsilon(0.03));
  }
}

TEST_CASE("local shrinkage moments") {
  const auto d = noise_data(1, 2, 3, 35);
  ModelState st = state_for(d, with_free(1, {}), 36);
  Hyperparams h;
  st.lambda.setZero();
  st.lambda(1, 0) = 3.0;
  st.delta.setConstant(2.0);  // tau = 2
  RandomSource src(37);
  double s0 = 0, s1 = 0;
  const int n = 50000;
  for (int t = 0; t < n; ++t) {
    update_local_shrinkage(st, h, src);
    CHECK(st.omega.rows() == 2);
    CHECK(st.omega.cols() == 1);
    s0 += st.omega(0, 0);
    s1 += st.omega(1, 0);
  }
  CHECK(s0 / n == doctest::Approx((h.nu + 1) / h.nu).epsilon(0.02));
  CHECK(s1 / n == doctest::Approx((h.nu + 1) / (h.nu + 2.0 * 9.0)).epsilon(0.02));
  CHECK((st.omega.array() > 0).all());
}

TEST_CASE("global shrinkage") {
  SUBCASE("rate for delta_l sums over columns k >= l only") {
    const auto d = noise_data(2, 3, 4, 38);
    ModelState st = state_for(d, with_free(2, {{0, 1}, {1}}), 39);
    const Eigen::VectorXd tau = st.tau();
    for (int l = 0; l < st.num_factors(); ++l) {
      double rate = 1.0;
      for (int k = l; k < st.num_factors(); ++k) {
        double inner = 0.0;
        for (int p = 0; p < 3; ++p) inner += st.omega(p, k) * st.lambda(p, k) * st.lambda(p, k);
        rate += 0.5 * tau(k) / st.delta(l) * inner;
      }
      CHECK(global_shrinkage_rate(st, l) == doctest::Approx(rate).epsilon(1e-12));
    }
  }
  SUBCASE("zero loadings: delta_1 has mean a1 + PK/2") {
    const auto d = noise_data(2, 3, 4, 40);
    ModelState st = state_for(d, with_free(2, {{0, 1}}), 41);
    st.lambda.setZero();
    Hyperparams h;
    RandomSource src(42);
    double s = 0;
    const int n = 50000;
    for (int t = 0; t < n; ++t) {
      update_global_shrinkage(st, h, src);
      s += st.delta(0);
    }
    const double shape = h.a1 + 3 * 3 / 2.0;
    CHECK(std::abs(s / n - shape) < 5 * std::sqrt(shape / n));
  }
  SUBCASE("a single factor only draws delta_1") {
    const auto d = noise_data(1, 2, 3, 43);
    ModelState st = state_for(d, IndicatorMatrix::identity(1), 44);
    RandomSource src(45);
    update_global_shrinkage(st, Hyperparams{}, src);
    CHECK(st.delta.size() == 1);
    CHECK(st.delta(0) > 0);
  }
}

TEST_CASE("noise") {
  MultiStudyDataset d;
  d.feature_names = {"a", "b"};
  Eigen::MatrixXd x(2, 2);
  x << 1.0, -2.0, -1.0, 2.0;
  d.studies = {x};
  d.centered = true;
  ModelState st = state_for(d, IndicatorMatrix::identity(1), 46);
  Hyperparams h;
  SUBCASE("zero loadings: rate is b_psi plus half the sum of squares") {
    st.lambda.setZero();
    const Eigen::VectorXd r = noise_rates(st, d, h, 0);
    CHECK(r(0) == doctest::Approx(0.3 + 0.5 * 2.0));
    CHECK(r(1) == doctest::Approx(0.3 + 0.5 * 8.0));
  }
  SUBCASE("perfect fit: rate is b_psi") {
    st.lambda = Eigen::MatrixXd(2, 1);
    st.lambda << 1.0, -2.0;
    st.scores[0] = Eigen::MatrixXd(2, 1);
    st.scores[0] << 1.0, -1.0;
    const Eigen::VectorXd r = noise_rates(st, d, h, 0);
    CHECK(r(0) == doctest::Approx(0.3));
    CHECK(r(1) == doctest::Approx(0.3));
    RandomSource src(47);
    double s = 0;
    const int n = 50000;
    for (int t = 0; t < n; ++t) {
      update_noise(st, d, h, src);
      s += st.psi_inv(0, 0);
    }
    const double shape = h.a_psi + 1.0;
    CHECK(std::abs(s / n - shape / 0.3) < 5 * std::sqrt(shape / 0.09 / n));
    CHECK(st.psi_inv.rows() == 1);
    CHECK(st.psi_inv.cols() == 2);
  }
}

TEST_CASE("chain contracts") {
  const auto d = noise_data(3, 5, 6, 48);
  Hyperparams h;
  SUBCASE("trace length") {
    for (const auto& [iters, burn, thin] : {std::tuple{50, 20, 1}, std::tuple{50, 20, 4}, std::tuple{51, 0, 7}}) {
      ChainConfig c;
      c.n_iterations = iters;
      c.burn_in = burn;
      c.thin = thin;
      c.seed = 3;
      const ChainTrace t = run_chain(d, h, c);
      CHECK(static_cast<int>(t.indicator_samples.size()) == (iters - burn) / thin);
      CHECK(c.trace_length() == (iters - burn) / thin);
      CHECK(t.lambda_samples.empty());
      CHECK(static_cast<int>(t.diagnostics.log_likelihood.size()) == iters);
      for (double ll : t.diagnostics.log_likelihood) CHECK(std::isfinite(ll));
    }
  }
  SUBCASE("fixed indicator") {
    ChainConfig c;
    c.n_iterations = 40;
    c.burn_in = 10;
    c.thin = 3;
    c.fixed_indicator = with_free(3, {{0, 1, 2}, {0, 2}});
    const ChainTrace t = run_chain(d, h, c);
    REQUIRE(t.indicator_samples.size() == 10);
    REQUIRE(t.lambda_samples.size() == 10);
    for (const auto& a : t.indicator_samples) CHECK(a == *c.fixed_indicator);
    for (const auto& l : t.lambda_samples) CHECK(l.cols() == 5);
  }
  SUBCASE("same seed, same trace") {
    ChainConfig c;
    c.n_iterations = 60;
    c.burn_in = 10;
    c.seed = 77;
    const ChainTrace a = run_chain(d, h, c);
    const ChainTrace b = run_chain(d, h, c);
    REQUIRE(a.indicator_samples.size() == b.indicator_samples.size());
    for (std::size_t i = 0; i < a.indicator_samples.size(); ++i) CHECK(a.indicator_samples[i] == b.indicator_samples[i]);
    CHECK(a.diagnostics.log_likelihood == b.diagnostics.log_likelihood);
  }
  SUBCASE("configuration errors") {
    ChainConfig c;
    c.n_iterations = 10;
    c.burn_in = 10;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c.burn_in = 5;
    c.thin = 6;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    MultiStudyDataset raw = d;
    raw.centered = false;
    c.thin = 1;
    CHECK_THROWS(run_chain(raw, h, c));
  }
  SUBCASE("parallel chains match sequential ones") {
    std::vector<ChainConfig> configs(3);
    for (int i = 0; i < 3; ++i) {
      configs[static_cast<std::size_t>(i)].n_iterations = 30;
      configs[static_cast<std::size_t>(i)].burn_in = 10;
      configs[static_cast<std::size_t>(i)].seed = 100 + static_cast<std::uint64_t>(i);
    }
    const auto par = run_chains(d, h, configs, 3);
    for (int i = 0; i < 3; ++i) {
      const ChainTrace seq = run_chain(d, h, configs[static_cast<std::size_t>(i)]);
      CHECK(par[static_cast<std::size_t>(i)].diagnostics.log_likelihood == seq.diagnostics.log_likelihood);
    }
  }
}

TEST_CASE("state invariants hold after every sweep") {
  const auto d = noise_data(4, 6, 5, 49);
  RandomSource src(50);
  Hyperparams h;
  h.alpha = 2.0;
  ModelState st = initialize_state(d, h, SharingMode::free, std::nullopt, 6, src);
  SweepOptions opt;
  opt.max_free_factors = 6;
  for (int it = 0; it < 300; ++it) {
    gibbs_sweep(st, d, h, opt, src);
    CHECK_NOTHROW(st.check_invariants(d));
    CHECK(st.indicator.num_free() <= 6);
    CHECK(std::isfinite(log_likelihood(st, d)));
  }
}

}
