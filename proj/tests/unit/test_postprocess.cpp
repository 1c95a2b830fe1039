#include <doctest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "tetris/errors.hpp"
#include "tetris/postprocess.hpp"

using namespace tetris;
using tetris::test::brute_force_distance;

namespace {

IndicatorMatrix make(int s_count, const std::vector<std::vector<int>>& free_columns) {
  IndicatorMatrix a = IndicatorMatrix::identity(s_count);
  for (const auto& m : free_columns) a.append_column(FactorType::from_studies(s_count, m));
  return a;
}

IndicatorMatrix random_indicator(int s_count, int max_free, RandomSource& src) {
  IndicatorMatrix a = IndicatorMatrix::identity(s_count);
  const int k = static_cast<int>(src.uniform_index(static_cast<std::uint64_t>(max_free) + 1));
  for (int j = 0; j < k; ++j) {
    FactorType t{0, s_count};
    while (t.bits == 0) t.bits = src.uniform_index(std::uint64_t{1} << s_count);
    a.append_column(t);
  }
  return a;
}

}  // namespace

TEST_SUITE("postprocess") {

TEST_CASE("distance examples") {
  const auto a = make(2, {{0}, {0, 1}});
  CHECK(indicator_distance(a, a) == 0);
  CHECK(indicator_distance(a, make(2, {{0, 1}, {0}})) == 0);
  CHECK(indicator_distance(a, make(2, {{1}, {0, 1}})) == 2);
  CHECK(indicator_distance(make(2, {{0, 1}}), make(2, {})) == 2);
  CHECK_THROWS_AS(indicator_distance(a, make(3, {})), DimensionError);
}

TEST_CASE("distance equals the exhaustive permutation minimum") {
  RandomSource src(1);
  for (int t = 0; t < 150; ++t) {
    const int s = 2 + static_cast<int>(src.uniform_index(3));
    const auto a = random_indicator(s, 7 - s, src);
    const auto b = random_indicator(s, 7 - s, src);
    const int d = indicator_distance(a, b);
    CHECK(d == brute_force_distance(a, b));
    CHECK(d == indicator_distance(b, a));
  }
}

TEST_CASE("pairwise distances are symmetric with zero diagonal and thread-count independent") {
  RandomSource src(2);
  std::vector<IndicatorMatrix> samples;
  for (int i = 0; i < 25; ++i) samples.push_back(random_indicator(3, 4, src));
  const auto one = pairwise_distances(samples, 1);
  const auto many = pairwise_distances(samples, 4);
  CHECK(one.values == many.values);
  CHECK(one.values == one.values.transpose());
  CHECK(one.values.diagonal().isZero());
  CHECK(one.values(3, 7) == indicator_distance(samples[3], samples[7]));
}

TEST_CASE("lower quantile") {
  CHECK(lower_quantile({}, 0.05) == 0);
  CHECK(lower_quantile({5}, 0.05) == 5);
  CHECK(lower_quantile({4, 1, 3, 2}, 0.5) == 2);
  CHECK(lower_quantile({4, 1, 3, 2}, 0.51) == 3);
  CHECK(lower_quantile({0, 0, 0, 9}, 0.05) == 0);
  CHECK(lower_quantile({1, 2, 3, 4}, 1.0) == 4);
}

TEST_CASE("point estimate") {
  const Hyperparams hyper;
  SUBCASE("single sample") {
    const auto a = make(3, {{0, 2}});
    const auto pe = select_point_estimate(std::vector{a}, hyper);
    CHECK(pe.indicator == a);
    CHECK(pe.sample_index == 0);
    CHECK(pe.neighbors == 0);
  }
  SUBCASE("identical samples") {
    const auto a = make(3, {{0, 2}, {1}});
    const auto pe = select_point_estimate(std::vector(6, a), hyper);
    CHECK(pe.indicator == a);
    CHECK(pe.neighbors == 5);
    CHECK(pe.radius == 3);
  }
  SUBCASE("a repeated matrix beats two distant ones") {
    const auto a = make(2, {{0, 1}});
    const auto b = make(2, {{0, 1}, {0, 1}, {0, 1}, {0, 1}});
    const auto c = make(2, {{0}, {1}, {0}, {1}});
    REQUIRE(indicator_distance(a, b) == 6);
    REQUIRE(indicator_distance(a, c) == 4);
    REQUIRE(indicator_distance(b, c) == 4);
    const auto pe = select_point_estimate(std::vector{c, a, a, b, a}, hyper);
    CHECK(pe.indicator == a);
    CHECK(pe.sample_index == 1);
    CHECK(pe.radius == 2);
    CHECK(pe.neighbors == 2);
  }
  SUBCASE("ties go to fewer factors") {
    const auto x = make(2, {{0, 1}});
    const auto y = make(2, {{0, 1}, {0}});
    const auto pe = select_point_estimate(std::vector{y, y, x, x}, hyper);
    CHECK(pe.indicator == x);
    CHECK(pe.sample_index == 2);
  }
  SUBCASE("then to the higher prior, then to the earliest sample") {
    Hyperparams h;
    h.beta = 0.5;
    const auto x = make(3, {{0, 1, 2}});
    const auto y = make(3, {{0}});
    const bool x_wins = ibp_log_prior(x, h.alpha, h.beta) > ibp_log_prior(y, h.alpha, h.beta);
    REQUIRE(ibp_log_prior(x, h.alpha, h.beta) != ibp_log_prior(y, h.alpha, h.beta));
    const auto pe = select_point_estimate(std::vector{y, x}, h);
    CHECK(pe.indicator == (x_wins ? x : y));
    const auto same = select_point_estimate(std::vector{x, x}, h);
    CHECK(same.sample_index == 0);
  }
  SUBCASE("empty input") {
    CHECK_THROWS_AS(select_point_estimate(std::vector<IndicatorMatrix>{}, hyper), InvariantError);
  }
}

TEST_CASE("credible ball") {
  const auto center = make(2, {{0, 1}});
  SUBCASE("all samples at the center") {
    const auto ball = credible_ball(std::vector(5, center), center, 0.95);
    CHECK(ball.epsilon_star == 0);
    CHECK(ball.coverage == 1.0);
  }
  SUBCASE("one distant sample in ten") {
    const auto ball = credible_ball_from_distances({0, 0, 0, 0, 0, 0, 0, 0, 0, 7}, center, 0.95);
    CHECK(ball.epsilon_star == 7);
    CHECK(ball.coverage == 1.0);
    CHECK(credible_ball_from_distances({0, 0, 0, 0, 0, 0, 0, 0, 0, 7}, center, 0.9).epsilon_star == 0);
  }
  SUBCASE("radius is minimal and grows with the level") {
    RandomSource src(3);
    std::vector<int> d;
    for (int i = 0; i < 200; ++i) d.push_back(static_cast<int>(src.uniform_index(12)));
    int previous = 0;
    for (double level : {0.1, 0.3, 0.5, 0.8, 0.9, 0.95, 0.99}) {
      const auto ball = credible_ball_from_distances(d, center, level);
      const auto covered = [&](int eps) {
        return std::count_if(d.begin(), d.end(), [&](int v) { return v <= eps; }) / 200.0;
      };
      CHECK(ball.coverage >= level);
      CHECK(ball.coverage == doctest::Approx(covered(ball.epsilon_star)));
      if (ball.epsilon_star > 0) CHECK(covered(ball.epsilon_star - 1) < level);
      CHECK(ball.epsilon_star >= previous);
      previous = ball.epsilon_star;
    }
  }
}

TEST_CASE("membership fractions") {
  std::vector<IndicatorMatrix> samples;
  for (int i = 0; i < 10; ++i) samples.push_back(i < 3 ? make(4, {{0, 1, 2, 3}, {0, 2}}) : make(4, {{0, 1, 2, 3}}));
  CHECK(ball_membership_fraction(samples, FactorType::parse("1010")) == doctest::Approx(0.3));
  CHECK(ball_membership_fraction(samples, FactorType::parse("1111")) == 1.0);
  CHECK(ball_membership_fraction(samples, FactorType::parse("0110")) == 0.0);
  const auto all = membership_fractions(samples);
  CHECK(all.size() == 2);
  CHECK(all.at(FactorType::parse("1010")) == doctest::Approx(0.3));
}

TEST_CASE("loading recovery") {
  RandomSource src(4);
  const auto indicator = make(2, {{0, 1}, {0, 1}});
  Eigen::MatrixXd lambda(5, 4);
  for (Eigen::Index i = 0; i < lambda.size(); ++i) lambda.data()[i] = src.normal();
  SUBCASE("one sample is reproduced up to rotation") {
    const auto rl = recover_loadings(std::vector{lambda}, indicator);
    CHECK(rl.lambda_hat.rows() == 5);
    CHECK(rl.lambda_hat.cols() == 4);
    const Eigen::MatrixXd shared = rl.lambda_hat.rightCols(2) * rl.lambda_hat.rightCols(2).transpose();
    const Eigen::MatrixXd truth = lambda.rightCols(2) * lambda.rightCols(2).transpose();
    CHECK((shared - truth).norm() < 1e-8);
    for (int s = 0; s < 2; ++s) CHECK((rl.lambda_hat.col(s).cwiseAbs() - lambda.col(s).cwiseAbs()).norm() < 1e-8);
    const auto& ev = rl.type_eigenvalues.at(FactorType::parse("11"));
    CHECK(ev.size() == 5);
    CHECK(ev(0) >= ev(1));
    CHECK(rl.type_covariances.size() == 3);
  }
  SUBCASE("C and 3C have median 2C") {
    const auto rl = recover_loadings(std::vector<Eigen::MatrixXd>{lambda, std::sqrt(3.0) * lambda}, indicator);
    const Eigen::MatrixXd shared = rl.lambda_hat.rightCols(2) * rl.lambda_hat.rightCols(2).transpose();
    const Eigen::MatrixXd c = lambda.rightCols(2) * lambda.rightCols(2).transpose();
    CHECK((shared - 2 * c).norm() < 1e-8);
    CHECK((rl.type_covariances.at(FactorType::parse("11")) - 2 * c).norm() < 1e-8);
  }
  SUBCASE("inconsistent shapes") {
    CHECK_THROWS_AS(recover_loadings(std::vector<Eigen::MatrixXd>{lambda, lambda.leftCols(3)}, indicator), DimensionError);
    CHECK_THROWS_AS(recover_loadings(std::vector<Eigen::MatrixXd>{lambda.leftCols(3)}, indicator), DimensionError);
  }
}

TEST_CASE("estimate round trip") {
  tetris::test::TempDir dir;
  EstimationReport r;
  r.point.indicator = make(3, {{0, 1, 2}, {1, 2}});
  r.point.sample_index = 4;
  r.point.radius = 3;
  r.point.neighbors = 9;
  r.ball = credible_ball_from_distances({0, 1, 2}, r.point.indicator, 0.9);
  r.membership[FactorType::parse("011")] = 0.25;
  RecoveredLoadings rl;
  rl.indicator = r.point.indicator;
  rl.lambda_hat = Eigen::MatrixXd::Constant(4, 5, 0.1 / 3);
  rl.type_covariances[FactorType::parse("111")] = Eigen::MatrixXd::Identity(4, 4) / 7;
  r.loadings = rl;
  write_estimate(r, dir.path());
  const auto back = read_estimate(dir.path());
  CHECK(back.point.indicator == r.point.indicator);
  CHECK(back.point.sample_index == 4);
  CHECK(back.ball.epsilon_star == r.ball.epsilon_star);
  CHECK(back.ball.coverage == r.ball.coverage);
  CHECK(back.membership == r.membership);
  REQUIRE(back.loadings);
  CHECK(back.loadings->lambda_hat == rl.lambda_hat);
  CHECK(back.loadings->type_covariances.at(FactorType::parse("111")) == rl.type_covariances.at(FactorType::parse("111")));
}

}
