#include "tetris/sampler.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "tetris/errors.hpp"

namespace tetris {

namespace {

constexpr double kFloor = 1e-12;

double floored(double v) { return std::max(v, kFloor); }

Eigen::MatrixXd standard_normal(RandomSource& source, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd z(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) z(i, j) = source.normal();
  }
  return z;
}

// Residual X_s - L_s A_s Lambda^T.
Eigen::MatrixXd study_residual(const ModelState& state, const MultiStudyDataset& data, int s) {
  const auto& x = data.studies[static_cast<std::size_t>(s)];
  const Eigen::VectorXd a = state.indicator.row_as_diagonal(s);
  return x - state.scores[static_cast<std::size_t>(s)] * a.asDiagonal() * state.lambda.transpose();
}

// log L(A_sk = 1) - log L(A_sk = 0) from the residual at the current A_sk.
double toggle_log_ratio(const Eigen::MatrixXd& resid, const Eigen::RowVectorXd& psi_inv, const Eigen::VectorXd& score,
                        const Eigen::VectorXd& loading, int current) {
  // With E1 the residual at A_sk = 1 and C = l lambda^T, E0 = E1 + C, so
  // E0^2 - E1^2 = 2 E1 C + C^2.
  double total = 0.0;
  for (Eigen::Index p = 0; p < resid.cols(); ++p) {
    const double lp = loading(p);
    if (lp == 0.0) continue;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < resid.rows(); ++i) {
      const double c = score(i) * lp;
      const double e1 = current ? resid(i, p) : resid(i, p) - c;
      acc += 2.0 * e1 * c + c * c;
    }
    total += psi_inv(p) * acc;
  }
  return 0.5 * total;
}

void apply_toggle(Eigen::MatrixXd& resid, const Eigen::VectorXd& score, const Eigen::VectorXd& loading, int from,
                  int to) {
  if (from == to) return;
  if (to == 1) {
    resid.noalias() -= score * loading.transpose();
  } else {
    resid.noalias() += score * loading.transpose();
  }
}

double log_column_weight(int members, int num_studies, double beta) {
  return std::lgamma(members) + std::lgamma(num_studies - members + beta);
}

bool allowed_pattern(const FactorType& t, SharingMode sharing) {
  if (t.count() == 0) return false;
  if (sharing == SharingMode::free) return true;
  return t.count() == 1 || t.is_common();
}

FactorType draw_ibp_column(int num_studies, double beta, RandomSource& source) {
  // q(z) proportional to B(m, S - m + beta): choose m, then a uniform subset.
  std::vector<double> log_w(static_cast<std::size_t>(num_studies));
  for (int m = 1; m <= num_studies; ++m) {
    log_w[static_cast<std::size_t>(m - 1)] = std::lgamma(num_studies + 1.0) - std::lgamma(m + 1.0) -
                                             std::lgamma(num_studies - m + 1.0) +
                                             log_column_weight(m, num_studies, beta);
  }
  const double top = *std::max_element(log_w.begin(), log_w.end());
  double total = 0.0;
  for (double& w : log_w) total += (w = std::exp(w - top));
  double u = source.uniform() * total;
  int m = num_studies;
  for (int j = 0; j < num_studies; ++j) {
    u -= log_w[static_cast<std::size_t>(j)];
    if (u <= 0.0) {
      m = j + 1;
      break;
    }
  }
  return FactorType::from_studies(num_studies, draw_subset(source, num_studies, m));
}

FactorType singleton(int num_studies, int s) { return FactorType::from_studies(num_studies, {s}); }

std::vector<int> singleton_columns(const IndicatorMatrix& indicator, int s) {
  std::vector<int> out;
  const FactorType target = singleton(indicator.num_studies(), s);
  for (int k = indicator.num_studies(); k < indicator.num_factors(); ++k) {
    if (indicator.column_type(k) == target) out.push_back(k);
  }
  return out;
}

template <typename Fn>
void annotate(const char* step, int iteration, Fn&& fn) {
  auto where = [&](const std::exception& e) {
    std::ostringstream msg;
    msg << "iteration " << iteration << ", step " << step << ": " << e.what();
    return msg.str();
  };
  try {
    fn();
  } catch (const NumericalError& e) {
    throw NumericalError(where(e));
  } catch (const ParameterError& e) {
    throw ParameterError(where(e));
  } catch (const InvariantError& e) {
    throw InvariantError(where(e));
  } catch (const DimensionError& e) {
    throw DimensionError(where(e));
  }
}

}  // namespace

std::string to_string(SharingMode mode) {
  return mode == SharingMode::free ? "free" : "common-specific";
}

SharingMode parse_sharing_mode(const std::string& text) {
  if (text == "free") return SharingMode::free;
  if (text == "common-specific" || text == "common_and_specific_only") return SharingMode::common_and_specific_only;
  throw ParameterError("unknown sharing mode '" + text + "' (expected free or common-specific)");
}

void ChainConfig::validate() const {
  if (n_iterations < 1) throw ParameterError("n_iterations must be positive");
  if (burn_in < 0 || burn_in >= n_iterations) throw ParameterError("burn_in must lie in [0, n_iterations)");
  if (thin < 1 || thin > n_iterations - burn_in) throw ParameterError("thin must lie in [1, n_iterations - burn_in]");
  if (max_free_factors < 0) throw ParameterError("max_free_factors must be non-negative");
  if (fixed_indicator) fixed_indicator->validate();
}

ModelState initialize_state(const MultiStudyDataset& data, const Hyperparams& hyper, SharingMode sharing,
                            const std::optional<IndicatorMatrix>& fixed_indicator, int max_free_factors,
                            RandomSource& source) {
  data.validate();
  hyper.validate();
  const int s_count = data.num_studies();
  const int p = data.num_features();
  ModelState state;
  if (fixed_indicator) {
    if (fixed_indicator->num_studies() != s_count) throw DimensionError("fixed indicator has the wrong study count");
    state.indicator = *fixed_indicator;
  } else {
    state.indicator = IndicatorMatrix::identity(s_count);
    const int free = std::min((s_count + 1) / 2 + 1, max_free_factors);
    for (int j = 0; j < free; ++j) {
      FactorType t{0, s_count};
      while (!allowed_pattern(t, sharing)) {
        t.bits = 0;
        for (int s = 0; s < s_count; ++s) {
          if (source.uniform() < 0.5) t.bits |= std::uint64_t{1} << s;
        }
      }
      state.indicator.append_column(t);
    }
  }
  const int k = state.indicator.num_factors();
  state.delta.resize(k);
  for (int l = 0; l < k; ++l) state.delta(l) = floored(draw_gamma(source, l == 0 ? hyper.a1 : hyper.a2, 1.0));
  state.omega.resize(p, k);
  for (int j = 0; j < k; ++j) {
    for (int r = 0; r < p; ++r) state.omega(r, j) = floored(draw_gamma(source, hyper.nu / 2, hyper.nu / 2));
  }
  const Eigen::VectorXd tau = state.tau();
  state.lambda.resize(p, k);
  for (int j = 0; j < k; ++j) {
    for (int r = 0; r < p; ++r) state.lambda(r, j) = source.normal() / std::sqrt(state.omega(r, j) * tau(j));
  }
  for (int s = 0; s < s_count; ++s) state.scores.push_back(standard_normal(source, data.num_subjects(s), k));
  state.psi_inv.resize(s_count, p);
  for (int s = 0; s < s_count; ++s) {
    for (int r = 0; r < p; ++r) state.psi_inv(s, r) = floored(draw_gamma(source, hyper.a_psi, hyper.b_psi));
  }
  return state;
}

ModelState draw_from_prior(const std::vector<int>& subjects_per_study, int num_features, const Hyperparams& hyper,
                           int max_free_factors, RandomSource& source, SharingMode sharing) {
  const int s_count = static_cast<int>(subjects_per_study.size());
  double mean = ibp_expected_columns(s_count, hyper.alpha, hyper.beta);
  if (sharing == SharingMode::common_and_specific_only && s_count > 2) {
    // Thin the Poisson process to the allowed patterns: S singletons plus the
    // all-ones column, with q(z) = beta B(m, S - m + beta) / H.
    const double h = mean / hyper.alpha;
    const double single = hyper.beta * std::exp(log_column_weight(1, s_count, hyper.beta) - std::lgamma(s_count + hyper.beta));
    const double all = hyper.beta * std::exp(log_column_weight(s_count, s_count, hyper.beta) - std::lgamma(s_count + hyper.beta));
    mean *= (s_count * single + all) / h;
  }
  std::uint64_t free = 0;
  do {
    free = draw_poisson(source, mean);
  } while (free > static_cast<std::uint64_t>(max_free_factors));
  IndicatorMatrix indicator = IndicatorMatrix::identity(s_count);
  for (std::uint64_t j = 0; j < free; ++j) {
    FactorType t = draw_ibp_column(s_count, hyper.beta, source);
    while (!allowed_pattern(t, sharing)) t = draw_ibp_column(s_count, hyper.beta, source);
    indicator.append_column(t);
  }

  MultiStudyDataset shape;
  for (int n : subjects_per_study) shape.studies.push_back(Eigen::MatrixXd::Zero(n, num_features));
  return initialize_state(shape, hyper, sharing, indicator, max_free_factors, source);
}

MultiStudyDataset simulate_data(const ModelState& state, RandomSource& source) {
  MultiStudyDataset data;
  const int p = state.num_features();
  for (int s = 0; s < state.num_studies(); ++s) {
    const auto& l = state.scores[static_cast<std::size_t>(s)];
    const Eigen::VectorXd a = state.indicator.row_as_diagonal(s);
    Eigen::MatrixXd x = l * a.asDiagonal() * state.lambda.transpose();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (int r = 0; r < p; ++r) x(i, r) += source.normal() / std::sqrt(state.psi_inv(s, r));
    }
    data.studies.push_back(std::move(x));
  }
  return data;
}

double indicator_log_likelihood_ratio(const ModelState& state, const MultiStudyDataset& data, int s, int k) {
  const Eigen::MatrixXd resid = study_residual(state, data, s);
  return toggle_log_ratio(resid, state.psi_inv.row(s), state.scores[static_cast<std::size_t>(s)].col(k),
                          state.lambda.col(k), state.indicator(s, k));
}

void update_indicators(ModelState& state, const MultiStudyDataset& data, const Hyperparams& hyper,
                       SharingMode sharing, RandomSource& source) {
  const int s_count = state.num_studies();
  const int k_count = state.num_factors();
  if (k_count == s_count) return;
  if (static_cast<int>(data.studies.size()) != s_count || data.num_features() != state.num_features()) {
    throw DimensionError("indicator update: data and state dimensions differ");
  }

  if (sharing == SharingMode::free) {
    for (int s = 0; s < s_count; ++s) {
      Eigen::MatrixXd resid = study_residual(state, data, s);
      const auto& l = state.scores[static_cast<std::size_t>(s)];
      for (int k = s_count; k < k_count; ++k) {
        const int current = state.indicator(s, k);
        const int others = state.indicator.column_sum(k) - current;
        // Columns owned by s alone are moved by the replacement step.
        if (others == 0) continue;
        const double log_prior_odds = std::log(others) - std::log(hyper.beta + s_count - 1 - others);
        const double log_lr = toggle_log_ratio(resid, state.psi_inv.row(s), l.col(k), state.lambda.col(k), current);
        const int next = draw_bernoulli_log_odds(source, log_prior_odds + log_lr);
        apply_toggle(resid, l.col(k), state.lambda.col(k), current, next);
        state.indicator.set(s, k, next);
      }
    }
    return;
  }

  if (s_count == 1) return;
  std::vector<Eigen::MatrixXd> resid;
  for (int s = 0; s < s_count; ++s) resid.push_back(study_residual(state, data, s));
  std::vector<FactorType> candidates;
  candidates.push_back(FactorType{(s_count == 64) ? ~std::uint64_t{0} : ((std::uint64_t{1} << s_count) - 1), s_count});
  for (int s = 0; s < s_count; ++s) candidates.push_back(singleton(s_count, s));

  for (int k = s_count; k < k_count; ++k) {
    // d_s = log L_s(A_sk = 1) - log L_s(A_sk = 0).
    Eigen::VectorXd gain(s_count);
    for (int s = 0; s < s_count; ++s) {
      gain(s) = toggle_log_ratio(resid[static_cast<std::size_t>(s)], state.psi_inv.row(s),
                                 state.scores[static_cast<std::size_t>(s)].col(k), state.lambda.col(k),
                                 state.indicator(s, k));
    }
    std::vector<double> log_w;
    for (const auto& c : candidates) {
      double w = log_column_weight(c.count(), s_count, hyper.beta);
      for (int s = 0; s < s_count; ++s) {
        if (c.contains(s)) w += gain(s);
      }
      log_w.push_back(w);
    }
    const double top = *std::max_element(log_w.begin(), log_w.end());
    double total = 0.0;
    for (double& w : log_w) total += (w = std::exp(w - top));
    double u = source.uniform() * total;
    std::size_t pick = candidates.size() - 1;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      u -= log_w[c];
      if (u <= 0.0) {
        pick = c;
        break;
      }
    }
    for (int s = 0; s < s_count; ++s) {
      const int next = candidates[pick].contains(s) ? 1 : 0;
      apply_toggle(resid[static_cast<std::size_t>(s)], state.scores[static_cast<std::size_t>(s)].col(k),
                   state.lambda.col(k), state.indicator(s, k), next);
      state.indicator.set(s, k, next);
    }
  }
}

double collapsed_column_log_gain(const Eigen::MatrixXd& scores, const Eigen::VectorXd& prior_precision,
                                 double noise_precision, const Eigen::VectorXd& residual) {
  if (scores.cols() == 0) return 0.0;
  Eigen::MatrixXd q = noise_precision * (scores.transpose() * scores);
  q.diagonal() += prior_precision;
  const Eigen::VectorXd b = noise_precision * (scores.transpose() * residual);
  const Eigen::LLT<Eigen::MatrixXd> llt(q);
  if (llt.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "collapsed column gain: posterior precision " << q.rows() << "x" << q.cols()
        << " not positive definite (condition estimate " << condition_estimate(q) << ")";
    throw NumericalError(msg.str());
  }
  const Eigen::MatrixXd& lower = llt.matrixLLT();
  double log_det_q = 0.0;
  for (Eigen::Index j = 0; j < q.rows(); ++j) log_det_q += 2.0 * std::log(lower(j, j));
  const Eigen::VectorXd w = llt.matrixL().solve(b);
  return 0.5 * prior_precision.array().log().sum() - 0.5 * log_det_q + 0.5 * w.squaredNorm();
}

namespace {

// Column layout of a proposal: entries >= 0 are existing columns, entries < 0
// are new column -1 - j.
std::vector<int> proposed_layout(const ModelState& state, const BirthProposal& proposal) {
  const int s_count = state.num_studies();
  const auto old_singletons = singleton_columns(state.indicator, proposal.study);
  std::vector<int> kept_free;
  for (int k = s_count; k < state.num_factors(); ++k) {
    if (!std::binary_search(old_singletons.begin(), old_singletons.end(), k)) kept_free.push_back(k);
  }
  std::vector<int> layout;
  for (int k = 0; k < s_count; ++k) layout.push_back(k);
  const int slots = static_cast<int>(kept_free.size()) + proposal.num_new;
  std::size_t next_kept = 0;
  int next_new = 0;
  for (int slot = 0; slot < slots; ++slot) {
    if (next_new < proposal.num_new && proposal.new_positions[static_cast<std::size_t>(next_new)] == slot) {
      layout.push_back(-1 - next_new);
      ++next_new;
    } else {
      layout.push_back(kept_free[next_kept++]);
    }
  }
  return layout;
}

struct LayoutView {
  Eigen::VectorXd tau;
  std::vector<int> singles;  // positions in the layout owned by the study alone
};

LayoutView view_of(const ModelState& state, const BirthProposal& proposal, const std::vector<int>& layout,
                   bool proposed) {
  LayoutView v;
  v.tau.resize(static_cast<Eigen::Index>(layout.size()));
  double running = 1.0;
  const auto old_singletons = singleton_columns(state.indicator, proposal.study);
  for (std::size_t j = 0; j < layout.size(); ++j) {
    const int src = layout[j];
    running *= src >= 0 ? state.delta(src) : proposal.delta_new(-1 - src);
    v.tau(static_cast<Eigen::Index>(j)) = running;
    const bool single = proposed ? src < 0 : std::binary_search(old_singletons.begin(), old_singletons.end(), src);
    if (single) v.singles.push_back(static_cast<int>(j));
  }
  return v;
}

// Everything in the log joint that differs between the current and the proposed
// state: kept loadings' prior under the layout's tau plus the collapsed
// likelihood of the study's singleton columns.
double layout_log_mass(const ModelState& state, const MultiStudyDataset& data, const BirthProposal& proposal,
                       const std::vector<int>& layout, bool proposed, const Eigen::MatrixXd& base_resid) {
  const LayoutView v = view_of(state, proposal, layout, proposed);
  const int s = proposal.study;
  const int p = state.num_features();
  double total = 0.0;
  for (std::size_t j = 0; j < layout.size(); ++j) {
    const int src = layout[j];
    if (std::find(v.singles.begin(), v.singles.end(), static_cast<int>(j)) != v.singles.end()) continue;
    const double t = v.tau(static_cast<Eigen::Index>(j));
    for (int r = 0; r < p; ++r) {
      const double prec = state.omega(r, src) * t;
      total += 0.5 * std::log(prec) - 0.5 * prec * state.lambda(r, src) * state.lambda(r, src);
    }
  }
  if (v.singles.empty()) return total;
  const int n = data.num_subjects(s);
  const auto q = static_cast<Eigen::Index>(v.singles.size());
  Eigen::MatrixXd scores(n, q);
  Eigen::MatrixXd prior_prec(p, q);
  for (Eigen::Index j = 0; j < q; ++j) {
    const int pos = v.singles[static_cast<std::size_t>(j)];
    const int src = layout[static_cast<std::size_t>(pos)];
    if (src >= 0) {
      scores.col(j) = state.scores[static_cast<std::size_t>(s)].col(src);
      prior_prec.col(j) = state.omega.col(src) * v.tau(pos);
    } else {
      scores.col(j) = proposal.scores_new[static_cast<std::size_t>(s)].col(-1 - src);
      prior_prec.col(j) = proposal.omega_new.col(-1 - src) * v.tau(pos);
    }
  }
  for (int r = 0; r < p; ++r) {
    total += collapsed_column_log_gain(scores, prior_prec.row(r).transpose(), state.psi_inv(s, r), base_resid.col(r));
  }
  return total;
}

// Residual of study s with every column it owns alone (free, non-identity)
// removed.
Eigen::MatrixXd residual_without_singletons(const ModelState& state, const MultiStudyDataset& data, int s) {
  Eigen::VectorXd a = state.indicator.row_as_diagonal(s);
  for (int k : singleton_columns(state.indicator, s)) a(k) = 0.0;
  return data.studies[static_cast<std::size_t>(s)] -
         state.scores[static_cast<std::size_t>(s)] * a.asDiagonal() * state.lambda.transpose();
}

}  // namespace

BirthProposal draw_birth_proposal(const ModelState& state, const MultiStudyDataset& data, const Hyperparams& hyper,
                                  int s, RandomSource& source) {
  const int s_count = state.num_studies();
  const int p = state.num_features();
  BirthProposal prop;
  prop.study = s;
  prop.num_new = static_cast<int>(draw_poisson(source, hyper.alpha * hyper.beta / (hyper.beta + s_count - 1)));
  const int kept = state.indicator.num_free() - static_cast<int>(singleton_columns(state.indicator, s).size());
  prop.new_positions = draw_subset(source, kept + prop.num_new, prop.num_new);
  prop.delta_new.resize(prop.num_new);
  for (int j = 0; j < prop.num_new; ++j) prop.delta_new(j) = floored(draw_gamma(source, hyper.a2, 1.0));
  prop.omega_new.resize(p, prop.num_new);
  for (int j = 0; j < prop.num_new; ++j) {
    for (int r = 0; r < p; ++r) prop.omega_new(r, j) = floored(draw_gamma(source, hyper.nu / 2, hyper.nu / 2));
  }
  for (int t = 0; t < s_count; ++t) prop.scores_new.push_back(standard_normal(source, data.num_subjects(t), prop.num_new));
  return prop;
}

double birth_log_ratio(const ModelState& state, const MultiStudyDataset& data, const BirthProposal& proposal) {
  const Eigen::MatrixXd base = residual_without_singletons(state, data, proposal.study);
  std::vector<int> current(static_cast<std::size_t>(state.num_factors()));
  for (int k = 0; k < state.num_factors(); ++k) current[static_cast<std::size_t>(k)] = k;
  const auto next = proposed_layout(state, proposal);
  return layout_log_mass(state, data, proposal, next, true, base) -
         layout_log_mass(state, data, proposal, current, false, base);
}

void apply_birth(ModelState& state, const MultiStudyDataset& data, const BirthProposal& proposal,
                 RandomSource& source) {
  const int s = proposal.study;
  const int s_count = state.num_studies();
  const int p = state.num_features();
  const Eigen::MatrixXd base = residual_without_singletons(state, data, s);
  const auto layout = proposed_layout(state, proposal);
  const LayoutView v = view_of(state, proposal, layout, true);
  const auto k_next = static_cast<Eigen::Index>(layout.size());

  ModelState next;
  next.psi_inv = state.psi_inv;
  next.lambda.resize(p, k_next);
  next.omega.resize(p, k_next);
  next.delta.resize(k_next);
  for (int t = 0; t < s_count; ++t) next.scores.emplace_back(data.num_subjects(t), k_next);
  Eigen::MatrixXi entries(s_count, k_next);
  for (Eigen::Index j = 0; j < k_next; ++j) {
    const int src = layout[static_cast<std::size_t>(j)];
    if (src >= 0) {
      next.lambda.col(j) = state.lambda.col(src);
      next.omega.col(j) = state.omega.col(src);
      next.delta(j) = state.delta(src);
      for (int t = 0; t < s_count; ++t) {
        next.scores[static_cast<std::size_t>(t)].col(j) = state.scores[static_cast<std::size_t>(t)].col(src);
      }
      entries.col(j) = state.indicator.entries().col(src);
    } else {
      const int fresh = -1 - src;
      next.omega.col(j) = proposal.omega_new.col(fresh);
      next.delta(j) = proposal.delta_new(fresh);
      for (int t = 0; t < s_count; ++t) {
        next.scores[static_cast<std::size_t>(t)].col(j) = proposal.scores_new[static_cast<std::size_t>(t)].col(fresh);
      }
      entries.col(j).setZero();
      entries(s, j) = 1;
    }
  }
  next.indicator = IndicatorMatrix(std::move(entries));

  if (!v.singles.empty()) {
    const auto q = static_cast<Eigen::Index>(v.singles.size());
    Eigen::MatrixXd l(data.num_subjects(s), q);
    for (Eigen::Index j = 0; j < q; ++j) l.col(j) = next.scores[static_cast<std::size_t>(s)].col(v.singles[j]);
    const Eigen::MatrixXd gram = l.transpose() * l;
    for (int r = 0; r < p; ++r) {
      Eigen::MatrixXd prec = state.psi_inv(s, r) * gram;
      for (Eigen::Index j = 0; j < q; ++j) prec(j, j) += next.omega(r, v.singles[j]) * v.tau(v.singles[j]);
      const Eigen::VectorXd b = state.psi_inv(s, r) * (l.transpose() * base.col(r));
      const Eigen::MatrixXd draw = draw_precision_normal_batch(source, prec, b);
      for (Eigen::Index j = 0; j < q; ++j) next.lambda(r, v.singles[j]) = draw(j, 0);
    }
  }
  state = std::move(next);
}

BirthOutcome propose_new_factors(ModelState& state, const MultiStudyDataset& data, const Hyperparams& hyper, int s,
                                 int max_free_factors, RandomSource& source) {
  BirthOutcome out;
  const BirthProposal prop = draw_birth_proposal(state, data, hyper, s, source);
  const int old_count = static_cast<int>(singleton_columns(state.indicator, s).size());
  if (prop.num_new == 0 && old_count == 0) return out;
  out.changed = true;
  const int kept = state.indicator.num_free() - old_count;
  if (kept + prop.num_new > max_free_factors) {
    out.capped = true;
    return out;
  }
  const double log_r = birth_log_ratio(state, data, prop);
  if (std::isnan(log_r)) throw NumericalError("factor birth: NaN acceptance ratio");
  if (log_r >= 0.0 || std::log(source.uniform()) < log_r) {
    apply_birth(state, data, prop, source);
    out.accepted = true;
  }
  return out;
}

void prune_empty_factors(ModelState& state) {
  std::vector<int> keep;
  for (int k = 0; k < state.num_factors(); ++k) {
    if (k < state.num_studies() || state.indicator.column_sum(k) > 0) keep.push_back(k);
  }
  if (static_cast<int>(keep.size()) != state.num_factors()) state.select_factors(keep);
}

void update_loadings(ModelState& state, const MultiStudyDataset& data, RandomSource& source) {
  const int s_count = state.num_studies();
  const int p = state.num_features();
  const int k = state.num_factors();
  std::vector<Eigen::MatrixXd> gram;
  std::vector<Eigen::MatrixXd> cross;
  for (int s = 0; s < s_count; ++s) {
    const Eigen::VectorXd a = state.indicator.row_as_diagonal(s);
    const Eigen::MatrixXd la = state.scores[static_cast<std::size_t>(s)] * a.asDiagonal();
    gram.push_back(la.transpose() * la);
    cross.push_back(la.transpose() * data.studies[static_cast<std::size_t>(s)]);
  }
  const Eigen::VectorXd tau = state.tau();
  Eigen::MatrixXd prec(k, k);
  Eigen::VectorXd lin(k);
  for (int r = 0; r < p; ++r) {
    prec.setZero();
    lin.setZero();
    for (int s = 0; s < s_count; ++s) {
      prec.noalias() += state.psi_inv(s, r) * gram[static_cast<std::size_t>(s)];
      lin.noalias() += state.psi_inv(s, r) * cross[static_cast<std::size_t>(s)].col(r);
    }
    prec.diagonal() += state.omega.row(r).transpose().cwiseProduct(tau);
    state.lambda.row(r) = draw_precision_normal_batch(source, prec, lin).transpose();
  }
}

void update_scores(ModelState& state, const MultiStudyDataset& data, RandomSource& source) {
  for (int s = 0; s < state.num_studies(); ++s) {
    const Eigen::VectorXd a = state.indicator.row_as_diagonal(s);
    const Eigen::MatrixXd la = state.lambda * a.asDiagonal();  // P x K
    const Eigen::MatrixXd weighted = state.psi_inv.row(s).transpose().asDiagonal() * la;
    Eigen::MatrixXd prec = la.transpose() * weighted;
    prec.diagonal().array() += 1.0;
    const Eigen::MatrixXd lin = weighted.transpose() * data.studies[static_cast<std::size_t>(s)].transpose();
    state.scores[static_cast<std::size_t>(s)] = draw_precision_normal_batch(source, prec, lin).transpose();
  }
}

void update_local_shrinkage(ModelState& state, const Hyperparams& hyper, RandomSource& source) {
  const Eigen::VectorXd tau = state.tau();
  const double shape = (hyper.nu + 1.0) / 2.0;
  for (int k = 0; k < state.num_factors(); ++k) {
    for (int r = 0; r < state.num_features(); ++r) {
      const double l = state.lambda(r, k);
      state.omega(r, k) = floored(draw_gamma(source, shape, (hyper.nu + tau(k) * l * l) / 2.0));
    }
  }
}

double global_shrinkage_rate(const ModelState& state, int l) {
  const int k_count = state.num_factors();
  if (l < 0 || l >= k_count) throw ParameterError("global shrinkage index out of range");
  double rate = 0.0;
  double tau_without = 1.0;
  for (int k = 0; k < k_count; ++k) {
    if (k != l) tau_without *= state.delta(k);
    if (k < l) continue;
    const double mass = (state.omega.col(k).array() * state.lambda.col(k).array().square()).sum();
    rate += tau_without * mass;
  }
  return 1.0 + 0.5 * rate;
}

void update_global_shrinkage(ModelState& state, const Hyperparams& hyper, RandomSource& source) {
  const int k_count = state.num_factors();
  const double p = state.num_features();
  for (int l = 0; l < k_count; ++l) {
    const double shape = (l == 0 ? hyper.a1 : hyper.a2) + 0.5 * p * (k_count - l);
    state.delta(l) = floored(draw_gamma(source, shape, global_shrinkage_rate(state, l)));
  }
}

Eigen::VectorXd noise_rates(const ModelState& state, const MultiStudyDataset& data, const Hyperparams& hyper, int s) {
  const Eigen::MatrixXd resid = study_residual(state, data, s);
  return (hyper.b_psi + 0.5 * resid.colwise().squaredNorm().array()).transpose();
}

void update_noise(ModelState& state, const MultiStudyDataset& data, const Hyperparams& hyper, RandomSource& source) {
  for (int s = 0; s < state.num_studies(); ++s) {
    const Eigen::VectorXd rate = noise_rates(state, data, hyper, s);
    const double shape = hyper.a_psi + 0.5 * data.num_subjects(s);
    for (int r = 0; r < state.num_features(); ++r) {
      state.psi_inv(s, r) = floored(draw_gamma(source, shape, rate(r)));
    }
  }
}

void gibbs_sweep(ModelState& state, const MultiStudyDataset& data, const Hyperparams& hyper,
                 const SweepOptions& options, RandomSource& source, ChainDiagnostics* diagnostics) {
  if (!options.fixed_indicator) {
    update_indicators(state, data, hyper, options.sharing, source);
    for (int s = 0; s < state.num_studies(); ++s) {
      const BirthOutcome out = propose_new_factors(state, data, hyper, s, options.max_free_factors, source);
      if (diagnostics) {
        diagnostics->birth_proposals += out.changed ? 1 : 0;
        diagnostics->birth_accepts += out.accepted ? 1 : 0;
        diagnostics->births_capped += out.capped ? 1 : 0;
      }
    }
    prune_empty_factors(state);
  }
  update_loadings(state, data, source);
  update_scores(state, data, source);
  update_local_shrinkage(state, hyper, source);
  update_global_shrinkage(state, hyper, source);
  update_noise(state, data, hyper, source);
}

ChainTrace run_chain(const MultiStudyDataset& data, const Hyperparams& hyper, const ChainConfig& config,
                     std::optional<ModelState> init) {
  config.validate();
  data.validate();
  if (!data.centered) throw InvariantError("run_chain requires centered data");
  RandomSource source(config.seed);
  ModelState state = init ? std::move(*init)
                          : initialize_state(data, hyper, config.constrain_sharing, config.fixed_indicator,
                                             config.max_free_factors, source);
  if (config.fixed_indicator && !(state.indicator == *config.fixed_indicator)) {
    throw InvariantError("initial state disagrees with the fixed indicator");
  }
  state.check_invariants(data);

  ChainTrace trace;
  trace.config = config;
  trace.num_studies = data.num_studies();
  trace.num_features = data.num_features();
  trace.feature_names = data.feature_names;
  trace.diagnostics.num_factors.reserve(static_cast<std::size_t>(config.n_iterations));
  trace.diagnostics.log_likelihood.reserve(static_cast<std::size_t>(config.n_iterations));

  const bool fixed = config.fixed_indicator.has_value();
  bool warned_cap = false;
  for (int it = 0; it < config.n_iterations; ++it) {
    if (!fixed) {
      annotate("update_indicators", it, [&] { update_indicators(state, data, hyper, config.constrain_sharing, source); });
      for (int s = 0; s < state.num_studies(); ++s) {
        annotate("propose_new_factors", it, [&] {
          const BirthOutcome out = propose_new_factors(state, data, hyper, s, config.max_free_factors, source);
          trace.diagnostics.birth_proposals += out.changed ? 1 : 0;
          trace.diagnostics.birth_accepts += out.accepted ? 1 : 0;
          if (out.capped) {
            ++trace.diagnostics.births_capped;
            if (!warned_cap) {
              spdlog::warn("iteration {}: factor birth rejected at the cap of {} free factors", it,
                           config.max_free_factors);
              warned_cap = true;
            }
          }
        });
      }
      prune_empty_factors(state);
    }
    annotate("update_loadings", it, [&] { update_loadings(state, data, source); });
    annotate("update_scores", it, [&] { update_scores(state, data, source); });
    annotate("update_local_shrinkage", it, [&] { update_local_shrinkage(state, hyper, source); });
    annotate("update_global_shrinkage", it, [&] { update_global_shrinkage(state, hyper, source); });
    annotate("update_noise", it, [&] { update_noise(state, data, hyper, source); });

    const double ll = log_likelihood(state, data);
    if (!std::isfinite(ll)) {
      throw NumericalError("iteration " + std::to_string(it) + ": non-finite log-likelihood");
    }
    trace.diagnostics.num_factors.push_back(state.num_factors());
    trace.diagnostics.log_likelihood.push_back(ll);
    if (config.log_every > 0 && (it + 1) % config.log_every == 0) {
      spdlog::info("seed {} iteration {}: K = {}, log-likelihood = {:.3f}", config.seed, it + 1,
                    state.num_factors(), ll);
    }
    if (it >= config.burn_in && (it - config.burn_in + 1) % config.thin == 0) {
      trace.sample_iterations.push_back(it);
      trace.indicator_samples.push_back(state.indicator);
      if (fixed) trace.lambda_samples.push_back(state.lambda);
    }
  }
  state.check_invariants(data);
  return trace;
}

std::vector<ChainTrace> run_chains(const MultiStudyDataset& data, const Hyperparams& hyper,
                                   const std::vector<ChainConfig>& configs, int jobs) {
  std::vector<ChainTrace> out(configs.size());
  std::vector<std::exception_ptr> errors(configs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        out[i] = run_chain(data, hyper, configs[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < std::min(workers, configs.size()); ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace tetris
