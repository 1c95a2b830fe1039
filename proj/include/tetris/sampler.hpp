#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tetris/kernels.hpp"
#include "tetris/model.hpp"

namespace tetris {

enum class SharingMode { free, common_and_specific_only };

std::string to_string(SharingMode mode);
SharingMode parse_sharing_mode(const std::string& text);

struct ChainConfig {
  int n_iterations = 10000;
  int burn_in = 8000;
  int thin = 1;
  std::optional<IndicatorMatrix> fixed_indicator;
  SharingMode constrain_sharing = SharingMode::free;
  std::uint64_t seed = 1;
  // Ceiling on the number of non-identity columns; births beyond it are rejected.
  int max_free_factors = 30;
  // Progress is logged every this many iterations (0 disables).
  int log_every = 100;

  void validate() const;
  int trace_length() const { return (n_iterations - burn_in) / thin; }
};

struct SweepOptions {
  SharingMode sharing = SharingMode::free;
  int max_free_factors = 30;
  bool fixed_indicator = false;
};

struct ChainDiagnostics {
  std::vector<int> num_factors;        // per iteration, after the sweep
  std::vector<double> log_likelihood;  // per iteration, after the sweep
  long birth_proposals = 0;            // replacement moves that changed something
  long birth_accepts = 0;
  long births_capped = 0;
};

struct ChainTrace {
  ChainConfig config;
  int num_studies = 0;
  int num_features = 0;
  std::vector<std::string> feature_names;
  std::vector<int> sample_iterations;            // 0-based iteration of each stored sample
  std::vector<IndicatorMatrix> indicator_samples;
  std::vector<Eigen::MatrixXd> lambda_samples;   // only with a fixed indicator
  ChainDiagnostics diagnostics;
};

// Random start: ceil(S/2) + 1 free columns with Bernoulli(1/2) memberships
// (redrawn until nonzero and allowed by the sharing mode), everything else
// from the prior. With a fixed indicator its columns are used instead.
ModelState initialize_state(const MultiStudyDataset& data, const Hyperparams& hyper, SharingMode sharing,
                            const std::optional<IndicatorMatrix>& fixed_indicator, int max_free_factors,
                            RandomSource& source);

// Draws every parameter (and the free indicator columns, K+ ~ Poisson truncated
// at max_free_factors, patterns restricted to the sharing mode) from the prior.
// Used for forward simulation.
ModelState draw_from_prior(const std::vector<int>& subjects_per_study, int num_features, const Hyperparams& hyper,
                           int max_free_factors, RandomSource& source, SharingMode sharing = SharingMode::free);

// x_is = Lambda A_s l_is + e_is with e_is ~ N(0, Psi_s).
MultiStudyDataset simulate_data(const ModelState& state, RandomSource& source);

// log p(X_s | A_sk = 1) - log p(X_s | A_sk = 0) given all other parameters.
double indicator_log_likelihood_ratio(const ModelState& state, const MultiStudyDataset& data, int s, int k);

// Gibbs update of the free indicator entries. Columns owned only by study s are
// left to propose_new_factors. Under common_and_specific_only each free column's
// whole pattern is resampled among {all studies} and the single-study patterns.
void update_indicators(ModelState& state, const MultiStudyDataset& data, const Hyperparams& hyper,
                       SharingMode sharing, RandomSource& source);

// Replacement move for study s: the free columns owned by s alone are swapped
// for k_new ~ Poisson(alpha beta / (beta + S - 1)) fresh ones, interleaved at
// uniformly random free positions, with the loadings of the swapped columns
// integrated out.
struct BirthProposal {
  int study = 0;
  int num_new = 0;
  std::vector<int> new_positions;       // sorted slots in the proposed free-column sequence
  Eigen::VectorXd delta_new;            // num_new
  Eigen::MatrixXd omega_new;            // P x num_new
  std::vector<Eigen::MatrixXd> scores_new;  // per study, n_s x num_new
};

BirthProposal draw_birth_proposal(const ModelState& state, const MultiStudyDataset& data, const Hyperparams& hyper,
                                  int s, RandomSource& source);

// log of the acceptance ratio of a proposal.
double birth_log_ratio(const ModelState& state, const MultiStudyDataset& data, const BirthProposal& proposal);

// Applies an accepted proposal: new loadings are drawn from their conditional
// posterior.
void apply_birth(ModelState& state, const MultiStudyDataset& data, const BirthProposal& proposal,
                 RandomSource& source);

struct BirthOutcome {
  bool changed = false;
  bool accepted = false;
  bool capped = false;
};

BirthOutcome propose_new_factors(ModelState& state, const MultiStudyDataset& data, const Hyperparams& hyper, int s,
                                 int max_free_factors, RandomSource& source);

// Per-feature log marginal-likelihood gain of adding the columns with the given
// study-s scores (n_s x q), precision weights omega_p .* tau (q) and residual
// e_p (n_s). Loadings of those columns are integrated out.
double collapsed_column_log_gain(const Eigen::MatrixXd& scores, const Eigen::VectorXd& prior_precision,
                                 double noise_precision, const Eigen::VectorXd& residual);

// Removes free columns with no members.
void prune_empty_factors(ModelState& state);

void update_loadings(ModelState& state, const MultiStudyDataset& data, RandomSource& source);
void update_scores(ModelState& state, const MultiStudyDataset& data, RandomSource& source);
void update_local_shrinkage(ModelState& state, const Hyperparams& hyper, RandomSource& source);

// Rate of the delta_l conditional (0-based l): 1 + 1/2 sum_{k>=l} tau_k/delta_l sum_p omega_pk Lambda_pk^2.
double global_shrinkage_rate(const ModelState& state, int l);
void update_global_shrinkage(ModelState& state, const Hyperparams& hyper, RandomSource& source);

// b_psi + 1/2 sum_i residual^2 for every feature of study s.
Eigen::VectorXd noise_rates(const ModelState& state, const MultiStudyDataset& data, const Hyperparams& hyper, int s);
void update_noise(ModelState& state, const MultiStudyDataset& data, const Hyperparams& hyper, RandomSource& source);

// One full scan: indicators, per-study births, prune, loadings, scores, local
// and global shrinkage, noise. Indicator steps are skipped with a fixed indicator.
void gibbs_sweep(ModelState& state, const MultiStudyDataset& data, const Hyperparams& hyper,
                 const SweepOptions& options, RandomSource& source, ChainDiagnostics* diagnostics = nullptr);

ChainTrace run_chain(const MultiStudyDataset& data, const Hyperparams& hyper, const ChainConfig& config,
                     std::optional<ModelState> init = std::nullopt);

// Independent chains on a bounded pool of `jobs` threads; results in input order.
std::vector<ChainTrace> run_chains(const MultiStudyDataset& data, const Hyperparams& hyper,
                                   const std::vector<ChainConfig>& configs, int jobs);

}  // namespace tetris
