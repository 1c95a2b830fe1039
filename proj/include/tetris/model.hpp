#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace tetris {

// S data matrices (n_s x P) over one shared, ordered feature set.
struct MultiStudyDataset {
  std::vector<Eigen::MatrixXd> studies;
  std::vector<std::string> feature_names;
  bool centered = false;

  int num_studies() const { return static_cast<int>(studies.size()); }
  int num_features() const { return studies.empty() ? 0 : static_cast<int>(studies.front().cols()); }
  int num_subjects(int s) const { return static_cast<int>(studies.at(static_cast<std::size_t>(s)).rows()); }

  void validate() const;
};

MultiStudyDataset center_dataset(const MultiStudyDataset& raw);

// One CSV per study, header row of feature names. Columns of later studies are
// reordered to match the first; a differing feature set is a DimensionError.
MultiStudyDataset read_dataset(const std::vector<std::filesystem::path>& study_files);
// Reads manifest.json's "studies" list when present, otherwise every *.csv in
// lexicographic order.
MultiStudyDataset read_dataset_dir(const std::filesystem::path& dir);
void write_dataset_dir(const MultiStudyDataset& data, const std::filesystem::path& dir);

struct Hyperparams {
  double alpha = 1.0;  // IBP sparsity
  double beta = 1.0;   // IBP sharing balance
  double nu = 3.0;     // local shrinkage degrees of freedom
  double a1 = 2.1;
  double a2 = 3.1;
  double a_psi = 1.0;
  double b_psi = 0.3;

  // Throws ParameterError on non-positive values; warns when a2 <= 1.
  void validate() const;
};

// Membership pattern of a factor: bit s set iff study s expresses it. S <= 64.
struct FactorType {
  std::uint64_t bits = 0;
  int num_studies = 0;

  bool contains(int s) const { return (bits >> s) & 1U; }
  int count() const;
  bool is_common() const;
  bool operator==(const FactorType&) const = default;
  auto operator<=>(const FactorType&) const = default;

  static FactorType from_studies(int num_studies, const std::vector<int>& members);
  // "1100" style string, study 0 first.
  std::string to_string() const;
  static FactorType parse(const std::string& text);
};

// S x K binary factor-sharing matrix whose first S columns are the identity.
class IndicatorMatrix {
 public:
  IndicatorMatrix() = default;
  // Validates the invariants.
  explicit IndicatorMatrix(Eigen::MatrixXi entries);

  static IndicatorMatrix identity(int num_studies);

  int num_studies() const { return static_cast<int>(entries_.rows()); }
  int num_factors() const { return static_cast<int>(entries_.cols()); }
  int num_free() const { return num_factors() - num_studies(); }

  int operator()(int s, int k) const { return entries_(s, k); }
  const Eigen::MatrixXi& entries() const { return entries_; }
  int column_sum(int k) const { return entries_.col(k).sum(); }
  FactorType column_type(int k) const;
  Eigen::VectorXd row_as_diagonal(int s) const { return entries_.row(s).transpose().cast<double>(); }

  // Unchecked mutation for the sampler; call validate() once a sweep is done.
  void set(int s, int k, int value) { entries_(s, k) = value; }
  void append_column(const FactorType& type);
  void set_column(int k, const FactorType& type);
  // Keeps the listed columns, in order.
  void select_columns(const std::vector<int>& keep);

  // Throws InvariantError. Empty free columns are allowed only when
  // allow_empty_free is set (between a step that zeroes and the prune).
  void validate(bool allow_empty_free = false) const;

  bool operator==(const IndicatorMatrix& other) const;

 private:
  Eigen::MatrixXi entries_;
};

struct Common {};
struct StudySpecific {
  int study;
};
struct PartiallyShared {
  FactorType type;
};
using FactorClass = std::variant<Common, StudySpecific, PartiallyShared>;

FactorClass classify_factor(const IndicatorMatrix& indicator, int k);

// Log-probability of the left-ordered class of the free columns under the
// two-parameter IBP with S rows.
double ibp_log_prior(const IndicatorMatrix& indicator, double alpha, double beta);
// alpha * sum_{j=1..S} beta / (beta + j - 1): the Poisson mean of the number of
// nonzero columns.
double ibp_expected_columns(int num_studies, double alpha, double beta);

// Full parameter state of one iteration. tau is derived from delta on demand.
struct ModelState {
  Eigen::MatrixXd lambda;                // P x K
  std::vector<Eigen::MatrixXd> scores;   // S matrices, n_s x K
  Eigen::MatrixXd psi_inv;               // S x P noise precisions
  Eigen::MatrixXd omega;                 // P x K local shrinkage
  Eigen::VectorXd delta;                 // K
  IndicatorMatrix indicator;

  int num_factors() const { return static_cast<int>(lambda.cols()); }
  int num_features() const { return static_cast<int>(lambda.rows()); }
  int num_studies() const { return indicator.num_studies(); }

  // tau_k = prod_{l <= k} delta_l.
  Eigen::VectorXd tau() const;

  // Keeps the listed factor columns (in order) of every per-factor parameter.
  void select_factors(const std::vector<int>& keep);

  // Shapes, positivity and indicator invariants; throws InvariantError.
  void check_invariants(const MultiStudyDataset& data) const;
};

// sum_s sum_i log N(x_is; Lambda A_s l_is, Psi_s).
double log_likelihood(const ModelState& state, const MultiStudyDataset& data);

}  // namespace tetris
