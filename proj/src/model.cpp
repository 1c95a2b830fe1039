#include "tetris/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

#include <spdlog/spdlog.h>

#include "tetris/errors.hpp"
#include "tetris/io.hpp"

namespace tetris {

void MultiStudyDataset::validate() const {
  if (studies.empty()) throw InvariantError("dataset has no studies");
  const auto p = studies.front().cols();
  if (p < 1) throw InvariantError("dataset has no features");
  for (std::size_t s = 0; s < studies.size(); ++s) {
    if (studies[s].rows() < 1) throw InvariantError("study " + std::to_string(s + 1) + " has no subjects");
    if (studies[s].cols() != p) throw DimensionError("study " + std::to_string(s + 1) + " has a different feature count");
    if (!studies[s].allFinite()) throw InvariantError("study " + std::to_string(s + 1) + " has non-finite values");
  }
  if (!feature_names.empty() && static_cast<Eigen::Index>(feature_names.size()) != p) {
    throw DimensionError("feature name count does not match the data");
  }
  if (centered) {
    for (std::size_t s = 0; s < studies.size(); ++s) {
      if (studies[s].colwise().mean().cwiseAbs().maxCoeff() > 1e-8) {
        throw InvariantError("study " + std::to_string(s + 1) + " is flagged centered but is not");
      }
    }
  }
}

MultiStudyDataset center_dataset(const MultiStudyDataset& raw) {
  MultiStudyDataset out = raw;
  for (std::size_t s = 0; s < out.studies.size(); ++s) {
    auto& x = out.studies[s];
    if (x.rows() < 1) throw InvariantError("cannot center empty study " + std::to_string(s + 1));
    x.rowwise() -= x.colwise().mean();
  }
  out.centered = true;
  return out;
}

MultiStudyDataset read_dataset(const std::vector<std::filesystem::path>& study_files) {
  if (study_files.empty()) throw IoError("no study files given");
  MultiStudyDataset data;
  for (const auto& file : study_files) {
    std::vector<std::string> header;
    Eigen::MatrixXd x = read_matrix_csv(file, &header);
    if (x.rows() < 1) throw InvariantError("study file has no rows: " + file.string());
    if (data.feature_names.empty()) {
      data.feature_names = header;
      std::set<std::string> unique(header.begin(), header.end());
      if (unique.size() != header.size()) throw DimensionError("duplicate feature names in " + file.string());
      data.studies.push_back(std::move(x));
      continue;
    }
    if (header.size() != data.feature_names.size()) {
      throw DimensionError("feature count mismatch in " + file.string());
    }
    std::map<std::string, Eigen::Index> where;
    for (std::size_t j = 0; j < header.size(); ++j) where[header[j]] = static_cast<Eigen::Index>(j);
    Eigen::MatrixXd reordered(x.rows(), x.cols());
    for (std::size_t j = 0; j < data.feature_names.size(); ++j) {
      const auto it = where.find(data.feature_names[j]);
      if (it == where.end()) {
        throw DimensionError("feature '" + data.feature_names[j] + "' missing from " + file.string());
      }
      reordered.col(static_cast<Eigen::Index>(j)) = x.col(it->second);
    }
    data.studies.push_back(std::move(reordered));
  }
  data.validate();
  return data;
}

MultiStudyDataset read_dataset_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  const auto manifest = dir / "manifest.json";
  if (std::filesystem::exists(manifest)) {
    const auto j = read_json(manifest);
    if (j.contains("studies")) {
      for (const auto& name : j["studies"]) files.push_back(dir / name.get<std::string>());
    }
  }
  if (files.empty()) {
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      if (entry.path().extension() == ".csv") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  }
  MultiStudyDataset data = read_dataset(files);
  data.centered = false;
  return data;
}

void write_dataset_dir(const MultiStudyDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json names = nlohmann::json::array();
  for (int s = 0; s < data.num_studies(); ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "study_%02d.csv", s + 1);
    write_matrix_csv(dir / name, data.studies[static_cast<std::size_t>(s)], data.feature_names);
    names.push_back(name);
  }
  write_json(dir / "manifest.json", {{"tool_version", kToolVersion},
                                     {"studies", names},
                                     {"num_features", data.num_features()},
                                     {"centered", data.centered}});
}

void Hyperparams::validate() const {
  const std::pair<const char*, double> values[] = {{"alpha", alpha}, {"beta", beta}, {"nu", nu},
                                                   {"a1", a1},       {"a2", a2},     {"a_psi", a_psi},
                                                   {"b_psi", b_psi}};
  for (const auto& [name, v] : values) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw ParameterError(std::string("hyperparameter ") + name + " must be positive and finite");
    }
  }
  if (a2 <= 1.0) spdlog::warn("a2 = {} <= 1: column precisions are not stochastically increasing", a2);
}

int FactorType::count() const { return std::popcount(bits); }

bool FactorType::is_common() const { return count() == num_studies; }

FactorType FactorType::from_studies(int num_studies, const std::vector<int>& members) {
  if (num_studies < 1 || num_studies > 64) throw ParameterError("factor types support 1..64 studies");
  FactorType t{0, num_studies};
  for (int s : members) {
    if (s < 0 || s >= num_studies) throw ParameterError("study index out of range");
    t.bits |= std::uint64_t{1} << s;
  }
  return t;
}

std::string FactorType::to_string() const {
  std::string out;
  for (int s = 0; s < num_studies; ++s) out.push_back(contains(s) ? '1' : '0');
  return out;
}

FactorType FactorType::parse(const std::string& text) {
  if (text.empty() || text.size() > 64) throw ParameterError("bad factor type '" + text + "'");
  FactorType t{0, static_cast<int>(text.size())};
  for (std::size_t s = 0; s < text.size(); ++s) {
    if (text[s] == '1') {
      t.bits |= std::uint64_t{1} << s;
    } else if (text[s] != '0') {
      throw ParameterError("bad factor type '" + text + "'");
    }
  }
  return t;
}

IndicatorMatrix::IndicatorMatrix(Eigen::MatrixXi entries) : entries_(std::move(entries)) { validate(); }

IndicatorMatrix IndicatorMatrix::identity(int num_studies) {
  if (num_studies < 1 || num_studies > 64) throw ParameterError("indicator matrices support 1..64 studies");
  return IndicatorMatrix(Eigen::MatrixXi::Identity(num_studies, num_studies));
}

FactorType IndicatorMatrix::column_type(int k) const {
  if (k < 0 || k >= num_factors()) throw ParameterError("factor index out of range");
  FactorType t{0, num_studies()};
  for (int s = 0; s < num_studies(); ++s) {
    if (entries_(s, k)) t.bits |= std::uint64_t{1} << s;
  }
  return t;
}

void IndicatorMatrix::append_column(const FactorType& type) {
  if (type.num_studies != num_studies()) throw DimensionError("factor type has the wrong study count");
  entries_.conservativeResize(Eigen::NoChange, entries_.cols() + 1);
  set_column(num_factors() - 1, type);
}

void IndicatorMatrix::set_column(int k, const FactorType& type) {
  for (int s = 0; s < num_studies(); ++s) entries_(s, k) = type.contains(s) ? 1 : 0;
}

void IndicatorMatrix::select_columns(const std::vector<int>& keep) {
  Eigen::MatrixXi next(entries_.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j) next.col(static_cast<Eigen::Index>(j)) = entries_.col(keep[j]);
  entries_ = std::move(next);
}

void IndicatorMatrix::validate(bool allow_empty_free) const {
  const int s_count = num_studies();
  if (s_count < 1) throw InvariantError("indicator matrix needs at least one study");
  if (s_count > 64) throw InvariantError("indicator matrices support at most 64 studies");
  if (num_factors() < s_count) throw InvariantError("indicator matrix has fewer columns than studies");
  if ((entries_.array() != 0 && entries_.array() != 1).any()) throw InvariantError("indicator entries must be 0/1");
  if (entries_.leftCols(s_count) != Eigen::MatrixXi::Identity(s_count, s_count)) {
    throw InvariantError("first S indicator columns must form the identity");
  }
  if (!allow_empty_free) {
    for (int k = s_count; k < num_factors(); ++k) {
      if (column_sum(k) == 0) throw InvariantError("indicator column " + std::to_string(k + 1) + " is empty");
    }
  }
}

bool IndicatorMatrix::operator==(const IndicatorMatrix& other) const {
  return entries_.rows() == other.entries_.rows() && entries_.cols() == other.entries_.cols() &&
         entries_ == other.entries_;
}

FactorClass classify_factor(const IndicatorMatrix& indicator, int k) {
  const FactorType t = indicator.column_type(k);
  const int members = t.count();
  if (members == 0) throw InvariantError("empty indicator column");
  if (members == t.num_studies) return Common{};
  if (members == 1) return StudySpecific{std::countr_zero(t.bits)};
  return PartiallyShared{t};
}

double ibp_expected_columns(int num_studies, double alpha, double beta) {
  double h = 0.0;
  for (int j = 1; j <= num_studies; ++j) h += beta / (beta + j - 1);
  return alpha * h;
}

double ibp_log_prior(const IndicatorMatrix& indicator, double alpha, double beta) {
  indicator.validate();
  if (!(alpha > 0.0) || !(beta > 0.0)) throw ParameterError("IBP parameters must be positive");
  const int s_count = indicator.num_studies();
  double lp = -ibp_expected_columns(s_count, alpha, beta);
  std::map<std::uint64_t, int> multiplicity;
  for (int k = s_count; k < indicator.num_factors(); ++k) {
    const int m = indicator.column_sum(k);
    lp += std::log(alpha * beta) + std::lgamma(m) + std::lgamma(s_count - m + beta) - std::lgamma(s_count + beta);
    ++multiplicity[indicator.column_type(k).bits];
  }
  for (const auto& [bits, count] : multiplicity) lp -= std::lgamma(count + 1.0);
  return lp;
}

Eigen::VectorXd ModelState::tau() const {
  Eigen::VectorXd t(delta.size());
  double running = 1.0;
  for (Eigen::Index k = 0; k < delta.size(); ++k) {
    running *= delta(k);
    t(k) = running;
  }
  return t;
}

void ModelState::select_factors(const std::vector<int>& keep) {
  const auto n = static_cast<Eigen::Index>(keep.size());
  Eigen::MatrixXd next_lambda(lambda.rows(), n);
  Eigen::MatrixXd next_omega(omega.rows(), n);
  Eigen::VectorXd next_delta(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto src = keep[static_cast<std::size_t>(j)];
    next_lambda.col(j) = lambda.col(src);
    next_omega.col(j) = omega.col(src);
    next_delta(j) = delta(src);
  }
  for (auto& l : scores) {
    Eigen::MatrixXd next(l.rows(), n);
    for (Eigen::Index j = 0; j < n; ++j) next.col(j) = l.col(keep[static_cast<std::size_t>(j)]);
    l = std::move(next);
  }
  lambda = std::move(next_lambda);
  omega = std::move(next_omega);
  delta = std::move(next_delta);
  indicator.select_columns(keep);
}

void ModelState::check_invariants(const MultiStudyDataset& data) const {
  indicator.validate();
  const auto k = lambda.cols();
  const auto p = lambda.rows();
  if (p != data.num_features()) throw InvariantError("loadings row count differs from feature count");
  if (omega.rows() != p || omega.cols() != k || delta.size() != k || indicator.num_factors() != k) {
    throw InvariantError("factor counts disagree across parameters");
  }
  if (indicator.num_studies() != data.num_studies() || static_cast<int>(scores.size()) != data.num_studies() ||
      psi_inv.rows() != data.num_studies() || psi_inv.cols() != p) {
    throw InvariantError("study counts disagree across parameters");
  }
  for (int s = 0; s < data.num_studies(); ++s) {
    const auto& l = scores[static_cast<std::size_t>(s)];
    if (l.rows() != data.num_subjects(s) || l.cols() != k) throw InvariantError("score matrix has the wrong shape");
    if (!l.allFinite()) throw InvariantError("non-finite scores");
  }
  if (!lambda.allFinite()) throw InvariantError("non-finite loadings");
  if (!(psi_inv.array() > 0).all() || !(omega.array() > 0).all() || !(delta.array() > 0).all()) {
    throw InvariantError("precision parameters must be strictly positive");
  }
}

double log_likelihood(const ModelState& state, const MultiStudyDataset& data) {
  double ll = 0.0;
  const double log_2pi = std::log(2.0 * std::numbers::pi);
  for (int s = 0; s < data.num_studies(); ++s) {
    const auto& x = data.studies[static_cast<std::size_t>(s)];
    const Eigen::VectorXd a = state.indicator.row_as_diagonal(s);
    const Eigen::MatrixXd resid =
        x - state.scores[static_cast<std::size_t>(s)] * a.asDiagonal() * state.lambda.transpose();
    const Eigen::RowVectorXd prec = state.psi_inv.row(s);
    ll += 0.5 * static_cast<double>(x.rows()) * (prec.array().log().sum() - static_cast<double>(x.cols()) * log_2pi);
    ll -= 0.5 * (resid.array().square().rowwise() * prec.array()).sum();
  }
  return ll;
}

}  // namespace tetris
