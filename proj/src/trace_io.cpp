#include "tetris/trace_io.hpp"

#include <cstdio>

#include "tetris/errors.hpp"
#include "tetris/io.hpp"

namespace tetris {

namespace {

std::string flatten(const IndicatorMatrix& m) {
  std::string out;
  out.reserve(static_cast<std::size_t>(m.num_studies() * m.num_factors()));
  for (int s = 0; s < m.num_studies(); ++s) {
    for (int k = 0; k < m.num_factors(); ++k) out.push_back(m(s, k) ? '1' : '0');
  }
  return out;
}

IndicatorMatrix unflatten(const std::string& digits, int s_count, int k_count) {
  if (static_cast<int>(digits.size()) != s_count * k_count) throw IoError("indicator row has the wrong length");
  Eigen::MatrixXi m(s_count, k_count);
  for (int s = 0; s < s_count; ++s) {
    for (int k = 0; k < k_count; ++k) {
      const char c = digits[static_cast<std::size_t>(s * k_count + k)];
      if (c != '0' && c != '1') throw IoError("indicator row has a non-binary entry");
      m(s, k) = c - '0';
    }
  }
  return IndicatorMatrix(std::move(m));
}

std::string lambda_file(std::size_t index) {
  char name[48];
  std::snprintf(name, sizeof(name), "lambda_%05zu.csv", index + 1);
  return name;
}

}  // namespace

nlohmann::json to_json(const ChainConfig& config) {
  nlohmann::json j = {{"n_iterations", config.n_iterations},
                      {"burn_in", config.burn_in},
                      {"thin", config.thin},
                      {"constrain", to_string(config.constrain_sharing)},
                      {"seed", config.seed},
                      {"max_free_factors", config.max_free_factors}};
  j["fixed_indicator"] =
      config.fixed_indicator ? matrix_to_json(config.fixed_indicator->entries()) : nlohmann::json(nullptr);
  return j;
}

ChainConfig chain_config_from_json(const nlohmann::json& j) {
  ChainConfig c;
  c.n_iterations = j.at("n_iterations").get<int>();
  c.burn_in = j.at("burn_in").get<int>();
  c.thin = j.at("thin").get<int>();
  c.constrain_sharing = parse_sharing_mode(j.at("constrain").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.max_free_factors = j.at("max_free_factors").get<int>();
  if (!j.at("fixed_indicator").is_null()) c.fixed_indicator = IndicatorMatrix(matrix_from_json(j["fixed_indicator"]));
  return c;
}

nlohmann::json to_json(const Hyperparams& h) {
  return {{"alpha", h.alpha}, {"beta", h.beta},   {"nu", h.nu},      {"a1", h.a1},
          {"a2", h.a2},       {"a_psi", h.a_psi}, {"b_psi", h.b_psi}};
}

Hyperparams hyperparams_from_json(const nlohmann::json& j) {
  Hyperparams h;
  h.alpha = j.at("alpha").get<double>();
  h.beta = j.at("beta").get<double>();
  h.nu = j.at("nu").get<double>();
  h.a1 = j.at("a1").get<double>();
  h.a2 = j.at("a2").get<double>();
  h.a_psi = j.at("a_psi").get<double>();
  h.b_psi = j.at("b_psi").get<double>();
  return h;
}

void write_trace(const ChainTrace& trace, const Hyperparams& hyper, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["tool_version"] = kToolVersion;
  manifest["config"] = to_json(trace.config);
  manifest["hyperparameters"] = to_json(hyper);
  manifest["seed"] = trace.config.seed;
  manifest["num_studies"] = trace.num_studies;
  manifest["num_features"] = trace.num_features;
  manifest["feature_names"] = trace.feature_names;
  manifest["sample_iterations"] = trace.sample_iterations;
  manifest["num_samples"] = trace.indicator_samples.size();
  manifest["num_lambda_samples"] = trace.lambda_samples.size();
  manifest["moves"] = {{"birth_proposals", trace.diagnostics.birth_proposals},
                       {"birth_accepts", trace.diagnostics.birth_accepts},
                       {"births_capped", trace.diagnostics.births_capped}};
  write_json(dir / "manifest.json", manifest);

  CsvTable ind;
  ind.header = {"sample", "iteration", "K", "entries"};
  for (std::size_t m = 0; m < trace.indicator_samples.size(); ++m) {
    const auto& a = trace.indicator_samples[m];
    ind.rows.push_back({std::to_string(m + 1), std::to_string(trace.sample_iterations[m]),
                        std::to_string(a.num_factors()), flatten(a)});
  }
  write_csv(dir / "indicators.csv", ind);

  CsvTable diag;
  diag.header = {"iteration", "K", "log_likelihood"};
  for (std::size_t it = 0; it < trace.diagnostics.num_factors.size(); ++it) {
    diag.rows.push_back({std::to_string(it), std::to_string(trace.diagnostics.num_factors[it]),
                         format_double(trace.diagnostics.log_likelihood[it])});
  }
  write_csv(dir / "diagnostics.csv", diag);

  if (!trace.lambda_samples.empty()) {
    std::filesystem::create_directories(dir / "lambda");
    for (std::size_t m = 0; m < trace.lambda_samples.size(); ++m) {
      write_matrix_csv(dir / "lambda" / lambda_file(m), trace.lambda_samples[m]);
    }
  }
}

ChainTrace read_trace(const std::filesystem::path& dir, Hyperparams* hyper) {
  const auto manifest = read_json(dir / "manifest.json");
  ChainTrace trace;
  std::size_t lambda_count = 0;
  try {
    trace.config = chain_config_from_json(manifest.at("config"));
    if (hyper) *hyper = hyperparams_from_json(manifest.at("hyperparameters"));
    trace.num_studies = manifest.at("num_studies").get<int>();
    trace.num_features = manifest.at("num_features").get<int>();
    trace.feature_names = manifest.at("feature_names").get<std::vector<std::string>>();
    lambda_count = manifest.at("num_lambda_samples").get<std::size_t>();
    const auto& moves = manifest.at("moves");
    trace.diagnostics.birth_proposals = moves.at("birth_proposals").get<long>();
    trace.diagnostics.birth_accepts = moves.at("birth_accepts").get<long>();
    trace.diagnostics.births_capped = moves.at("births_capped").get<long>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed trace manifest in " + dir.string() + ": " + e.what());
  }

  const CsvTable ind = read_csv(dir / "indicators.csv");
  for (const auto& row : ind.rows) {
    trace.sample_iterations.push_back(std::stoi(row[1]));
    trace.indicator_samples.push_back(unflatten(row[3], trace.num_studies, std::stoi(row[2])));
  }
  const auto diag_path = dir / "diagnostics.csv";
  if (std::filesystem::exists(diag_path)) {
    const CsvTable diag = read_csv(diag_path);
    for (const auto& row : diag.rows) {
      trace.diagnostics.num_factors.push_back(std::stoi(row[1]));
      trace.diagnostics.log_likelihood.push_back(parse_double(row[2]));
    }
  }
  for (std::size_t m = 0; m < lambda_count; ++m) {
    trace.lambda_samples.push_back(read_matrix_csv(dir / "lambda" / lambda_file(m)));
  }
  return trace;
}

}  // namespace tetris
