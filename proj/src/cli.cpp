#include "tetris/cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "tetris/errors.hpp"
#include "tetris/heatmap.hpp"
#include "tetris/io.hpp"
#include "tetris/postprocess.hpp"
#include "tetris/trace_io.hpp"

namespace tetris::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Creates `dir`; its parent has to exist already.
void prepare_out_dir(const fs::path& dir) {
  if (dir.empty()) throw ParameterError("an output directory is required");
  const fs::path parent = dir.has_parent_path() ? dir.parent_path() : fs::path(".");
  if (!fs::is_directory(parent)) throw IoError("output location does not exist: " + parent.string());
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

// Path of `target` as seen from `base`, so manifests do not depend on where a
// run was started.
std::string relative_path(const fs::path& target, const fs::path& base) {
  std::error_code ec;
  const fs::path rel = fs::weakly_canonical(target, ec).lexically_relative(fs::weakly_canonical(base, ec));
  return (ec || rel.empty()) ? target.generic_string() : rel.generic_string();
}

json command_manifest(const std::string& command, std::uint64_t seed, json config) {
  return {{"tool", "tetris"},
          {"tool_version", kToolVersion},
          {"command", command},
          {"seed", seed},
          {"config", std::move(config)}};
}

void write_timing(const fs::path& dir, double seconds) {
  write_json(dir / "timing.json", {{"elapsed_seconds", seconds}});
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return RandomSource(base).substream(index).engine()();
}

double median(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n == 0) return 0.0;
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<std::string> column_labels(const IndicatorMatrix& indicator) {
  std::vector<std::string> labels;
  for (int k = 0; k < indicator.num_factors(); ++k) labels.push_back(indicator.column_type(k).to_string());
  return labels;
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands

void simulate(const SimulateOptions& options) {
  Stopwatch clock;
  SimResult sim = generate_scenario(options.scenario);
  prepare_out_dir(options.out);
  write_dataset_dir(sim.data, options.out / "data");
  write_truth(sim.truth, options.out / "truth");
  write_json(options.out / "manifest.json",
             command_manifest("simulate", options.scenario.seed, options.scenario.to_json()));
  write_timing(options.out, clock.seconds());
  spdlog::info("simulated scenario {}: {} studies, n = {}, p = {}, K = {}", options.scenario.scenario,
               sim.data.num_studies(), options.scenario.n, sim.data.num_features(), sim.truth.lambda.cols());
}

IndicatorMatrix load_indicator(const fs::path& path) {
  if (fs::is_directory(path)) return load_indicator(path / "estimate.json");
  if (!fs::exists(path)) throw IoError("indicator file not found: " + path.string());
  if (path.extension() == ".csv") {
    const Eigen::MatrixXd m = read_matrix_csv(path);
    Eigen::MatrixXi entries = m.unaryExpr([](double v) { return static_cast<int>(std::lround(v)); });
    if (!entries.cast<double>().isApprox(m) && m.norm() > 0) throw ParameterError("indicator CSV must hold 0/1");
    return IndicatorMatrix(entries);
  }
  const json j = read_json(path);
  try {
    if (j.is_object() && j.contains("point_estimate")) return IndicatorMatrix(matrix_from_json(j["point_estimate"]));
    return IndicatorMatrix(matrix_from_json(j));
  } catch (const json::exception& e) {
    throw ParameterError("malformed indicator in " + path.string() + ": " + e.what());
  }
}

void fit(const FitOptions& options) {
  Stopwatch clock;
  ChainConfig chain = options.chain;
  if (options.fixed_indicator) chain.fixed_indicator = load_indicator(*options.fixed_indicator);
  chain.validate();
  options.hyper.validate();
  const MultiStudyDataset data = center_dataset(read_dataset_dir(options.data_dir));
  if (chain.fixed_indicator && chain.fixed_indicator->num_studies() != data.num_studies()) {
    throw DimensionError("fixed indicator has " + std::to_string(chain.fixed_indicator->num_studies()) +
                         " rows but the dataset has " + std::to_string(data.num_studies()) + " studies");
  }
  prepare_out_dir(options.out);
  spdlog::info("fitting {} studies x {} features: {} iterations, burn-in {}, thin {}{}", data.num_studies(),
               data.num_features(), chain.n_iterations, chain.burn_in, chain.thin,
               chain.fixed_indicator ? ", fixed indicator" : "");
  const ChainTrace trace = run_chain(data, options.hyper, chain);
  write_trace(trace, options.hyper, options.out);
  write_timing(options.out, clock.seconds());
}

void estimate(const EstimateOptions& options) {
  Stopwatch clock;
  if (!(options.level > 0.0 && options.level <= 1.0)) throw ParameterError("--level must lie in (0, 1]");
  if (options.jobs < 1) throw ParameterError("--jobs must be at least 1");
  Hyperparams hyper;
  const ChainTrace trace = read_trace(options.trace_dir, &hyper);
  if (trace.indicator_samples.empty()) throw ParameterError("trace " + options.trace_dir.string() + " is empty");

  EstimationReport report;
  report.point = select_point_estimate(trace, hyper, options.jobs);
  report.ball = credible_ball(trace, report.point.indicator, options.level);
  report.membership = membership_fractions(trace.indicator_samples);

  prepare_out_dir(options.out);
  write_estimate(report, options.out);
  write_json(options.out / "manifest.json",
             command_manifest("estimate", trace.config.seed,
                              {{"trace", relative_path(options.trace_dir, options.out)}, {"level", options.level}}));
  write_timing(options.out, clock.seconds());
  spdlog::info("point estimate: K = {}, credible-ball radius {} at level {} (coverage {:.3f})",
               report.point.indicator.num_factors(), report.ball.epsilon_star, options.level, report.ball.coverage);
}

void recover(const RecoverOptions& options) {
  Stopwatch clock;
  const ChainTrace trace = read_trace(options.trace_dir);
  if (!trace.config.fixed_indicator || trace.lambda_samples.empty()) {
    throw ParameterError("recover needs a non-empty trace from a fixed-indicator fit");
  }
  EstimationReport report = read_estimate(options.estimate_dir);
  if (!(report.point.indicator == *trace.config.fixed_indicator)) {
    spdlog::warn("the trace was fitted with a different indicator than the estimate's point estimate");
  }
  report.loadings = recover_loadings(trace);

  prepare_out_dir(options.out);
  write_estimate(report, options.out);
  write_json(options.out / "manifest.json",
             command_manifest("recover", trace.config.seed,
                              {{"trace", relative_path(options.trace_dir, options.out)},
                               {"estimate", relative_path(options.estimate_dir, options.out)}}));
  write_timing(options.out, clock.seconds());
}

EvaluationReport evaluate(const EvaluateOptions& options) {
  Stopwatch clock;
  const EstimationReport est = read_estimate(options.estimate_dir);
  if (!est.loadings) throw ParameterError("estimate has no recovered loadings; run `recover` first");
  const SimTruth truth = read_truth(options.truth_dir);
  const RecoveredLoadings& rl = *est.loadings;
  if (rl.lambda_hat.rows() != truth.lambda.rows() || rl.indicator.num_studies() != truth.indicator.num_studies()) {
    throw DimensionError("estimate and truth disagree on the number of features or studies");
  }
  const EvaluationReport report = evaluate_run(rl.lambda_hat, rl.indicator, truth);

  prepare_out_dir(options.out);
  write_json(options.out / "evaluation.json", report.to_json());
  write_csv(options.out / "evaluation.csv", report.tidy(options.replicate));
  write_heatmap_svg(options.out / "lambda_hat.svg", rl.lambda_hat, column_labels(rl.indicator),
                    "estimated loadings");
  write_heatmap_svg(options.out / "lambda_true.svg", truth.lambda, column_labels(truth.indicator),
                    "true loadings");
  write_json(options.out / "manifest.json",
             command_manifest("evaluate", truth.config.seed,
                              {{"estimate", relative_path(options.estimate_dir, options.out)},
                               {"truth", relative_path(options.truth_dir, options.out)},
                               {"replicate", options.replicate}}));
  write_timing(options.out, clock.seconds());
  return report;
}

// ---------------------------------------------------------------------------
// Pipeline

json PipelineOptions::to_json() const {
  json chain_json = tetris::to_json(chain);
  chain_json.erase("fixed_indicator");
  return {{"scenario", scenario.to_json()},
          {"hyperparameters", tetris::to_json(hyper)},
          {"chain", chain_json},
          {"refit_thin", refit_thin},
          {"replicates", replicates},
          {"jobs", jobs},
          {"level", level}};
}

namespace {

// Settings that determine a replicate's output; resuming requires a match.
json replicate_config(const PipelineOptions& options, int replicate) {
  json j = options.to_json();
  j.erase("replicates");
  j.erase("jobs");
  j["replicate"] = replicate;
  return j;
}

std::string replicate_name(int replicate) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "rep_%03d", replicate);
  return buf;
}

struct ReplicateResult {
  bool ok = false;
  bool resumed = false;
  EvaluationReport report;
  std::string stage;
  std::string error;
  double seconds = 0.0;
};

ReplicateResult run_replicate(const PipelineOptions& options, int replicate, int inner_jobs) {
  ReplicateResult result;
  Stopwatch clock;
  const fs::path dir = options.out / replicate_name(replicate);
  const json config = replicate_config(options, replicate);

  if (fs::exists(dir / "manifest.json")) {
    try {
      const json manifest = read_json(dir / "manifest.json");
      if (manifest.value("status", "") == "complete" && manifest.at("config") == config) {
        result.report = EvaluationReport::from_json(read_json(dir / "evaluation" / "evaluation.json"));
        result.ok = true;
        result.resumed = true;
        return result;
      }
    } catch (const std::exception& e) {
      spdlog::warn("{}: ignoring unreadable manifest ({})", replicate_name(replicate), e.what());
    }
  }
  fs::remove_all(dir);
  fs::create_directories(dir);

  const std::uint64_t base = options.chain.seed;
  const auto index = static_cast<std::uint64_t>(replicate);
  const std::uint64_t sim_seed = derive_seed(base, 3 * index);
  const std::uint64_t fit_seed = derive_seed(base, 3 * index + 1);
  const std::uint64_t refit_seed = derive_seed(base, 3 * index + 2);

  result.stage = "simulate";
  try {
    SimulateOptions sim{options.scenario, dir / "sim"};
    sim.scenario.seed = sim_seed;
    simulate(sim);

    result.stage = "fit";
    FitOptions phase1{dir / "sim" / "data", dir / "fit", options.hyper, options.chain, std::nullopt};
    phase1.chain.seed = fit_seed;
    phase1.chain.fixed_indicator.reset();
    phase1.chain.log_every = 0;
    fit(phase1);

    result.stage = "estimate";
    estimate({dir / "fit", dir / "estimate", options.level, inner_jobs});

    result.stage = "refit";
    FitOptions phase2 = phase1;
    phase2.out = dir / "refit";
    phase2.chain.seed = refit_seed;
    phase2.chain.thin = options.refit_thin;
    phase2.fixed_indicator = dir / "estimate";
    fit(phase2);

    result.stage = "recover";
    recover({dir / "refit", dir / "estimate", dir / "recovered"});

    result.stage = "evaluate";
    result.report = evaluate({dir / "recovered", dir / "sim" / "truth", dir / "evaluation", replicate_name(replicate)});
  } catch (const std::exception& e) {
    result.error = e.what();
    result.seconds = clock.seconds();
    write_json(dir / "failure.json", {{"replicate", replicate}, {"stage", result.stage}, {"error", result.error}});
    return result;
  }

  result.ok = true;
  result.seconds = clock.seconds();
  json manifest = command_manifest("pipeline-replicate", base, config);
  manifest["status"] = "complete";
  manifest["seeds"] = {{"simulate", sim_seed}, {"fit", fit_seed}, {"refit", refit_seed}};
  write_json(dir / "manifest.json", manifest);
  return result;
}

}  // namespace

int pipeline(const PipelineOptions& options) {
  if (options.replicates < 1) throw ParameterError("--replicates must be at least 1");
  if (options.jobs < 1) throw ParameterError("--jobs must be at least 1");
  if (options.refit_thin < 1) throw ParameterError("--refit-thin must be at least 1");
  if (!(options.level > 0.0 && options.level <= 1.0)) throw ParameterError("--level must lie in (0, 1]");
  options.hyper.validate();
  options.chain.validate();
  ChainConfig refit_chain = options.chain;
  refit_chain.thin = options.refit_thin;
  refit_chain.validate();
  prepare_out_dir(options.out);

  Stopwatch clock;
  const int workers = std::min(options.jobs, options.replicates);
  const int inner_jobs = workers > 1 ? 1 : options.jobs;
  std::vector<ReplicateResult> results(static_cast<std::size_t>(options.replicates));
  std::atomic<int> next{0};
  auto work = [&] {
    for (int r = next++; r < options.replicates; r = next++) {
      ReplicateResult& res = results[static_cast<std::size_t>(r)];
      res = run_replicate(options, r + 1, inner_jobs);
      if (!res.ok) {
        spdlog::error("{} failed during {}: {}", replicate_name(r + 1), res.stage, res.error);
      } else {
        spdlog::info("{} {}", replicate_name(r + 1), res.resumed ? "already complete" : "done");
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  CsvTable summary{{"replicate", "metric", "target", "value"}, {}};
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::vector<double>> values;
  json failures = json::array();
  json timing = json::object();
  for (int r = 0; r < options.replicates; ++r) {
    const ReplicateResult& res = results[static_cast<std::size_t>(r)];
    if (!res.ok) {
      failures.push_back({{"replicate", r + 1}, {"stage", res.stage}, {"error", res.error}});
      continue;
    }
    if (!res.resumed) timing[replicate_name(r + 1)] = res.seconds;
    for (auto& row : res.report.tidy(replicate_name(r + 1)).rows) {
      const auto key = std::make_pair(row[1], row[2]);
      if (!values.count(key)) order.push_back(key);
      values[key].push_back(parse_double(row[3]));
      summary.rows.push_back(std::move(row));
    }
  }
  write_csv(options.out / "summary.csv", summary);
  CsvTable medians{{"metric", "target", "median", "replicates"}, {}};
  for (const auto& key : order) {
    const auto& v = values[key];
    medians.rows.push_back({key.first, key.second, format_double(median(v)), std::to_string(v.size())});
  }
  write_csv(options.out / "summary_medians.csv", medians);

  json manifest = command_manifest("pipeline", options.chain.seed, options.to_json());
  manifest["completed"] = options.replicates - static_cast<int>(failures.size());
  manifest["failures"] = failures;
  write_json(options.out / "manifest.json", manifest);
  timing["total"] = clock.seconds();
  write_json(options.out / "timing.json", timing);
  if (!failures.empty()) {
    spdlog::error("{} of {} replicates failed; see failure.json in their directories", failures.size(),
                  options.replicates);
  }
  return static_cast<int>(failures.size());
}

// ---------------------------------------------------------------------------
// Argument parsing

namespace {

// Config files in JSON: nested objects become sections, arrays multiple values.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool write_description,
                        std::string prefix) const override {
    return CLI::ConfigTOML().to_config(app, default_also, write_description, std::move(prefix));
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      j = json::parse(input);
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("JSON config must be an object");
    std::vector<CLI::ConfigItem> items;
    flatten(j, {}, items);
    return items;
  }

 private:
  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void flatten(const json& j, std::vector<std::string> parents, std::vector<CLI::ConfigItem>& items) {
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) {
        auto sub = parents;
        sub.push_back(key);
        flatten(value, sub, items);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      items.push_back(std::move(item));
    }
  }
};

// Expands `--config FILE` into ordinary flags placed right after the
// subcommand, so flags given on the command line still take precedence.
// Keys at the top level or under a section named after the subcommand apply.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> rest;
  std::string file;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      file = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      file = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (file.empty()) return rest;
  const auto sub = std::find_if(rest.begin(), rest.end(), [](const std::string& a) { return a.rfind('-', 0) != 0; });
  if (sub == rest.end()) return rest;

  std::ifstream in(file);
  if (!in) throw CLI::FileError::Missing(file);
  const std::vector<CLI::ConfigItem> items = fs::path(file).extension() == ".json"
                                                 ? JsonConfig().from_config(in)
                                                 : CLI::ConfigTOML().from_config(in);
  std::vector<std::string> expanded;
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    if (!item.parents.empty() && item.parents != std::vector<std::string>{*sub}) continue;
    expanded.push_back("--" + item.name);
    for (const auto& v : item.inputs) expanded.push_back(v);
  }
  std::vector<std::string> out(rest.begin(), sub + 1);
  out.insert(out.end(), expanded.begin(), expanded.end());
  out.insert(out.end(), sub + 1, rest.end());
  return out;
}

void add_hyper_options(CLI::App* app, Hyperparams& h) {
  app->add_option("--alpha", h.alpha, "IBP mass parameter")->capture_default_str();
  app->add_option("--beta", h.beta, "IBP concentration parameter")->capture_default_str();
  app->add_option("--nu", h.nu, "local shrinkage degrees of freedom")->capture_default_str();
  app->add_option("--a1", h.a1, "shape of the first global shrinkage factor")->capture_default_str();
  app->add_option("--a2", h.a2, "shape of the later global shrinkage factors")->capture_default_str();
  app->add_option("--a-psi", h.a_psi, "noise precision shape")->capture_default_str();
  app->add_option("--b-psi", h.b_psi, "noise precision rate")->capture_default_str();
}

void add_chain_options(CLI::App* app, ChainConfig& c, std::string& constrain) {
  app->add_option("--seed", c.seed, "random seed")->capture_default_str();
  app->add_option("--iterations", c.n_iterations, "MCMC iterations")->capture_default_str();
  app->add_option("--burn-in", c.burn_in, "iterations discarded before storing samples")->capture_default_str();
  app->add_option("--thin", c.thin, "store every thin-th post-burn-in iteration")->capture_default_str();
  app->add_option("--max-free", c.max_free_factors, "cap on non-identity factor columns")->capture_default_str();
  app->add_option("--constrain", constrain, "sharing patterns: free or common-specific")
      ->check(CLI::IsMember({"free", "common-specific"}))
      ->capture_default_str();
}

void add_scenario_options(CLI::App* app, ScenarioConfig& s, int& partial) {
  app->add_option("--scenario", s.scenario, "simulation scenario (1, 2 or 3)")
      ->check(CLI::IsMember({1, 2, 3}))
      ->capture_default_str();
  app->add_option("--n", s.n, "subjects per study")->capture_default_str();
  app->add_option("--p", s.p, "features")->capture_default_str();
  app->add_option("--studies", s.num_studies, "number of studies (scenario 2 only)")->capture_default_str();
  app->add_option("--sparsity", s.sparsity, "fraction of zero loadings")->capture_default_str();
  app->add_option("--partial", partial, "partially shared factors (scenarios 2 and 3)")->capture_default_str();
}

void configure_logging() {
  static std::once_flag once;
  std::call_once(once, [] {
    auto logger = spdlog::stderr_color_mt("tetris");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  });
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("TETRIS_LOG")) {
    const auto level = spdlog::level::from_str(env);
    if (level == spdlog::level::off && std::string(env) != "off") {
      spdlog::warn("unknown TETRIS_LOG level '{}', keeping info", env);
    } else {
      spdlog::set_level(level);
    }
  }
}

}  // namespace

int exit_code_for_current_exception() {
  try {
    throw;
  } catch (const ParameterError& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const DimensionError& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitRuntime;
  } catch (...) {
    spdlog::error("unknown error");
    return kExitRuntime;
  }
}

int run(const std::vector<std::string>& args) {
  configure_logging();

  CLI::App app{"Bayesian combinatorial multi-study factor analysis", "tetris"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_file;  // consumed by expand_config; listed for --help
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "TOML or JSON file with option values (flags take precedence)");
  };

  SimulateOptions sim_opts;
  int sim_partial = 0;
  auto* sim_cmd = app.add_subcommand("simulate", "generate a simulated multi-study dataset and its truth");
  add_scenario_options(sim_cmd, sim_opts.scenario, sim_partial);
  sim_cmd->add_option("--seed", sim_opts.scenario.seed, "random seed")->capture_default_str();
  sim_cmd->add_option("--out", sim_opts.out, "output directory")->required();
  add_config(sim_cmd);

  FitOptions fit_opts;
  std::string fit_constrain = "free";
  std::string fixed_path;
  auto* fit_cmd = app.add_subcommand("fit", "run the Gibbs sampler on a dataset directory");
  fit_cmd->add_option("--data", fit_opts.data_dir, "dataset directory (one CSV per study)")->required();
  fit_cmd->add_option("--out", fit_opts.out, "trace output directory")->required();
  fit_cmd->add_option("--fixed-indicator", fixed_path, "estimate directory or indicator file to hold fixed");
  add_chain_options(fit_cmd, fit_opts.chain, fit_constrain);
  add_hyper_options(fit_cmd, fit_opts.hyper);
  add_config(fit_cmd);

  EstimateOptions est_opts;
  auto* est_cmd = app.add_subcommand("estimate", "point estimate and credible ball of the sharing pattern");
  est_cmd->add_option("--trace", est_opts.trace_dir, "trace directory from fit")->required();
  est_cmd->add_option("--out", est_opts.out, "estimate output directory")->required();
  est_cmd->add_option("--level", est_opts.level, "credible-ball level")->capture_default_str();
  est_cmd->add_option("--jobs", est_opts.jobs, "threads for pairwise distances")->capture_default_str();
  add_config(est_cmd);

  RecoverOptions rec_opts;
  auto* rec_cmd = app.add_subcommand("recover", "recover loadings from a fixed-indicator trace");
  rec_cmd->add_option("--trace", rec_opts.trace_dir, "fixed-indicator trace directory")->required();
  rec_cmd->add_option("--estimate", rec_opts.estimate_dir, "estimate directory to extend")->required();
  rec_cmd->add_option("--out", rec_opts.out, "output directory")->required();
  add_config(rec_cmd);

  EvaluateOptions eval_opts;
  auto* eval_cmd = app.add_subcommand("evaluate", "compare recovered loadings with a simulation truth");
  eval_cmd->add_option("--estimate", eval_opts.estimate_dir, "estimate directory with loadings")->required();
  eval_cmd->add_option("--truth", eval_opts.truth_dir, "truth directory from simulate")->required();
  eval_cmd->add_option("--out", eval_opts.out, "output directory")->required();
  eval_cmd->add_option("--replicate", eval_opts.replicate, "label for the tidy CSV")->capture_default_str();
  add_config(eval_cmd);

  PipelineOptions pipe_opts;
  pipe_opts.chain.log_every = 0;
  int pipe_partial = 0;
  std::string pipe_constrain = "free";
  auto* pipe_cmd = app.add_subcommand("pipeline", "simulate, fit, estimate, refit, recover and evaluate replicates");
  add_scenario_options(pipe_cmd, pipe_opts.scenario, pipe_partial);
  add_chain_options(pipe_cmd, pipe_opts.chain, pipe_constrain);
  add_hyper_options(pipe_cmd, pipe_opts.hyper);
  pipe_cmd->add_option("--refit-thin", pipe_opts.refit_thin, "thinning of the fixed-indicator refit")
      ->capture_default_str();
  pipe_cmd->add_option("--replicates", pipe_opts.replicates, "number of replicates")->capture_default_str();
  pipe_cmd->add_option("--jobs", pipe_opts.jobs, "replicates run in parallel")->capture_default_str();
  pipe_cmd->add_option("--level", pipe_opts.level, "credible-ball level")->capture_default_str();
  pipe_cmd->add_option("--out", pipe_opts.out, "output directory")->required();
  add_config(pipe_cmd);

  try {
    const std::vector<std::string> expanded = expand_config(args);
    std::vector<std::string> reversed(expanded.rbegin(), expanded.rend());
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*sim_cmd) {
      sim_opts.scenario.n_partial = sim_partial;
      if (sim_opts.scenario.scenario == 3) sim_opts.scenario.num_studies = 16;
      simulate(sim_opts);
    } else if (*fit_cmd) {
      fit_opts.chain.constrain_sharing = parse_sharing_mode(fit_constrain);
      if (!fixed_path.empty()) fit_opts.fixed_indicator = fs::path(fixed_path);
      fit(fit_opts);
    } else if (*est_cmd) {
      estimate(est_opts);
    } else if (*rec_cmd) {
      recover(rec_opts);
    } else if (*eval_cmd) {
      evaluate(eval_opts);
    } else if (*pipe_cmd) {
      pipe_opts.scenario.n_partial = pipe_partial;
      if (pipe_opts.scenario.scenario == 3) pipe_opts.scenario.num_studies = 16;
      pipe_opts.chain.constrain_sharing = parse_sharing_mode(pipe_constrain);
      return pipeline(pipe_opts) == 0 ? kExitOk : kExitRuntime;
    }
  } catch (...) {
    return exit_code_for_current_exception();
  }
  return kExitOk;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace tetris::cli
