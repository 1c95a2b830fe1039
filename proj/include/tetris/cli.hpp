#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tetris/metrics.hpp"
#include "tetris/model.hpp"
#include "tetris/sampler.hpp"
#include "tetris/sim.hpp"

namespace tetris::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct SimulateOptions {
  ScenarioConfig scenario;
  std::filesystem::path out;
};

struct FitOptions {
  std::filesystem::path data_dir;
  std::filesystem::path out;
  Hyperparams hyper;
  ChainConfig chain;
  // Estimate directory, estimate.json, JSON matrix or 0/1 CSV.
  std::optional<std::filesystem::path> fixed_indicator;
};

struct EstimateOptions {
  std::filesystem::path trace_dir;
  std::filesystem::path out;
  double level = 0.95;
  int jobs = 1;
};

struct RecoverOptions {
  std::filesystem::path trace_dir;     // fixed-indicator trace
  std::filesystem::path estimate_dir;  // phase-1 estimate to extend
  std::filesystem::path out;
};

struct EvaluateOptions {
  std::filesystem::path estimate_dir;
  std::filesystem::path truth_dir;
  std::filesystem::path out;
  std::string replicate = "1";
};

struct PipelineOptions {
  ScenarioConfig scenario;
  Hyperparams hyper;
  ChainConfig chain;   // seed is the base seed; per-replicate seeds derive from it
  int refit_thin = 4;
  int replicates = 1;
  int jobs = 1;
  double level = 0.95;
  std::filesystem::path out;

  nlohmann::json to_json() const;
};

// Throwing implementations; tetris::Error subclasses carry the failure kind.
void simulate(const SimulateOptions& options);
void fit(const FitOptions& options);
void estimate(const EstimateOptions& options);
void recover(const RecoverOptions& options);
EvaluationReport evaluate(const EvaluateOptions& options);
// Returns the number of failed replicates.
int pipeline(const PipelineOptions& options);

IndicatorMatrix load_indicator(const std::filesystem::path& path);

// Maps an in-flight exception to an exit status and logs it.
int exit_code_for_current_exception();

// Parses `args` (without the program name) and runs the subcommand.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

}  // namespace tetris::cli
