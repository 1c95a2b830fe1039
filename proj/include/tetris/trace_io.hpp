#pragma once

#include <filesystem>

#include <json.hpp>

#include "tetris/model.hpp"
#include "tetris/sampler.hpp"

namespace tetris {

nlohmann::json to_json(const ChainConfig& config);
ChainConfig chain_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const Hyperparams& hyper);
Hyperparams hyperparams_from_json(const nlohmann::json& j);

// Directory layout:
//   manifest.json          config, dimensions, stored iterations, move counts
//   indicators.csv         sample, iteration, K, entries (row-major 0/1 digits)
//   diagnostics.csv        iteration, K, log_likelihood
//   lambda/lambda_NNNNN.csv  P x K loadings (fixed-indicator runs only)
void write_trace(const ChainTrace& trace, const Hyperparams& hyper, const std::filesystem::path& dir);
ChainTrace read_trace(const std::filesystem::path& dir, Hyperparams* hyper = nullptr);

}  // namespace tetris
