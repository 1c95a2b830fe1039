#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace tetris {

inline constexpr const char* kToolVersion = "0.1.0";

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const CsvTable& table);

// Numeric CSV with a header row. Values are written with round-trip precision.
Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path, std::vector<std::string>* header = nullptr);
void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m,
                      const std::vector<std::string>& header = {});

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

std::string format_double(double v);
double parse_double(const std::string& text);

nlohmann::json matrix_to_json(const Eigen::MatrixXi& m);
Eigen::MatrixXi matrix_from_json(const nlohmann::json& j);

}  // namespace tetris
