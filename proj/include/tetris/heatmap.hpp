#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tetris {

// One cell per matrix entry (rows top to bottom, columns left to right) on a
// diverging scale: blue for negative, white for zero, red for positive, with
// the color range set by the largest absolute entry.
std::string heatmap_svg(const Eigen::MatrixXd& m, const std::vector<std::string>& column_labels = {},
                        const std::string& title = "");

void write_heatmap_svg(const std::filesystem::path& path, const Eigen::MatrixXd& m,
                       const std::vector<std::string>& column_labels = {}, const std::string& title = "");

}  // namespace tetris
