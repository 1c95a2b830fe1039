#include "tetris/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "tetris/errors.hpp"

namespace tetris {

namespace {

constexpr int kCell = 10;
constexpr int kTop = 40;
constexpr int kLeft = 10;

std::string cell_color(double v, double scale) {
  if (!(scale > 0.0)) return "#ffffff";
  const double t = std::clamp(std::abs(v) / scale, 0.0, 1.0);
  const int fade = static_cast<int>(std::lround(255.0 * (1.0 - t)));
  return v < 0.0 ? fmt::format("#{:02x}{:02x}ff", fade, fade) : fmt::format("#ff{:02x}{:02x}", fade, fade);
}

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string heatmap_svg(const Eigen::MatrixXd& m, const std::vector<std::string>& column_labels,
                        const std::string& title) {
  if (!column_labels.empty() && static_cast<Eigen::Index>(column_labels.size()) != m.cols()) {
    throw DimensionError("heatmap: one label per column expected");
  }
  const auto rows = static_cast<int>(m.rows());
  const auto cols = static_cast<int>(m.cols());
  const double scale = m.size() > 0 ? m.cwiseAbs().maxCoeff() : 0.0;
  const int width = kLeft * 2 + cols * kCell;
  const int height = kTop + rows * kCell + kLeft;

  std::ostringstream svg;
  svg << fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" "
      "data-rows=\"{}\" data-cols=\"{}\" data-scale=\"{:.6g}\">\n",
      width, height, width, height, rows, cols, scale);
  if (!title.empty()) svg << fmt::format("<title>{}</title>\n", escape(title));
  for (int k = 0; k < cols && !column_labels.empty(); ++k) {
    svg << fmt::format(
        "<text x=\"{}\" y=\"{}\" font-size=\"8\" transform=\"rotate(-90 {} {})\">{}</text>\n",
        kLeft + k * kCell + 8, kTop - 2, kLeft + k * kCell + 8, kTop - 2,
        escape(column_labels[static_cast<std::size_t>(k)]));
  }
  svg << "<g shape-rendering=\"crispEdges\">\n";
  for (int r = 0; r < rows; ++r) {
    for (int k = 0; k < cols; ++k) {
      svg << fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n", kLeft + k * kCell,
                         kTop + r * kCell, kCell, kCell, cell_color(m(r, k), scale));
    }
  }
  svg << "</g>\n</svg>\n";
  return svg.str();
}

void write_heatmap_svg(const std::filesystem::path& path, const Eigen::MatrixXd& m,
                       const std::vector<std::string>& column_labels, const std::string& title) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << heatmap_svg(m, column_labels, title);
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace tetris
