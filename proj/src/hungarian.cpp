#include "tetris/hungarian.hpp"

#include <limits>

#include "tetris/errors.hpp"

namespace tetris {

std::vector<int> solve_assignment(const Eigen::MatrixXi& cost, long long* total_cost) {
  if (cost.rows() != cost.cols()) throw DimensionError("assignment: cost matrix must be square");
  const int n = static_cast<int>(cost.rows());
  constexpr long long kInf = std::numeric_limits<long long>::max() / 4;
  // 1-based potentials; column 0 is a virtual start.
  std::vector<long long> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);
  std::vector<long long> min_slack(n + 1);
  std::vector<char> used(n + 1);
  for (int row = 1; row <= n; ++row) {
    match[0] = row;
    int col0 = 0;
    std::fill(min_slack.begin(), min_slack.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[col0] = 1;
      const int row0 = match[col0];
      long long delta = kInf;
      int col1 = 0;
      for (int col = 1; col <= n; ++col) {
        if (used[col]) continue;
        const long long slack = cost(row0 - 1, col - 1) - u[row0] - v[col];
        if (slack < min_slack[col]) {
          min_slack[col] = slack;
          way[col] = col0;
        }
        if (min_slack[col] < delta) {
          delta = min_slack[col];
          col1 = col;
        }
      }
      for (int col = 0; col <= n; ++col) {
        if (used[col]) {
          u[match[col]] += delta;
          v[col] -= delta;
        } else {
          min_slack[col] -= delta;
        }
      }
      col0 = col1;
    } while (match[col0] != 0);
    do {
      const int col1 = way[col0];
      match[col0] = match[col1];
      col0 = col1;
    } while (col0 != 0);
  }
  std::vector<int> assignment(static_cast<std::size_t>(n), -1);
  long long total = 0;
  for (int col = 1; col <= n; ++col) {
    if (match[col] != 0) {
      assignment[static_cast<std::size_t>(match[col] - 1)] = col - 1;
      total += cost(match[col] - 1, col - 1);
    }
  }
  if (total_cost) *total_cost = total;
  return assignment;
}

}  // namespace tetris
