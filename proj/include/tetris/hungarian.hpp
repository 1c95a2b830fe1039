#pragma once

#include <vector>

#include <Eigen/Dense>

namespace tetris {

// Minimum-cost perfect matching on a square integer cost matrix (Kuhn-Munkres
// with potentials, O(n^3)). Returns the column assigned to each row and writes
// the total cost.
std::vector<int> solve_assignment(const Eigen::MatrixXi& cost, long long* total_cost = nullptr);

}  // namespace tetris
