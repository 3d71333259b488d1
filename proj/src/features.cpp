#include "amimic/features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace amimic {

FeatureMap::FeatureMap(MatrixXd phi, double bound, std::string kind)
    : phi_(std::move(phi)), bound_(bound), kind_(std::move(kind)) {
  if (!phi_.allFinite()) throw std::invalid_argument("FeatureMap: non-finite feature");
  if (phi_.size() > 0 && phi_.cwiseAbs().maxCoeff() > bound_)
    throw std::invalid_argument("FeatureMap: feature exceeds declared bound");
}

MatrixXd FeatureMap::encode_batch(const std::vector<int>& states) const {
  MatrixXd out(dim(), static_cast<Eigen::Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i) out.col(i) = phi_.row(states[i]).transpose();
  return out;
}

FeatureMap one_hot_features(int num_states) {
  return FeatureMap(MatrixXd::Identity(num_states, num_states), 1.0, "one_hot");
}

FeatureMap random_features(int num_states, int dim, std::uint64_t seed) {
  Rng rng(seed);
  MatrixXd phi(num_states, dim);
  for (int s = 0; s < num_states; ++s)
    for (int k = 0; k < dim; ++k) phi(s, k) = 2.0 * uniform01(rng) - 1.0;
  return FeatureMap(std::move(phi), 1.0, "random");
}

FeatureMap grid_features(const GridGameSpec& spec) {
  validate(spec);
  const int cells = spec.width * spec.height;
  MatrixXd phi = MatrixXd::Zero(cells + 1, kGridFeatureDim);
  constexpr int kNeighbourBase = kMaxGridSide * kMaxGridSide;
  constexpr int kGoalBase = kNeighbourBase + 3 * kNumMoves;
  constexpr int kSink = kGoalBase + 6;
  constexpr int kBias = kSink + 1;

  auto blocked = [&](int x, int y) {
    return x < 0 || y < 0 || x >= spec.width || y >= spec.height ||
           std::find(spec.walls.begin(), spec.walls.end(), Cell{x, y}) != spec.walls.end();
  };
  auto has_goal = [&](int x, int y) {
    return std::any_of(spec.goals.begin(), spec.goals.end(),
                       [&](const Goal& g) { return g.cell == Cell{x, y}; });
  };
  auto has_hazard = [&](int x, int y) {
    return std::any_of(spec.hazards.begin(), spec.hazards.end(),
                       [&](const Hazard& h) { return h.cell == Cell{x, y}; });
  };

  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const int s = y * spec.width + x;
      phi(s, y * kMaxGridSide + x) = 1.0;
      for (int m = 0; m < kNumMoves; ++m) {
        const int nx = x + kMoveDx[m];
        const int ny = y + kMoveDy[m];
        const int base = kNeighbourBase + 3 * m;
        if (blocked(nx, ny)) {
          phi(s, base) = 1.0;
        } else {
          phi(s, base + 1) = has_goal(nx, ny) ? 1.0 : 0.0;
          phi(s, base + 2) = has_hazard(nx, ny) ? 1.0 : 0.0;
        }
      }
      // Nearest goal marker by Manhattan distance; ties go to the first listed.
      int best = std::numeric_limits<int>::max();
      int gdx = 0;
      int gdy = 0;
      for (const auto& g : spec.goals) {
        const int dx = g.cell.x - x;
        const int dy = g.cell.y - y;
        if (std::abs(dx) + std::abs(dy) < best) {
          best = std::abs(dx) + std::abs(dy);
          gdx = dx;
          gdy = dy;
        }
      }
      if (!spec.goals.empty()) {
        phi(s, kGoalBase + 0) = gdx < 0 ? 1.0 : 0.0;
        phi(s, kGoalBase + 1) = gdx > 0 ? 1.0 : 0.0;
        phi(s, kGoalBase + 2) = gdy < 0 ? 1.0 : 0.0;
        phi(s, kGoalBase + 3) = gdy > 0 ? 1.0 : 0.0;
        phi(s, kGoalBase + 4) = static_cast<double>(gdx) / kMaxGridSide;
        phi(s, kGoalBase + 5) = static_cast<double>(gdy) / kMaxGridSide;
      }
      phi(s, kBias) = 1.0;
    }
  }
  phi(cells, kSink) = 1.0;
  phi(cells, kBias) = 1.0;
  return FeatureMap(std::move(phi), 1.0, "grid");
}

}  // namespace amimic
