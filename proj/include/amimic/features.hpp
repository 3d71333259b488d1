#pragma once

#include "amimic/env.hpp"
#include "amimic/mdp.hpp"

#include <cstdint>
#include <string>

namespace amimic {

/// State features phi(s) stored as the |S| x K matrix Phi with rows phi(s)^T.
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(MatrixXd phi, double bound, std::string kind);

  int dim() const { return static_cast<int>(phi_.cols()); }
  int num_states() const { return static_cast<int>(phi_.rows()); }
  /// Declared bound on ||phi(s)||_inf.
  double bound() const { return bound_; }
  const std::string& kind() const { return kind_; }

  VectorXd encode(int state) const { return phi_.row(state).transpose(); }
  /// Column-stacked features of the given states (K x n).
  MatrixXd encode_batch(const std::vector<int>& states) const;
  const MatrixXd& matrix() const { return phi_; }

 private:
  MatrixXd phi_;
  double bound_ = 1.0;
  std::string kind_;
};

FeatureMap one_hot_features(int num_states);
/// Dense features with entries uniform in [-1, 1], seeded.
FeatureMap random_features(int num_states, int dim, std::uint64_t seed);

/// Layout shared by every grid game: absolute cell one-hot over the largest
/// supported grid, the marker contents of the 8 neighbouring cells, the sign
/// and scaled offset towards the nearest goal marker, a sink flag, and a bias.
inline constexpr int kGridFeatureDim = kMaxGridSide * kMaxGridSide + 3 * kNumMoves + 6 + 2;
FeatureMap grid_features(const GridGameSpec& spec);

}  // namespace amimic
