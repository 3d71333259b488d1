#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace amimic {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using ActionMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
using Rng = std::mt19937_64;

/// Uniform draw in [0, 1) that does not depend on the standard library's
/// distribution implementations.
double uniform01(Rng& rng);
/// Uniform integer in [0, n).
int uniform_index(Rng& rng, int n);
/// Index drawn from a discrete distribution given as (possibly unnormalized)
/// non-negative weights.
int sample_categorical(Rng& rng, const double* weights, int n);
/// Deterministic seed mixing (splitmix64 finalizer over base and tag).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

/// Raw description of a finite MDP. `transition[a](s, s')` holds T(s'|s,a).
struct MdpData {
  int num_states = 0;
  int num_actions = 0;
  ActionMask valid;                  // num_states x num_actions
  std::vector<MatrixXd> transition;  // one num_states x num_states matrix per action
  MatrixXd reward;                   // num_states x num_actions
  double gamma = 0.9;
  std::vector<bool> terminal;
  int horizon_cap = 100;
  std::vector<int> start_states;     // uniform start distribution
};

/// Finite MDP over a global action alphabet with per-state valid actions.
/// Immutable after construction; the constructor checks every invariant.
class Mdp {
 public:
  explicit Mdp(MdpData data);

  int num_states() const { return data_.num_states; }
  int num_actions() const { return data_.num_actions; }
  double gamma() const { return data_.gamma; }
  int horizon_cap() const { return data_.horizon_cap; }

  bool is_valid(int s, int a) const { return data_.valid(s, a); }
  const ActionMask& valid_mask() const { return data_.valid; }
  const std::vector<int>& valid_actions(int s) const { return valid_lists_[s]; }
  bool is_terminal(int s) const { return data_.terminal[s]; }
  const std::vector<int>& start_states() const { return data_.start_states; }

  double transition(int s, int a, int next) const { return data_.transition[a](s, next); }
  const MatrixXd& transition_matrix(int a) const { return data_.transition[a]; }
  double reward(int s, int a) const { return data_.reward(s, a); }
  const MatrixXd& reward_matrix() const { return data_.reward; }

  int sample_next(int s, int a, Rng& rng) const;
  const MdpData& data() const { return data_; }

 private:
  MdpData data_;
  std::vector<std::vector<int>> valid_lists_;
};

/// |S| x |A| row-stochastic matrix with support inside the valid actions.
class PolicyMatrix {
 public:
  PolicyMatrix(const Mdp& mdp, MatrixXd probs);

  /// Uniform distribution over the valid actions of every state.
  static PolicyMatrix uniform(const Mdp& mdp);

  const MatrixXd& probs() const { return probs_; }
  double operator()(int s, int a) const { return probs_(s, a); }
  int rows() const { return static_cast<int>(probs_.rows()); }
  int cols() const { return static_cast<int>(probs_.cols()); }

 private:
  MatrixXd probs_;
};

struct StationaryDistribution {
  VectorXd dist;
  double residual = 0.0;  // || d^T P - d^T ||_1 at exit
  int iterations = 0;
};

class NoStationaryDistribution : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Step {
  int state = 0;
  int action = 0;
  double reward = 0.0;
  int next_state = 0;
  bool done = false;
};

struct Trajectory {
  std::vector<Step> steps;
  double total_return = 0.0;  // discounted
};

/// Entry (i, j) = sum_a T(j|i,a) pi(a|i).
MatrixXd policy_transition_matrix(const Mdp& mdp, const PolicyMatrix& policy);

/// Strong connectivity of the directed graph with an edge i->j wherever
/// p(i, j) > 0.
bool is_irreducible(const MatrixXd& p);
/// Period of an irreducible chain (1 means aperiodic).
int chain_period(const MatrixXd& p);

/// Power iteration for d^T P = d^T. Throws NoStationaryDistribution for
/// reducible or periodic chains, or when the iteration cap is reached.
StationaryDistribution stationary_distribution(const Mdp& mdp, const PolicyMatrix& policy,
                                               double tol = 1e-10, int max_iters = 1'000'000);
StationaryDistribution stationary_distribution(const MatrixXd& chain, double tol = 1e-10,
                                               int max_iters = 1'000'000);

/// Maps a Q table (|S| x |A|) to an exploration policy. Without a smoothing
/// temperature this is epsilon-greedy with argmax ties split evenly; with one
/// it is (1 - eps) softmax(Q / temp) + eps uniform, restricted to valid actions.
PolicyMatrix gamma_operator(const MatrixXd& q, const Mdp& mdp, double epsilon,
                            std::optional<double> smoothing_temp = std::nullopt);

Trajectory sample_trajectory(const Mdp& mdp, const PolicyMatrix& policy, std::uint64_t seed,
                             int start_state);
Trajectory sample_trajectory(const Mdp& mdp, const PolicyMatrix& policy, Rng& rng,
                             int start_state);

}  // namespace amimic
