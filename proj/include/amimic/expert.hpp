#pragma once

#include "amimic/env.hpp"
#include "amimic/features.hpp"
#include "amimic/funcapprox.hpp"
#include "amimic/mdp.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace amimic {

struct Transition {
  int state = 0;
  int action = 0;
  double reward = 0.0;
  int next_state = 0;
  bool done = false;
};

/// Bounded FIFO of transitions with uniform sampling (with replacement).
class ReplayMemory {
 public:
  explicit ReplayMemory(int capacity);

  void push(const Transition& t);
  /// Indices into the current contents, uniform over [0, size).
  std::vector<int> sample_indices(int n, Rng& rng) const;
  std::vector<Transition> sample(int n, Rng& rng) const;

  int size() const { return static_cast<int>(buffer_.size()); }
  int capacity() const { return capacity_; }
  bool empty() const { return buffer_.empty(); }
  /// i-th item in insertion order among retained items (0 = oldest).
  const Transition& at(int i) const;

 private:
  int capacity_;
  int head_ = 0;  // slot of the oldest item once full
  std::vector<Transition> buffer_;
};

/// Highest-valued valid action of state s (first on ties).
int argmax_valid(const Mdp& mdp, const VectorXd& values, int s);
/// Uniform draw from the start states.
int random_start(const Mdp& mdp, Rng& rng);

struct EvalStats {
  double mean = 0.0;
  double max = 0.0;
  double std = 0.0;
  int episodes = 0;
};

/// Optimal Q by repeated Bellman backups until the sup-norm change is <= tol.
/// Entries for invalid actions are zero. Throws std::runtime_error when
/// max_iters is reached first.
MatrixXd value_iteration(const Mdp& mdp, double tol = 1e-10, int max_iters = 100'000);

/// Greedy action value max over valid actions.
VectorXd state_values(const Mdp& mdp, const MatrixXd& q);
/// sup-norm Bellman optimality residual of q.
double bellman_residual(const Mdp& mdp, const MatrixXd& q);

/// Sampled Q-learning with per-pair step size schedule.rate(visits(s,a)),
/// epsilon-greedy behaviour, episodes restarting from the start states.
MatrixXd tabular_q_learning(const Mdp& mdp, const Schedule& schedule, double epsilon,
                            std::uint64_t seed, std::int64_t steps);

/// Monte Carlo discounted episode returns from uniformly drawn start states.
EvalStats evaluate_policy(const Mdp& mdp, const PolicyMatrix& policy, int episodes,
                          std::uint64_t seed);
/// Exact expected discounted return over horizon_cap steps, averaged over
/// the start states.
double expected_return(const Mdp& mdp, const PolicyMatrix& policy);

struct DqnConfig {
  std::vector<int> hidden = {32};
  int replay_capacity = 5000;
  int warmup = 200;
  int batch_size = 32;
  int target_sync_period = 100;
  double epsilon_start = 1.0;
  double epsilon_end = 0.1;
  std::int64_t epsilon_decay_frames = 4000;
  std::int64_t frames = 15'000;
  double learning_rate = 1e-3;
  bool rmsprop = true;
  double eval_epsilon = 0.05;
  int eval_episodes = 100;
  double divergence_threshold = 1e6;
};

/// Squared TD error averaged over a batch:
/// (r + gamma * (1 - done) * max_{a' valid} Q_target(s', a') - Q(s, a))^2.
/// Fills `grads` (w.r.t. the online net) when non-null.
double td_loss(const MlpQ& online, const MlpQ& target, const Mdp& mdp, const FeatureMap& features,
               const std::vector<Transition>& batch, MlpGrads* grads);

/// Q-network trainer with replay memory and a periodically synced target copy.
class DqnTrainer {
 public:
  DqnTrainer(const Mdp& mdp, const FeatureMap& features, DqnConfig config, std::uint64_t seed,
             std::optional<MlpQ> init = std::nullopt);

  /// Advances training by `frames` environment steps.
  void train(std::int64_t frames);
  const MlpQ& net() const { return online_; }
  MlpQ& mutable_net() { return online_; }
  MatrixXd q_table() const;
  EvalStats evaluate(int episodes, std::uint64_t seed) const;
  std::int64_t frames_done() const { return frames_; }
  std::int64_t updates_done() const { return updates_; }
  double last_loss() const { return last_loss_; }
  const ReplayMemory& replay() const { return replay_; }

 private:
  const Mdp& mdp_;
  const FeatureMap& features_;
  DqnConfig config_;
  Rng rng_;
  MlpQ online_;
  MlpQ target_;
  Optimizer opt_;
  ReplayMemory replay_;
  int state_ = 0;
  int episode_step_ = 0;
  std::int64_t frames_ = 0;
  std::int64_t updates_ = 0;
  double last_loss_ = 0.0;
};

/// A per-game teacher: Q table, greedy policy, optional network with a
/// feature layer, and evaluation statistics.
struct ExpertBundle {
  std::string game;
  std::string kind;  // "oracle" or "dqn"
  MatrixXd q;
  PolicyMatrix greedy;
  std::optional<MlpQ> net;
  std::optional<FeatureMap> net_features;
  EvalStats stats;
  std::int64_t frames = 0;

  /// Hidden activations of the expert network's feature layer (K_E x n).
  MatrixXd feature_activations(const std::vector<int>& states) const;
  /// Q values of the expert for the given states (|A| x n).
  MatrixXd q_values(const std::vector<int>& states) const;
  int feature_dim() const;
};

ExpertBundle oracle_expert(const Game& game, int eval_episodes, std::uint64_t seed);
ExpertBundle dqn_train(const Game& game, const FeatureMap& features, const DqnConfig& config,
                       std::uint64_t seed);

}  // namespace amimic
