#pragma once

#include "amimic/env.hpp"
#include "amimic/expert.hpp"
#include "amimic/features.hpp"
#include "amimic/funcapprox.hpp"
#include "amimic/mdp.hpp"
#include "amimic/metrics.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace amimic {

/// Softmax of q / tau over `valid`; every other entry is exactly zero.
VectorXd boltzmann_policy(const VectorXd& q, const std::vector<int>& valid, double tau);

struct PolicyLoss {
  double loss = 0.0;
  VectorXd d_logits;  // zero outside the valid set
};

/// Cross-entropy -sum_a pi_E(a) log softmax(logits)(a) over `valid`.
PolicyLoss policy_regression_loss(const VectorXd& expert_probs, const VectorXd& logits,
                                  const std::vector<int>& valid);

struct FeatureLoss {
  double loss = 0.0;
  MatrixXd d_weight;
  VectorXd d_bias;
  VectorXd d_features;
};

/// ||head(h) - target||^2 with gradients for the head and its input.
FeatureLoss feature_regression_loss(const VectorXd& amn_features, const VectorXd& expert_features,
                                    const FeatureRegressionHead& head);

enum class SampleSource { FromAmn, FromExpert };
enum class Interleave { RoundRobin, Block };

std::string to_string(SampleSource s);
SampleSource parse_sample_source(const std::string& s);
std::string to_string(Interleave s);
Interleave parse_interleave(const std::string& s);

struct AmnConfig {
  double tau = 1.0;
  double beta = 0.0;
  double epsilon = 0.1;
  int replay_capacity = 2000;
  int batch_size = 32;
  std::vector<int> hidden = {64, 64};
  SampleSource source = SampleSource::FromAmn;
  Interleave interleave = Interleave::RoundRobin;
  int block_size = 10;
  bool rmsprop = true;
  double learning_rate = 5e-4;
  /// Environment steps per game.
  std::int64_t steps = 12'000;
  int epochs = 6;
  double eval_epsilon = 0.05;
  int eval_episodes = 50;
  double divergence_threshold = 1e6;

  void validate() const;
};

/// Shared network over the global action alphabet plus, when beta > 0, one
/// affine feature head per expert.
struct AmnModel {
  std::vector<std::string> games;
  MlpQ net;
  std::vector<FeatureRegressionHead> heads;

  /// Logits for every state of one game's feature map (|S| x |A|).
  MatrixXd logits(const FeatureMap& features) const;
  /// Boltzmann policy of the logits restricted to the game's valid actions.
  PolicyMatrix policy(const Mdp& mdp, const FeatureMap& features, double tau) const;
  /// epsilon-greedy over the logits, as used for evaluation.
  PolicyMatrix greedy(const Mdp& mdp, const FeatureMap& features, double epsilon) const;
};

/// One distillation task: a game, its input features, and its teacher.
struct DistillTask {
  const Game* game = nullptr;
  const FeatureMap* features = nullptr;
  const ExpertBundle* expert = nullptr;
};

struct CombinedLoss {
  double total = 0.0;
  double policy = 0.0;
  double feature = 0.0;
};

/// L_policy + beta * L_feature averaged over a batch of states of one game.
/// Gradients are accumulated into `net_grads` and, when beta > 0,
/// `head_weight`/`head_bias`.
CombinedLoss actor_mimic_loss(const std::vector<int>& states, const DistillTask& task, int task_index,
                              const AmnModel& model, const AmnConfig& config, MlpGrads* net_grads,
                              FeatureRegressionHead* head_grads);

struct AmnResult {
  AmnModel model;
  MetricSeries metrics;
  std::int64_t updates = 0;
};

/// Builds the network for the given input width without training it.
AmnModel init_amn(const std::vector<DistillTask>& tasks, int input_dim, const AmnConfig& config,
                  std::uint64_t seed);

/// Interaction loop: per step pick a game, act epsilon-greedily from the
/// configured source, store the state in that game's memory, and take one
/// minibatch step on the combined loss. Evaluates every game at the end of
/// each epoch. Metrics go to stage `stage`.
AmnResult train_amn(const std::vector<DistillTask>& tasks, const AmnConfig& config, std::uint64_t seed,
                    const std::string& stage = "amn");

}  // namespace amimic
