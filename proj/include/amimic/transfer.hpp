#pragma once

#include "amimic/env.hpp"
#include "amimic/expert.hpp"
#include "amimic/features.hpp"
#include "amimic/funcapprox.hpp"
#include "amimic/metrics.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace amimic {

enum class InitMode { Random, AmnPolicy, AmnFeature };

std::string to_string(InitMode m);
InitMode parse_init_mode(const std::string& s);

/// Q-network for a target game. `random` draws every layer from `seed` using
/// the layer sizes {input, hidden..., |A|}; the amn modes copy every layer but
/// the last from `checkpoint` and draw the last one from `seed`. Output rows
/// of actions the target never allows are zeroed.
///
/// Throws IncompatibleCheckpoint when an amn mode has no checkpoint or when
/// its input width, output width or hidden layout differ from the target's.
MlpQ warm_start_learner(const MlpQ* checkpoint, const std::vector<int>& hidden, const Game& target,
                        const FeatureMap& features, InitMode mode, std::uint64_t seed);

struct TransferConfig {
  DqnConfig dqn = [] {
    DqnConfig c;
    c.hidden = {64, 64};
    c.frames = 10'000;
    c.warmup = 100;
    c.epsilon_decay_frames = 3000;
    c.learning_rate = 5e-4;
    return c;
  }();
  int milestones = 10;
  std::vector<InitMode> modes = {InitMode::Random, InitMode::AmnPolicy, InitMode::AmnFeature};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
};

/// One (target, mode, seed) training run. `returns[k]` is the expected return
/// of the eval policy after k * frames / milestones frames; entry 0 is the
/// init-time value.
struct TransferCell {
  std::string target;
  Game::Tier tier = Game::Tier::Near;
  InitMode mode = InitMode::Random;
  std::uint64_t seed = 0;
  std::vector<double> returns;
  std::string error;  // non-empty if training failed
};

struct TransferTable {
  int milestones = 0;
  std::int64_t frames = 0;
  std::vector<TransferCell> cells;

  /// Median over seeds of the successful cells; NaN when there are none.
  double median(const std::string& target, InitMode mode, int milestone) const;
  /// Rows: target, mode, seed, milestone, mean_return.
  void write(std::ostream& os) const;
  MetricSeries metrics(const std::string& stage = "transfer") const;
};

/// Trains every (target, mode, seed) cell with the DQN settings of `config`.
/// Modes whose checkpoint is null are skipped. Targets must not share a name
/// with `source_games`. Cells run on up to `jobs` threads; the table is
/// ordered by (target, mode, seed) regardless.
TransferTable run_transfer_matrix(const std::vector<std::string>& source_games, const std::vector<Game>& targets,
                                  const MlpQ* amn_policy, const MlpQ* amn_feature, const TransferConfig& config,
                                  int jobs = 1);

enum class BaselineVariant { SharedAll, SharedTrunk };

std::string to_string(BaselineVariant v);
BaselineVariant parse_baseline_variant(const std::string& s);

struct BaselineConfig {
  BaselineVariant variant = BaselineVariant::SharedAll;
  /// `frames` is per game; hidden, replay, exploration and optimizer settings
  /// apply to every game.
  DqnConfig dqn = [] {
    DqnConfig c;
    c.hidden = {64, 64};
    c.frames = 12'000;
    return c;
  }();
  int epochs = 6;
};

struct BaselineTask {
  const Game* game = nullptr;
  const FeatureMap* features = nullptr;
};

struct BaselineResult {
  /// Hidden layers, shared by every game.
  std::vector<MatrixXd> trunk_weights;
  std::vector<VectorXd> trunk_biases;
  /// One output layer for shared_all, one per game for shared_trunk.
  std::vector<MatrixXd> head_weights;
  std::vector<VectorXd> head_biases;
  std::vector<std::string> diverged;  // games whose training stopped
  MetricSeries metrics;

  int head_count() const { return static_cast<int>(head_weights.size()); }
  /// Full Q-network seen by game i.
  MlpQ network(int game_index) const;
};

/// Multitask Q-learning over all tasks with per-game replay memories and the
/// masked TD loss. Games step round-robin; each frame is followed by one
/// update on that game once its memory holds `warmup` transitions. A game
/// whose loss diverges is recorded and dropped; the rest continue.
///
/// With a single task the run is the same computation as DqnTrainer.
BaselineResult train_multitask_baseline(const std::vector<BaselineTask>& tasks, const BaselineConfig& config,
                                        std::uint64_t seed, const std::string& stage = "baseline");

/// (R - R_uniform) / (R_expert - R_uniform) using exact expected returns.
double normalized_return(double value, double uniform, double expert);

}  // namespace amimic
