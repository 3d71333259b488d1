#include "amimic/transfer.hpp"

#include "amimic/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace amimic {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<int> hidden_layout(const MlpQ& net) {
  const auto& sizes = net.layer_sizes();
  return {sizes.begin() + 1, sizes.end() - 1};
}

std::string layout_string(const std::vector<int>& v) {
  std::string out = "{";
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out + "}";
}

void mask_invalid_outputs(MlpQ& net, const Mdp& mdp) {
  std::vector<bool> used(mdp.num_actions(), false);
  for (int s = 0; s < mdp.num_states(); ++s)
    for (int a : mdp.valid_actions(s)) used[a] = true;
  for (int a = 0; a < mdp.num_actions(); ++a) {
    if (used[a]) continue;
    net.weights().back().row(a).setZero();
    net.biases().back()(a) = 0.0;
  }
}

double eval_return(const Mdp& mdp, const MatrixXd& q, double epsilon) {
  return expected_return(mdp, gamma_operator(q, mdp, epsilon));
}

MatrixXd q_table(const MlpQ& net, const FeatureMap& features) {
  return net.forward(MatrixXd(features.matrix().transpose())).transpose();
}

}  // namespace

std::string to_string(InitMode m) {
  switch (m) {
    case InitMode::Random: return "random";
    case InitMode::AmnPolicy: return "amn_policy";
    case InitMode::AmnFeature: return "amn_feature";
  }
  return "?";
}

InitMode parse_init_mode(const std::string& s) {
  if (s == "random") return InitMode::Random;
  if (s == "amn_policy") return InitMode::AmnPolicy;
  if (s == "amn_feature") return InitMode::AmnFeature;
  throw std::invalid_argument("unknown init mode '" + s + "' (expected random, amn_policy or amn_feature)");
}

MlpQ warm_start_learner(const MlpQ* checkpoint, const std::vector<int>& hidden, const Game& target,
                        const FeatureMap& features, InitMode mode, std::uint64_t seed) {
  const Mdp& mdp = target.mdp;
  std::vector<int> sizes = {features.dim()};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(mdp.num_actions());
  MlpQ net(sizes, derive_seed(seed, 2));
  if (mode != InitMode::Random) {
    if (!checkpoint) throw IncompatibleCheckpoint(to_string(mode) + " needs an AMN checkpoint");
    if (checkpoint->input_dim() != features.dim())
      throw IncompatibleCheckpoint("checkpoint input width " + std::to_string(checkpoint->input_dim()) +
                                   " does not match target features " + std::to_string(features.dim()));
    if (checkpoint->output_dim() != mdp.num_actions())
      throw IncompatibleCheckpoint("checkpoint has " + std::to_string(checkpoint->output_dim()) +
                                   " outputs, target alphabet has " + std::to_string(mdp.num_actions()));
    if (hidden_layout(*checkpoint) != hidden)
      throw IncompatibleCheckpoint("checkpoint hidden layout " + layout_string(hidden_layout(*checkpoint)) +
                                   " differs from learner layout " + layout_string(hidden));
    if (checkpoint->output_activation() != Activation::Identity)
      throw IncompatibleCheckpoint("checkpoint is a trunk-only network");
    for (int l = 0; l + 1 < net.num_layers(); ++l) {
      net.weights()[l] = checkpoint->weights()[l];
      net.biases()[l] = checkpoint->biases()[l];
    }
  }
  mask_invalid_outputs(net, mdp);
  return net;
}

double TransferTable::median(const std::string& target, InitMode mode, int milestone) const {
  std::vector<double> v;
  for (const TransferCell& c : cells)
    if (c.target == target && c.mode == mode && c.error.empty() && milestone < static_cast<int>(c.returns.size()))
      v.push_back(c.returns[milestone]);
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void TransferTable::write(std::ostream& os) const {
  os << "target\tmode\tseed\tmilestone\tmean_return\n";
  char buf[64];
  for (const TransferCell& c : cells) {
    for (int k = 0; k <= milestones; ++k) {
      const double v = k < static_cast<int>(c.returns.size()) ? c.returns[k] : kNaN;
      std::snprintf(buf, sizeof buf, "%.17g", v);
      os << c.target << '\t' << to_string(c.mode) << '\t' << c.seed << '\t' << k << '\t' << buf << '\n';
    }
  }
}

MetricSeries TransferTable::metrics(const std::string& stage) const {
  MetricSeries out;
  for (const TransferCell& c : cells)
    for (std::size_t k = 0; k < c.returns.size(); ++k)
      out.append(stage, c.target + "/" + to_string(c.mode), static_cast<int>(k), "expected_return", c.returns[k],
                 c.seed);
  return out;
}

TransferTable run_transfer_matrix(const std::vector<std::string>& source_games, const std::vector<Game>& targets,
                                  const MlpQ* amn_policy, const MlpQ* amn_feature, const TransferConfig& config,
                                  int jobs) {
  if (config.milestones < 1) throw std::invalid_argument("TransferConfig: milestones must be >= 1");
  if (config.dqn.frames < 0) throw std::invalid_argument("TransferConfig: negative frame budget");
  for (const Game& t : targets)
    if (std::find(source_games.begin(), source_games.end(), t.name) != source_games.end())
      throw std::invalid_argument("transfer target '" + t.name + "' is also an AMN source game");

  std::vector<FeatureMap> features;
  for (const Game& t : targets) features.push_back(grid_features(t.spec));

  TransferTable table;
  table.milestones = config.milestones;
  table.frames = config.dqn.frames;
  std::vector<std::size_t> target_of;
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    for (InitMode mode : config.modes) {
      if (mode == InitMode::AmnPolicy && !amn_policy) continue;
      if (mode == InitMode::AmnFeature && !amn_feature) continue;
      for (std::uint64_t seed : config.seeds) {
        table.cells.push_back({targets[ti].name, targets[ti].tier, mode, seed, {}, {}});
        target_of.push_back(ti);
      }
    }
  }

  auto run_cell = [&](std::size_t idx) {
    TransferCell& cell = table.cells[idx];
    const Game& game = targets[target_of[idx]];
    const FeatureMap& f = features[target_of[idx]];
    const MlpQ* ckpt = cell.mode == InitMode::AmnPolicy    ? amn_policy
                       : cell.mode == InitMode::AmnFeature ? amn_feature
                                                           : nullptr;
    try {
      MlpQ init = warm_start_learner(ckpt, config.dqn.hidden, game, f, cell.mode, cell.seed);
      DqnTrainer trainer(game.mdp, f, config.dqn, cell.seed, std::move(init));
      cell.returns.push_back(eval_return(game.mdp, trainer.q_table(), config.dqn.eval_epsilon));
      std::int64_t done = 0;
      for (int k = 1; k <= config.milestones; ++k) {
        const std::int64_t until = config.dqn.frames * k / config.milestones;
        trainer.train(until - done);
        done = until;
        cell.returns.push_back(eval_return(game.mdp, trainer.q_table(), config.dqn.eval_epsilon));
      }
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  };

  parallel_for(static_cast<int>(table.cells.size()), jobs, [&](int i) { run_cell(static_cast<std::size_t>(i)); });
  return table;
}

std::string to_string(BaselineVariant v) {
  return v == BaselineVariant::SharedAll ? "shared_all" : "shared_trunk";
}

BaselineVariant parse_baseline_variant(const std::string& s) {
  if (s == "shared_all") return BaselineVariant::SharedAll;
  if (s == "shared_trunk") return BaselineVariant::SharedTrunk;
  throw std::invalid_argument("unknown baseline variant '" + s + "' (expected shared_all or shared_trunk)");
}

MlpQ BaselineResult::network(int game_index) const {
  const int h = head_count() == 1 ? 0 : game_index;
  if (h < 0 || h >= head_count()) throw std::out_of_range("BaselineResult: no head for game index");
  std::vector<int> sizes;
  if (trunk_weights.empty()) {
    sizes.push_back(static_cast<int>(head_weights[h].cols()));
  } else {
    sizes.push_back(static_cast<int>(trunk_weights.front().cols()));
    for (const MatrixXd& w : trunk_weights) sizes.push_back(static_cast<int>(w.rows()));
  }
  sizes.push_back(static_cast<int>(head_weights[h].rows()));
  MlpQ net = MlpQ::zeros(sizes);
  for (std::size_t l = 0; l < trunk_weights.size(); ++l) {
    net.weights()[l] = trunk_weights[l];
    net.biases()[l] = trunk_biases[l];
  }
  net.weights().back() = head_weights[h];
  net.biases().back() = head_biases[h];
  return net;
}

namespace {

VectorXd flatten_layers(const std::vector<MatrixXd>& w, const std::vector<VectorXd>& b, std::size_t from,
                        std::size_t to) {
  Eigen::Index n = 0;
  for (std::size_t l = from; l < to; ++l) n += w[l].size() + b[l].size();
  VectorXd out(n);
  Eigen::Index k = 0;
  for (std::size_t l = from; l < to; ++l) {
    out.segment(k, w[l].size()) = Eigen::Map<const VectorXd>(w[l].data(), w[l].size());
    k += w[l].size();
    out.segment(k, b[l].size()) = b[l];
    k += b[l].size();
  }
  return out;
}

void unflatten_layers(const VectorXd& flat, std::vector<MatrixXd*> w, std::vector<VectorXd*> b) {
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < w.size(); ++l) {
    Eigen::Map<VectorXd>(w[l]->data(), w[l]->size()) = flat.segment(k, w[l]->size());
    k += w[l]->size();
    *b[l] = flat.segment(k, b[l]->size());
    k += b[l]->size();
  }
}

}  // namespace

BaselineResult train_multitask_baseline(const std::vector<BaselineTask>& tasks, const BaselineConfig& config,
                                        std::uint64_t seed, const std::string& stage) {
  if (tasks.empty()) throw std::invalid_argument("train_multitask_baseline: no tasks");
  if (config.epochs < 1) throw std::invalid_argument("BaselineConfig: epochs must be >= 1");
  const DqnConfig& dqn = config.dqn;
  if (dqn.warmup > dqn.replay_capacity) throw std::invalid_argument("BaselineConfig: warmup exceeds replay capacity");
  if (dqn.target_sync_period < 1) throw std::invalid_argument("BaselineConfig: target_sync_period < 1");
  const int num_tasks = static_cast<int>(tasks.size());
  const int input_dim = tasks.front().features->dim();
  const int num_actions = tasks.front().game->mdp.num_actions();
  for (const BaselineTask& t : tasks) {
    if (t.features->dim() != input_dim || t.game->mdp.num_actions() != num_actions)
      throw std::invalid_argument("train_multitask_baseline: '" + t.game->name +
                                  "' does not share the input width and action alphabet");
    if (t.features->num_states() != t.game->mdp.num_states())
      throw std::invalid_argument("train_multitask_baseline: feature map does not cover '" + t.game->name + "'");
  }

  std::vector<int> sizes = {input_dim};
  sizes.insert(sizes.end(), dqn.hidden.begin(), dqn.hidden.end());
  sizes.push_back(num_actions);
  const MlpQ first(sizes, derive_seed(seed, 2));
  const std::size_t trunk_layers = static_cast<std::size_t>(first.num_layers() - 1);

  BaselineResult result;
  result.trunk_weights.assign(first.weights().begin(), first.weights().end() - 1);
  result.trunk_biases.assign(first.biases().begin(), first.biases().end() - 1);
  const int heads = config.variant == BaselineVariant::SharedAll ? 1 : num_tasks;
  for (int h = 0; h < heads; ++h) {
    const MlpQ src = h == 0 ? first : MlpQ(sizes, derive_seed(seed, 300 + h));
    result.head_weights.push_back(src.weights().back());
    result.head_biases.push_back(src.biases().back());
  }

  auto make_opt = [&] {
    return dqn.rmsprop ? Optimizer::rmsprop(dqn.learning_rate) : Optimizer::sgd(Schedule::constant(dqn.learning_rate));
  };
  Optimizer trunk_opt = make_opt();
  std::vector<Optimizer> head_opts(heads, make_opt());

  struct Lane {
    Rng rng;
    ReplayMemory memory;
    int state = 0;
    int episode_step = 0;
    std::int64_t frames = 0;
    bool diverged = false;
  };
  std::vector<Lane> lanes;
  for (int i = 0; i < num_tasks; ++i) {
    Lane lane{Rng(derive_seed(seed, 1 + 100 * static_cast<std::uint64_t>(i))), ReplayMemory(dqn.replay_capacity)};
    lane.state = random_start(tasks[i].game->mdp, lane.rng);
    lanes.push_back(std::move(lane));
  }
  auto head_of = [&](int i) { return heads == 1 ? 0 : i; };
  std::vector<MlpQ> targets;
  for (int i = 0; i < num_tasks; ++i) targets.push_back(result.network(i));
  std::int64_t updates = 0;

  auto evaluate = [&](int epoch) {
    for (int i = 0; i < num_tasks; ++i) {
      const Game& g = *tasks[i].game;
      const MatrixXd q = q_table(result.network(i), *tasks[i].features);
      result.metrics.append(stage, g.name, epoch, "expected_return", eval_return(g.mdp, q, dqn.eval_epsilon), seed);
      result.metrics.append(stage, g.name, epoch, "diverged", lanes[i].diverged ? 1.0 : 0.0, seed);
    }
  };

  auto step = [&](int i) {
    const Mdp& mdp = tasks[i].game->mdp;
    const FeatureMap& features = *tasks[i].features;
    Lane& lane = lanes[i];
    const MlpQ online = result.network(i);
    const double frac =
        dqn.epsilon_decay_frames > 0 ? std::min(1.0, static_cast<double>(lane.frames) / dqn.epsilon_decay_frames) : 1.0;
    const double eps = dqn.epsilon_start + frac * (dqn.epsilon_end - dqn.epsilon_start);
    const auto& acts = mdp.valid_actions(lane.state);
    int a;
    if (uniform01(lane.rng) < eps) {
      a = acts[uniform_index(lane.rng, static_cast<int>(acts.size()))];
    } else {
      a = argmax_valid(mdp, online.forward(features.encode(lane.state)), lane.state);
    }
    const int next = mdp.sample_next(lane.state, a, lane.rng);
    const bool done = mdp.is_terminal(next);
    lane.memory.push({lane.state, a, mdp.reward(lane.state, a), next, done});
    ++lane.frames;
    ++lane.episode_step;
    if (done || lane.episode_step >= mdp.horizon_cap()) {
      lane.state = random_start(mdp, lane.rng);
      lane.episode_step = 0;
    } else {
      lane.state = next;
    }

    if (lane.memory.size() < std::max(dqn.warmup, 1)) return;
    MlpGrads grads;
    const double loss =
        td_loss(online, targets[i], mdp, features, lane.memory.sample(dqn.batch_size, lane.rng), &grads);
    if (!std::isfinite(loss) || loss > dqn.divergence_threshold || !grads.all_finite()) {
      lane.diverged = true;
      result.diverged.push_back(tasks[i].game->name);
      return;
    }
    std::vector<MatrixXd*> tw;
    std::vector<VectorXd*> tb;
    for (std::size_t l = 0; l < trunk_layers; ++l) {
      tw.push_back(&result.trunk_weights[l]);
      tb.push_back(&result.trunk_biases[l]);
    }
    if (!tw.empty()) {
      VectorXd p = flatten_layers(result.trunk_weights, result.trunk_biases, 0, trunk_layers);
      trunk_opt.step(p, flatten_layers(grads.weights, grads.biases, 0, trunk_layers));
      unflatten_layers(p, tw, tb);
    }
    const int h = head_of(i);
    VectorXd p = flatten_layers(result.head_weights, result.head_biases, h, h + 1);
    head_opts[h].step(p, flatten_layers(grads.weights, grads.biases, trunk_layers, trunk_layers + 1));
    unflatten_layers(p, {&result.head_weights[h]}, {&result.head_biases[h]});
    ++updates;
    if (updates % dqn.target_sync_period == 0)
      for (int j = 0; j < num_tasks; ++j) targets[j] = result.network(j);
  };

  evaluate(0);
  const std::int64_t per_epoch = (dqn.frames + config.epochs - 1) / config.epochs;
  int epoch = 0;
  for (std::int64_t f = 0; f < dqn.frames; ++f) {
    for (int i = 0; i < num_tasks; ++i)
      if (!lanes[i].diverged) step(i);
    while (epoch < config.epochs && f + 1 >= std::min(dqn.frames, per_epoch * (epoch + 1))) evaluate(++epoch);
  }
  while (epoch < config.epochs) evaluate(++epoch);
  return result;
}

double normalized_return(double value, double uniform, double expert) {
  const double span = expert - uniform;
  if (!(std::abs(span) > 0.0)) throw std::invalid_argument("normalized_return: expert and uniform returns coincide");
  return (value - uniform) / span;
}

}  // namespace amimic
