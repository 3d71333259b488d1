#include "amimic/actor_mimic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace amimic {

namespace {

int argmax_over(const VectorXd& values, const std::vector<int>& valid) {
  int best_a = valid.front();
  for (int a : valid)
    if (values(a) > values(best_a)) best_a = a;
  return best_a;
}

}  // namespace

VectorXd boltzmann_policy(const VectorXd& q, const std::vector<int>& valid, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("boltzmann_policy: tau must be positive");
  if (valid.empty()) throw std::invalid_argument("boltzmann_policy: no valid actions");
  double m = -std::numeric_limits<double>::infinity();
  for (int a : valid) m = std::max(m, q(a));
  VectorXd p = VectorXd::Zero(q.size());
  double z = 0.0;
  for (int a : valid) {
    p(a) = std::exp((q(a) - m) / tau);
    z += p(a);
  }
  for (int a : valid) p(a) /= z;
  return p;
}

PolicyLoss policy_regression_loss(const VectorXd& expert_probs, const VectorXd& logits,
                                  const std::vector<int>& valid) {
  if (expert_probs.size() != logits.size())
    throw std::invalid_argument("policy_regression_loss: size mismatch");
  double mass = 0.0;
  for (int a : valid) mass += expert_probs(a);
  if (std::abs(mass - 1.0) > 1e-9 || std::abs(expert_probs.sum() - mass) > 1e-9)
    throw std::invalid_argument("policy_regression_loss: expert probabilities are not normalized over "
                                "the valid actions (mass " + std::to_string(mass) + ")");
  double m = -std::numeric_limits<double>::infinity();
  for (int a : valid) m = std::max(m, logits(a));
  double z = 0.0;
  for (int a : valid) z += std::exp(logits(a) - m);
  const double lse = m + std::log(z);
  PolicyLoss out;
  out.d_logits = VectorXd::Zero(logits.size());
  for (int a : valid) {
    const double logp = logits(a) - lse;
    if (expert_probs(a) > 0.0) out.loss -= expert_probs(a) * logp;
    out.d_logits(a) = std::exp(logp) - expert_probs(a);
  }
  return out;
}

FeatureLoss feature_regression_loss(const VectorXd& amn_features, const VectorXd& expert_features,
                                    const FeatureRegressionHead& head) {
  if (amn_features.size() != head.input_dim() || expert_features.size() != head.output_dim())
    throw std::invalid_argument("feature_regression_loss: head is " + std::to_string(head.input_dim()) +
                                "->" + std::to_string(head.output_dim()) + " but features are " +
                                std::to_string(amn_features.size()) + "->" +
                                std::to_string(expert_features.size()));
  const VectorXd r = head.weight * amn_features + head.bias - expert_features;
  FeatureLoss out;
  out.loss = r.squaredNorm();
  out.d_weight = 2.0 * r * amn_features.transpose();
  out.d_bias = 2.0 * r;
  out.d_features = 2.0 * head.weight.transpose() * r;
  return out;
}

std::string to_string(SampleSource s) {
  return s == SampleSource::FromAmn ? "from_amn" : "from_expert";
}

SampleSource parse_sample_source(const std::string& s) {
  if (s == "from_amn") return SampleSource::FromAmn;
  if (s == "from_expert") return SampleSource::FromExpert;
  throw std::invalid_argument("unknown sample source '" + s + "'");
}

std::string to_string(Interleave s) {
  return s == Interleave::RoundRobin ? "round_robin" : "block";
}

Interleave parse_interleave(const std::string& s) {
  if (s == "round_robin") return Interleave::RoundRobin;
  if (s == "block") return Interleave::Block;
  throw std::invalid_argument("unknown interleave mode '" + s + "'");
}

void AmnConfig::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("amn.tau must be positive");
  if (!(beta >= 0.0)) throw std::invalid_argument("amn.beta must be non-negative");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("amn.epsilon must be in [0, 1]");
  if (!(eval_epsilon >= 0.0 && eval_epsilon <= 1.0))
    throw std::invalid_argument("amn.eval_epsilon must be in [0, 1]");
  if (replay_capacity < 1) throw std::invalid_argument("amn.replay_capacity must be positive");
  if (batch_size < 1) throw std::invalid_argument("amn.batch_size must be positive");
  if (block_size < 1) throw std::invalid_argument("amn.block_size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("amn.learning_rate must be positive");
  if (steps < 0) throw std::invalid_argument("amn.steps must be non-negative");
  if (epochs < 1) throw std::invalid_argument("amn.epochs must be positive");
  if (eval_episodes < 1) throw std::invalid_argument("amn.eval_episodes must be positive");
  for (int h : hidden)
    if (h < 1) throw std::invalid_argument("amn.hidden sizes must be positive");
}

MatrixXd AmnModel::logits(const FeatureMap& features) const {
  return net.forward(MatrixXd(features.matrix().transpose())).transpose();
}

PolicyMatrix AmnModel::policy(const Mdp& mdp, const FeatureMap& features, double tau) const {
  const MatrixXd l = logits(features);
  MatrixXd probs(mdp.num_states(), mdp.num_actions());
  for (int s = 0; s < mdp.num_states(); ++s)
    probs.row(s) = boltzmann_policy(l.row(s).transpose(), mdp.valid_actions(s), tau).transpose();
  return PolicyMatrix(mdp, std::move(probs));
}

PolicyMatrix AmnModel::greedy(const Mdp& mdp, const FeatureMap& features, double epsilon) const {
  return gamma_operator(logits(features), mdp, epsilon);
}

CombinedLoss actor_mimic_loss(const std::vector<int>& states, const DistillTask& task, int task_index,
                              const AmnModel& model, const AmnConfig& config, MlpGrads* net_grads,
                              FeatureRegressionHead* head_grads) {
  if (states.empty()) throw std::invalid_argument("actor_mimic_loss: empty batch");
  const Mdp& mdp = task.game->mdp;
  const int n = static_cast<int>(states.size());
  const MlpCache cache = model.net.forward_cache(task.features->encode_batch(states));
  const MatrixXd& logits = MlpQ::outputs(cache);
  const MatrixXd expert_q = task.expert->q_values(states);

  CombinedLoss out;
  MatrixXd d_out(logits.rows(), n);
  for (int i = 0; i < n; ++i) {
    const auto& valid = mdp.valid_actions(states[i]);
    const VectorXd target = boltzmann_policy(expert_q.col(i), valid, config.tau);
    const PolicyLoss pl = policy_regression_loss(target, logits.col(i), valid);
    out.policy += pl.loss;
    d_out.col(i) = pl.d_logits / n;
  }

  MatrixXd d_features;
  if (config.beta > 0.0) {
    if (task_index < 0 || task_index >= static_cast<int>(model.heads.size()))
      throw std::invalid_argument("actor_mimic_loss: no feature head for task " + std::to_string(task_index));
    const FeatureRegressionHead& head = model.heads[task_index];
    const MatrixXd& h = MlpQ::features(cache);
    const MatrixXd target = task.expert->feature_activations(states);
    d_features.resize(h.rows(), n);
    if (head_grads) {
      head_grads->weight = MatrixXd::Zero(head.weight.rows(), head.weight.cols());
      head_grads->bias = VectorXd::Zero(head.bias.size());
    }
    for (int i = 0; i < n; ++i) {
      const FeatureLoss fl = feature_regression_loss(h.col(i), target.col(i), head);
      out.feature += fl.loss;
      d_features.col(i) = config.beta * fl.d_features / n;
      if (head_grads) {
        head_grads->weight += (config.beta / n) * fl.d_weight;
        head_grads->bias += (config.beta / n) * fl.d_bias;
      }
    }
  }
  out.policy /= n;
  out.feature /= n;
  out.total = out.policy + config.beta * out.feature;
  if (net_grads)
    *net_grads = model.net.backward(cache, d_out, config.beta > 0.0 ? &d_features : nullptr);
  return out;
}

AmnModel init_amn(const std::vector<DistillTask>& tasks, int input_dim, const AmnConfig& config,
                  std::uint64_t seed) {
  if (tasks.empty()) throw std::invalid_argument("train_amn: no tasks");
  const int num_actions = tasks.front().game->mdp.num_actions();
  AmnModel model;
  for (const DistillTask& t : tasks) {
    if (!t.game || !t.features) throw std::invalid_argument("train_amn: task without game or features");
    if (!t.expert) throw std::invalid_argument("train_amn: no expert for game '" + t.game->name + "'");
    if (t.game->mdp.num_actions() != num_actions)
      throw std::invalid_argument("train_amn: games disagree on the action alphabet");
    if (t.features->dim() != input_dim || t.features->num_states() != t.game->mdp.num_states())
      throw std::invalid_argument("train_amn: feature map of '" + t.game->name + "' has the wrong shape");
    model.games.push_back(t.game->name);
  }
  std::vector<int> sizes = {input_dim};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(num_actions);
  model.net = MlpQ(sizes, derive_seed(seed, 2));
  if (config.beta > 0.0) {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const int expert_dim = tasks[i].expert->feature_dim();
      if (expert_dim == 0)
        throw std::invalid_argument("train_amn: beta > 0 needs an expert with a feature layer for '" +
                                    tasks[i].game->name + "'");
      model.heads.emplace_back(model.net.feature_dim(), expert_dim, derive_seed(seed, 200 + i));
    }
  }
  return model;
}

AmnResult train_amn(const std::vector<DistillTask>& tasks, const AmnConfig& config, std::uint64_t seed,
                    const std::string& stage) {
  config.validate();
  if (tasks.empty()) throw std::invalid_argument("train_amn: no tasks");
  AmnResult result;
  result.model = init_amn(tasks, tasks.front().features->dim(), config, seed);
  AmnModel& model = result.model;
  const int num_tasks = static_cast<int>(tasks.size());

  auto make_opt = [&] {
    return config.rmsprop ? Optimizer::rmsprop(config.learning_rate)
                          : Optimizer::sgd(Schedule::constant(config.learning_rate));
  };
  Optimizer net_opt = make_opt();
  std::vector<Optimizer> head_opts(model.heads.size(), make_opt());

  struct Lane {
    Rng rng;
    ReplayMemory memory;
    int state = 0;
    int episode_step = 0;
    std::int64_t steps = 0;
    double policy_loss = 0.0;
    double feature_loss = 0.0;
    int losses = 0;
  };
  std::vector<Lane> lanes;
  for (int i = 0; i < num_tasks; ++i) {
    Lane lane{Rng(derive_seed(seed, 100 + i)), ReplayMemory(config.replay_capacity)};
    const auto& starts = tasks[i].game->mdp.start_states();
    lane.state = starts[uniform_index(lane.rng, static_cast<int>(starts.size()))];
    lanes.push_back(std::move(lane));
  }
  Rng batch_rng(derive_seed(seed, 1));

  auto evaluate = [&](int epoch) {
    for (int i = 0; i < num_tasks; ++i) {
      const Game& g = *tasks[i].game;
      const PolicyMatrix pi = model.greedy(g.mdp, *tasks[i].features, config.eval_epsilon);
      const EvalStats stats = evaluate_policy(g.mdp, pi, config.eval_episodes,
                                              derive_seed(seed, 10'000 + epoch * num_tasks + i));
      result.metrics.append(stage, g.name, epoch, "mean_return", stats.mean, seed);
      result.metrics.append(stage, g.name, epoch, "max_return", stats.max, seed);
      result.metrics.append(stage, g.name, epoch, "expected_return", expected_return(g.mdp, pi), seed);
      Lane& lane = lanes[i];
      if (epoch > 0 && lane.losses > 0) {
        result.metrics.append(stage, g.name, epoch, "policy_loss", lane.policy_loss / lane.losses, seed);
        if (config.beta > 0.0)
          result.metrics.append(stage, g.name, epoch, "feature_loss", lane.feature_loss / lane.losses, seed);
      }
      lane.policy_loss = lane.feature_loss = 0.0;
      lane.losses = 0;
    }
  };

  auto step = [&](int i) {
    const DistillTask& task = tasks[i];
    const Mdp& mdp = task.game->mdp;
    Lane& lane = lanes[i];
    const auto& valid = mdp.valid_actions(lane.state);
    int a;
    if (uniform01(lane.rng) < config.epsilon) {
      a = valid[uniform_index(lane.rng, static_cast<int>(valid.size()))];
    } else if (config.source == SampleSource::FromAmn) {
      a = argmax_over(model.net.forward(task.features->encode(lane.state)), valid);
    } else {
      a = argmax_over(task.expert->q_values({lane.state}).col(0), valid);
    }
    const int next = mdp.sample_next(lane.state, a, lane.rng);
    const bool done = mdp.is_terminal(next);
    lane.memory.push({lane.state, a, mdp.reward(lane.state, a), next, done});
    ++lane.steps;
    if (done || ++lane.episode_step >= mdp.horizon_cap()) {
      const auto& starts = mdp.start_states();
      lane.state = starts[uniform_index(lane.rng, static_cast<int>(starts.size()))];
      lane.episode_step = 0;
    } else {
      lane.state = next;
    }

    std::vector<int> states;
    states.reserve(config.batch_size);
    for (const Transition& t : lane.memory.sample(config.batch_size, batch_rng)) states.push_back(t.state);
    MlpGrads grads;
    FeatureRegressionHead head_grads;
    const CombinedLoss loss =
        actor_mimic_loss(states, task, i, model, config, &grads, config.beta > 0.0 ? &head_grads : nullptr);
    if (!std::isfinite(loss.total) || loss.total > config.divergence_threshold)
      throw TrainingDiverged("AMN loss " + std::to_string(loss.total) + " on '" + task.game->name +
                             "' after " + std::to_string(result.updates) + " updates");
    apply_gradients(model.net, grads, net_opt);
    if (config.beta > 0.0) {
      VectorXd p = model.heads[i].parameters();
      head_opts[i].step(p, head_grads.parameters());
      model.heads[i].set_parameters(p);
    }
    ++result.updates;
    lane.policy_loss += loss.policy;
    lane.feature_loss += loss.feature;
    ++lane.losses;
  };

  evaluate(0);
  const std::int64_t per_epoch = (config.steps + config.epochs - 1) / config.epochs;
  const std::int64_t unit = config.interleave == Interleave::RoundRobin ? 1 : config.block_size;
  int epoch = 0;
  for (std::int64_t base = 0; base < config.steps; base += unit) {
    for (int i = 0; i < num_tasks; ++i)
      for (std::int64_t k = 0; k < unit && lanes[i].steps < config.steps; ++k) step(i);
    const std::int64_t done = std::min_element(lanes.begin(), lanes.end(), [](const Lane& a, const Lane& b) {
                                return a.steps < b.steps;
                              })->steps;
    while (epoch < config.epochs && done >= std::min(config.steps, per_epoch * (epoch + 1))) evaluate(++epoch);
  }
  while (epoch < config.epochs) evaluate(++epoch);
  return result;
}

}  // namespace amimic
