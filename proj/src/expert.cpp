#include "amimic/expert.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace amimic {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double max_valid(const Mdp& mdp, const MatrixXd& q, int s) {
  double best = kNegInf;
  for (int a : mdp.valid_actions(s)) best = std::max(best, q(s, a));
  return best;
}

}  // namespace

int argmax_valid(const Mdp& mdp, const VectorXd& values, int s) {
  int best_a = -1;
  double best = kNegInf;
  for (int a : mdp.valid_actions(s)) {
    if (values(a) > best) {
      best = values(a);
      best_a = a;
    }
  }
  return best_a;
}

int random_start(const Mdp& mdp, Rng& rng) {
  const auto& starts = mdp.start_states();
  return starts[uniform_index(rng, static_cast<int>(starts.size()))];
}

ReplayMemory::ReplayMemory(int capacity) : capacity_(capacity) {
  if (capacity <= 0) throw std::invalid_argument("ReplayMemory: capacity must be positive");
  buffer_.reserve(static_cast<std::size_t>(capacity));
}

void ReplayMemory::push(const Transition& t) {
  if (size() < capacity_) {
    buffer_.push_back(t);
  } else {
    buffer_[head_] = t;
    head_ = (head_ + 1) % capacity_;
  }
}

const Transition& ReplayMemory::at(int i) const {
  if (i < 0 || i >= size()) throw std::out_of_range("ReplayMemory::at");
  return buffer_[(head_ + i) % size()];
}

std::vector<int> ReplayMemory::sample_indices(int n, Rng& rng) const {
  if (empty()) throw std::logic_error("ReplayMemory: sampling from an empty memory");
  std::vector<int> out(n);
  for (int& i : out) i = uniform_index(rng, size());
  return out;
}

std::vector<Transition> ReplayMemory::sample(int n, Rng& rng) const {
  std::vector<Transition> out;
  out.reserve(n);
  for (int i : sample_indices(n, rng)) out.push_back(buffer_[i]);
  return out;
}

MatrixXd value_iteration(const Mdp& mdp, double tol, int max_iters) {
  if (!(tol > 0.0)) throw std::invalid_argument("value_iteration: tol must be positive");
  const int ns = mdp.num_states();
  const int na = mdp.num_actions();
  MatrixXd q = MatrixXd::Zero(ns, na);
  VectorXd v = VectorXd::Zero(ns);
  for (int it = 0; it < max_iters; ++it) {
    MatrixXd next = MatrixXd::Zero(ns, na);
    for (int a = 0; a < na; ++a) {
      const VectorXd backup = mdp.reward_matrix().col(a) + mdp.gamma() * (mdp.transition_matrix(a) * v);
      for (int s = 0; s < ns; ++s)
        if (mdp.is_valid(s, a)) next(s, a) = backup(s);
    }
    const double change = (next - q).cwiseAbs().maxCoeff();
    q = std::move(next);
    v = state_values(mdp, q);
    if (change <= tol) return q;
  }
  throw std::runtime_error("value_iteration: no convergence within " + std::to_string(max_iters) +
                           " iterations");
}

VectorXd state_values(const Mdp& mdp, const MatrixXd& q) {
  VectorXd v(mdp.num_states());
  for (int s = 0; s < mdp.num_states(); ++s) v(s) = max_valid(mdp, q, s);
  return v;
}

double bellman_residual(const Mdp& mdp, const MatrixXd& q) {
  const VectorXd v = state_values(mdp, q);
  double worst = 0.0;
  for (int a = 0; a < mdp.num_actions(); ++a) {
    const VectorXd backup = mdp.reward_matrix().col(a) + mdp.gamma() * (mdp.transition_matrix(a) * v);
    for (int s = 0; s < mdp.num_states(); ++s)
      if (mdp.is_valid(s, a)) worst = std::max(worst, std::abs(backup(s) - q(s, a)));
  }
  return worst;
}

MatrixXd tabular_q_learning(const Mdp& mdp, const Schedule& schedule, double epsilon,
                            std::uint64_t seed, std::int64_t steps) {
  Rng rng(seed);
  const int ns = mdp.num_states();
  const int na = mdp.num_actions();
  MatrixXd q = MatrixXd::Zero(ns, na);
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> visits =
      Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(ns, na);
  int s = random_start(mdp, rng);
  int t_episode = 0;
  for (std::int64_t step = 0; step < steps; ++step) {
    const auto& acts = mdp.valid_actions(s);
    int a;
    if (uniform01(rng) < epsilon) {
      a = acts[uniform_index(rng, static_cast<int>(acts.size()))];
    } else {
      a = argmax_valid(mdp, q.row(s).transpose(), s);
    }
    const int next = mdp.sample_next(s, a, rng);
    const double r = mdp.reward(s, a);
    const bool done = mdp.is_terminal(next);
    const double target = r + (done ? 0.0 : mdp.gamma() * max_valid(mdp, q, next));
    const double alpha = schedule.rate(visits(s, a)++);
    q(s, a) += alpha * (target - q(s, a));
    ++t_episode;
    if (done || t_episode >= mdp.horizon_cap()) {
      s = random_start(mdp, rng);
      t_episode = 0;
    } else {
      s = next;
    }
  }
  return q;
}

EvalStats evaluate_policy(const Mdp& mdp, const PolicyMatrix& policy, int episodes,
                          std::uint64_t seed) {
  if (episodes < 1) throw std::invalid_argument("evaluate_policy: need at least one episode");
  Rng rng(seed);
  std::vector<double> returns;
  returns.reserve(episodes);
  for (int e = 0; e < episodes; ++e) {
    const int start = random_start(mdp, rng);
    returns.push_back(sample_trajectory(mdp, policy, rng, start).total_return);
  }
  EvalStats out;
  out.episodes = episodes;
  double sum = 0.0;
  out.max = kNegInf;
  for (double r : returns) {
    sum += r;
    out.max = std::max(out.max, r);
  }
  out.mean = sum / episodes;
  double var = 0.0;
  for (double r : returns) var += (r - out.mean) * (r - out.mean);
  out.std = std::sqrt(var / episodes);
  return out;
}

double expected_return(const Mdp& mdp, const PolicyMatrix& policy) {
  const MatrixXd chain = policy_transition_matrix(mdp, policy);
  const VectorXd reward = (policy.probs().cwiseProduct(mdp.reward_matrix())).rowwise().sum();
  VectorXd v = VectorXd::Zero(mdp.num_states());
  for (int h = 0; h < mdp.horizon_cap(); ++h) v = reward + mdp.gamma() * (chain * v);
  double total = 0.0;
  for (int s : mdp.start_states()) total += v(s);
  return total / static_cast<double>(mdp.start_states().size());
}

double td_loss(const MlpQ& online, const MlpQ& target, const Mdp& mdp, const FeatureMap& features,
               const std::vector<Transition>& batch, MlpGrads* grads) {
  const int n = static_cast<int>(batch.size());
  std::vector<int> states(n);
  std::vector<int> next_states(n);
  for (int i = 0; i < n; ++i) {
    states[i] = batch[i].state;
    next_states[i] = batch[i].next_state;
  }
  const MlpCache cache = online.forward_cache(features.encode_batch(states));
  const MatrixXd next_q = target.forward(features.encode_batch(next_states));
  const MatrixXd& q = MlpQ::outputs(cache);
  MatrixXd d_out = MatrixXd::Zero(q.rows(), n);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const Transition& t = batch[i];
    double bootstrap = 0.0;
    if (!t.done) bootstrap = mdp.gamma() * next_q.col(i)(argmax_valid(mdp, next_q.col(i), t.next_state));
    const double err = q(t.action, i) - (t.reward + bootstrap);
    loss += err * err;
    d_out(t.action, i) = 2.0 * err / n;
  }
  if (grads) *grads = online.backward(cache, d_out);
  return loss / n;
}

DqnTrainer::DqnTrainer(const Mdp& mdp, const FeatureMap& features, DqnConfig config,
                       std::uint64_t seed, std::optional<MlpQ> init)
    : mdp_(mdp),
      features_(features),
      config_(std::move(config)),
      rng_(derive_seed(seed, 1)),
      opt_(config_.rmsprop ? Optimizer::rmsprop(config_.learning_rate)
                           : Optimizer::sgd(Schedule::constant(config_.learning_rate))),
      replay_(config_.replay_capacity) {
  if (config_.warmup > config_.replay_capacity)
    throw std::invalid_argument("DqnConfig: warmup exceeds replay capacity");
  if (config_.target_sync_period < 1) throw std::invalid_argument("DqnConfig: target_sync_period < 1");
  if (features.num_states() != mdp.num_states())
    throw std::invalid_argument("DqnTrainer: feature map does not cover the MDP");
  if (init) {
    online_ = std::move(*init);
    if (online_.input_dim() != features.dim() || online_.output_dim() != mdp.num_actions())
      throw std::invalid_argument("DqnTrainer: initial network has the wrong shape");
  } else {
    std::vector<int> sizes = {features.dim()};
    sizes.insert(sizes.end(), config_.hidden.begin(), config_.hidden.end());
    sizes.push_back(mdp.num_actions());
    online_ = MlpQ(sizes, derive_seed(seed, 2));
  }
  target_ = online_;
  state_ = random_start(mdp_, rng_);
}

void DqnTrainer::train(std::int64_t frames) {
  for (std::int64_t f = 0; f < frames; ++f) {
    const double frac = config_.epsilon_decay_frames > 0
                            ? std::min(1.0, static_cast<double>(frames_) / config_.epsilon_decay_frames)
                            : 1.0;
    const double eps = config_.epsilon_start + frac * (config_.epsilon_end - config_.epsilon_start);
    const auto& acts = mdp_.valid_actions(state_);
    int a;
    if (uniform01(rng_) < eps) {
      a = acts[uniform_index(rng_, static_cast<int>(acts.size()))];
    } else {
      a = argmax_valid(mdp_, online_.forward(features_.encode(state_)), state_);
    }
    const int next = mdp_.sample_next(state_, a, rng_);
    const bool done = mdp_.is_terminal(next);
    replay_.push({state_, a, mdp_.reward(state_, a), next, done});
    ++frames_;
    ++episode_step_;
    if (done || episode_step_ >= mdp_.horizon_cap()) {
      state_ = random_start(mdp_, rng_);
      episode_step_ = 0;
    } else {
      state_ = next;
    }

    if (replay_.size() < std::max(config_.warmup, 1)) continue;
    MlpGrads grads;
    last_loss_ = td_loss(online_, target_, mdp_, features_, replay_.sample(config_.batch_size, rng_), &grads);
    if (!std::isfinite(last_loss_) || last_loss_ > config_.divergence_threshold) {
      throw TrainingDiverged("DQN loss " + std::to_string(last_loss_) + " after " +
                             std::to_string(updates_) + " updates");
    }
    apply_gradients(online_, grads, opt_);
    ++updates_;
    if (updates_ % config_.target_sync_period == 0) target_ = online_;
  }
}

MatrixXd DqnTrainer::q_table() const {
  return online_.forward(MatrixXd(features_.matrix().transpose())).transpose();
}

EvalStats DqnTrainer::evaluate(int episodes, std::uint64_t seed) const {
  return evaluate_policy(mdp_, gamma_operator(q_table(), mdp_, config_.eval_epsilon), episodes, seed);
}

MatrixXd ExpertBundle::feature_activations(const std::vector<int>& states) const {
  if (!net || !net_features) throw std::logic_error("expert '" + game + "' has no feature layer");
  return MlpQ::features(net->forward_cache(net_features->encode_batch(states)));
}

MatrixXd ExpertBundle::q_values(const std::vector<int>& states) const {
  if (net && net_features) return net->forward(net_features->encode_batch(states));
  MatrixXd out(q.cols(), static_cast<Eigen::Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i) out.col(i) = q.row(states[i]).transpose();
  return out;
}

int ExpertBundle::feature_dim() const {
  return net ? net->feature_dim() : 0;
}

ExpertBundle oracle_expert(const Game& game, int eval_episodes, std::uint64_t seed) {
  MatrixXd q = value_iteration(game.mdp);
  PolicyMatrix greedy = gamma_operator(q, game.mdp, 0.0);
  const EvalStats stats =
      evaluate_policy(game.mdp, gamma_operator(q, game.mdp, 0.05), eval_episodes, seed);
  return ExpertBundle{game.name, "oracle", std::move(q), std::move(greedy), std::nullopt, std::nullopt,
                      stats, 0};
}

ExpertBundle dqn_train(const Game& game, const FeatureMap& features, const DqnConfig& config,
                       std::uint64_t seed) {
  DqnTrainer trainer(game.mdp, features, config, seed);
  trainer.train(config.frames);
  MatrixXd q = trainer.q_table();
  PolicyMatrix greedy = gamma_operator(q, game.mdp, 0.0);
  const EvalStats stats = trainer.evaluate(config.eval_episodes, derive_seed(seed, 3));
  return ExpertBundle{game.name, "dqn",  std::move(q), std::move(greedy), trainer.net(),
                      features,  stats, config.frames};
}

}  // namespace amimic
