#include "amimic/env.hpp"
#include "amimic/expert.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <map>

using namespace amimic;
using amimic::testing::chain_mdp;
using amimic::testing::numeric_gradient;
using amimic::testing::rel_error;

namespace {

double expectimax(const Mdp& mdp, int s, int depth, std::map<std::pair<int, int>, double>& memo) {
  if (depth == 0 || mdp.is_terminal(s)) return 0.0;
  const auto key = std::make_pair(s, depth);
  if (auto it = memo.find(key); it != memo.end()) return it->second;
  double best = -1e300;
  for (int a : mdp.valid_actions(s)) {
    double v = mdp.reward(s, a);
    for (int n = 0; n < mdp.num_states(); ++n)
      if (mdp.transition(s, a, n) > 0.0)
        v += mdp.gamma() * mdp.transition(s, a, n) * expectimax(mdp, n, depth - 1, memo);
    best = std::max(best, v);
  }
  return memo[key] = best;
}

GridGameSpec small_grid(int side, double slip) {
  GridGameSpec spec;
  spec.name = "small";
  spec.width = side;
  spec.height = side;
  spec.slip_prob = slip;
  spec.step_penalty = 0.05;
  spec.valid_actions = {0, 1, 2, 3};
  spec.start_cells = {{0, 0}};
  spec.goals = {{{side - 1, side - 1}, 1.0, true}};
  return spec;
}

}  // namespace

TEST_CASE("replay memory") {
  SUBCASE("evicts the oldest item when full") {
    ReplayMemory mem(3);
    for (int i = 0; i < 5; ++i) mem.push({i, 0, 0.0, 0, false});
    CHECK(mem.size() == 3);
    CHECK(mem.at(0).state == 2);
    CHECK(mem.at(2).state == 4);
  }
  SUBCASE("sampling is uniform over retained items") {
    ReplayMemory mem(100);
    for (int i = 0; i < 130; ++i) mem.push({i, 0, 0.0, 0, false});
    Rng rng(77);
    const int draws = 100'000;
    std::vector<int> counts(200, 0);
    for (const Transition& t : mem.sample(draws, rng)) ++counts[t.state];
    for (int i = 0; i < 30; ++i) CHECK(counts[i] == 0);
    double chi2 = 0.0;
    const double expected = draws / 100.0;
    for (int i = 30; i < 130; ++i) chi2 += (counts[i] - expected) * (counts[i] - expected) / expected;
    // Upper 0.1% point of chi-square with 99 degrees of freedom.
    CHECK(chi2 < 148.2);
  }
  SUBCASE("bad use") {
    CHECK_THROWS_AS(ReplayMemory(0), std::invalid_argument);
    ReplayMemory mem(2);
    Rng rng(1);
    CHECK_THROWS_AS(mem.sample(1, rng), std::logic_error);
  }
}

TEST_CASE("value iteration") {
  SUBCASE("zero discount returns the reward table") {
    MdpData d = build_random_mdp({4, 3, 2, 2.0, 9, 0.9}).data();
    d.gamma = 0.0;
    const Mdp mdp(d);
    CHECK((value_iteration(mdp) - mdp.reward_matrix()).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("4x4 grid matches horizon-30 expectimax") {
    const Mdp mdp = build_grid_game(small_grid(4, 0.2), 0.6, 100);
    const MatrixXd q = value_iteration(mdp, 1e-12);
    const VectorXd v = state_values(mdp, q);
    for (int s = 0; s < 16; s += 5) {
      std::map<std::pair<int, int>, double> memo;
      CHECK(std::abs(v(s) - expectimax(mdp, s, 30, memo)) <= 1e-5);
    }
    CHECK(bellman_residual(mdp, q) <= 1e-11);
  }
}

TEST_CASE("tabular Q-learning") {
  SUBCASE("single self-looping state converges to r / (1 - gamma)") {
    const Mdp mdp = chain_mdp(MatrixXd::Ones(1, 1), 1.0, 1'000'000);
    const MatrixXd q = tabular_q_learning(mdp, Schedule::robbins_monro(10.0, 10.0), 0.0, 3, 20'000);
    CHECK(q(0, 0) == doctest::Approx(10.0).epsilon(1e-2));
  }
  SUBCASE("same seed gives the same table") {
    const Mdp mdp = build_grid_game(small_grid(3, 0.1), 0.9, 40);
    const Schedule s = Schedule::constant(0.1);
    CHECK(tabular_q_learning(mdp, s, 0.3, 5, 5000) == tabular_q_learning(mdp, s, 0.3, 5, 5000));
  }
  SUBCASE("agrees with value iteration on a 3x3 grid") {
    const Mdp mdp = build_grid_game(small_grid(3, 0.0), 0.9, 40);
    const MatrixXd exact = value_iteration(mdp);
    const MatrixXd learned = tabular_q_learning(mdp, Schedule::robbins_monro(1.0, 1.0), 1.0, 11, 200'000);
    for (int s = 0; s < 9; ++s) {
      if (mdp.is_terminal(s) || s == 8) continue;
      for (int a : mdp.valid_actions(s)) CHECK(std::abs(learned(s, a) - exact(s, a)) <= 0.02);
    }
  }
}

TEST_CASE("policy evaluation") {
  const Mdp mdp = build_grid_game(small_grid(4, 0.0), 0.9, 30);
  const MatrixXd q = value_iteration(mdp);
  const PolicyMatrix optimal = gamma_operator(q, mdp, 0.0);

  SUBCASE("deterministic policy on a deterministic game has zero spread") {
    const EvalStats s = evaluate_policy(mdp, optimal, 20, 1);
    CHECK(s.std <= 1e-12);
    CHECK(s.mean == doctest::Approx(expected_return(mdp, optimal)).epsilon(1e-12));
  }
  SUBCASE("Monte Carlo mean is within three standard errors of the exact value") {
    const Mdp slippery = build_grid_game(small_grid(4, 0.3), 0.9, 30);
    const PolicyMatrix pi = gamma_operator(value_iteration(slippery), slippery, 0.2);
    const int n = 4000;
    const EvalStats s = evaluate_policy(slippery, pi, n, 9);
    CHECK(std::abs(s.mean - expected_return(slippery, pi)) <= 3.0 * s.std / std::sqrt(n));
  }
  SUBCASE("optimal policy is at least as good as others") {
    const double best = expected_return(mdp, optimal);
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
      MatrixXd random_q(mdp.num_states(), mdp.num_actions());
      for (int i = 0; i < random_q.size(); ++i) random_q.data()[i] = uniform01(rng);
      CHECK(expected_return(mdp, gamma_operator(random_q, mdp, 0.1)) <= best + 1e-12);
    }
  }
}

TEST_CASE("td loss gradient") {
  const Game game = build_game_suite()[2];
  const FeatureMap f = grid_features(game.spec);
  MlpQ online({f.dim(), 6, kNumMoves}, 4);
  const MlpQ target({f.dim(), 6, kNumMoves}, 5);
  Rng rng(8);
  std::vector<Transition> batch;
  for (int i = 0; i < 12; ++i) {
    const int s = game.mdp.start_states()[uniform_index(rng, static_cast<int>(game.mdp.start_states().size()))];
    const int a = game.mdp.valid_actions(s)[0];
    const int n = game.mdp.sample_next(s, a, rng);
    batch.push_back({s, a, game.mdp.reward(s, a), n, game.mdp.is_terminal(n)});
  }
  MlpGrads g;
  td_loss(online, target, game.mdp, f, batch, &g);
  auto loss = [&](const VectorXd& p) {
    MlpQ m = online;
    m.set_parameters(p);
    return td_loss(m, target, game.mdp, f, batch, nullptr);
  };
  CHECK(rel_error(g.flatten(), numeric_gradient(loss, online.parameters())) < 1e-4);
}

TEST_CASE("dqn trainer") {
  const Mdp mdp = build_grid_game(small_grid(3, 0.0), 0.9, 20);
  const FeatureMap f = one_hot_features(mdp.num_states());
  DqnConfig cfg;
  cfg.hidden = {};
  cfg.replay_capacity = 500;
  cfg.warmup = 50;
  cfg.batch_size = 16;
  cfg.target_sync_period = 20;
  cfg.epsilon_decay_frames = 1000;
  cfg.learning_rate = 0.05;
  cfg.rmsprop = false;

  SUBCASE("linear network on one-hot inputs learns the optimal greedy policy") {
    DqnTrainer trainer(mdp, f, cfg, 3);
    trainer.train(4000);
    CHECK(trainer.updates_done() == 4000 - cfg.warmup + 1);
    const double learned = expected_return(mdp, gamma_operator(trainer.q_table(), mdp, 0.0));
    const double best = expected_return(mdp, gamma_operator(value_iteration(mdp), mdp, 0.0));
    CHECK(learned == doctest::Approx(best).epsilon(1e-9));
  }
  SUBCASE("same seed reproduces the network") {
    DqnTrainer a(mdp, f, cfg, 6);
    DqnTrainer b(mdp, f, cfg, 6);
    a.train(500);
    b.train(500);
    CHECK(a.net() == b.net());
  }
  SUBCASE("a huge step size is reported as divergence") {
    cfg.learning_rate = 1e4;
    DqnTrainer trainer(mdp, f, cfg, 1);
    CHECK_THROWS_AS(trainer.train(2000), TrainingDiverged);
  }
  SUBCASE("shape checks") {
    CHECK_THROWS_AS(DqnTrainer(mdp, one_hot_features(3), cfg, 1), std::invalid_argument);
    cfg.warmup = 1000;
    CHECK_THROWS_AS(DqnTrainer(mdp, f, cfg, 1), std::invalid_argument);
  }
}

TEST_CASE("expert bundles") {
  const Game game = build_game_suite()[0];
  const ExpertBundle oracle = oracle_expert(game, 50, 1);
  CHECK(oracle.kind == "oracle");
  CHECK(oracle.feature_dim() == 0);
  CHECK_THROWS_AS(oracle.feature_activations({0}), std::logic_error);
  const std::vector<int> states = {0, 1};
  CHECK(oracle.q_values(states).col(1) == oracle.q.row(1).transpose());

  const FeatureMap f = grid_features(game.spec);
  DqnConfig cfg;
  cfg.frames = 400;
  cfg.eval_episodes = 5;
  const ExpertBundle dqn = dqn_train(game, f, cfg, 2);
  CHECK(dqn.feature_dim() == 32);
  CHECK(dqn.feature_activations(states).rows() == 32);
  CHECK((dqn.q_values(states).col(0) - dqn.q.row(0).transpose()).norm() <= 1e-12);
}
