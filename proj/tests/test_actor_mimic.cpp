#include "amimic/actor_mimic.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

using namespace amimic;
using amimic::testing::numeric_gradient;
using amimic::testing::rel_error;

namespace {

std::vector<int> all_actions(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

VectorXd random_vector(int n, Rng& rng, double scale = 1.0) {
  VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = scale * (2.0 * uniform01(rng) - 1.0);
  return v;
}

Game tiny_game() {
  GridGameSpec spec;
  spec.name = "tiny";
  spec.width = 3;
  spec.height = 3;
  spec.step_penalty = 0.05;
  spec.valid_actions = {0, 1, 2, 3, 7};
  spec.start_cells = {{0, 0}};
  spec.goals = {{{2, 2}, 1.0, true}};
  spec.hazards = {{{1, 1}, 1.0, false}};
  return make_game(spec, Game::Tier::Source);
}

}  // namespace

TEST_CASE("boltzmann policy") {
  const auto four = all_actions(4);
  SUBCASE("equal values give the uniform distribution") {
    const VectorXd p = boltzmann_policy(VectorXd::Constant(4, 3.7), four, 1.0);
    CHECK((p.array() - 0.25).abs().maxCoeff() <= 1e-15);
  }
  SUBCASE("two actions, unit temperature") {
    const VectorXd p = boltzmann_policy((VectorXd(2) << 1.0, 0.0).finished(), all_actions(2), 1.0);
    const double e = std::exp(1.0);
    CHECK(std::abs(p(0) - e / (1.0 + e)) <= 1e-15);
    CHECK(std::abs(p(1) - 1.0 / (1.0 + e)) <= 1e-15);
  }
  SUBCASE("high temperature approaches uniform") {
    const VectorXd p = boltzmann_policy((VectorXd(3) << 5.0, -2.0, 1.0).finished(), all_actions(3), 1e6);
    CHECK((p.array() - 1.0 / 3.0).abs().maxCoeff() <= 1e-5);
  }
  SUBCASE("shift invariance and normalization over random inputs") {
    Rng rng(31);
    for (int trial = 0; trial < 10'000; ++trial) {
      const int n = 1 + uniform_index(rng, 8);
      const VectorXd q = random_vector(n, rng, 50.0);
      const double c = 1e3 * (2.0 * uniform01(rng) - 1.0);
      const double tau = 0.05 + 5.0 * uniform01(rng);
      const auto valid = all_actions(n);
      const VectorXd p = boltzmann_policy(q, valid, tau);
      const VectorXd shifted = boltzmann_policy((q.array() + c).matrix(), valid, tau);
      REQUIRE(std::abs(p.sum() - 1.0) <= 1e-12);
      REQUIRE((p - shifted).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
  SUBCASE("masked actions receive exactly zero") {
    const VectorXd p = boltzmann_policy(VectorXd::Constant(5, 1.0), {0, 3}, 1.0);
    CHECK(p(1) == 0.0);
    CHECK(p(2) == 0.0);
    CHECK(p(4) == 0.0);
    CHECK(p(3) == 0.5);
  }
  SUBCASE("bad arguments") {
    CHECK_THROWS_AS(boltzmann_policy(VectorXd::Zero(2), all_actions(2), 0.0), std::invalid_argument);
    CHECK_THROWS_AS(boltzmann_policy(VectorXd::Zero(2), {}, 1.0), std::invalid_argument);
  }
}

TEST_CASE("policy regression loss") {
  SUBCASE("matching distributions give the entropy and a zero gradient") {
    const VectorXd logits = (VectorXd(3) << 0.3, -1.2, 2.0).finished();
    const VectorXd p = boltzmann_policy(logits, all_actions(3), 1.0);
    const PolicyLoss l = policy_regression_loss(p, logits, all_actions(3));
    double entropy = 0.0;
    for (int a = 0; a < 3; ++a) entropy -= p(a) * std::log(p(a));
    CHECK(std::abs(l.loss - entropy) <= 1e-12);
    CHECK(l.d_logits.cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("one-hot expert against a uniform mimic") {
    const PolicyLoss l =
        policy_regression_loss((VectorXd(4) << 0, 0, 1, 0).finished(), VectorXd::Zero(4), all_actions(4));
    CHECK(std::abs(l.loss - std::log(4.0)) <= 1e-15);
  }
  SUBCASE("random instances against direct summation") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      const VectorXd logits = random_vector(8, rng, 3.0);
      const std::vector<int> valid = {0, 2, 3, 5, 6, 7};
      const VectorXd pe = boltzmann_policy(random_vector(8, rng, 2.0), valid, 1.0);
      const PolicyLoss l = policy_regression_loss(pe, logits, valid);
      double z = 0.0;
      for (int a : valid) z += std::exp(logits(a));
      double brute = 0.0;
      for (int a : valid) brute -= pe(a) * std::log(std::exp(logits(a)) / z);
      CHECK(std::abs(l.loss - brute) <= 1e-12);
      auto f = [&](const VectorXd& x) { return policy_regression_loss(pe, x, valid).loss; };
      CHECK(rel_error(l.d_logits, numeric_gradient(f, logits)) < 1e-6);
      CHECK(l.d_logits(1) == 0.0);
      CHECK(l.d_logits(4) == 0.0);
    }
  }
  SUBCASE("unnormalized expert is rejected") {
    CHECK_THROWS_AS(policy_regression_loss(VectorXd::Constant(3, 0.5), VectorXd::Zero(3), all_actions(3)),
                    std::invalid_argument);
    CHECK_THROWS_AS(policy_regression_loss((VectorXd(3) << 0.5, 0.0, 0.5).finished(), VectorXd::Zero(3), {0, 1}),
                    std::invalid_argument);
  }
}

TEST_CASE("feature regression loss") {
  SUBCASE("identity head on matching features") {
    const VectorXd h = (VectorXd(3) << 1.0, -2.0, 0.5).finished();
    CHECK(feature_regression_loss(h, h, FeatureRegressionHead::identity(3)).loss == 0.0);
  }
  SUBCASE("arithmetic") {
    const FeatureLoss l = feature_regression_loss((VectorXd(2) << 1.0, 2.0).finished(), VectorXd::Zero(2),
                                                  FeatureRegressionHead::identity(2));
    CHECK(l.loss == 5.0);
  }
  SUBCASE("affine 8 to 5 head against finite differences") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
      FeatureRegressionHead head(8, 5, 100 + trial);
      const VectorXd h = random_vector(8, rng);
      const VectorXd target = random_vector(5, rng);
      const FeatureLoss l = feature_regression_loss(h, target, head);
      auto by_h = [&](const VectorXd& x) { return feature_regression_loss(x, target, head).loss; };
      CHECK(rel_error(l.d_features, numeric_gradient(by_h, h)) < 1e-4);
      auto by_params = [&](const VectorXd& p) {
        FeatureRegressionHead copy = head;
        copy.set_parameters(p);
        return feature_regression_loss(h, target, copy).loss;
      };
      FeatureRegressionHead grads = head;
      grads.weight = l.d_weight;
      grads.bias = l.d_bias;
      CHECK(rel_error(grads.parameters(), numeric_gradient(by_params, head.parameters())) < 1e-4);
    }
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(feature_regression_loss(VectorXd::Zero(3), VectorXd::Zero(2), FeatureRegressionHead(4, 2, 1)),
                    std::invalid_argument);
  }
}

TEST_CASE("combined loss") {
  const Game game = tiny_game();
  const FeatureMap f = grid_features(game.spec);
  DqnConfig dcfg;
  dcfg.frames = 300;
  dcfg.eval_episodes = 2;
  const ExpertBundle expert = dqn_train(game, f, dcfg, 4);
  const DistillTask task{&game, &f, &expert};
  const std::vector<int> states = {0, 1, 2, 4, 5, 3, 8};

  AmnConfig policy_only;
  policy_only.hidden = {12};
  const AmnModel plain = init_amn({task}, f.dim(), policy_only, 9);

  SUBCASE("beta zero equals the policy loss alone") {
    MlpGrads g;
    const CombinedLoss l = actor_mimic_loss(states, task, 0, plain, policy_only, &g, nullptr);
    const MatrixXd logits = plain.net.forward(f.encode_batch(states));
    const MatrixXd eq = expert.q_values(states);
    double manual = 0.0;
    for (std::size_t i = 0; i < states.size(); ++i) {
      const auto& valid = game.mdp.valid_actions(states[i]);
      manual += policy_regression_loss(boltzmann_policy(eq.col(i), valid, 1.0), logits.col(i), valid).loss;
    }
    CHECK(l.total == manual / states.size());
    CHECK(l.feature == 0.0);
  }
  SUBCASE("additivity and gradients with feature regression") {
    AmnConfig both = policy_only;
    both.beta = 1.0;
    const AmnModel model = init_amn({task}, f.dim(), both, 9);
    CHECK(model.heads.size() == 1);
    CHECK(model.net == plain.net);
    MlpGrads g;
    FeatureRegressionHead hg;
    const CombinedLoss l = actor_mimic_loss(states, task, 0, model, both, &g, &hg);
    CHECK(std::abs(l.total - (l.policy + l.feature)) <= 1e-12);

    auto by_net = [&](const VectorXd& p) {
      AmnModel m = model;
      m.net.set_parameters(p);
      return actor_mimic_loss(states, task, 0, m, both, nullptr, nullptr).total;
    };
    CHECK(rel_error(g.flatten(), numeric_gradient(by_net, model.net.parameters())) < 1e-4);
    auto by_head = [&](const VectorXd& p) {
      AmnModel m = model;
      m.heads[0].set_parameters(p);
      return actor_mimic_loss(states, task, 0, m, both, nullptr, nullptr).total;
    };
    CHECK(rel_error(hg.parameters(), numeric_gradient(by_head, model.heads[0].parameters())) < 1e-4);
  }
  SUBCASE("feature regression needs an expert feature layer") {
    const ExpertBundle oracle = oracle_expert(game, 2, 1);
    AmnConfig both = policy_only;
    both.beta = 0.01;
    CHECK_THROWS_AS(init_amn({{&game, &f, &oracle}}, f.dim(), both, 1), std::invalid_argument);
  }
}

TEST_CASE("config validation") {
  AmnConfig c;
  c.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = AmnConfig{};
  c.epsilon = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = AmnConfig{};
  c.beta = -1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(parse_sample_source("from_expert") == SampleSource::FromExpert);
  CHECK_THROWS_AS(parse_interleave("zigzag"), std::invalid_argument);
}

TEST_CASE("distillation into a tabular mimic recovers the expert policy") {
  const Game game = tiny_game();
  const FeatureMap f = one_hot_features(game.mdp.num_states());
  const ExpertBundle expert = oracle_expert(game, 10, 1);
  AmnConfig cfg;
  cfg.hidden = {};
  cfg.steps = 6000;
  cfg.epochs = 3;
  cfg.learning_rate = 0.01;
  cfg.eval_episodes = 10;
  const AmnResult r = train_amn({{&game, &f, &expert}}, cfg, 3);
  CHECK(r.updates == 6000);
  const MatrixXd logits = r.model.logits(f);
  // States reachable from the start under some action sequence.
  std::vector<bool> seen(game.mdp.num_states(), false);
  std::vector<int> frontier = game.mdp.start_states();
  for (int s : frontier) seen[s] = true;
  while (!frontier.empty()) {
    const int s = frontier.back();
    frontier.pop_back();
    for (int a : game.mdp.valid_actions(s))
      for (int n = 0; n < game.mdp.num_states(); ++n)
        if (game.mdp.transition(s, a, n) > 0.0 && !seen[n]) {
          seen[n] = true;
          frontier.push_back(n);
        }
  }
  int checked = 0;
  for (int s = 0; s < game.mdp.num_states(); ++s) {
    if (!seen[s] || game.mdp.is_terminal(s)) continue;
    const auto& valid = game.mdp.valid_actions(s);
    int mimic = valid[0];
    double best = expert.q(s, valid[0]);
    for (int a : valid) {
      if (logits(s, a) > logits(s, mimic)) mimic = a;
      best = std::max(best, expert.q(s, a));
    }
    INFO("state " << s);
    CHECK(expert.q(s, mimic) >= best - 1e-9);
    ++checked;
  }
  CHECK(checked == 8);
  const PolicyMatrix pi = r.model.policy(game.mdp, f, 1.0);
  for (int s = 0; s < game.mdp.num_states(); ++s)
    for (int a = 0; a < game.mdp.num_actions(); ++a)
      if (!game.mdp.is_valid(s, a)) CHECK(pi(s, a) == 0.0);
}

TEST_CASE("multitask training") {
  const auto suite = build_game_suite();
  std::vector<Game> games(suite.begin(), suite.begin() + 3);
  std::vector<FeatureMap> feats;
  std::vector<ExpertBundle> experts;
  for (const Game& g : games) {
    feats.push_back(grid_features(g.spec));
    experts.push_back(oracle_expert(g, 10, 2));
  }
  std::vector<DistillTask> tasks;
  for (std::size_t i = 0; i < games.size(); ++i) tasks.push_back({&games[i], &feats[i], &experts[i]});
  AmnConfig cfg;
  cfg.hidden = {16};
  cfg.steps = 900;
  cfg.epochs = 3;
  cfg.eval_episodes = 5;

  SUBCASE("same seed is reproducible") {
    const AmnResult a = train_amn(tasks, cfg, 8);
    const AmnResult b = train_amn(tasks, cfg, 8);
    CHECK(a.model.net == b.model.net);
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (std::size_t i = 0; i < a.metrics.size(); ++i)
      CHECK(a.metrics.records()[i].value == b.metrics.records()[i].value);
  }
  SUBCASE("every game gets evaluated every epoch") {
    const AmnResult r = train_amn(tasks, cfg, 8);
    for (const Game& g : games) {
      CHECK(r.metrics.values("amn", g.name, "mean_return").size() == 4);
      CHECK(r.metrics.values("amn", g.name, "policy_loss").size() == 3);
    }
    CHECK(r.updates == 2700);
  }
  SUBCASE("block interleaving covers the same budget") {
    cfg.interleave = Interleave::Block;
    cfg.block_size = 7;
    const AmnResult r = train_amn(tasks, cfg, 8);
    CHECK(r.updates == 2700);
    for (const Game& g : games) CHECK(r.metrics.values("amn", g.name, "expected_return").size() == 4);
  }
  SUBCASE("expert-sourced sampling runs") {
    cfg.source = SampleSource::FromExpert;
    CHECK(train_amn(tasks, cfg, 8).updates == 2700);
  }
  SUBCASE("policy loss is non-increasing across epochs within a 5% band") {
    cfg.hidden = {32};
    cfg.steps = 3000;
    const AmnResult r = train_amn(tasks, cfg, 5);
    for (const Game& g : games) {
      const auto loss = r.metrics.values("amn", g.name, "policy_loss");
      for (std::size_t e = 1; e < loss.size(); ++e) CHECK(loss[e] <= 1.05 * loss[e - 1]);
    }
  }
  SUBCASE("missing expert") {
    tasks[1].expert = nullptr;
    CHECK_THROWS_WITH_AS(train_amn(tasks, cfg, 1), doctest::Contains(games[1].name.c_str()), std::invalid_argument);
  }
}
