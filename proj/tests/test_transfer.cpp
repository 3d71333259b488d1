#include "amimic/env.hpp"
#include "amimic/expert.hpp"
#include "amimic/features.hpp"
#include "amimic/transfer.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace amimic;

namespace {

const Game& find_game(const std::vector<Game>& games, const std::string& name) {
  for (const Game& g : games)
    if (g.name == name) return g;
  throw std::runtime_error("no game " + name);
}

MlpQ fake_amn(int input_dim, std::uint64_t seed) { return MlpQ({input_dim, 16, 12, kNumMoves}, seed); }

TransferConfig tiny_transfer() {
  TransferConfig c;
  c.dqn.hidden = {16, 12};
  c.dqn.frames = 300;
  c.dqn.warmup = 50;
  c.dqn.batch_size = 8;
  c.milestones = 3;
  c.seeds = {1, 2};
  return c;
}

}  // namespace

TEST_CASE("warm start") {
  const std::vector<Game> suite = build_game_suite();
  const Game& target = find_game(suite, "corridor");
  const FeatureMap f = grid_features(target.spec);
  const MlpQ amn = fake_amn(f.dim(), 5);
  const std::vector<int> hidden = {16, 12};

  SUBCASE("random mode ignores the checkpoint") {
    const MlpQ other = fake_amn(f.dim(), 99);
    const MlpQ a = warm_start_learner(&amn, hidden, target, f, InitMode::Random, 3);
    const MlpQ b = warm_start_learner(&other, hidden, target, f, InitMode::Random, 3);
    const MlpQ c = warm_start_learner(nullptr, hidden, target, f, InitMode::Random, 3);
    CHECK(a == b);
    CHECK(a == c);
    CHECK(!(a == warm_start_learner(nullptr, hidden, target, f, InitMode::Random, 4)));
  }
  SUBCASE("amn modes copy the trunk bit for bit") {
    for (InitMode mode : {InitMode::AmnPolicy, InitMode::AmnFeature}) {
      const MlpQ net = warm_start_learner(&amn, hidden, target, f, mode, 3);
      for (int l = 0; l + 1 < net.num_layers(); ++l) {
        CHECK(net.weights()[l] == amn.weights()[l]);
        CHECK(net.biases()[l] == amn.biases()[l]);
      }
      // Final layer is the same fresh draw a random learner gets.
      const MlpQ fresh = warm_start_learner(nullptr, hidden, target, f, InitMode::Random, 3);
      CHECK(net.weights().back() == fresh.weights().back());
    }
  }
  SUBCASE("trunk activations match the AMN on probe states") {
    const MlpQ net = warm_start_learner(&amn, hidden, target, f, InitMode::AmnPolicy, 3);
    std::vector<int> probes;
    for (int s = 0; s < target.mdp.num_states(); ++s) probes.push_back(s);
    const MatrixXd x = f.encode_batch(probes);
    const MatrixXd ha = MlpQ::features(amn.forward_cache(x));
    const MatrixXd hn = MlpQ::features(net.forward_cache(x));
    CHECK((ha - hn).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("outputs of actions the target never allows are zero") {
    const MlpQ net = warm_start_learner(&amn, hidden, target, f, InitMode::AmnPolicy, 3);
    for (int a = 4; a < kNumMoves; ++a) {
      CHECK(net.weights().back().row(a).isZero(0.0));
      CHECK(net.biases().back()(a) == 0.0);
    }
    CHECK(!net.weights().back().row(0).isZero(0.0));
  }
  SUBCASE("incompatible checkpoints") {
    CHECK_THROWS_WITH_AS(warm_start_learner(nullptr, hidden, target, f, InitMode::AmnPolicy, 1),
                         doctest::Contains("needs an AMN checkpoint"), IncompatibleCheckpoint);
    const MlpQ narrow({10, 16, 12, kNumMoves}, 1);
    CHECK_THROWS_WITH_AS(warm_start_learner(&narrow, hidden, target, f, InitMode::AmnPolicy, 1),
                         doctest::Contains("input width"), IncompatibleCheckpoint);
    CHECK_THROWS_WITH_AS(warm_start_learner(&amn, {16}, target, f, InitMode::AmnFeature, 1),
                         doctest::Contains("hidden layout"), IncompatibleCheckpoint);
    const MlpQ four({f.dim(), 16, 12, 4}, 1);
    CHECK_THROWS_WITH_AS(warm_start_learner(&four, hidden, target, f, InitMode::AmnPolicy, 1),
                         doctest::Contains("outputs"), IncompatibleCheckpoint);
  }
}

TEST_CASE("transfer matrix") {
  const std::vector<Game> targets = build_transfer_targets();
  const std::vector<Game> two = {targets[0], targets[3]};
  const MlpQ amn = fake_amn(kGridFeatureDim, 8);
  const std::vector<std::string> sources = {"corridor", "maze"};

  SUBCASE("zero budget leaves every milestone at the init-time value") {
    TransferConfig c = tiny_transfer();
    c.dqn.frames = 0;
    const TransferTable t = run_transfer_matrix(sources, two, &amn, &amn, c);
    REQUIRE(t.cells.size() == 2 * 3 * 2);
    for (const TransferCell& cell : t.cells) {
      REQUIRE(cell.error.empty());
      REQUIRE(cell.returns.size() == 4);
      for (double r : cell.returns) CHECK(r == cell.returns[0]);
    }
  }
  SUBCASE("threads do not change the table") {
    const TransferConfig c = tiny_transfer();
    const TransferTable serial = run_transfer_matrix(sources, two, &amn, nullptr, c, 1);
    const TransferTable pooled = run_transfer_matrix(sources, two, &amn, nullptr, c, 3);
    std::ostringstream a, b;
    serial.write(a);
    pooled.write(b);
    const std::string text = a.str();
    CHECK(text == b.str());
    // Header plus (milestones + 1) rows per cell; the feature mode is skipped.
    CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 2 * 2 * 2 * 4);
    CHECK(text.rfind("target\tmode\tseed\tmilestone\tmean_return\n", 0) == 0);
    for (const TransferCell& cell : serial.cells) CHECK(cell.mode != InitMode::AmnFeature);
  }
  SUBCASE("targets must be held out") {
    CHECK_THROWS_WITH_AS(run_transfer_matrix({targets[0].name}, two, &amn, nullptr, tiny_transfer()),
                         doctest::Contains(targets[0].name.c_str()), std::invalid_argument);
  }
  SUBCASE("failures are recorded per cell") {
    const MlpQ wrong({kGridFeatureDim, 7, kNumMoves}, 1);
    TransferConfig c = tiny_transfer();
    c.modes = {InitMode::Random, InitMode::AmnPolicy};
    const TransferTable t = run_transfer_matrix(sources, two, &wrong, nullptr, c);
    for (const TransferCell& cell : t.cells) {
      if (cell.mode == InitMode::Random) CHECK(cell.error.empty());
      else CHECK(cell.error.find("hidden layout") != std::string::npos);
    }
    CHECK(std::isnan(t.median(two[0].name, InitMode::AmnPolicy, 0)));
  }
}

TEST_CASE("transfer medians") {
  TransferTable t;
  t.milestones = 1;
  t.cells = {{"x", Game::Tier::Near, InitMode::Random, 1, {1.0, 4.0}, {}},
             {"x", Game::Tier::Near, InitMode::Random, 2, {3.0, 2.0}, {}},
             {"x", Game::Tier::Near, InitMode::Random, 3, {2.0, 9.0}, {}},
             {"x", Game::Tier::Near, InitMode::Random, 4, {100.0, 100.0}, "diverged"},
             {"x", Game::Tier::Near, InitMode::AmnPolicy, 1, {5.0, 1.0}, {}},
             {"x", Game::Tier::Near, InitMode::AmnPolicy, 2, {7.0, 2.0}, {}}};
  CHECK(t.median("x", InitMode::Random, 0) == 2.0);
  CHECK(t.median("x", InitMode::Random, 1) == 4.0);
  CHECK(t.median("x", InitMode::AmnPolicy, 0) == 6.0);
  CHECK(t.median("x", InitMode::AmnPolicy, 1) == 1.5);
  CHECK(std::isnan(t.median("y", InitMode::Random, 0)));
  CHECK(parse_init_mode("amn_feature") == InitMode::AmnFeature);
  CHECK_THROWS_AS(parse_init_mode("warm"), std::invalid_argument);
}

TEST_CASE("multitask baselines") {
  const std::vector<Game> suite = build_game_suite();
  const Game& corridor = find_game(suite, "corridor");
  const Game& maze = find_game(suite, "maze");
  const FeatureMap fc = grid_features(corridor.spec);
  const FeatureMap fm = grid_features(maze.spec);
  BaselineConfig cfg;
  cfg.dqn.hidden = {16};
  cfg.dqn.frames = 600;
  cfg.dqn.warmup = 50;
  cfg.dqn.batch_size = 8;
  cfg.dqn.target_sync_period = 40;
  cfg.epochs = 3;

  SUBCASE("a single game reduces to plain DQN") {
    DqnTrainer plain(corridor.mdp, fc, cfg.dqn, 7);
    plain.train(cfg.dqn.frames);
    for (BaselineVariant v : {BaselineVariant::SharedAll, BaselineVariant::SharedTrunk}) {
      cfg.variant = v;
      const BaselineResult r = train_multitask_baseline({{&corridor, &fc}}, cfg, 7);
      CHECK(r.network(0) == plain.net());
      CHECK(r.head_count() == 1);
    }
  }
  SUBCASE("head layout follows the variant") {
    cfg.variant = BaselineVariant::SharedAll;
    const BaselineResult all = train_multitask_baseline({{&corridor, &fc}, {&maze, &fm}}, cfg, 1);
    CHECK(all.head_count() == 1);
    CHECK(all.network(0) == all.network(1));
    cfg.variant = BaselineVariant::SharedTrunk;
    const BaselineResult trunk = train_multitask_baseline({{&corridor, &fc}, {&maze, &fm}}, cfg, 1);
    CHECK(trunk.head_count() == 2);
    CHECK(trunk.network(0).weights().front() == trunk.network(1).weights().front());
    CHECK(!(trunk.network(0).weights().back() == trunk.network(1).weights().back()));
    CHECK(trunk.metrics.values("baseline", "maze", "expected_return").size() == 4);
  }
  SUBCASE("a diverging game is dropped and the rest continue") {
    cfg.dqn.learning_rate = 1e4;
    cfg.dqn.rmsprop = false;
    cfg.variant = BaselineVariant::SharedTrunk;
    const BaselineResult r = train_multitask_baseline({{&corridor, &fc}, {&maze, &fm}}, cfg, 2);
    CHECK(!r.diverged.empty());
    CHECK(r.metrics.values("baseline", "corridor", "diverged").size() == 4);
    CHECK(r.metrics.last("baseline", r.diverged.front(), "diverged") == 1.0);
  }
  SUBCASE("normalized return") {
    CHECK(normalized_return(3.0, 1.0, 5.0) == 0.5);
    CHECK(normalized_return(5.0, 1.0, 5.0) == 1.0);
    CHECK(normalized_return(-1.0, -2.0, -1.5) == 2.0);
    CHECK_THROWS_AS(normalized_return(1.0, 2.0, 2.0), std::invalid_argument);
    CHECK(parse_baseline_variant("shared_trunk") == BaselineVariant::SharedTrunk);
  }
}
