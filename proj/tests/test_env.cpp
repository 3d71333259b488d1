#include "amimic/env.hpp"
#include "amimic/expert.hpp"
#include "amimic/features.hpp"

#include <doctest.h>

#include <map>
#include <set>
#include <sstream>

using namespace amimic;

namespace {

// Exhaustive expectimax over the (state, depth) tree, memoized on the pair.
double expectimax(const Mdp& mdp, int s, int depth, std::map<std::pair<int, int>, double>& memo) {
  if (depth == 0 || mdp.is_terminal(s)) return 0.0;
  const auto key = std::make_pair(s, depth);
  if (auto it = memo.find(key); it != memo.end()) return it->second;
  double best = -1e300;
  for (int a : mdp.valid_actions(s)) {
    double v = mdp.reward(s, a);
    for (int n = 0; n < mdp.num_states(); ++n) {
      const double p = mdp.transition(s, a, n);
      if (p > 0.0) v += mdp.gamma() * p * expectimax(mdp, n, depth - 1, memo);
    }
    best = std::max(best, v);
  }
  memo[key] = best;
  return best;
}

GridGameSpec open_grid(int w, int h, double slip) {
  GridGameSpec spec;
  spec.name = "open";
  spec.width = w;
  spec.height = h;
  spec.slip_prob = slip;
  spec.step_penalty = 0.05;
  spec.valid_actions = {0, 1, 2, 3, 4, 5, 6, 7};
  spec.start_cells = {{0, 0}};
  spec.goals = {{{w - 1, h - 1}, 1.0, true}};
  spec.hazards = {{{1, 1}, 0.5, false}};
  return spec;
}

}  // namespace

TEST_CASE("single-step grid task") {
  GridGameSpec spec;
  spec.name = "one_step";
  spec.width = 2;
  spec.height = 1;
  spec.valid_actions = {2, 3};
  spec.start_cells = {{0, 0}};
  spec.goals = {{{1, 0}, 1.0, true}};
  const Mdp mdp = build_grid_game(spec, 0.9, 10);
  CHECK(mdp.num_states() == 3);
  const MatrixXd q = value_iteration(mdp);
  CHECK(q(0, static_cast<int>(Move::Right)) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mdp.transition(0, static_cast<int>(Move::Right), sink_state(spec)) == 1.0);
}

TEST_CASE("grid transitions") {
  const GridGameSpec spec = open_grid(4, 4, 0.1);
  const Mdp mdp = build_grid_game(spec, 0.9, 50);
  for (int s = 0; s < mdp.num_states(); ++s)
    for (int a : mdp.valid_actions(s))
      CHECK(std::abs(mdp.transition_matrix(a).row(s).sum() - 1.0) <= 1e-12);

  // Unobstructed moves land on the neighbouring cell with probability 1 - slip.
  for (int m = 0; m < kNumMoves; ++m) {
    const Cell from{1, 2};
    const Cell to{from.x + kMoveDx[m], from.y + kMoveDy[m]};
    CHECK(mdp.transition(cell_state(spec, from), m, cell_state(spec, to)) ==
          doctest::Approx(0.9).epsilon(1e-12));
  }
  // Moving into the boundary is a no-op for the intended direction.
  CHECK(mdp.transition(cell_state(spec, {0, 0}), static_cast<int>(Move::Up), cell_state(spec, {0, 0})) >= 0.9);
}

TEST_CASE("value iteration matches expectimax on a 5x5 grid") {
  SUBCASE("deterministic") {
    const GridGameSpec spec = open_grid(5, 5, 0.0);
    const Mdp mdp = build_grid_game(spec, 0.95, 60);
    const VectorXd v = state_values(mdp, value_iteration(mdp, 1e-12));
    std::map<std::pair<int, int>, double> memo;
    CHECK(std::abs(v(0) - expectimax(mdp, 0, 20, memo)) <= 1e-6);
  }
  SUBCASE("slippery, short discount") {
    // gamma^20 is about 1e-8, so the horizon-20 tree matches the fixed point.
    const GridGameSpec spec = open_grid(5, 5, 0.2);
    const Mdp mdp = build_grid_game(spec, 0.4, 60);
    const VectorXd v = state_values(mdp, value_iteration(mdp, 1e-12));
    std::map<std::pair<int, int>, double> memo;
    CHECK(std::abs(v(0) - expectimax(mdp, 0, 20, memo)) <= 1e-6);
  }
}

TEST_CASE("invalid specs are rejected with a field message") {
  GridGameSpec spec = open_grid(3, 3, 0.0);
  spec.goals[0].cell = {5, 5};
  CHECK_THROWS_WITH_AS(build_grid_game(spec, 0.9, 10), doctest::Contains("goal (5,5) out of bounds"),
                       InvalidSpec);
  spec = open_grid(3, 3, 0.0);
  spec.valid_actions.clear();
  CHECK_THROWS_WITH_AS(validate(spec), doctest::Contains("valid_action_subset"), InvalidSpec);
  spec = open_grid(3, 3, 0.0);
  spec.walls = {{0, 0}};
  CHECK_THROWS_WITH_AS(validate(spec), doctest::Contains("is a wall"), InvalidSpec);
  spec = open_grid(3, 3, 1.0);
  CHECK_THROWS_WITH_AS(validate(spec), doctest::Contains("slip_prob"), InvalidSpec);
}

TEST_CASE("game suite") {
  const auto suite = build_game_suite();
  REQUIRE(suite.size() == 10);

  SUBCASE("every game is solvable") {
    for (const Game& g : suite) {
      const MatrixXd q = value_iteration(g.mdp);
      const double optimal = expected_return(g.mdp, gamma_operator(q, g.mdp, 0.0));
      const double random = expected_return(g.mdp, PolicyMatrix::uniform(g.mdp));
      INFO(g.name);
      CHECK(optimal > random);
      CHECK(optimal > 0.0);
    }
  }
  SUBCASE("deterministic given seed") {
    for (std::uint64_t seed : {0u, 5u}) {
      const auto a = build_game_suite(seed);
      const auto b = build_game_suite(seed);
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(a[i].mdp.reward_matrix() == b[i].mdp.reward_matrix());
        for (int m = 0; m < kNumMoves; ++m)
          CHECK(a[i].mdp.transition_matrix(m) == b[i].mdp.transition_matrix(m));
      }
    }
  }
  SUBCASE("action subsets overlap and cover the alphabet") {
    std::set<int> all;
    for (const Game& g : suite) all.insert(g.spec.valid_actions.begin(), g.spec.valid_actions.end());
    CHECK(all.size() == kNumMoves);
    std::set<std::vector<int>> distinct;
    for (const Game& g : suite) distinct.insert(g.spec.valid_actions);
    CHECK(distinct.size() > 3);
  }
  SUBCASE("games are pairwise distinct") {
    std::vector<std::map<std::pair<int, int>, int>> greedy;
    for (const Game& g : suite) {
      const MatrixXd q = value_iteration(g.mdp);
      std::map<std::pair<int, int>, int> cells;
      for (int y = 0; y < g.spec.height; ++y)
        for (int x = 0; x < g.spec.width; ++x) {
          const int s = cell_state(g.spec, {x, y});
          Eigen::Index best = 0;
          double bv = -1e300;
          for (int a : g.mdp.valid_actions(s))
            if (q(s, a) > bv) bv = q(s, a), best = a;
          cells[{x, y}] = static_cast<int>(best);
        }
      greedy.push_back(std::move(cells));
    }
    for (std::size_t i = 0; i < suite.size(); ++i)
      for (std::size_t j = i + 1; j < suite.size(); ++j) {
        bool differs = false;
        for (const auto& [cell, a] : greedy[i]) {
          auto it = greedy[j].find(cell);
          if (it != greedy[j].end() && it->second != a) differs = true;
        }
        CHECK_MESSAGE(differs, suite[i].name << " vs " << suite[j].name);
      }
  }
  SUBCASE("exactly one hard game") {
    int hard = 0;
    for (const Game& g : suite) hard += g.hard;
    CHECK(hard == 1);
  }
}

TEST_CASE("transfer targets and cost-to-go game") {
  const auto targets = build_transfer_targets();
  std::set<std::string> source_names;
  for (const Game& g : build_game_suite()) source_names.insert(g.name);
  int near = 0;
  int far = 0;
  for (const Game& t : targets) {
    CHECK(source_names.count(t.name) == 0);
    near += t.tier == Game::Tier::Near;
    far += t.tier == Game::Tier::Far;
  }
  CHECK(near >= 2);
  CHECK(far == 1);
  const Game ctg = build_cost_to_go_game();
  for (int s = 0; s < sink_state(ctg.spec); ++s) CHECK_FALSE(ctg.mdp.is_terminal(s));
}

TEST_CASE("random mdp generator") {
  SUBCASE("one state") {
    const Mdp mdp = build_random_mdp({1, 2, 1, 1.0, 3, 0.9});
    CHECK(mdp.num_states() == 1);
    CHECK(mdp.transition(0, 1, 0) == 1.0);
  }
  SUBCASE("deterministic") {
    const Mdp a = build_random_mdp({5, 3, 2, 1.0, 7, 0.9});
    const Mdp b = build_random_mdp({5, 3, 2, 1.0, 7, 0.9});
    CHECK(a.reward_matrix() == b.reward_matrix());
    for (int m = 0; m < 3; ++m) CHECK(a.transition_matrix(m) == b.transition_matrix(m));
  }
  SUBCASE("irreducible by transitive closure") {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
      const Mdp mdp = build_random_mdp({8, 3, 2, 1.0, seed, 0.9});
      // Warshall closure on the uniform-policy support graph.
      const int n = mdp.num_states();
      std::vector<std::vector<bool>> reach(n, std::vector<bool>(n, false));
      for (int i = 0; i < n; ++i)
        for (int a = 0; a < mdp.num_actions(); ++a)
          for (int j = 0; j < n; ++j)
            if (mdp.transition(i, a, j) > 0.0) reach[i][j] = true;
      for (int k = 0; k < n; ++k)
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j)
            if (reach[i][k] && reach[k][j]) reach[i][j] = true;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) CHECK(reach[i][j]);
    }
  }
  SUBCASE("branching larger than state count") {
    CHECK_THROWS_AS(build_random_mdp({3, 2, 4, 1.0, 1, 0.9}), std::invalid_argument);
  }
}

TEST_CASE("catalog text format") {
  std::vector<GridGameSpec> specs;
  for (const Game& g : build_game_suite(9)) specs.push_back(g.spec);
  for (const Game& g : build_transfer_targets()) specs.push_back(g.spec);
  std::ostringstream first;
  write_catalog(first, specs);
  std::istringstream in(first.str());
  const auto parsed = read_catalog(in);
  REQUIRE(parsed.size() == specs.size());
  std::ostringstream second;
  write_catalog(second, parsed);
  CHECK(first.str() == second.str());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const Mdp a = build_grid_game(specs[i], 0.9, 20);
    const Mdp b = build_grid_game(parsed[i], 0.9, 20);
    CHECK(a.reward_matrix() == b.reward_matrix());
  }

  std::istringstream bad("game x\nsize 3\nend\n");
  CHECK_THROWS_WITH_AS(read_catalog(bad), doctest::Contains("line 2"), InvalidSpec);
  std::istringstream unterminated("game x\nsize 3 3\n");
  CHECK_THROWS_WITH_AS(read_catalog(unterminated), doctest::Contains("missing 'end'"), InvalidSpec);
}

TEST_CASE("grid features share one layout") {
  const auto suite = build_game_suite();
  for (const Game& g : suite) {
    const FeatureMap f = grid_features(g.spec);
    CHECK(f.dim() == kGridFeatureDim);
    CHECK(f.num_states() == g.mdp.num_states());
    CHECK(f.matrix().cwiseAbs().maxCoeff() <= f.bound());
  }
  // Distinct cells of one game get distinct encodings.
  const FeatureMap f = grid_features(suite[0].spec);
  for (int i = 0; i < f.num_states(); ++i)
    for (int j = i + 1; j < f.num_states(); ++j) CHECK((f.encode(i) - f.encode(j)).norm() > 0.0);
}
