#include "amimic/env.hpp"

#include <algorithm>
#include <istream>
#include <optional>
#include <ostream>
#include <queue>
#include <sstream>

namespace amimic {

namespace {


constexpr double kGameGamma = 0.95;
constexpr int kGameHorizon = 60;

int move_of(int dx, int dy) {
  for (int a = 0; a < kNumMoves; ++a)
    if (kMoveDx[a] == dx && kMoveDy[a] == dy) return a;
  return -1;
}

bool in_bounds(const GridGameSpec& spec, Cell c) {
  return c.x >= 0 && c.y >= 0 && c.x < spec.width && c.y < spec.height;
}

bool contains(const std::vector<Cell>& cells, Cell c) {
  return std::find(cells.begin(), cells.end(), c) != cells.end();
}

const Goal* goal_at(const GridGameSpec& spec, Cell c) {
  for (const auto& g : spec.goals)
    if (g.cell == c) return &g;
  return nullptr;
}

const Hazard* hazard_at(const GridGameSpec& spec, Cell c) {
  for (const auto& h : spec.hazards)
    if (h.cell == c) return &h;
  return nullptr;
}

bool is_terminal_cell(const GridGameSpec& spec, Cell c) {
  if (const Goal* g = goal_at(spec, c)) return g->terminal;
  if (const Hazard* h = hazard_at(spec, c)) return h->terminal;
  return false;
}

std::string cell_str(Cell c) {
  return "(" + std::to_string(c.x) + "," + std::to_string(c.y) + ")";
}

// Destination of a deterministic move: blocked moves leave the agent in place.
Cell destination(const GridGameSpec& spec, Cell from, int move) {
  const Cell to{from.x + kMoveDx[move], from.y + kMoveDy[move]};
  if (!in_bounds(spec, to) || contains(spec.walls, to)) return from;
  return to;
}

// Builds a spec from an ASCII layout. Legend: '#' wall, 'G' terminal goal,
// 'g' non-terminal goal, 'H' terminal hazard, 'h' non-terminal hazard,
// 'S' start cell, '.' empty.
GridGameSpec from_layout(std::string name, const std::vector<std::string>& rows,
                         double goal_reward, double hazard_penalty, double slip,
                         double step_penalty, std::vector<int> actions) {
  GridGameSpec spec;
  spec.name = std::move(name);
  spec.height = static_cast<int>(rows.size());
  spec.width = static_cast<int>(rows.front().size());
  spec.slip_prob = slip;
  spec.step_penalty = step_penalty;
  spec.valid_actions = std::move(actions);
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const Cell c{x, y};
      switch (rows[y][x]) {
        case '#': spec.walls.push_back(c); break;
        case 'G': spec.goals.push_back({c, goal_reward, true}); break;
        case 'g': spec.goals.push_back({c, goal_reward * 0.1, false}); break;
        case 'H': spec.hazards.push_back({c, hazard_penalty, true}); break;
        case 'h': spec.hazards.push_back({c, hazard_penalty, false}); break;
        case 'S': spec.start_cells.push_back(c); break;
        default: break;
      }
    }
  }
  return spec;
}

// Cells reachable from the start cells using the game's valid moves.
std::vector<bool> reachable_cells(const GridGameSpec& spec) {
  std::vector<bool> seen(spec.width * spec.height, false);
  std::queue<Cell> queue;
  for (Cell c : spec.start_cells) {
    seen[cell_state(spec, c)] = true;
    queue.push(c);
  }
  while (!queue.empty()) {
    const Cell c = queue.front();
    queue.pop();
    if (is_terminal_cell(spec, c)) continue;
    for (int a : spec.valid_actions) {
      const Cell to = destination(spec, c, a);
      if (!seen[cell_state(spec, to)]) {
        seen[cell_state(spec, to)] = true;
        queue.push(to);
      }
    }
  }
  return seen;
}

bool positive_goal_reachable(const GridGameSpec& spec) {
  const auto seen = reachable_cells(spec);
  return std::any_of(spec.goals.begin(), spec.goals.end(), [&](const Goal& g) {
    return g.reward > 0.0 && seen[cell_state(spec, g.cell)];
  });
}

// Adds up to `count` random walls on empty cells while keeping a positive
// goal reachable.
void add_random_walls(GridGameSpec& spec, Rng& rng, int count) {
  for (int attempt = 0; attempt < 20 && count > 0; ++attempt) {
    const Cell c{uniform_index(rng, spec.width), uniform_index(rng, spec.height)};
    if (contains(spec.walls, c) || contains(spec.start_cells, c) || goal_at(spec, c) ||
        hazard_at(spec, c))
      continue;
    spec.walls.push_back(c);
    if (positive_goal_reachable(spec)) {
      --count;
    } else {
      spec.walls.pop_back();
    }
  }
}

std::vector<GridGameSpec> source_specs() {
  std::vector<GridGameSpec> out;
  out.push_back(from_layout("corridor",
                            {"S....",
                             ".###.",
                             ".#...",
                             ".#.#.",
                             "...#G"},
                            1.0, 1.0, 0.0, 0.02, {0, 1, 2, 3}));
  out.push_back(from_layout("diagonal_dash",
                            {"S.....",
                             "......",
                             "..#...",
                             "...#..",
                             "......",
                             ".....G"},
                            5.0, 5.0, 0.0, 0.1, {0, 1, 4, 5, 6, 7}));
  out.push_back(from_layout("lava_lake",
                            {"S.....",
                             ".HHH..",
                             ".HHH..",
                             "......",
                             "..HH..",
                             ".....G"},
                            10.0, 10.0, 0.1, 0.2, {0, 1, 2, 3, 7}));
  out.push_back(from_layout("twin_goals",
                            {"G....",
                             ".....",
                             "..S..",
                             ".....",
                             "....G"},
                            2.0, 2.0, 0.05, 0.04, {0, 1, 2, 3, 5}));
  // The lower-right goal pays double.
  out.back().goals[1].reward = 4.0;
  out.push_back(from_layout("maze",
                            {"S.#....",
                             ".##.##.",
                             "...#...",
                             "##.#.#.",
                             "...#.#.",
                             ".###.#.",
                             "......G"},
                            1.0, 1.0, 0.05, 0.01, {0, 1, 2, 3}));
  out.push_back(from_layout("windy_field",
                            {"S.....",
                             "......",
                             "......",
                             "......",
                             "......",
                             ".....G"},
                            20.0, 20.0, 0.2, 0.4, {0, 1, 2, 3, 4, 5, 6, 7}));
  out.push_back(from_layout("cliff",
                            {"......",
                             "......",
                             "......",
                             "SHHHHG"},
                            5.0, 5.0, 0.1, 0.1, {0, 1, 2, 3}));
  out.push_back(from_layout("checkers",
                            {"S.....",
                             "......",
                             "..#...",
                             "......",
                             "......",
                             ".....G"},
                            2.0, 2.0, 0.0, 0.04, {4, 5, 6, 7}));
  out.push_back(from_layout("pockets",
                            {"S..g..",
                             "......",
                             ".g..#.",
                             "...#..",
                             "......",
                             "..g..G"},
                            10.0, 10.0, 0.05, 0.2, {0, 1, 2, 3, 6, 7}));
  out.push_back(from_layout(std::string(kHardGameName),
                            {"S.h.h.",
                             ".h.H.h",
                             "h.H.h.",
                             ".h.h.H",
                             "H.h.h.",
                             ".h.H.G"},
                            5.0, 2.0, 0.35, 0.1, {0, 1, 2, 3, 4, 5, 6, 7}));
  return out;
}

}  // namespace

std::string_view tier_name(Game::Tier tier) {
  switch (tier) {
    case Game::Tier::Source: return "source";
    case Game::Tier::Near: return "near";
    case Game::Tier::Mid: return "mid";
    case Game::Tier::Far: return "far";
  }
  return "unknown";
}

void validate(const GridGameSpec& spec) {
  const std::string who = "game '" + spec.name + "': ";
  if (spec.width <= 0 || spec.height <= 0) throw InvalidSpec(who + "width and height must be positive");
  if (spec.width > kMaxGridSide || spec.height > kMaxGridSide)
    throw InvalidSpec(who + "grid exceeds " + std::to_string(kMaxGridSide) + " cells per side");
  if (!(spec.slip_prob >= 0.0 && spec.slip_prob < 1.0)) throw InvalidSpec(who + "slip_prob outside [0,1)");
  if (spec.valid_actions.empty()) throw InvalidSpec(who + "valid_action_subset is empty");
  for (int a : spec.valid_actions)
    if (a < 0 || a >= kNumMoves) throw InvalidSpec(who + "action id " + std::to_string(a) + " outside alphabet");
  if (spec.start_cells.empty()) throw InvalidSpec(who + "start_cells is empty");
  for (Cell w : spec.walls)
    if (!in_bounds(spec, w)) throw InvalidSpec(who + "wall " + cell_str(w) + " out of bounds");
  auto check_cell = [&](Cell c, const char* what) {
    if (!in_bounds(spec, c)) throw InvalidSpec(who + what + " " + cell_str(c) + " out of bounds");
    if (contains(spec.walls, c)) throw InvalidSpec(who + what + " " + cell_str(c) + " is a wall");
  };
  for (const auto& g : spec.goals) check_cell(g.cell, "goal");
  for (const auto& h : spec.hazards) check_cell(h.cell, "hazard");
  for (Cell c : spec.start_cells) {
    check_cell(c, "start cell");
    if (is_terminal_cell(spec, c)) throw InvalidSpec(who + "start cell " + cell_str(c) + " is terminal");
  }
}

Mdp build_grid_game(const GridGameSpec& spec, double gamma, int horizon_cap) {
  validate(spec);
  const int cells = spec.width * spec.height;
  const int ns = cells + 1;
  const int sink = cells;

  MdpData d;
  d.num_states = ns;
  d.num_actions = kNumMoves;
  d.valid = ActionMask::Constant(ns, kNumMoves, false);
  d.transition.assign(kNumMoves, MatrixXd::Zero(ns, ns));
  d.reward = MatrixXd::Zero(ns, kNumMoves);
  d.gamma = gamma;
  d.horizon_cap = horizon_cap;
  d.terminal.assign(ns, false);
  d.terminal[sink] = true;
  for (Cell c : spec.start_cells) d.start_states.push_back(cell_state(spec, c));

  for (int s = 0; s < ns; ++s)
    for (int a : spec.valid_actions) d.valid(s, a) = true;

  for (int a : spec.valid_actions) d.transition[a](sink, sink) = 1.0;

  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const Cell from{x, y};
      const int s = cell_state(spec, from);
      if (contains(spec.walls, from)) {
        for (int a : spec.valid_actions) d.transition[a](s, s) = 1.0;
        continue;
      }
      for (int a : spec.valid_actions) {
        // Intended move with probability 1 - slip, each perpendicular with slip / 2.
        const std::array<std::pair<int, double>, 3> outcomes = {{
            {a, 1.0 - spec.slip_prob},
            {move_of(-kMoveDy[a], kMoveDx[a]), spec.slip_prob / 2.0},
            {move_of(kMoveDy[a], -kMoveDx[a]), spec.slip_prob / 2.0},
        }};
        double expected_reward = -spec.step_penalty;
        for (const auto& [move, prob] : outcomes) {
          if (prob <= 0.0) continue;
          const Cell to = destination(spec, from, move);
          double r = 0.0;
          if (const Goal* g = goal_at(spec, to)) r += g->reward;
          if (const Hazard* h = hazard_at(spec, to)) r -= h->penalty;
          expected_reward += prob * r;
          const int next = is_terminal_cell(spec, to) ? sink : cell_state(spec, to);
          d.transition[a](s, next) += prob;
        }
        d.reward(s, a) = expected_reward;
      }
    }
  }
  return Mdp(std::move(d));
}

Game make_game(GridGameSpec spec, Game::Tier tier, bool hard) {
  Mdp mdp = build_grid_game(spec, kGameGamma, kGameHorizon);
  std::string name = spec.name;
  return Game{std::move(name), std::move(spec), std::move(mdp), tier, hard};
}

std::vector<Game> build_game_suite(std::uint64_t seed) {
  std::vector<Game> games;
  auto specs = source_specs();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    GridGameSpec& spec = specs[i];
    if (seed != 0) {
      Rng rng(derive_seed(seed, i));
      add_random_walls(spec, rng, 2);
    }
    const bool hard = spec.name == kHardGameName;
    games.push_back(make_game(std::move(spec), Game::Tier::Source, hard));
  }
  return games;
}

std::vector<Game> build_transfer_targets(std::uint64_t seed) {
  std::vector<GridGameSpec> specs;
  // Near tier: the corridor and lava lake with shifted layouts.
  specs.push_back(from_layout("corridor_variant",
                              {"S....",
                               ".##..",
                               ".#.#.",
                               ".#.#.",
                               "...#G"},
                              1.0, 1.0, 0.0, 0.02, {0, 1, 2, 3}));
  specs.push_back(from_layout("lava_lake_variant",
                              {"S.....",
                               "..HHH.",
                               "..HHH.",
                               "......",
                               ".HH...",
                               ".....G"},
                              10.0, 10.0, 0.1, 0.2, {0, 1, 2, 3, 7}));
  // Mid tier: unseen layout, shared mechanics.
  specs.push_back(from_layout("spiral",
                              {".......",
                               ".#####.",
                               ".#...#.",
                               ".#.G.#.",
                               ".#.###.",
                               ".#.....",
                               "S######"},
                              4.0, 4.0, 0.05, 0.05, {0, 1, 2, 3}));
  // Far tier: goal markers now cost, hazard markers now pay.
  GridGameSpec far = from_layout("inverted_lake",
                                 {"S.....",
                                  ".H....",
                                  "......",
                                  "....G.",
                                  "......",
                                  "......"},
                                 -5.0, -5.0, 0.05, 0.1, {0, 1, 2, 3, 7});
  specs.push_back(std::move(far));

  std::vector<Game> out;
  const std::array<Game::Tier, 4> tiers = {Game::Tier::Near, Game::Tier::Near, Game::Tier::Mid,
                                           Game::Tier::Far};
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (seed != 0) {
      Rng rng(derive_seed(seed, 100 + i));
      add_random_walls(specs[i], rng, 1);
    }
    out.push_back(make_game(std::move(specs[i]), tiers[i]));
  }
  return out;
}

Game build_cost_to_go_game() {
  // A continuing task that starts on a non-terminal goal. Slip knocks the
  // agent off it; the walls beside the goal make the top corners dead ends
  // for an agent that keeps pushing upward.
  GridGameSpec spec = from_layout("outpost",
                                  {".#.g.#.",
                                   ".......",
                                   ".......",
                                   "......."},
                                  10.0, 1.0, 0.2, 0.0, {0, 1, 2, 3});
  spec.start_cells = {spec.goals.front().cell};
  return make_game(std::move(spec));
}

Mdp build_random_mdp(const RandomMdpSpec& spec) {
  if (spec.num_states <= 0 || spec.num_actions <= 0)
    throw std::invalid_argument("RandomMdpSpec: sizes must be positive");
  if (spec.branching < 1 || spec.branching > spec.num_states)
    throw std::invalid_argument("RandomMdpSpec: branching must be in [1, num_states]");
  const int ns = spec.num_states;
  const int na = spec.num_actions;
  Rng rng(spec.seed);
  for (int attempt = 0; attempt < 100; ++attempt) {
    MdpData d;
    d.num_states = ns;
    d.num_actions = na;
    d.valid = ActionMask::Constant(ns, na, true);
    d.transition.assign(na, MatrixXd::Zero(ns, ns));
    d.reward = MatrixXd::Zero(ns, na);
    d.gamma = spec.gamma;
    d.terminal.assign(ns, false);
    std::vector<int> order(ns);
    for (int s = 0; s < ns; ++s) {
      for (int a = 0; a < na; ++a) {
        for (int i = 0; i < ns; ++i) order[i] = i;
        // Partial Fisher-Yates: first `branching` entries are the successors.
        double total = 0.0;
        for (int k = 0; k < spec.branching; ++k) {
          const int j = k + uniform_index(rng, ns - k);
          std::swap(order[k], order[j]);
          const double w = 0.05 + uniform01(rng);
          d.transition[a](s, order[k]) = w;
          total += w;
        }
        d.transition[a].row(s) /= total;
        d.reward(s, a) = spec.reward_scale * (2.0 * uniform01(rng) - 1.0);
      }
    }
    MatrixXd chain = MatrixXd::Zero(ns, ns);
    for (int a = 0; a < na; ++a) chain += d.transition[a] / na;
    if (is_irreducible(chain) && chain_period(chain) == 1) return Mdp(std::move(d));
  }
  throw GenerationFailure("build_random_mdp: no irreducible aperiodic chain after 100 tries");
}

void write_catalog(std::ostream& os, const std::vector<GridGameSpec>& specs) {
  os.precision(17);
  for (const auto& spec : specs) {
    os << "game " << spec.name << '\n';
    os << "size " << spec.width << ' ' << spec.height << '\n';
    os << "slip " << spec.slip_prob << '\n';
    os << "step_penalty " << spec.step_penalty << '\n';
    os << "actions";
    for (int a : spec.valid_actions) os << ' ' << a;
    os << '\n';
    os << "walls";
    for (Cell c : spec.walls) os << ' ' << c.x << ',' << c.y;
    os << '\n';
    for (const auto& g : spec.goals)
      os << "goal " << g.cell.x << ' ' << g.cell.y << ' ' << g.reward << ' ' << (g.terminal ? 1 : 0) << '\n';
    for (const auto& h : spec.hazards)
      os << "hazard " << h.cell.x << ' ' << h.cell.y << ' ' << h.penalty << ' ' << (h.terminal ? 1 : 0)
         << '\n';
    os << "start";
    for (Cell c : spec.start_cells) os << ' ' << c.x << ',' << c.y;
    os << "\nend\n";
  }
}

std::vector<GridGameSpec> read_catalog(std::istream& is) {
  std::vector<GridGameSpec> out;
  std::optional<GridGameSpec> current;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw InvalidSpec("catalog line " + std::to_string(line_no) + ": " + msg);
  };
  auto parse_cells = [&](std::istringstream& ls) {
    std::vector<Cell> cells;
    std::string tok;
    while (ls >> tok) {
      const auto comma = tok.find(',');
      if (comma == std::string::npos) fail("expected x,y but got '" + tok + "'");
      try {
        cells.push_back({std::stoi(tok.substr(0, comma)), std::stoi(tok.substr(comma + 1))});
      } catch (const std::exception&) {
        fail("bad cell '" + tok + "'");
      }
    }
    return cells;
  };
  while (std::getline(is, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key) || key[0] == '#') continue;
    if (key == "game") {
      if (current) fail("'game' before 'end' of previous record");
      current.emplace();
      ls >> current->name;
      continue;
    }
    if (!current) fail("'" + key + "' outside a game record");
    bool scalar = true;
    if (key == "size") {
      ls >> current->width >> current->height;
    } else if (key == "slip") {
      ls >> current->slip_prob;
    } else if (key == "step_penalty") {
      ls >> current->step_penalty;
    } else if (key == "actions") {
      scalar = false;
      int a;
      while (ls >> a) current->valid_actions.push_back(a);
    } else if (key == "walls") {
      scalar = false;
      current->walls = parse_cells(ls);
    } else if (key == "start") {
      scalar = false;
      current->start_cells = parse_cells(ls);
    } else if (key == "goal") {
      Goal g;
      int term = 1;
      ls >> g.cell.x >> g.cell.y >> g.reward >> term;
      g.terminal = term != 0;
      current->goals.push_back(g);
    } else if (key == "hazard") {
      Hazard h;
      int term = 0;
      ls >> h.cell.x >> h.cell.y >> h.penalty >> term;
      h.terminal = term != 0;
      current->hazards.push_back(h);
    } else if (key == "end") {
      validate(*current);
      out.push_back(std::move(*current));
      current.reset();
      continue;
    } else {
      fail("unknown key '" + key + "'");
    }
    if (scalar && ls.fail()) fail("malformed '" + key + "' record");
  }
  if (current) fail("missing 'end' for game '" + current->name + "'");
  return out;
}

}  // namespace amimic
