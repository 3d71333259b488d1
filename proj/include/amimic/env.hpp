#pragma once

#include "amimic/mdp.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace amimic {

/// Global action alphabet shared by every grid game.
enum class Move : int { Up, Down, Left, Right, UpLeft, UpRight, DownLeft, DownRight };
inline constexpr int kNumMoves = 8;
inline constexpr std::array<std::string_view, kNumMoves> kMoveNames = {
    "up", "down", "left", "right", "up-left", "up-right", "down-left", "down-right"};
inline constexpr std::array<int, kNumMoves> kMoveDx = {0, 0, -1, 1, -1, 1, -1, 1};
inline constexpr std::array<int, kNumMoves> kMoveDy = {-1, 1, 0, 0, -1, -1, 1, 1};
/// Grid games larger than this on either side are rejected so that every game
/// shares one feature layout.
inline constexpr int kMaxGridSide = 8;

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct Goal {
  Cell cell;
  double reward = 1.0;
  bool terminal = true;
};

struct Hazard {
  Cell cell;
  double penalty = 1.0;
  bool terminal = false;
};

/// Layout and dynamics of one gridworld. Entering a goal or hazard cell pays
/// its reward (or costs its penalty); every move also costs `step_penalty`.
/// Entering a terminal cell moves the agent to an absorbing sink state.
struct GridGameSpec {
  std::string name;
  int width = 1;
  int height = 1;
  std::vector<Cell> walls;
  std::vector<Goal> goals;
  std::vector<Hazard> hazards;
  double slip_prob = 0.0;
  double step_penalty = 0.0;
  std::vector<int> valid_actions;  // subset of the 8 moves
  std::vector<Cell> start_cells;
};

class InvalidSpec : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Validates the spec and throws InvalidSpec with a field-level message.
void validate(const GridGameSpec& spec);

/// States are cells in row-major order (y * width + x) plus one absorbing
/// sink at index width * height.
Mdp build_grid_game(const GridGameSpec& spec, double gamma, int horizon_cap);

inline int cell_state(const GridGameSpec& spec, Cell c) { return c.y * spec.width + c.x; }
inline int sink_state(const GridGameSpec& spec) { return spec.width * spec.height; }

/// A named game: layout, compiled MDP, and its role in experiments.
struct Game {
  enum class Tier { Source, Near, Mid, Far };
  std::string name;
  GridGameSpec spec;
  Mdp mdp;
  Tier tier = Tier::Source;
  bool hard = false;  // deliberately weak-expert game
};

std::string_view tier_name(Game::Tier tier);

/// Fixed catalog of ten source games with overlapping action subsets.
std::vector<Game> build_game_suite(std::uint64_t seed = 0);
/// Held-out targets for transfer: near (layout variants of source games),
/// mid (new layout, same mechanics) and far (inverted reward structure).
std::vector<Game> build_transfer_targets(std::uint64_t seed = 0);
/// Continuing game (no terminal cells) used by the cost-to-go experiment.
Game build_cost_to_go_game();

Game make_game(GridGameSpec spec, Game::Tier tier = Game::Tier::Source, bool hard = false);
/// Suite name of the deliberately hard game.
inline constexpr std::string_view kHardGameName = "minefield";

struct RandomMdpSpec {
  int num_states = 5;
  int num_actions = 3;
  int branching = 2;
  double reward_scale = 1.0;
  std::uint64_t seed = 0;
  double gamma = 0.9;
};

class GenerationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Random MDP whose chain under the uniform policy is irreducible and
/// aperiodic; resamples up to 100 times.
Mdp build_random_mdp(const RandomMdpSpec& spec);

/// Plain-text catalog, one record per game:
///
///   game <name>
///   size <width> <height>
///   slip <p>
///   step_penalty <c>
///   actions <id> ...
///   walls <x>,<y> ...
///   goal <x> <y> <reward> <terminal 0|1>
///   hazard <x> <y> <penalty> <terminal 0|1>
///   start <x>,<y> ...
///   end
///
/// Blank lines and lines starting with '#' are ignored.
void write_catalog(std::ostream& os, const std::vector<GridGameSpec>& specs);
std::vector<GridGameSpec> read_catalog(std::istream& is);

}  // namespace amimic
