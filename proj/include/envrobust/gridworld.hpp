#ifndef ENVROBUST_GRIDWORLD_HPP_
#define ENVROBUST_GRIDWORLD_HPP_

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace envrobust {

/// Raised for malformed layout files and invalid configuration text.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a perturbation cannot be applied to a standard initial state.
class FeasibilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace gridworld {

enum class TileKind : std::uint8_t {
  Floor,
  Counter,
  Pot,
  OnionDispenser,
  DishDispenser,
  ServingLocation,
};

enum class Orientation : std::uint8_t { Up, Down, Left, Right };

enum class ItemKind : std::uint8_t { Onion, Dish, Soup };

enum class Action : std::uint8_t {
  Wait,
  MoveUp,
  MoveDown,
  MoveLeft,
  MoveRight,
  Interact,
};

inline constexpr int kNumActions = 6;
inline constexpr int kNumJointActions = kNumActions * kNumActions;
inline constexpr int kNumPlayers = 2;

struct Cell {
  int x = 0;
  int y = 0;
  auto operator<=>(const Cell&) const = default;
};

/// Row-major ordering (y first), used for deterministic iteration and tie-breaks.
struct RowMajorLess {
  bool operator()(const Cell& a, const Cell& b) const {
    return a.y != b.y ? a.y < b.y : a.x < b.x;
  }
};

using JointAction = std::array<Action, kNumPlayers>;

inline JointAction joint_action_from_index(int index) {
  return {static_cast<Action>(index / kNumActions),
          static_cast<Action>(index % kNumActions)};
}

inline int joint_action_index(const JointAction& a) {
  return static_cast<int>(a[0]) * kNumActions + static_cast<int>(a[1]);
}

struct Layout {
  std::string name;
  int width = 0;
  int height = 0;
  std::vector<TileKind> tiles;  // row-major, tiles[y * width + x]
  std::array<Cell, kNumPlayers> starts{};
  int cook_time = 20;
  int soup_size = 3;
  double delivery_reward = 20.0;

  TileKind tile(Cell c) const { return tiles[static_cast<std::size_t>(c.y * width + c.x)]; }
  bool in_bounds(Cell c) const { return c.x >= 0 && c.y >= 0 && c.x < width && c.y < height; }
  bool is_floor(Cell c) const { return in_bounds(c) && tile(c) == TileKind::Floor; }
  std::vector<Cell> cells_of(TileKind kind) const;
};

struct PlayerState {
  Cell position;
  Orientation orientation = Orientation::Up;
  std::optional<ItemKind> held;
  bool operator==(const PlayerState&) const = default;
};

struct PotState {
  int onion_count = 0;
  int cook_timer = 0;  // steps remaining; 0 means idle or finished
  bool operator==(const PotState&) const = default;
};

struct WorldState {
  std::array<PlayerState, kNumPlayers> players;
  std::map<Cell, std::optional<ItemKind>, RowMajorLess> counters;
  std::map<Cell, PotState, RowMajorLess> pots;
  int t = 0;

  bool operator==(const WorldState&) const = default;

  /// Equality of the environmental part only (counters and pots).
  bool same_environment(const WorldState& other) const {
    return counters == other.counters && pots == other.pots;
  }
};

enum class EventKind : std::uint8_t {
  OnionPickup,  // from dispenser
  DishPickup,   // from dispenser
  ItemPlaced,   // onto counter
  ItemTaken,    // from counter
  OnionInPot,
  CookStart,
  SoupPickup,
  Delivered,
};

struct Event {
  int player = 0;
  EventKind kind = EventKind::OnionPickup;
  Cell cell;
  bool operator==(const Event&) const = default;
};

struct StepResult {
  WorldState state;
  double reward = 0.0;
  std::vector<Event> events;
};

/// Parses the ASCII layout format. Throws ParseError with a descriptive message.
Layout load_layout(std::string_view text, std::string name = "layout");
Layout load_layout_file(const std::string& path);

/// Reverse of load_layout: header lines followed by the grid.
std::string format_layout(const Layout& layout);

bool is_ready(const Layout& layout, const PotState& pot);

// ---------------------------------------------------------------------------
// Perturbations

enum class UnitKind : std::uint8_t { OnionOnCounter, DishOnCounter, OnionsInPot };

struct UnitPerturbation {
  UnitKind kind = UnitKind::OnionOnCounter;
  Cell cell;
  int onions = 0;  // only meaningful for OnionsInPot, 1..soup_size

  static UnitPerturbation onion_on_counter(Cell c) { return {UnitKind::OnionOnCounter, c, 0}; }
  static UnitPerturbation dish_on_counter(Cell c) { return {UnitKind::DishOnCounter, c, 0}; }
  static UnitPerturbation onions_in_pot(Cell c, int n) { return {UnitKind::OnionsInPot, c, n}; }

  bool operator==(const UnitPerturbation&) const = default;
};

/// Deterministic unit ordinal: category, then row-major cell, then onion count.
bool unit_less(const UnitPerturbation& a, const UnitPerturbation& b);

std::string to_string(const UnitPerturbation& unit);

struct Perturbation {
  std::vector<UnitPerturbation> units;

  std::size_t distance() const { return units.size(); }
  bool empty() const { return units.empty(); }
  /// Sorts units by ordinal; two perturbations are equal iff their canonical forms are.
  Perturbation canonical() const;
  bool operator==(const Perturbation& other) const;
};

std::string to_string(const Perturbation& p);

/// Standard initial state with an optional perturbation. Throws FeasibilityError.
WorldState reset(const Layout& layout, const Perturbation* perturbation = nullptr);
inline WorldState reset(const Layout& layout, const Perturbation& perturbation) {
  return reset(layout, &perturbation);
}

/// Pure transition function.
StepResult step(const Layout& layout, const WorldState& state, const JointAction& actions);

/// Empty counters adjacent to floor connected to either player's start.
std::vector<Cell> reachable_empty_counters(const Layout& layout, const WorldState& state);

/// Floor cells connected to either start cell.
std::vector<Cell> reachable_floor(const Layout& layout);

std::vector<UnitPerturbation> enumerate_unit_perturbations(const Layout& layout);

/// Checks a perturbation against the standard initial state; throws FeasibilityError.
void check_feasible(const Layout& layout, const Perturbation& perturbation);
bool is_feasible(const Layout& layout, const Perturbation& perturbation);

/// Minimal number of unit perturbations mapping `s` (standard) to `s_hat`.
/// Throws FeasibilityError if `s_hat` is not reachable by units.
int perturbation_distance(const Layout& layout, const WorldState& s, const WorldState& s_hat);

/// Recovers the unit set that maps the standard state to `s_hat`.
Perturbation recover_perturbation(const Layout& layout, const WorldState& s,
                                  const WorldState& s_hat);

/// Pretty-prints the state over the layout, one row per line.
std::string render(const Layout& layout, const WorldState& state);

}  // namespace gridworld
}  // namespace envrobust

#endif  // ENVROBUST_GRIDWORLD_HPP_
