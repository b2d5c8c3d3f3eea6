#ifndef ENVROBUST_TESTS_TEST_SUPPORT_HPP_
#define ENVROBUST_TESTS_TEST_SUPPORT_HPP_

#include <deque>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "envrobust/gridworld.hpp"

#ifndef ENVROBUST_LAYOUT_DIR
#error "ENVROBUST_LAYOUT_DIR must be defined"
#endif

namespace envrobust::testing {

inline const std::vector<std::string>& shipped_layout_names() {
  static const std::vector<std::string> names = {"coordination_ring", "cross",  "double_rings",
                                                 "double_counters",   "matrix", "clear_division"};
  return names;
}

inline std::string layout_path(const std::string& name) {
  return std::string(ENVROBUST_LAYOUT_DIR) + "/" + name + ".layout";
}

inline gridworld::Layout shipped_layout(const std::string& name) {
  return gridworld::load_layout_file(layout_path(name));
}

/// Random walk from a (possibly perturbed) initial state. Interact is drawn
/// more often than under a uniform policy so that items get moved around.
inline gridworld::WorldState random_walk_state(const gridworld::Layout& layout, std::mt19937_64& rng,
                                               int max_steps, const gridworld::Perturbation* start = nullptr) {
  gridworld::WorldState s = gridworld::reset(layout, start);
  std::uniform_int_distribution<int> len(0, max_steps);
  std::uniform_int_distribution<int> action(0, 8);
  const int n = len(rng);
  for (int i = 0; i < n; ++i) {
    gridworld::JointAction a{};
    for (auto& ai : a) {
      const int k = action(rng);
      ai = static_cast<gridworld::Action>(k >= gridworld::kNumActions ? 5 : k);
    }
    s = gridworld::step(layout, s, a).state;
  }
  return s;
}

/// Random feasible perturbation with up to `max_units` units.
inline gridworld::Perturbation random_perturbation(const gridworld::Layout& layout, std::mt19937_64& rng,
                                                   int max_units) {
  const auto units = gridworld::enumerate_unit_perturbations(layout);
  gridworld::Perturbation p;
  std::set<gridworld::Cell> used;
  const int n = static_cast<int>(rng() % static_cast<unsigned>(max_units + 1));
  for (int k = 0; k < n; ++k) {
    const auto& u = units[rng() % units.size()];
    if (used.insert(u.cell).second) p.units.push_back(u);
  }
  return p;
}

/// Independent flood fill: floor cells connected to either start.
inline std::set<gridworld::Cell> flood_fill_floor(const gridworld::Layout& layout) {
  std::set<gridworld::Cell> seen;
  std::vector<gridworld::Cell> stack(layout.starts.begin(), layout.starts.end());
  while (!stack.empty()) {
    const auto c = stack.back();
    stack.pop_back();
    if (!layout.in_bounds(c) || layout.tile(c) != gridworld::TileKind::Floor || seen.contains(c)) continue;
    seen.insert(c);
    stack.push_back({c.x + 1, c.y});
    stack.push_back({c.x - 1, c.y});
    stack.push_back({c.x, c.y + 1});
    stack.push_back({c.x, c.y - 1});
  }
  return seen;
}

/// Single-player navigation planner: actions for player `who` (the other
/// waits) to stand next to `target` facing it, then Interact.
inline std::optional<std::vector<gridworld::JointAction>> plan_interact(const gridworld::Layout& layout,
                                                                        const gridworld::WorldState& s, int who,
                                                                        gridworld::Cell target) {
  using gridworld::Action;
  using gridworld::Cell;
  const Cell other = s.players[static_cast<std::size_t>(1 - who)].position;
  const std::array<std::pair<Action, Cell>, 4> moves = {
      std::pair{Action::MoveUp, Cell{0, -1}}, std::pair{Action::MoveDown, Cell{0, 1}},
      std::pair{Action::MoveLeft, Cell{-1, 0}}, std::pair{Action::MoveRight, Cell{1, 0}}};

  std::map<Cell, std::pair<Cell, Action>> parent;
  std::deque<Cell> queue{s.players[static_cast<std::size_t>(who)].position};
  parent[queue.front()] = {queue.front(), Action::Wait};
  std::optional<std::pair<Cell, Action>> goal;
  while (!queue.empty() && !goal) {
    const Cell c = queue.front();
    queue.pop_front();
    for (const auto& [a, d] : moves) {
      const Cell n{c.x + d.x, c.y + d.y};
      if (n == target) {
        goal = {c, a};
        break;
      }
      if (!layout.is_floor(n) || n == other || parent.contains(n)) continue;
      parent[n] = {c, a};
      queue.push_back(n);
    }
  }
  if (!goal) return std::nullopt;

  std::vector<Action> path;
  for (Cell c = goal->first; parent[c].first != c; c = parent[c].first) path.push_back(parent[c].second);
  std::reverse(path.begin(), path.end());
  path.push_back(goal->second);  // turn towards the target (blocked move)
  path.push_back(Action::Interact);

  std::vector<gridworld::JointAction> plan;
  for (const Action a : path) {
    gridworld::JointAction j{Action::Wait, Action::Wait};
    j[static_cast<std::size_t>(who)] = a;
    plan.push_back(j);
  }
  return plan;
}

inline gridworld::WorldState run_plan(const gridworld::Layout& layout, gridworld::WorldState s,
                                      const std::vector<gridworld::JointAction>& plan) {
  for (const auto& a : plan) s = gridworld::step(layout, s, a).state;
  return s;
}

}  // namespace envrobust::testing

#endif  // ENVROBUST_TESTS_TEST_SUPPORT_HPP_
