#include "envrobust/gridworld.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>

namespace envrobust::gridworld {
namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

Cell offset(Cell c, Orientation o) {
  switch (o) {
    case Orientation::Up: return {c.x, c.y - 1};
    case Orientation::Down: return {c.x, c.y + 1};
    case Orientation::Left: return {c.x - 1, c.y};
    case Orientation::Right: return {c.x + 1, c.y};
  }
  return c;
}

std::optional<Orientation> move_direction(Action a) {
  switch (a) {
    case Action::MoveUp: return Orientation::Up;
    case Action::MoveDown: return Orientation::Down;
    case Action::MoveLeft: return Orientation::Left;
    case Action::MoveRight: return Orientation::Right;
    default: return std::nullopt;
  }
}

std::string cell_str(Cell c) {
  return "(" + std::to_string(c.x) + "," + std::to_string(c.y) + ")";
}

int category_rank(UnitKind k) { return static_cast<int>(k); }

}  // namespace

std::vector<Cell> Layout::cells_of(TileKind kind) const {
  std::vector<Cell> out;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (tile({x, y}) == kind) out.push_back({x, y});
  return out;
}

Layout load_layout(std::string_view text, std::string name) {
  Layout layout;
  layout.name = std::move(name);

  std::vector<std::string> grid;
  std::istringstream in{std::string(text)};
  std::string line;
  bool in_grid = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!in_grid) {
      const std::string t = trim(line);
      if (t.empty() || t.front() == '#') continue;
      const auto eq = line.find('=');
      if (eq != std::string::npos) {
        const std::string key = trim(std::string_view(line).substr(0, eq));
        const std::string value = trim(std::string_view(line).substr(eq + 1));
        try {
          if (key == "cook_time") {
            layout.cook_time = std::stoi(value);
          } else if (key == "delivery_reward") {
            layout.delivery_reward = std::stod(value);
          } else if (key == "soup_size") {
            layout.soup_size = std::stoi(value);
          } else if (key == "name") {
            layout.name = value;
          } else {
            throw ParseError("unknown header key '" + key + "'");
          }
        } catch (const std::invalid_argument&) {
          throw ParseError("bad value for header key '" + key + "': '" + value + "'");
        } catch (const std::out_of_range&) {
          throw ParseError("value out of range for header key '" + key + "'");
        }
        continue;
      }
      in_grid = true;
    }
    grid.push_back(line);
  }
  while (!grid.empty() && trim(grid.back()).empty()) grid.pop_back();

  if (grid.empty()) throw ParseError("layout has no grid rows");
  if (layout.cook_time < 0) throw ParseError("cook_time must be >= 0");
  if (layout.soup_size < 1) throw ParseError("soup_size must be >= 1");

  layout.height = static_cast<int>(grid.size());
  layout.width = static_cast<int>(grid.front().size());
  if (layout.width < 3 || layout.height < 3) throw ParseError("grid must be at least 3x3");
  for (std::size_t y = 0; y < grid.size(); ++y) {
    if (static_cast<int>(grid[y].size()) != layout.width) {
      throw ParseError("grid is not rectangular: row " + std::to_string(y) + " has width " +
                       std::to_string(grid[y].size()) + ", expected " +
                       std::to_string(layout.width));
    }
  }

  layout.tiles.assign(static_cast<std::size_t>(layout.width * layout.height), TileKind::Floor);
  std::vector<Cell> ones, twos;
  for (int y = 0; y < layout.height; ++y) {
    for (int x = 0; x < layout.width; ++x) {
      TileKind kind = TileKind::Floor;
      switch (grid[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)]) {
        case 'X': kind = TileKind::Counter; break;
        case ' ': kind = TileKind::Floor; break;
        case 'P': kind = TileKind::Pot; break;
        case 'O': kind = TileKind::OnionDispenser; break;
        case 'D': kind = TileKind::DishDispenser; break;
        case 'S': kind = TileKind::ServingLocation; break;
        case '1': ones.push_back({x, y}); break;
        case '2': twos.push_back({x, y}); break;
        default:
          throw ParseError("unknown character '" +
                           std::string(1, grid[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)]) +
                           "' at " + cell_str({x, y}));
      }
      layout.tiles[static_cast<std::size_t>(y * layout.width + x)] = kind;
    }
  }

  const std::size_t n_starts = ones.size() + twos.size();
  if (n_starts != 2 || ones.size() != 1 || twos.size() != 1) {
    throw ParseError("expected 2 starts (one '1' and one '2'), found " + std::to_string(n_starts));
  }
  layout.starts = {ones.front(), twos.front()};

  for (int y = 0; y < layout.height; ++y) {
    for (int x = 0; x < layout.width; ++x) {
      const bool border = x == 0 || y == 0 || x == layout.width - 1 || y == layout.height - 1;
      if (border && layout.tile({x, y}) == TileKind::Floor)
        throw ParseError("border cell " + cell_str({x, y}) + " is floor; world must be enclosed");
    }
  }

  if (layout.cells_of(TileKind::Pot).empty()) throw ParseError("missing pot");
  if (layout.cells_of(TileKind::OnionDispenser).empty()) throw ParseError("missing onion dispenser");
  if (layout.cells_of(TileKind::DishDispenser).empty()) throw ParseError("missing dish dispenser");
  if (layout.cells_of(TileKind::ServingLocation).empty())
    throw ParseError("missing serving location");
  return layout;
}

Layout load_layout_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open layout file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  std::string stem = path;
  if (const auto slash = stem.find_last_of('/'); slash != std::string::npos) stem = stem.substr(slash + 1);
  if (const auto dot = stem.find_last_of('.'); dot != std::string::npos) stem = stem.substr(0, dot);
  return load_layout(ss.str(), stem);
}

std::string format_layout(const Layout& layout) {
  std::ostringstream out;
  out << "name = " << layout.name << '\n';
  out << "cook_time = " << layout.cook_time << '\n';
  out << "soup_size = " << layout.soup_size << '\n';
  out << "delivery_reward = " << layout.delivery_reward << '\n';
  for (int y = 0; y < layout.height; ++y) {
    for (int x = 0; x < layout.width; ++x) {
      const Cell c{x, y};
      char ch = ' ';
      switch (layout.tile(c)) {
        case TileKind::Floor: ch = ' '; break;
        case TileKind::Counter: ch = 'X'; break;
        case TileKind::Pot: ch = 'P'; break;
        case TileKind::OnionDispenser: ch = 'O'; break;
        case TileKind::DishDispenser: ch = 'D'; break;
        case TileKind::ServingLocation: ch = 'S'; break;
      }
      if (c == layout.starts[0]) ch = '1';
      if (c == layout.starts[1]) ch = '2';
      out << ch;
    }
    out << '\n';
  }
  return out.str();
}

bool is_ready(const Layout& layout, const PotState& pot) {
  return pot.onion_count == layout.soup_size && pot.cook_timer == 0;
}

// ---------------------------------------------------------------------------

bool unit_less(const UnitPerturbation& a, const UnitPerturbation& b) {
  if (a.kind != b.kind) return category_rank(a.kind) < category_rank(b.kind);
  if (a.cell != b.cell) return RowMajorLess{}(a.cell, b.cell);
  return a.onions < b.onions;
}

std::string to_string(const UnitPerturbation& unit) {
  switch (unit.kind) {
    case UnitKind::OnionOnCounter: return "onion_on_counter" + cell_str(unit.cell);
    case UnitKind::DishOnCounter: return "dish_on_counter" + cell_str(unit.cell);
    case UnitKind::OnionsInPot:
      return "onions_in_pot" + cell_str(unit.cell) + "x" + std::to_string(unit.onions);
  }
  return "?";
}

Perturbation Perturbation::canonical() const {
  Perturbation p = *this;
  std::sort(p.units.begin(), p.units.end(), unit_less);
  return p;
}

bool Perturbation::operator==(const Perturbation& other) const {
  return canonical().units == other.canonical().units;
}

std::string to_string(const Perturbation& p) {
  if (p.units.empty()) return "{}";
  std::string out = "{";
  for (std::size_t i = 0; i < p.units.size(); ++i) {
    if (i) out += ", ";
    out += to_string(p.units[i]);
  }
  return out + "}";
}

std::vector<Cell> reachable_floor(const Layout& layout) {
  std::vector<char> seen(layout.tiles.size(), 0);
  std::deque<Cell> queue;
  for (const Cell s : layout.starts) {
    auto& flag = seen[static_cast<std::size_t>(s.y * layout.width + s.x)];
    if (!flag) {
      flag = 1;
      queue.push_back(s);
    }
  }
  std::vector<Cell> out;
  while (!queue.empty()) {
    const Cell c = queue.front();
    queue.pop_front();
    out.push_back(c);
    for (const auto o : {Orientation::Up, Orientation::Down, Orientation::Left, Orientation::Right}) {
      const Cell n = offset(c, o);
      if (!layout.is_floor(n)) continue;
      auto& flag = seen[static_cast<std::size_t>(n.y * layout.width + n.x)];
      if (!flag) {
        flag = 1;
        queue.push_back(n);
      }
    }
  }
  std::sort(out.begin(), out.end(), RowMajorLess{});
  return out;
}

namespace {

std::set<Cell, RowMajorLess> reachable_counter_set(const Layout& layout) {
  std::set<Cell, RowMajorLess> out;
  for (const Cell f : reachable_floor(layout)) {
    for (const auto o : {Orientation::Up, Orientation::Down, Orientation::Left, Orientation::Right}) {
      const Cell n = offset(f, o);
      if (layout.in_bounds(n) && layout.tile(n) == TileKind::Counter) out.insert(n);
    }
  }
  return out;
}

}  // namespace

std::vector<Cell> reachable_empty_counters(const Layout& layout, const WorldState& state) {
  std::vector<Cell> out;
  for (const Cell c : reachable_counter_set(layout)) {
    const auto it = state.counters.find(c);
    if (it != state.counters.end() && !it->second.has_value()) out.push_back(c);
  }
  return out;
}

std::vector<UnitPerturbation> enumerate_unit_perturbations(const Layout& layout) {
  const WorldState standard = reset(layout);
  const auto counters = reachable_empty_counters(layout, standard);
  std::vector<UnitPerturbation> out;
  for (const Cell c : counters) out.push_back(UnitPerturbation::onion_on_counter(c));
  for (const Cell c : counters) out.push_back(UnitPerturbation::dish_on_counter(c));
  for (const Cell p : layout.cells_of(TileKind::Pot))
    for (int n = 1; n <= layout.soup_size; ++n) out.push_back(UnitPerturbation::onions_in_pot(p, n));
  return out;
}

void check_feasible(const Layout& layout, const Perturbation& perturbation) {
  const auto reachable = reachable_counter_set(layout);
  std::set<Cell, RowMajorLess> targets;
  for (const auto& u : perturbation.units) {
    if (!layout.in_bounds(u.cell))
      throw FeasibilityError(to_string(u) + ": target outside the grid");
    if (!targets.insert(u.cell).second)
      throw FeasibilityError(to_string(u) + ": target cell already used by another unit");
    switch (u.kind) {
      case UnitKind::OnionOnCounter:
      case UnitKind::DishOnCounter:
        if (layout.tile(u.cell) != TileKind::Counter)
          throw FeasibilityError(to_string(u) + ": target is not a counter");
        if (!reachable.contains(u.cell))
          throw FeasibilityError(to_string(u) + ": counter is not reachable");
        break;
      case UnitKind::OnionsInPot:
        if (layout.tile(u.cell) != TileKind::Pot)
          throw FeasibilityError(to_string(u) + ": target is not a pot");
        if (u.onions < 1 || u.onions > layout.soup_size)
          throw FeasibilityError(to_string(u) + ": onion count out of range");
        break;
    }
  }
}

bool is_feasible(const Layout& layout, const Perturbation& perturbation) {
  try {
    check_feasible(layout, perturbation);
    return true;
  } catch (const FeasibilityError&) {
    return false;
  }
}

WorldState reset(const Layout& layout, const Perturbation* perturbation) {
  WorldState s;
  for (int i = 0; i < kNumPlayers; ++i) {
    s.players[static_cast<std::size_t>(i)].position = layout.starts[static_cast<std::size_t>(i)];
    s.players[static_cast<std::size_t>(i)].orientation = Orientation::Up;
  }
  for (const Cell c : layout.cells_of(TileKind::Counter)) s.counters.emplace(c, std::nullopt);
  for (const Cell c : layout.cells_of(TileKind::Pot)) s.pots.emplace(c, PotState{});
  if (perturbation == nullptr) return s;

  check_feasible(layout, *perturbation);
  for (const auto& u : perturbation->units) {
    switch (u.kind) {
      case UnitKind::OnionOnCounter: s.counters[u.cell] = ItemKind::Onion; break;
      case UnitKind::DishOnCounter: s.counters[u.cell] = ItemKind::Dish; break;
      case UnitKind::OnionsInPot: {
        auto& pot = s.pots[u.cell];
        pot.onion_count = u.onions;
        // A full pot starts cooking the moment the last onion goes in.
        pot.cook_timer = u.onions == layout.soup_size ? layout.cook_time : 0;
        break;
      }
    }
  }
  return s;
}

StepResult step(const Layout& layout, const WorldState& state, const JointAction& actions) {
  StepResult result;
  WorldState& next = result.state;
  next = state;
  next.t = state.t + 1;

  for (auto& [cell, pot] : next.pots)
    if (pot.cook_timer > 0) --pot.cook_timer;

  // Interactions use pre-step poses. Two players acting on the same counter or
  // pot in one step cancel each other.
  std::array<std::optional<Cell>, kNumPlayers> target;
  for (int i = 0; i < kNumPlayers; ++i) {
    if (actions[static_cast<std::size_t>(i)] != Action::Interact) continue;
    const auto& p = state.players[static_cast<std::size_t>(i)];
    const Cell f = offset(p.position, p.orientation);
    if (layout.in_bounds(f)) target[static_cast<std::size_t>(i)] = f;
  }
  if (target[0] && target[1] && *target[0] == *target[1]) {
    const TileKind k = layout.tile(*target[0]);
    if (k == TileKind::Counter || k == TileKind::Pot) target = {std::nullopt, std::nullopt};
  }

  for (int i = 0; i < kNumPlayers; ++i) {
    const auto& cell_opt = target[static_cast<std::size_t>(i)];
    if (!cell_opt) continue;
    const Cell c = *cell_opt;
    auto& player = next.players[static_cast<std::size_t>(i)];
    auto emit = [&](EventKind kind) { result.events.push_back({i, kind, c}); };
    switch (layout.tile(c)) {
      case TileKind::Floor: break;
      case TileKind::OnionDispenser:
        if (!player.held) {
          player.held = ItemKind::Onion;
          emit(EventKind::OnionPickup);
        }
        break;
      case TileKind::DishDispenser:
        if (!player.held) {
          player.held = ItemKind::Dish;
          emit(EventKind::DishPickup);
        }
        break;
      case TileKind::Counter: {
        auto& slot = next.counters[c];
        if (player.held && !slot) {
          slot = player.held;
          player.held.reset();
          emit(EventKind::ItemPlaced);
        } else if (!player.held && slot) {
          player.held = slot;
          slot.reset();
          emit(EventKind::ItemTaken);
        }
        break;
      }
      case TileKind::Pot: {
        auto& pot = next.pots[c];
        if (player.held == ItemKind::Onion && pot.onion_count < layout.soup_size) {
          player.held.reset();
          ++pot.onion_count;
          emit(EventKind::OnionInPot);
          if (pot.onion_count == layout.soup_size) {
            pot.cook_timer = layout.cook_time;
            emit(EventKind::CookStart);
          }
        } else if (player.held == ItemKind::Dish && is_ready(layout, pot)) {
          player.held = ItemKind::Soup;
          pot = PotState{};
          emit(EventKind::SoupPickup);
        }
        break;
      }
      case TileKind::ServingLocation:
        if (player.held == ItemKind::Soup) {
          player.held.reset();
          result.reward += layout.delivery_reward;
          emit(EventKind::Delivered);
        }
        break;
    }
  }

  // Movement: orientation always follows the move; position only if the
  // destination is free floor. Same-cell entry and swaps block both players.
  std::array<Cell, kNumPlayers> candidate;
  for (int i = 0; i < kNumPlayers; ++i) {
    auto& player = next.players[static_cast<std::size_t>(i)];
    candidate[static_cast<std::size_t>(i)] = player.position;
    if (const auto dir = move_direction(actions[static_cast<std::size_t>(i)])) {
      player.orientation = *dir;
      const Cell dest = offset(player.position, *dir);
      if (layout.is_floor(dest)) candidate[static_cast<std::size_t>(i)] = dest;
    }
  }
  const Cell p0 = state.players[0].position;
  const Cell p1 = state.players[1].position;
  const bool same_cell = candidate[0] == candidate[1];
  const bool swap = candidate[0] == p1 && candidate[1] == p0;
  if (!same_cell && !swap) {
    next.players[0].position = candidate[0];
    next.players[1].position = candidate[1];
  }
  return result;
}

namespace {

bool is_counter_item(const std::optional<ItemKind>& item) {
  return item == ItemKind::Onion || item == ItemKind::Dish;
}

}  // namespace

Perturbation recover_perturbation(const Layout& layout, const WorldState& s, const WorldState& s_hat) {
  if (s.counters.size() != s_hat.counters.size() || s.pots.size() != s_hat.pots.size())
    throw FeasibilityError("states do not share a layout");
  const auto reachable = reachable_counter_set(layout);
  Perturbation p;
  for (const auto& [cell, item] : s.counters) {
    const auto it = s_hat.counters.find(cell);
    if (it == s_hat.counters.end()) throw FeasibilityError("states do not share a layout");
    if (item == it->second) continue;
    if (item.has_value() || !is_counter_item(it->second) || !reachable.contains(cell))
      throw FeasibilityError("counter " + cell_str(cell) + " cannot be produced by a unit perturbation");
    p.units.push_back(*it->second == ItemKind::Onion ? UnitPerturbation::onion_on_counter(cell)
                                                     : UnitPerturbation::dish_on_counter(cell));
  }
  for (const auto& [cell, pot] : s.pots) {
    const auto it = s_hat.pots.find(cell);
    if (it == s_hat.pots.end()) throw FeasibilityError("states do not share a layout");
    if (pot == it->second) continue;
    const PotState& h = it->second;
    const bool source_empty = pot == PotState{};
    const bool count_ok = h.onion_count >= 1 && h.onion_count <= layout.soup_size;
    const int expected_timer = h.onion_count == layout.soup_size ? layout.cook_time : 0;
    if (!source_empty || !count_ok || h.cook_timer != expected_timer)
      throw FeasibilityError("pot " + cell_str(cell) + " cannot be produced by a unit perturbation");
    p.units.push_back(UnitPerturbation::onions_in_pot(cell, h.onion_count));
  }
  return p.canonical();
}

int perturbation_distance(const Layout& layout, const WorldState& s, const WorldState& s_hat) {
  return static_cast<int>(recover_perturbation(layout, s, s_hat).units.size());
}

std::string render(const Layout& layout, const WorldState& state) {
  std::string out;
  for (int y = 0; y < layout.height; ++y) {
    for (int x = 0; x < layout.width; ++x) {
      const Cell c{x, y};
      char ch = ' ';
      switch (layout.tile(c)) {
        case TileKind::Floor: ch = ' '; break;
        case TileKind::Counter: {
          const auto it = state.counters.find(c);
          ch = 'X';
          if (it != state.counters.end() && it->second) {
            ch = *it->second == ItemKind::Onion ? 'o' : *it->second == ItemKind::Dish ? 'd' : 's';
          }
          break;
        }
        case TileKind::Pot: {
          const auto it = state.pots.find(c);
          ch = 'P';
          if (it != state.pots.end() && it->second.onion_count > 0)
            ch = static_cast<char>('0' + std::min(it->second.onion_count, 9));
          break;
        }
        case TileKind::OnionDispenser: ch = 'O'; break;
        case TileKind::DishDispenser: ch = 'D'; break;
        case TileKind::ServingLocation: ch = 'S'; break;
      }
      for (int i = 0; i < kNumPlayers; ++i)
        if (state.players[static_cast<std::size_t>(i)].position == c) ch = static_cast<char>('1' + i);
      out += ch;
    }
    out += '\n';
  }
  return out;
}

}  // namespace envrobust::gridworld
