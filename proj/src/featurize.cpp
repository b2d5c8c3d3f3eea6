#include "envrobust/featurize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

namespace envrobust::featurize {

using gridworld::Cell;
using gridworld::ItemKind;
using gridworld::Layout;
using gridworld::TileKind;
using gridworld::WorldState;

namespace {

int static_channel(TileKind kind) {
  switch (kind) {
    case TileKind::Counter: return kStaticMask + 0;
    case TileKind::Pot: return kStaticMask + 1;
    case TileKind::OnionDispenser: return kStaticMask + 2;
    case TileKind::DishDispenser: return kStaticMask + 3;
    case TileKind::ServingLocation: return kStaticMask + 4;
    case TileKind::Floor: break;
  }
  return -1;
}

std::string where(int channel, Cell c) {
  return "channel " + std::to_string(channel) + " at (" + std::to_string(c.x) + "," +
         std::to_string(c.y) + ")";
}

}  // namespace

void encode_into(const Layout& layout, const WorldState& state, std::span<float> out) {
  std::fill(out.begin(), out.end(), 0.0f);
  auto set = [&](int channel, Cell c, float v) { out[flat_index(layout, channel, c)] = v; };

  for (int i = 0; i < gridworld::kNumPlayers; ++i) {
    const auto& p = state.players[static_cast<std::size_t>(i)];
    set(kPlayerPosition + i, p.position, 1.0f);
    set(kPlayerOrientation + 4 * i + static_cast<int>(p.orientation), p.position, 1.0f);
    if (p.held) set(kPlayerHeld + 3 * i + static_cast<int>(*p.held), p.position, 1.0f);
  }
  for (int y = 0; y < layout.height; ++y) {
    for (int x = 0; x < layout.width; ++x) {
      const int ch = static_channel(layout.tile({x, y}));
      if (ch >= 0) set(ch, {x, y}, 1.0f);
    }
  }
  for (const auto& [cell, item] : state.counters)
    if (item) set(kCounterContents + static_cast<int>(*item), cell, 1.0f);
  for (const auto& [cell, pot] : state.pots) {
    set(kPotOnions, cell, static_cast<float>(pot.onion_count) / static_cast<float>(layout.soup_size));
    if (layout.cook_time > 0)
      set(kPotTimer, cell, static_cast<float>(pot.cook_timer) / static_cast<float>(layout.cook_time));
  }
}

ObsTensor encode(const Layout& layout, const WorldState& state) {
  ObsTensor obs;
  obs.width = layout.width;
  obs.height = layout.height;
  obs.data.resize(obs_size(layout));
  encode_into(layout, state, obs.data);
  return obs;
}

WorldState decode(const ObsTensor& obs, const Layout& layout, int t) {
  if (obs.channels != kNumChannels || obs.width != layout.width || obs.height != layout.height ||
      obs.data.size() != obs_size(layout))
    throw DecodeError("tensor dimensions do not match the layout");

  auto binary = [&](int channel, Cell c) -> bool {
    const float v = obs.at(channel, c);
    if (v == 0.0f) return false;
    if (v == 1.0f) return true;
    throw DecodeError("non-binary value in one-hot " + where(channel, c));
  };

  WorldState s;
  s.t = t;
  for (int i = 0; i < gridworld::kNumPlayers; ++i) {
    std::optional<Cell> pos;
    for (int y = 0; y < layout.height; ++y) {
      for (int x = 0; x < layout.width; ++x) {
        if (!binary(kPlayerPosition + i, {x, y})) continue;
        if (pos) throw DecodeError("player " + std::to_string(i) + " has more than one position bit");
        pos = Cell{x, y};
      }
    }
    if (!pos) throw DecodeError("player " + std::to_string(i) + " has no position bit");
    if (!layout.is_floor(*pos)) throw DecodeError("player " + std::to_string(i) + " is not on floor");
    auto& player = s.players[static_cast<std::size_t>(i)];
    player.position = *pos;

    int orientations = 0;
    int held = 0;
    for (int y = 0; y < layout.height; ++y) {
      for (int x = 0; x < layout.width; ++x) {
        const Cell c{x, y};
        for (int o = 0; o < 4; ++o) {
          if (!binary(kPlayerOrientation + 4 * i + o, c)) continue;
          if (c != *pos) throw DecodeError("orientation bit away from player " + std::to_string(i));
          player.orientation = static_cast<gridworld::Orientation>(o);
          ++orientations;
        }
        for (int k = 0; k < 3; ++k) {
          if (!binary(kPlayerHeld + 3 * i + k, c)) continue;
          if (c != *pos) throw DecodeError("held-item bit away from player " + std::to_string(i));
          player.held = static_cast<ItemKind>(k);
          ++held;
        }
      }
    }
    if (orientations != 1) throw DecodeError("player " + std::to_string(i) + " orientation is not one-hot");
    if (held > 1) throw DecodeError("player " + std::to_string(i) + " holds more than one item");
  }
  if (s.players[0].position == s.players[1].position)
    throw DecodeError("players share a cell");

  for (int y = 0; y < layout.height; ++y) {
    for (int x = 0; x < layout.width; ++x) {
      const Cell c{x, y};
      const TileKind kind = layout.tile(c);
      const int expected = static_channel(kind);
      for (int ch = kStaticMask; ch < kStaticMask + 5; ++ch) {
        if (binary(ch, c) != (ch == expected)) throw DecodeError("static mask mismatch in " + where(ch, c));
      }

      std::optional<ItemKind> item;
      for (int k = 0; k < 3; ++k) {
        if (!binary(kCounterContents + k, c)) continue;
        if (kind != TileKind::Counter) throw DecodeError("counter item on non-counter " + where(kCounterContents + k, c));
        if (item) throw DecodeError("counter holds more than one item at " + where(kCounterContents + k, c));
        item = static_cast<ItemKind>(k);
      }
      if (kind == TileKind::Counter) s.counters.emplace(c, item);

      const float onions = obs.at(kPotOnions, c);
      const float timer = obs.at(kPotTimer, c);
      if (kind != TileKind::Pot) {
        if (onions != 0.0f || timer != 0.0f) throw DecodeError("pot channels set on non-pot " + where(kPotOnions, c));
        continue;
      }
      const double count_f = static_cast<double>(onions) * layout.soup_size;
      const int count = static_cast<int>(std::lround(count_f));
      if (std::abs(count_f - count) > 1e-3 || count < 0 || count > layout.soup_size)
        throw DecodeError("invalid onion count in " + where(kPotOnions, c));
      int cook = 0;
      if (layout.cook_time > 0) {
        const double timer_f = static_cast<double>(timer) * layout.cook_time;
        cook = static_cast<int>(std::lround(timer_f));
        if (std::abs(timer_f - cook) > 1e-3 || cook < 0 || cook > layout.cook_time)
          throw DecodeError("invalid cook timer in " + where(kPotTimer, c));
      } else if (timer != 0.0f) {
        throw DecodeError("cook timer set with zero cook_time at " + where(kPotTimer, c));
      }
      if (cook > 0 && count != layout.soup_size) throw DecodeError("timer running on a partial pot at " + where(kPotTimer, c));
      s.pots.emplace(c, gridworld::PotState{count, cook});
    }
  }
  return s;
}

EnvDelta env_delta(const Layout& layout, const gridworld::UnitPerturbation& unit) {
  EnvDelta d;
  switch (unit.kind) {
    case gridworld::UnitKind::OnionOnCounter:
      d.entries.push_back({kCounterContents + 0, unit.cell, 1.0});
      break;
    case gridworld::UnitKind::DishOnCounter:
      d.entries.push_back({kCounterContents + 1, unit.cell, 1.0});
      break;
    case gridworld::UnitKind::OnionsInPot:
      d.entries.push_back(
          {kPotOnions, unit.cell,
           static_cast<double>(static_cast<float>(unit.onions) / static_cast<float>(layout.soup_size))});
      if (unit.onions == layout.soup_size && layout.cook_time > 0) d.entries.push_back({kPotTimer, unit.cell, 1.0});
      break;
  }
  return d;
}

EnvDelta env_delta(const Layout& layout, const gridworld::Perturbation& perturbation) {
  gridworld::check_feasible(layout, perturbation);
  EnvDelta d;
  for (const auto& u : perturbation.units) {
    const EnvDelta part = env_delta(layout, u);
    d.entries.insert(d.entries.end(), part.entries.begin(), part.entries.end());
  }
  return d;
}

void write_obs(std::ostream& out, const ObsTensor& obs) {
  const std::int32_t dims[3] = {obs.channels, obs.width, obs.height};
  out.write(reinterpret_cast<const char*>(dims), sizeof dims);
  out.write(reinterpret_cast<const char*>(obs.data.data()),
            static_cast<std::streamsize>(obs.data.size() * sizeof(float)));
}

ObsTensor read_obs(std::istream& in) {
  std::int32_t dims[3] = {0, 0, 0};
  if (!in.read(reinterpret_cast<char*>(dims), sizeof dims)) throw DecodeError("truncated tensor header");
  if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0) throw DecodeError("invalid tensor dimensions");
  ObsTensor obs;
  obs.channels = dims[0];
  obs.width = dims[1];
  obs.height = dims[2];
  obs.data.resize(static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
                  static_cast<std::size_t>(dims[2]));
  if (!in.read(reinterpret_cast<char*>(obs.data.data()),
               static_cast<std::streamsize>(obs.data.size() * sizeof(float))))
    throw DecodeError("truncated tensor data");
  return obs;
}

}  // namespace envrobust::featurize
