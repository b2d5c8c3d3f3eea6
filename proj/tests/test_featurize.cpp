#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "envrobust/featurize.hpp"
#include "test_support.hpp"

using namespace envrobust;
using namespace envrobust::featurize;
using gridworld::Cell;
using gridworld::Perturbation;
using gridworld::UnitPerturbation;
using envrobust::testing::shipped_layout;
using envrobust::testing::shipped_layout_names;

TEST(EncodeTest, StandardStateHasNoContents) {
  for (const auto& name : shipped_layout_names()) {
    const auto l = shipped_layout(name);
    const ObsTensor obs = encode(l, gridworld::reset(l));
    EXPECT_EQ(obs.size(), static_cast<std::size_t>(26 * l.width * l.height));
    for (int ch = kCounterContents; ch < kNumChannels; ++ch)
      for (int y = 0; y < l.height; ++y)
        for (int x = 0; x < l.width; ++x) EXPECT_EQ(obs.at(ch, {x, y}), 0.0f) << name << " ch " << ch;
  }
}

TEST(EncodeTest, OnionOnCounterFlipsOneEntry) {
  const auto l = shipped_layout("coordination_ring");
  const ObsTensor base = encode(l, gridworld::reset(l));
  for (const Cell c : gridworld::reachable_empty_counters(l, gridworld::reset(l))) {
    const ObsTensor obs = encode(l, gridworld::reset(l, Perturbation{{UnitPerturbation::onion_on_counter(c)}}));
    int changed = 0;
    for (std::size_t i = 0; i < obs.size(); ++i) changed += obs.data[i] != base.data[i];
    EXPECT_EQ(changed, 1);
    EXPECT_EQ(obs.at(kCounterContents, c), 1.0f);
  }
}

TEST(EncodeTest, ValuesStayInRange) {
  std::mt19937_64 rng(2);
  const auto l = shipped_layout("double_rings");
  for (int i = 0; i < 300; ++i) {
    const auto p = envrobust::testing::random_perturbation(l, rng, 3);
    const ObsTensor obs = encode(l, envrobust::testing::random_walk_state(l, rng, 300, &p));
    for (int ch = 0; ch < kNumChannels; ++ch) {
      for (int y = 0; y < l.height; ++y) {
        for (int x = 0; x < l.width; ++x) {
          const float v = obs.at(ch, {x, y});
          EXPECT_GE(v, 0.0f);
          EXPECT_LE(v, 1.0f);
          if (ch < kPotOnions) EXPECT_TRUE(v == 0.0f || v == 1.0f);
        }
      }
    }
  }
}

TEST(DecodeTest, RoundTripsRandomReachableStates) {
  std::mt19937_64 rng(1234);
  for (const auto& name : shipped_layout_names()) {
    const auto l = shipped_layout(name);
    EXPECT_EQ(decode(encode(l, gridworld::reset(l)), l), gridworld::reset(l));
    for (int i = 0; i < 1000; ++i) {
      const auto p = envrobust::testing::random_perturbation(l, rng, 3);
      const auto s = envrobust::testing::random_walk_state(l, rng, 400, &p);
      ASSERT_EQ(decode(encode(l, s), l, s.t), s) << name << "\n" << gridworld::render(l, s);
    }
  }
}

TEST(DecodeTest, RejectsInconsistentTensors) {
  const auto l = shipped_layout("coordination_ring");
  const auto s = gridworld::reset(l);
  ObsTensor obs = encode(l, s);
  const Cell other{2, 1};
  ObsTensor two_positions = obs;
  two_positions.data[two_positions.index(kPlayerPosition, other)] = 1.0f;
  EXPECT_THROW(decode(two_positions, l), DecodeError);

  ObsTensor wrong_static = obs;
  wrong_static.data[wrong_static.index(kStaticMask, other)] = 1.0f;
  EXPECT_THROW(decode(wrong_static, l), DecodeError);

  ObsTensor fractional = obs;
  const Cell pot = l.cells_of(gridworld::TileKind::Pot).front();
  fractional.data[fractional.index(kPotOnions, pot)] = 0.5f;
  EXPECT_THROW(decode(fractional, l), DecodeError);

  ObsTensor item_on_floor = obs;
  item_on_floor.data[item_on_floor.index(kCounterContents, other)] = 1.0f;
  EXPECT_THROW(decode(item_on_floor, l), DecodeError);

  ObsTensor truncated = obs;
  truncated.data.pop_back();
  EXPECT_THROW(decode(truncated, l), DecodeError);
}

TEST(EnvDeltaTest, EmptyPerturbationGivesEmptyDelta) {
  const auto l = shipped_layout("cross");
  EXPECT_TRUE(env_delta(l, Perturbation{}).empty());
}

namespace {

// Dense oracle: encode both states and subtract.
std::vector<double> dense_delta(const gridworld::Layout& l, const Perturbation& p) {
  const ObsTensor a = encode(l, gridworld::reset(l));
  const ObsTensor b = encode(l, gridworld::reset(l, p));
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<double>(b.data[i]) - static_cast<double>(a.data[i]);
  return d;
}

std::vector<double> densify(const gridworld::Layout& l, const EnvDelta& delta) {
  std::vector<double> d(obs_size(l), 0.0);
  delta.apply<double>(l, d);
  return d;
}

}  // namespace

TEST(EnvDeltaTest, MatchesDenseSubtractionAndIsAdditive) {
  std::mt19937_64 rng(99);
  for (const auto& name : shipped_layout_names()) {
    const auto l = shipped_layout(name);
    for (int i = 0; i < 100; ++i) {
      const auto p = envrobust::testing::random_perturbation(l, rng, 3);
      const EnvDelta delta = env_delta(l, p);
      EXPECT_EQ(densify(l, delta), dense_delta(l, p)) << name << " " << gridworld::to_string(p);

      std::vector<double> sum(obs_size(l), 0.0);
      for (const auto& u : p.units) env_delta(l, u).apply<double>(l, sum);
      EXPECT_EQ(sum, densify(l, delta));
      for (const auto& e : delta.entries) EXPECT_TRUE(is_env_channel(e.channel));
    }
  }
}

TEST(EnvDeltaTest, UnitsTouchDisjointEntries) {
  const auto l = shipped_layout("double_counters");
  const auto units = gridworld::enumerate_unit_perturbations(l);
  for (std::size_t i = 0; i < units.size(); ++i) {
    for (std::size_t j = i + 1; j < units.size(); ++j) {
      if (units[i].cell == units[j].cell) continue;  // never combined
      for (const auto& a : env_delta(l, units[i]).entries)
        for (const auto& b : env_delta(l, units[j]).entries)
          EXPECT_FALSE(a.channel == b.channel && a.cell == b.cell);
    }
  }
}

TEST(EnvDeltaTest, InfeasiblePerturbationThrows) {
  const auto l = shipped_layout("cross");
  const Cell pot = l.cells_of(gridworld::TileKind::Pot).front();
  EXPECT_THROW(env_delta(l, Perturbation{{UnitPerturbation::onions_in_pot(pot, 1), UnitPerturbation::onions_in_pot(pot, 2)}}),
               FeasibilityError);
}

TEST(ObsIoTest, BinaryRoundTrip) {
  const auto l = shipped_layout("matrix");
  std::mt19937_64 rng(4);
  const ObsTensor obs = encode(l, envrobust::testing::random_walk_state(l, rng, 100));
  std::stringstream ss;
  write_obs(ss, obs);
  EXPECT_EQ(ss.str().size(), 12 + obs.size() * 4);
  EXPECT_EQ(read_obs(ss), obs);
  std::stringstream bad("abc");
  EXPECT_THROW(read_obs(bad), DecodeError);
}
