#ifndef ENVROBUST_FEATURIZE_HPP_
#define ENVROBUST_FEATURIZE_HPP_

#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include "envrobust/gridworld.hpp"

namespace envrobust {

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace featurize {

// Channel map. Channels [0, kFirstEnvChannel) describe the two characters
// (agent state); the rest describe the world around them (environment state).
//
//   0, 1     position of player 0 / player 1
//   2..5     player 0 orientation one-hot (up, down, left, right), at its cell
//   6..9     player 1 orientation one-hot
//   10..12   player 0 held item one-hot (onion, dish, soup), at its cell
//   13..15   player 1 held item one-hot
//   16..20   static masks: counter, pot, onion dispenser, dish dispenser, serving
//   21..23   counter contents: onion, dish, soup
//   24       pot onion count / soup_size
//   25       pot cook timer / cook_time
inline constexpr int kNumChannels = 26;
inline constexpr int kPlayerPosition = 0;
inline constexpr int kPlayerOrientation = 2;
inline constexpr int kPlayerHeld = 10;
inline constexpr int kFirstEnvChannel = 16;
inline constexpr int kStaticMask = 16;
inline constexpr int kCounterContents = 21;
inline constexpr int kPotOnions = 24;
inline constexpr int kPotTimer = 25;

constexpr bool is_env_channel(int channel) { return channel >= kFirstEnvChannel; }

/// Dense C x width x height tensor, channel-major with x before y:
/// index = (channel * width + x) * height + y.
struct ObsTensor {
  int channels = kNumChannels;
  int width = 0;
  int height = 0;
  std::vector<float> data;

  std::size_t index(int channel, gridworld::Cell c) const {
    return static_cast<std::size_t>((channel * width + c.x) * height + c.y);
  }
  float at(int channel, gridworld::Cell c) const { return data[index(channel, c)]; }
  std::size_t size() const { return data.size(); }
  bool operator==(const ObsTensor&) const = default;
};

inline std::size_t obs_size(const gridworld::Layout& layout) {
  return static_cast<std::size_t>(kNumChannels * layout.width * layout.height);
}

inline std::size_t flat_index(const gridworld::Layout& layout, int channel, gridworld::Cell c) {
  return static_cast<std::size_t>((channel * layout.width + c.x) * layout.height + c.y);
}

ObsTensor encode(const gridworld::Layout& layout, const gridworld::WorldState& state);

/// Allocation-free variant; `out` must have obs_size(layout) entries.
void encode_into(const gridworld::Layout& layout, const gridworld::WorldState& state,
                 std::span<float> out);

/// Exact inverse of encode. Throws DecodeError on inconsistent channels.
gridworld::WorldState decode(const ObsTensor& obs, const gridworld::Layout& layout, int t = 0);

struct DeltaEntry {
  int channel = 0;
  gridworld::Cell cell;
  double value = 0.0;
  bool operator==(const DeltaEntry&) const = default;
};

/// Sparse observation change caused by a perturbation on environmental channels.
struct EnvDelta {
  std::vector<DeltaEntry> entries;

  bool empty() const { return entries.empty(); }
  /// Adds the delta into a dense flat observation.
  template <class T>
  void apply(const gridworld::Layout& layout, std::span<T> obs) const {
    for (const auto& e : entries) obs[flat_index(layout, e.channel, e.cell)] += static_cast<T>(e.value);
  }
  /// <delta, v> for a dense flat vector v.
  template <class T>
  double dot(const gridworld::Layout& layout, std::span<const T> v) const {
    double acc = 0.0;
    for (const auto& e : entries)
      acc += e.value * static_cast<double>(v[flat_index(layout, e.channel, e.cell)]);
    return acc;
  }
};

EnvDelta env_delta(const gridworld::Layout& layout, const gridworld::UnitPerturbation& unit);

/// Throws FeasibilityError for infeasible perturbations.
EnvDelta env_delta(const gridworld::Layout& layout, const gridworld::Perturbation& perturbation);

/// Binary form: int32 C, w, h followed by C*w*h float32 values in channel-major order.
void write_obs(std::ostream& out, const ObsTensor& obs);
ObsTensor read_obs(std::istream& in);

}  // namespace featurize
}  // namespace envrobust

#endif  // ENVROBUST_FEATURIZE_HPP_
