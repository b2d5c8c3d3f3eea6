#ifndef ENVROBUST_NN_HPP_
#define ENVROBUST_NN_HPP_

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "envrobust/gridworld.hpp"

namespace envrobust {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a loss or gradient becomes non-finite during optimization.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace nn {

inline constexpr int kJoint = gridworld::kNumJointActions;

enum class Activation : std::uint8_t { Tanh, Relu };

/// Joint: 36 logits, one per joint action. Factorized: 6 + 6 per-character
/// logits whose pairwise sums form the 36 joint logits.
enum class HeadType : std::uint8_t { Joint, Factorized };

struct Architecture {
  int channels = 26;
  int width = 0;
  int height = 0;
  std::vector<int> hidden{64, 64};
  Activation activation = Activation::Tanh;
  HeadType head = HeadType::Joint;
  bool shared_trunk = true;

  std::size_t input_size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(width) *
           static_cast<std::size_t>(height);
  }
  int policy_outputs() const { return head == HeadType::Joint ? kJoint : 2 * gridworld::kNumActions; }
  void validate() const;
  bool operator==(const Architecture&) const = default;
};

Architecture architecture_for(const gridworld::Layout& layout, std::vector<int> hidden = {64, 64},
                              HeadType head = HeadType::Joint);

struct Metadata {
  std::uint64_t seed = 0;
  std::uint64_t steps = 0;
  std::string id;
  std::string parent;  // lineage: id of the checkpoint this one was trained from
  bool operator==(const Metadata&) const = default;
};

template <class T>
struct Output {
  std::array<T, kJoint> logits{};
  T value{};
};

/// Per-call activations kept for the backward pass. One per thread.
template <class T>
struct Workspace {
  std::vector<std::vector<T>> actor;   // post-activation outputs of actor trunk layers
  std::vector<std::vector<T>> critic;  // same for a separate critic trunk
  std::vector<T> head;                 // raw policy head outputs (36 or 12)
  Output<T> out;
  std::vector<T> scratch_a, scratch_b, scratch_c;
};

template <class T>
class PolicyNetwork {
 public:
  struct Layer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t weights = 0;  // offset of W, stored input-major: W[i * out + j]
    std::size_t bias = 0;
  };

  PolicyNetwork() = default;

  /// Scaled uniform fan-in initialization, deterministic in (arch, seed).
  static PolicyNetwork initialize(const Architecture& arch, std::uint64_t seed);
  /// Builds a network with the given flat parameters (size must match).
  static PolicyNetwork from_params(const Architecture& arch, std::vector<T> params, Metadata meta = {});

  const Architecture& arch() const { return arch_; }
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }
  std::size_t num_params() const { return params_.size(); }
  Metadata& meta() { return meta_; }
  const Metadata& meta() const { return meta_; }

  Output<T> forward(std::span<const T> input) const;
  /// Forward pass retaining activations in `ws`; returns ws.out.
  const Output<T>& forward(std::span<const T> input, Workspace<T>& ws) const;

  /// Reverse pass for one forward call. Adds dL/dparams into `grad_params`
  /// (if non-empty) and writes dL/dinput into `grad_input` (if non-empty).
  void backward(std::span<const T> input, Workspace<T>& ws, std::span<const T> dlogits, T dvalue,
                std::span<double> grad_params, std::span<T> grad_input) const;

  template <class U>
  PolicyNetwork<U> cast() const {
    std::vector<U> p(params_.begin(), params_.end());
    return PolicyNetwork<U>::from_params(arch_, std::move(p), meta_);
  }

  /// FNV-1a over the raw parameter bytes.
  std::uint64_t params_hash() const;

 private:
  void build_layout();
  void check_input(std::size_t n) const;

  Architecture arch_;
  std::vector<T> params_;
  std::vector<Layer> actor_trunk_;
  std::vector<Layer> critic_trunk_;
  Layer policy_head_;
  Layer value_head_;
  Metadata meta_;
};

extern template class PolicyNetwork<float>;
extern template class PolicyNetwork<double>;

/// Trained agents use 32-bit parameters.
using PolicyParams = PolicyNetwork<float>;

// ---------------------------------------------------------------------------
// Distributions over the 36 joint actions.

struct ActionDistribution {
  std::array<double, kJoint> probs{};
  double temperature = 1.0;
};

/// exp(z/T) / sum exp(z/T) with max-subtraction. Throws ConfigError for T <= 0.
template <class T>
ActionDistribution softmax_t(std::span<const T> logits, double temperature);

template <class T>
ActionDistribution softmax_t(const std::array<T, kJoint>& logits, double temperature) {
  return softmax_t<T>(std::span<const T>(logits), temperature);
}

inline constexpr double kKlFloor = 1e-12;

/// sum p log(p / max(q, 1e-12)); terms with p = 0 contribute nothing.
double kl_divergence(const ActionDistribution& p, const ActionDistribution& q);

/// Which part of the joint action a learner is responsible for.
enum class Control : std::uint8_t { Joint, Player0, Player1 };

/// Group of joint action `a` under `control` (the joint index, or one character's action).
constexpr int control_group(Control control, int joint_action) {
  switch (control) {
    case Control::Joint: return joint_action;
    case Control::Player0: return joint_action / gridworld::kNumActions;
    case Control::Player1: return joint_action % gridworld::kNumActions;
  }
  return joint_action;
}

/// log P(group of `action`) under softmax(logits); writes d/dlogits into `dlogits` if non-empty.
double log_prob(const std::array<double, kJoint>& logits, Control control, int action,
                std::span<double> dlogits = {});

/// Entropy of the grouped distribution; writes dH/dlogits into `dlogits` if non-empty.
double entropy(const std::array<double, kJoint>& logits, Control control,
               std::span<double> dlogits = {});

template <class T>
std::array<double, kJoint> to_double(const std::array<T, kJoint>& v) {
  std::array<double, kJoint> out{};
  for (int i = 0; i < kJoint; ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(v[static_cast<std::size_t>(i)]);
  return out;
}

int argmax(std::span<const double> values);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

/// One Adam update of `params` using `grad`.
template <class T>
void adam_step(std::span<T> params, std::span<const double> grad, AdamState& state, double lr,
               const AdamConfig& config = {});

/// Scales `grad` so its L2 norm is at most max_norm; returns the norm before clipping.
double clip_grad_norm(std::span<double> grad, double max_norm);

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const PolicyParams& params, const std::string& path);
PolicyParams load_checkpoint(const std::string& path);
std::string serialize_checkpoint(const PolicyParams& params);
PolicyParams deserialize_checkpoint(const std::string& bytes);

}  // namespace nn
}  // namespace envrobust

#endif  // ENVROBUST_NN_HPP_
