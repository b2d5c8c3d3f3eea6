#ifndef ENVROBUST_ATTACK_HPP_
#define ENVROBUST_ATTACK_HPP_

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "envrobust/gridworld.hpp"
#include "envrobust/kernels.hpp"
#include "envrobust/nn.hpp"

namespace envrobust::attack {

// ---------------------------------------------------------------------------
// Trajectories

struct TrajectoryStep {
  gridworld::WorldState state;  // the observation is encode(state), which is lossless
  int greedy_action = 0;        // a* = argmax of the policy logits
  int sampled_action = 0;
  double value = 0.0;
  double reward = 0.0;
};

struct Trajectory {
  std::string layout;
  std::string policy_id;
  std::uint64_t seed = 0;
  std::vector<TrajectoryStep> steps;
};

/// Self-play episodes from the standard initial state with sampled actions.
/// Episode i is seeded from (seed, i) so the result is thread-count independent.
std::vector<Trajectory> collect_attack_trajectories(const nn::PolicyParams& policy, const gridworld::Layout& layout,
                                                    int n_traj, int horizon, std::uint64_t seed,
                                                    kernels::Exec exec = kernels::Exec::Parallel);

// ---------------------------------------------------------------------------
// Unit scoring

struct UnitScore {
  gridworld::UnitPerturbation unit;
  double score = 0.0;
  double frequency = 0.0;  // fraction of trajectory steps where the unit's feature already holds
};

/// G = sum over steps of d pi(a*_t | obs_t) / d obs_t, in 64-bit arithmetic.
std::vector<double> action_probability_gradient(const nn::PolicyParams& policy, const gridworld::Layout& layout,
                                                const std::vector<Trajectory>& trajectories,
                                                kernels::Exec exec = kernels::Exec::Parallel);

/// True when `unit`'s feature is present in `state`: the same item on the same
/// counter, or exactly `onions` onions in the pot.
bool feature_present(const gridworld::UnitPerturbation& unit, const gridworld::WorldState& state);

std::vector<double> unit_frequencies(const std::vector<Trajectory>& trajectories,
                                     const std::vector<gridworld::UnitPerturbation>& units);

/// score(u) = <G, -delta_u>: the first-order drop in the probability of the
/// original greedy actions, summed over all steps, when the initial
/// environment is moved by u and the shift persists. One backward pass per
/// step, reused across units.
std::vector<UnitScore> score_units(const nn::PolicyParams& policy, const gridworld::Layout& layout,
                                   const std::vector<Trajectory>& trajectories,
                                   const std::vector<gridworld::UnitPerturbation>& units,
                                   kernels::Exec exec = kernels::Exec::Parallel);

/// Keeps units with frequency <= p_freq.
std::vector<UnitScore> frequency_filter(const std::vector<UnitScore>& scores, double p_freq);

// ---------------------------------------------------------------------------
// Results

enum class Method { Grad, Random, RandomFiltered };
std::string to_string(Method m);
Method parse_method(const std::string& s);

struct RankedPerturbation {
  gridworld::Perturbation perturbation;
  double score = 0.0;  // estimated objective; NaN when not estimated
};

struct AttackResult {
  Method method = Method::Grad;
  std::string policy_id;
  std::string layout;
  int epsilon = 3;
  double p_freq = 0.05;
  int k = 10;
  std::uint64_t seed = 0;
  int trajectories = 0;
  int horizon = 0;
  std::string search = "exact";  // exact | pruned
  std::vector<RankedPerturbation> states;

  std::vector<gridworld::Perturbation> perturbations() const;
};

void write_attack_result(std::ostream& out, const AttackResult& result);
AttackResult read_attack_result(std::istream& in);
void save_attack_result(const AttackResult& result, const std::string& path);
AttackResult load_attack_result(const std::string& path);

/// Subsets with at most this many candidate units are ranked exhaustively.
inline constexpr std::size_t kExactUnitLimit = 64;

/// Ranks every subset of at most `epsilon` units with distinct cells by the
/// sum of its unit scores and returns the k best feasible ones (fewer, with a
/// warning, if there are not k). Ties break by unit ordinal. Above
/// kExactUnitLimit candidates only the best-scoring kExactUnitLimit units enter the
/// ranking, flagged as search = "pruned".
AttackResult compose_adversarial_states(const gridworld::Layout& layout, const std::vector<UnitScore>& scores,
                                        int epsilon, int k);

/// Every subset of 1..epsilon of `units` with distinct cells that is feasible.
std::vector<gridworld::Perturbation> enumerate_perturbations(const gridworld::Layout& layout,
                                                             const std::vector<gridworld::UnitPerturbation>& units,
                                                             int epsilon);

/// k perturbations drawn uniformly without replacement from all feasible
/// subsets of size 1..epsilon. With `filter`, only units whose observed
/// frequency in `trajectories` is <= p_freq are used.
AttackResult random_attack(const gridworld::Layout& layout, int epsilon, int k, bool filter,
                           const std::vector<Trajectory>* trajectories, double p_freq, std::uint64_t seed);

struct GradAttackConfig {
  int epsilon = 3;
  int k = 10;
  double p_freq = 0.05;
  int trajectories = 20;
  int horizon = 800;
  std::uint64_t seed = 0;
  kernels::Exec exec = kernels::Exec::Parallel;
};

/// The whole pipeline: trajectories, unit scores, frequency filter, composition.
AttackResult grad_attack(const nn::PolicyParams& policy, const gridworld::Layout& layout,
                         const GradAttackConfig& config);

// ---------------------------------------------------------------------------
// Diagnostics

/// Runs the same seeded self-play episode from the standard and the perturbed
/// initial state and returns the fraction of steps at which the number of
/// differing environment cells is at least the initial distance. Logged only.
double persistence_fraction(const nn::PolicyParams& policy, const gridworld::Layout& layout,
                            const gridworld::Perturbation& perturbation, int horizon, std::uint64_t seed);

}  // namespace envrobust::attack

#endif  // ENVROBUST_ATTACK_HPP_
