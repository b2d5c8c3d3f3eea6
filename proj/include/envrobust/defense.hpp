#ifndef ENVROBUST_DEFENSE_HPP_
#define ENVROBUST_DEFENSE_HPP_

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "envrobust/attack.hpp"
#include "envrobust/featurize.hpp"
#include "envrobust/nn.hpp"
#include "envrobust/rl.hpp"

namespace envrobust::defense {

struct BatConfig {
  int top_adversarial = 5;  // taken from the head of a grad AttackResult
  int random_states = 5;    // extra uniformly drawn feasible states
  int epsilon = 3;          // budget for the random states
  double temperature = 1.5;
  double alpha = 0.05;
  double beta = 1.0;
  double lr = 1e-3;
  int epochs = 100;
  std::size_t minibatch = 256;
  double max_grad_norm = 0.0;  // 0 disables clipping
  double train_fraction = 0.7;
  int trajectories = 20;
  int horizon = 800;
  std::uint64_t finetune_steps = 8'000'000;
  std::vector<double> init_weights;  // empty = uniform over the standard state and every BAT state

  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

/// Reads key = value lines (# comments allowed) over the defaults.
BatConfig parse_bat_config(std::istream& in);

/// The perturbation set shared by kick-starting and fine-tuning: the first
/// `top_adversarial` states of `adversarial` followed by `random_states`
/// distinct random states that are not already in the set.
std::vector<gridworld::Perturbation> bat_perturbations(const gridworld::Layout& layout,
                                                       const attack::AttackResult& adversarial,
                                                       const BatConfig& config, std::uint64_t seed);

/// Standard initial state plus every BAT state, weighted by config.init_weights.
rl::InitDistribution bat_init_distribution(const std::vector<gridworld::Perturbation>& perturbations,
                                           const BatConfig& config);

/// Teacher targets for one trajectory step. Perturbed observations are the
/// original observation plus deltas[p], built on demand.
struct DistillDataset {
  std::size_t obs_size = 0;
  double temperature = 1.0;
  std::vector<gridworld::Perturbation> perturbations;
  std::vector<featurize::EnvDelta> deltas;
  std::vector<float> obs;                                    // rows x obs_size
  std::vector<std::array<double, nn::kJoint>> teacher_probs;  // pi(.|s)
  std::vector<std::array<double, nn::kJoint>> tempered_probs;  // pi^T(.|s)
  std::vector<double> teacher_values;
  std::vector<std::size_t> trajectory;  // source trajectory of each row
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> val_rows;

  std::size_t size() const { return teacher_values.size(); }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(obs).subspan(r * obs_size, obs_size);
  }
  /// Writes the perturbed observation for (row, perturbation p) into `out`.
  void perturbed_row(const gridworld::Layout& layout, std::size_t r, std::size_t p, std::span<float> out) const;
};

/// Self-play trajectories of the frozen teacher from the standard state,
/// teacher targets from one forward pass each, and a whole-trajectory
/// train/validation split. Throws FeasibilityError for an infeasible perturbation.
DistillDataset build_distill_dataset(const nn::PolicyParams& teacher, const gridworld::Layout& layout,
                                     const std::vector<gridworld::Perturbation>& perturbations,
                                     const BatConfig& config, std::uint64_t seed,
                                     kernels::Exec exec = kernels::Exec::Parallel);

struct KickstartTerms {
  double original = 0.0;   // L_o
  double perturbed = 0.0;  // L_p
  double total = 0.0;      // L_o + beta * L_p
};

/// Loss of `student` on dataset row `r`:
///   L_o = KL(pi || pi_s)(s) + |V - V_s|(s)
///   L_p = mean_p [ KL(pi^T || pi_s)(s_p) + max(|V - V_s(s_p)| - alpha |V|, 0) ]
/// Adds dL/dparams into `grad` when it is non-empty.
/// Instantiated for float and double networks.
template <class T>
KickstartTerms kickstart_loss(const nn::PolicyNetwork<T>& student, const gridworld::Layout& layout,
                              const DistillDataset& data, std::size_t r, const BatConfig& config,
                              std::span<double> grad = {});

/// Mean terms over `rows`.
KickstartTerms kickstart_loss_mean(const nn::PolicyParams& student, const gridworld::Layout& layout,
                                   const DistillDataset& data, const std::vector<std::size_t>& rows,
                                   const BatConfig& config, kernels::Exec exec = kernels::Exec::Parallel);

struct EpochLoss {
  int epoch = 0;
  KickstartTerms train;
  KickstartTerms val;
};

struct KickstartReport {
  std::vector<EpochLoss> epochs;  // epoch 0 is the untouched copy of the teacher
  int selected_epoch = 0;
  double selected_val_loss = 0.0;
};

void write_kickstart_csv(std::ostream& out, const KickstartReport& report);

struct KickstartResult {
  nn::PolicyParams student;
  KickstartReport report;
};

/// Minibatch Adam on the kick-start loss starting from a copy of the teacher;
/// returns the epoch with the lowest validation loss (earliest on ties).
/// Throws NumericalError on a non-finite loss.
KickstartResult train_kickstart(const nn::PolicyParams& teacher, const gridworld::Layout& layout,
                                const DistillDataset& data, const BatConfig& config, std::uint64_t seed,
                                kernels::Exec exec = kernels::Exec::Parallel);

/// PPO self-play from the kick-start policy with initial states drawn from `init`.
rl::TrainResult bat_finetune(const nn::PolicyParams& student, const gridworld::Layout& layout,
                             const rl::InitDistribution& init, std::uint64_t steps, std::uint64_t seed,
                             const rl::TrainConfig& config);

struct BatResult {
  std::vector<gridworld::Perturbation> perturbations;
  KickstartResult kickstart;
  rl::TrainResult finetuned;
  std::uint64_t env_steps = 0;  // dataset collection plus fine-tuning
};

/// Full pipeline: BAT states, dataset, kick-start, fine-tune.
BatResult run_bat(const nn::PolicyParams& teacher, const gridworld::Layout& layout,
                  const attack::AttackResult& adversarial, const BatConfig& config, const rl::TrainConfig& train,
                  std::uint64_t seed);

}  // namespace envrobust::defense

#endif  // ENVROBUST_DEFENSE_HPP_
