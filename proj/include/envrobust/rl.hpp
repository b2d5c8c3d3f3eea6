#ifndef ENVROBUST_RL_HPP_
#define ENVROBUST_RL_HPP_

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "envrobust/gridworld.hpp"
#include "envrobust/kernels.hpp"
#include "envrobust/nn.hpp"

namespace envrobust::rl {

// ---------------------------------------------------------------------------
// Initial-state distributions

struct InitOption {
  gridworld::Perturbation perturbation;
  double weight = 1.0;
};

struct InitDistribution {
  std::vector<InitOption> options;

  static InitDistribution point_mass(gridworld::Perturbation p = {});
  static InitDistribution uniform(const std::vector<gridworld::Perturbation>& support);

  /// Throws ConfigError on empty support or bad weights and FeasibilityError
  /// on an infeasible option.
  void validate(const gridworld::Layout& layout) const;
  std::size_t sample(std::mt19937_64& rng) const;
  bool is_standard_point_mass() const;
};

// ---------------------------------------------------------------------------
// Policies acting in the environment

/// Samples one joint action from the 36-way softmax.
int sample_joint(const std::array<float, nn::kJoint>& logits, std::mt19937_64& rng);

/// Marginal distribution over one character's 6 actions.
std::array<double, gridworld::kNumActions> marginal(const std::array<float, nn::kJoint>& logits, int player);

// ---------------------------------------------------------------------------
// Rollouts

struct ShapingConfig {
  double onion_in_pot = 0.0;
  double dish_pickup = 0.0;
  double soup_pickup = 0.0;
  std::uint64_t anneal_steps = 0;  // linear decay to zero over this many env steps

  bool enabled() const { return anneal_steps > 0 && (onion_in_pot != 0 || dish_pickup != 0 || soup_pickup != 0); }
  /// Shaping multiplier after `steps` environment steps of training.
  double scale(std::uint64_t steps) const;
  /// Dense bonus for one transition (before multiplying by scale).
  double bonus(const gridworld::Layout& layout, const gridworld::StepResult& result) const;
};

/// Frozen partner checkpoints for Fictitious Co-Play: 4 seeds x 3 ability levels.
struct PartnerPool {
  static constexpr std::size_t kSize = 12;
  std::vector<nn::PolicyParams> partners;

  static PartnerPool load(const std::vector<std::string>& paths);
  /// Throws ConfigError unless the pool has exactly kSize partners that fit `layout`.
  void validate(const gridworld::Layout& layout) const;
};

/// Which partner and which character the learner gets in FCP episode `episode`.
struct FcpAssignment {
  std::size_t partner = 0;
  int learner_player = 0;
};
FcpAssignment fcp_assignment(std::uint64_t seed, std::uint64_t episode, std::size_t pool_size);

struct RolloutBatch {
  std::size_t obs_size = 0;
  std::vector<float> obs;          // rows x obs_size
  std::vector<std::uint8_t> actions;
  std::vector<nn::Control> controls;
  std::vector<double> log_probs;   // log-prob of the controlled part of the action at collection time
  std::vector<double> values;
  std::vector<double> rewards;     // sparse reward plus annealed shaping
  std::vector<std::uint8_t> dones;
  std::vector<double> advantages;
  std::vector<double> returns;
  std::vector<std::size_t> episode_starts;
  std::vector<double> episode_scores;  // sparse (delivery) return per episode
  std::vector<std::size_t> episode_init;  // index into the InitDistribution

  std::size_t size() const { return actions.size(); }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(obs).subspan(r * obs_size, obs_size);
  }
  /// Throws std::logic_error if per-step arrays disagree in length.
  void validate() const;
};

struct RolloutSpec {
  std::size_t episodes = 1;
  int horizon = 800;
  std::uint64_t seed = 0;
  std::uint64_t first_episode = 0;  // global episode counter, used for seeding
  ShapingConfig shaping;
  double shaping_scale = 0.0;
  const PartnerPool* pool = nullptr;  // FCP mode when set
  kernels::Exec exec = kernels::Exec::Parallel;
};

/// Collects whole fixed-horizon episodes. Episode e uses its own random
/// streams derived from (seed, first_episode + e), so the batch does not
/// depend on thread count. Infeasible sampled initial states are skipped and
/// resampled with a warning.
RolloutBatch collect_rollouts(const nn::PolicyParams& policy, const gridworld::Layout& layout,
                              const InitDistribution& init, const RolloutSpec& spec);

/// GAE(gamma, lambda) within episodes; returns = advantages + values; then
/// advantages are normalized to zero mean and unit variance over the batch
/// when `normalize` is set.
void gae_and_returns(RolloutBatch& batch, double gamma, double lambda, bool normalize = true);

// ---------------------------------------------------------------------------
// PPO

struct PpoConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double clip = 0.2;
  int epochs = 4;
  std::size_t minibatch = 800;
  double lr = 1e-3;
  double vf_coef = 0.5;
  double ent_coef = 0.01;
  double max_grad_norm = 0.5;
  double reward_scale = 0.1;  // rewards are multiplied by this before GAE
};

struct PpoStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double total_loss = 0.0;
};

/// Per-row PPO loss: clipped surrogate + vf_coef * 0.5 (V - R)^2 - ent_coef * H.
/// Writes dLoss/dlogits and dLoss/dvalue; the components go to `stats`.
double ppo_row_loss(const std::array<double, nn::kJoint>& logits, double value, int action, nn::Control control,
                    double old_log_prob, double advantage, double ret, const PpoConfig& config,
                    std::span<double> dlogits, double& dvalue, PpoStats* stats = nullptr);

/// Several epochs of minibatch PPO on `batch` (advantages must be present).
/// Minibatch order comes from `seed`. Throws NumericalError on NaN.
PpoStats ppo_update(nn::PolicyParams& policy, const RolloutBatch& batch, const PpoConfig& config,
                    nn::AdamState& adam, std::uint64_t seed, kernels::Exec exec = kernels::Exec::Parallel);

// ---------------------------------------------------------------------------
// Training regimes

struct TrainConfig {
  PpoConfig ppo;
  int horizon = 800;
  std::size_t episodes_per_update = 4;
  std::vector<int> hidden{64, 64};
  ShapingConfig shaping;
  std::uint64_t checkpoint_every = 0;  // 0 keeps only the final checkpoint in the history
  bool anneal_lr = false;
  kernels::Exec exec = kernels::Exec::Parallel;
};

struct MetricsRow {
  std::uint64_t step = 0;
  double mean_score = 0.0;
  double shaping_scale = 0.0;
  PpoStats stats;
};

struct TrainResult {
  nn::PolicyParams policy;
  std::vector<nn::PolicyParams> history;  // snapshots in increasing step order, last = final
  std::vector<MetricsRow> metrics;
};

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);

/// PPO starting from `policy`. Used directly for Extra Training and BAT
/// fine-tuning; the regimes below are thin wrappers. With a pool, the
/// learner controls one character per episode and the pool the other.
TrainResult train_ppo(nn::PolicyParams policy, const gridworld::Layout& layout, const InitDistribution& init,
                      const PartnerPool* pool, std::uint64_t total_steps, std::uint64_t seed,
                      const TrainConfig& config);

nn::PolicyParams initial_policy(const gridworld::Layout& layout, nn::HeadType head, std::uint64_t seed,
                                const TrainConfig& config);

TrainResult train_self_play(const gridworld::Layout& layout, std::uint64_t total_steps, std::uint64_t seed,
                            const TrainConfig& config);
TrainResult train_div_start(const gridworld::Layout& layout, const InitDistribution& init,
                            std::uint64_t total_steps, std::uint64_t seed, const TrainConfig& config);
TrainResult train_fcp(const gridworld::Layout& layout, const PartnerPool& pool, std::uint64_t total_steps,
                      std::uint64_t seed, const TrainConfig& config);

/// Trains 4 self-play partners with seeds derived from `seed` and keeps the
/// snapshots at 1/3, 2/3 and the end of each run.
PartnerPool build_partner_pool(const gridworld::Layout& layout, std::uint64_t steps_per_partner, std::uint64_t seed,
                               const TrainConfig& config);

}  // namespace envrobust::rl

#endif  // ENVROBUST_RL_HPP_
