#ifndef ENVROBUST_HARNESS_HPP_
#define ENVROBUST_HARNESS_HPP_

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "envrobust/attack.hpp"
#include "envrobust/config.hpp"
#include "envrobust/defense.hpp"
#include "envrobust/gridworld.hpp"
#include "envrobust/kernels.hpp"
#include "envrobust/nn.hpp"
#include "envrobust/rl.hpp"

namespace envrobust::harness {

// ---------------------------------------------------------------------------
// Evaluation

struct InitialState {
  std::string label;
  gridworld::Perturbation perturbation;
};

std::vector<InitialState> standard_states();
std::vector<InitialState> states_from(const attack::AttackResult& result);

struct EvalSpec {
  std::vector<InitialState> states = standard_states();
  int games = 100;
  int horizon = 800;
  std::uint64_t seed = 0;
  bool deterministic = false;  // argmax actions instead of sampling
  kernels::Exec exec = kernels::Exec::Parallel;
};

/// Per-episode sparse scores, scores[state][game].
struct EpisodeLog {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> scores;

  std::size_t episodes() const;
};

/// One self-play episode from `perturbation`; returns the delivery score.
double play_episode(const nn::PolicyParams& policy, const gridworld::Layout& layout,
                    const gridworld::Perturbation& perturbation, int horizon, bool deterministic,
                    std::mt19937_64& rng);

/// Runs games x states episodes; episode (s, g) draws from its own stream
/// derived from (seed, s, g). Throws ConfigError on a checkpoint/layout
/// mismatch or bad counts and FeasibilityError on an infeasible state.
EpisodeLog run_episodes(const nn::PolicyParams& policy, const gridworld::Layout& layout, const EvalSpec& spec);

void write_episode_log(std::ostream& out, const EpisodeLog& log);
EpisodeLog read_episode_log(std::istream& in);

struct MeanError {
  double mean = 0.0;
  double std_err = 0.0;  // sample standard deviation / sqrt(n); 0 when n < 2
  std::size_t n = 0;
};

/// Compensated two-pass mean and standard error.
MeanError mean_and_error(std::span<const double> values);

struct StateStats {
  std::string label;
  MeanError score;
};

struct ScoreStats {
  std::vector<StateStats> states;
  double grand_mean = 0.0;    // mean of the per-state means
  double grand_std_err = 0.0;  // over all pooled episodes
  std::size_t n = 0;           // episodes
};

/// Statistics over one or more logs (several agents): per-state entries are
/// listed log by log and the grand mean weights each (agent, state) equally.
ScoreStats summarize(const std::vector<EpisodeLog>& logs);

ScoreStats evaluate(const nn::PolicyParams& policy, const gridworld::Layout& layout, const EvalSpec& spec);

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  std::string method;
  std::string attack;
  std::string layout;
  double mean = 0.0;
  double std_err = 0.0;
  std::size_t n = 0;
  bool skipped = false;
};

struct Report {
  std::vector<ReportRow> rows;
  std::vector<std::pair<std::string, std::string>> metadata;
};

enum class ReportFormat { Csv, Md };
ReportFormat parse_report_format(const std::string& s);

ReportRow make_row(std::string method, std::string attack, std::string layout, const ScoreStats& stats);

/// Byte-deterministic output. CSV columns: method,attack,layout,mean,stderr,n.
/// Skipped cells print "skipped" for mean and stderr.
void emit_report(std::ostream& out, const Report& report, ReportFormat format);
/// Throws ConfigError if `path` cannot be written.
void save_report(const std::string& path, const Report& report, ReportFormat format);
/// Reads the rows back from either format.
std::vector<ReportRow> parse_report_rows(std::istream& in, ReportFormat format);

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentConfig {
  std::string layout_path;
  gridworld::Layout layout;
  std::uint64_t seed = 0;
  int agents = 2;
  std::string algo = "sp";
  std::uint64_t train_steps = 1'000'000;
  std::uint64_t pool_steps = 500'000;  // per FCP partner
  std::vector<std::string> checkpoints;  // attack experiment: evaluate these instead of training
  std::string cache_dir;                 // trained checkpoints are reused from here when set
  rl::TrainConfig train;

  int epsilon = 3;
  int k = 10;
  int random_k = 40;
  double p_freq = 0.05;
  int attack_trajectories = 20;
  int attack_horizon = 800;

  std::vector<std::string> methods;
  int games = 20;
  int horizon = 800;
  bool deterministic = false;
  int workers = 1;

  defense::BatConfig bat;

  std::string out;  // empty = standard output
  ReportFormat format = ReportFormat::Csv;
};

inline const std::vector<std::string> kAttackMethods = {"none", "random", "random_f", "grad", "transfer"};
inline const std::vector<std::string> kDefenseMethods = {"sp", "extra_sp", "div_start", "bat_sp",
                                                         "fcp", "extra_fcp", "bat_fcp"};
inline const std::vector<std::string> kDefenseAttacks = {"none", "random", "grad"};

/// Display name used in defense reports ("Extra SP", "BAT+FCP", ...).
std::string defense_label(const std::string& method);

/// `kind` is "attack" or "defense"; relative paths resolve against `base_dir`.
ExperimentConfig parse_experiment_config(KeyValues& kv, const std::string& kind, const std::string& base_dir);
ExperimentConfig load_experiment_config(const std::string& path, const std::string& kind);

/// Loads `name` from the cache directory or builds it with `make` and stores it.
nn::PolicyParams cached_policy(const ExperimentConfig& config, const std::string& name,
                               const std::function<nn::PolicyParams()>& make);

/// Stable fingerprint of every setting that affects training.
std::string train_fingerprint(const rl::TrainConfig& config);

/// Agent `index` of `algo` ("sp" or "fcp") exactly as the experiments build
/// it, loaded from or stored in the cache when cache_dir is set.
nn::PolicyParams experiment_agent(const ExperimentConfig& config, const std::string& algo, std::size_t index);

/// Per policy x method ScoreStats, plus "all" rows pooling the agents.
Report run_attack_experiment(const ExperimentConfig& config);

/// The defense grid (methods x {none, random, grad}) with grad attacks
/// regenerated against each evaluated policy. Cells not requested are
/// reported as skipped.
Report run_defense_experiment(const ExperimentConfig& config);

}  // namespace envrobust::harness

#endif  // ENVROBUST_HARNESS_HPP_
