#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "envrobust/attack.hpp"
#include "envrobust/defense.hpp"
#include "envrobust/gridworld.hpp"
#include "envrobust/harness.hpp"
#include "envrobust/log.hpp"
#include "envrobust/nn.hpp"
#include "envrobust/rl.hpp"

namespace fs = std::filesystem;
using namespace envrobust;

namespace {

struct TrainArgs {
  std::string algo = "sp";
  std::string layout;
  std::uint64_t steps = 1'000'000;
  std::uint64_t seed = 0;
  std::string out;
  std::string init;  // div-start: attack file whose states join the standard one
  std::uint64_t pool_steps = 500'000;
  std::vector<int> hidden{64, 64};
  double lr = 1e-3;
  int horizon = 800;
  std::size_t episodes_per_update = 4;
  std::vector<double> shaping{3.0, 3.0, 5.0};
  std::uint64_t shaping_anneal = 0;  // 0 = anneal over the whole run
  std::uint64_t checkpoint_every = 0;
};

struct AttackArgs {
  std::string policy;
  std::string layout;
  std::string method = "grad";
  int budget = 3;
  int k = 0;  // 0: 10 for grad, 40 for the random baselines
  double pfreq = 0.05;
  int traj = 20;
  int horizon = 800;
  std::uint64_t seed = 0;
  std::string out;
};

struct BatArgs {
  std::string policy;
  std::string adv;
  std::string layout;
  std::string out;
  std::string csv;
  std::uint64_t seed = 0;
  defense::BatConfig config;
};

struct EvalArgs {
  std::string policy;
  std::string layout;
  std::string states = "standard";
  int games = 100;
  int horizon = 800;
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::string report = "csv";
  std::string out;
  std::string log;
};

void check_layout_name(const gridworld::Layout& layout, const attack::AttackResult& adv, const std::string& path) {
  if (!adv.layout.empty() && adv.layout != layout.name)
    throw ConfigError(fmt::format("{} was generated on layout '{}', not '{}'", path, adv.layout, layout.name));
}

int cmd_layout_validate(const std::string& path) {
  const auto layout = gridworld::load_layout_file(path);
  const auto units = gridworld::enumerate_unit_perturbations(layout);
  fmt::print("{}: ok ({}x{}, {} floor cells reachable, {} unit perturbations)\n", layout.name, layout.width,
             layout.height, gridworld::reachable_floor(layout).size(), units.size());
  return 0;
}

int cmd_train(const TrainArgs& a) {
  const auto layout = gridworld::load_layout_file(a.layout);
  rl::TrainConfig config;
  config.hidden = a.hidden;
  config.ppo.lr = a.lr;
  config.horizon = a.horizon;
  config.episodes_per_update = a.episodes_per_update;
  config.checkpoint_every = a.checkpoint_every;
  if (a.shaping.size() != 3) throw ConfigError("--shaping takes three values: onion,dish,soup");
  config.shaping = {a.shaping[0], a.shaping[1], a.shaping[2], a.shaping_anneal ? a.shaping_anneal : a.steps};

  fs::create_directories(a.out);
  rl::TrainResult result;
  if (a.algo == "sp") {
    if (!a.init.empty()) throw ConfigError("--init applies to div-start only");
    result = rl::train_self_play(layout, a.steps, a.seed, config);
  } else if (a.algo == "div-start") {
    if (a.init.empty()) throw ConfigError("div-start needs --init FILE (an attack result)");
    const auto adv = attack::load_attack_result(a.init);
    check_layout_name(layout, adv, a.init);
    auto support = adv.perturbations();
    support.insert(support.begin(), gridworld::Perturbation{});
    const auto init = rl::InitDistribution::uniform(support);
    init.validate(layout);
    result = rl::train_div_start(layout, init, a.steps, a.seed, config);
  } else if (a.algo == "fcp") {
    if (!a.init.empty()) throw ConfigError("--init applies to div-start only");
    spdlog::info("building the partner pool ({} steps per partner)", a.pool_steps);
    const auto pool = rl::build_partner_pool(layout, a.pool_steps, a.seed, config);
    for (std::size_t j = 0; j < pool.partners.size(); ++j)
      nn::save_checkpoint(pool.partners[j], (fs::path(a.out) / fmt::format("partner_{:02}.ckpt", j)).string());
    result = rl::train_fcp(layout, pool, a.steps, a.seed, config);
  } else {
    throw ConfigError("unknown --algo '" + a.algo + "' (expected sp, fcp or div-start)");
  }

  nn::save_checkpoint(result.policy, (fs::path(a.out) / "policy.ckpt").string());
  for (const auto& snap : result.history)
    if (snap.meta().steps != result.policy.meta().steps)
      nn::save_checkpoint(snap, (fs::path(a.out) / fmt::format("policy_{}.ckpt", snap.meta().steps)).string());
  std::ofstream metrics(fs::path(a.out) / "metrics.csv");
  rl::write_metrics_csv(metrics, result.metrics);
  if (!metrics) throw ConfigError("cannot write metrics.csv in " + a.out);
  fmt::print("{}\n", (fs::path(a.out) / "policy.ckpt").string());
  return 0;
}

int cmd_attack(const AttackArgs& a) {
  const auto layout = gridworld::load_layout_file(a.layout);
  const auto policy = nn::load_checkpoint(a.policy);
  const auto method = attack::parse_method(a.method);
  const int k = a.k > 0 ? a.k : method == attack::Method::Grad ? 10 : 40;
  attack::AttackResult result;
  if (method == attack::Method::Grad) {
    attack::GradAttackConfig g;
    g.epsilon = a.budget;
    g.k = k;
    g.p_freq = a.pfreq;
    g.trajectories = a.traj;
    g.horizon = a.horizon;
    g.seed = a.seed;
    result = attack::grad_attack(policy, layout, g);
  } else if (method == attack::Method::Random) {
    result = attack::random_attack(layout, a.budget, k, false, nullptr, 1.0, a.seed);
  } else {
    const auto trajs = attack::collect_attack_trajectories(policy, layout, a.traj, a.horizon, a.seed);
    result = attack::random_attack(layout, a.budget, k, true, &trajs, a.pfreq, a.seed);
    result.trajectories = a.traj;
    result.horizon = a.horizon;
  }
  result.policy_id = policy.meta().id;
  if (a.out.empty() || a.out == "-")
    attack::write_attack_result(std::cout, result);
  else
    attack::save_attack_result(result, a.out);
  return 0;
}

int cmd_bat_kickstart(const BatArgs& a) {
  const auto layout = gridworld::load_layout_file(a.layout);
  const auto teacher = nn::load_checkpoint(a.policy);
  const auto adv = attack::load_attack_result(a.adv);
  check_layout_name(layout, adv, a.adv);
  a.config.validate();
  const auto perts = defense::bat_perturbations(layout, adv, a.config, a.seed);
  const auto data = defense::build_distill_dataset(teacher, layout, perts, a.config, a.seed);
  const auto result = defense::train_kickstart(teacher, layout, data, a.config, a.seed);
  nn::save_checkpoint(result.student, a.out);
  const std::string csv = a.csv.empty() ? a.out + ".csv" : a.csv;
  std::ofstream f(csv);
  defense::write_kickstart_csv(f, result.report);
  if (!f) throw ConfigError("cannot write " + csv);
  fmt::print("selected epoch {} (validation loss {:.6f})\n", result.report.selected_epoch,
             result.report.selected_val_loss);
  return 0;
}

int cmd_bat_finetune(const BatArgs& a) {
  const auto layout = gridworld::load_layout_file(a.layout);
  const auto student = nn::load_checkpoint(a.policy);
  const auto adv = attack::load_attack_result(a.adv);
  check_layout_name(layout, adv, a.adv);
  a.config.validate();
  const auto perts = defense::bat_perturbations(layout, adv, a.config, a.seed);
  rl::TrainConfig train;
  train.hidden = student.arch().hidden;
  const auto result = defense::bat_finetune(student, layout, defense::bat_init_distribution(perts, a.config),
                                            a.config.finetune_steps, a.seed, train);
  nn::save_checkpoint(result.policy, a.out);
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  const auto layout = gridworld::load_layout_file(a.layout);
  const auto policy = nn::load_checkpoint(a.policy);
  const auto format = harness::parse_report_format(a.report);
  harness::EvalSpec spec;
  std::string attack_label = "none";
  if (a.states != "standard") {
    const auto adv = attack::load_attack_result(a.states);
    check_layout_name(layout, adv, a.states);
    spec.states = harness::states_from(adv);
    attack_label = attack::to_string(adv.method);
  }
  spec.games = a.games;
  spec.horizon = a.horizon;
  spec.seed = a.seed;
  spec.deterministic = a.deterministic;
  const auto log = harness::run_episodes(policy, layout, spec);
  if (!a.log.empty()) {
    std::ofstream f(a.log);
    harness::write_episode_log(f, log);
    if (!f) throw ConfigError("cannot write " + a.log);
  }
  const auto stats = harness::summarize({log});
  harness::Report report;
  for (const auto& s : stats.states) {
    harness::ReportRow row;
    row.method = fs::path(a.policy).stem().string();
    row.attack = s.label;
    row.layout = layout.name;
    row.mean = s.score.mean;
    row.std_err = s.score.std_err;
    row.n = s.score.n;
    report.rows.push_back(row);
  }
  report.rows.push_back(harness::make_row(fs::path(a.policy).stem().string(), "all:" + attack_label, layout.name, stats));
  report.metadata.emplace_back("policy", policy.meta().id);
  report.metadata.emplace_back("seed", std::to_string(a.seed));
  report.metadata.emplace_back("games", std::to_string(a.games));
  report.metadata.emplace_back("horizon", std::to_string(a.horizon));
  report.metadata.emplace_back("actions", a.deterministic ? "argmax" : "sampled");
  if (a.out.empty() || a.out == "-")
    harness::emit_report(std::cout, report, format);
  else
    harness::save_report(a.out, report, format);
  return 0;
}

int cmd_experiment(const std::string& kind, const std::string& path) {
  const auto config = harness::load_experiment_config(path, kind);
  const auto report =
      kind == "attack" ? harness::run_attack_experiment(config) : harness::run_defense_experiment(config);
  if (config.out.empty())
    harness::emit_report(std::cout, report, config.format);
  else
    harness::save_report(config.out, report, config.format);
  return 0;
}

void add_bat_options(CLI::App* cmd, BatArgs& a) {
  cmd->add_option("--policy", a.policy, "Input checkpoint")->required()->check(CLI::ExistingFile);
  cmd->add_option("--adv", a.adv, "Grad attack result supplying the adversarial states")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--layout", a.layout, "Layout file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, "Output checkpoint")->required();
  cmd->add_option("--seed", a.seed, "Seed; use the same value for kickstart and finetune");
  cmd->add_option("--top", a.config.top_adversarial, "Adversarial states taken from --adv");
  cmd->add_option("--random", a.config.random_states, "Extra random states");
  cmd->add_option("--budget", a.config.epsilon, "Budget of the random states");
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Environmental-state attacks and defenses for cooperative gridworld agents"};
  app.require_subcommand(1);
  int status = 0;

  auto* layout_cmd = app.add_subcommand("layout", "Layout utilities");
  layout_cmd->require_subcommand(1);
  std::string layout_file;
  auto* validate = layout_cmd->add_subcommand("validate", "Parse a layout and report its size");
  validate->add_option("file", layout_file, "Layout file")->required();
  validate->callback([&] { status = cmd_layout_validate(layout_file); });

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a policy with PPO");
  train->add_option("--algo", ta.algo, "sp, fcp or div-start")->check(CLI::IsMember({"sp", "fcp", "div-start"}));
  train->add_option("--layout", ta.layout, "Layout file")->required()->check(CLI::ExistingFile);
  train->add_option("--steps", ta.steps, "Environment steps");
  train->add_option("--seed", ta.seed, "Seed");
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--init", ta.init, "div-start: attack result whose states join the standard state")
      ->check(CLI::ExistingFile);
  train->add_option("--pool-steps", ta.pool_steps, "fcp: steps per partner");
  train->add_option("--hidden", ta.hidden, "Hidden layer widths")->delimiter(',');
  train->add_option("--lr", ta.lr, "Adam learning rate");
  train->add_option("--horizon", ta.horizon, "Episode length");
  train->add_option("--episodes-per-update", ta.episodes_per_update, "Episodes per PPO batch");
  train->add_option("--shaping", ta.shaping, "Dense bonus for onion in pot, dish pickup, soup pickup")
      ->delimiter(',');
  train->add_option("--shaping-anneal", ta.shaping_anneal, "Steps over which shaping decays (default: --steps)");
  train->add_option("--checkpoint-every", ta.checkpoint_every, "Also keep snapshots at this step interval");
  train->callback([&] { status = cmd_train(ta); });

  AttackArgs aa;
  auto* atk = app.add_subcommand("attack", "Generate adversarial initial states");
  atk->add_option("--policy", aa.policy, "Checkpoint")->required()->check(CLI::ExistingFile);
  atk->add_option("--layout", aa.layout, "Layout file")->required()->check(CLI::ExistingFile);
  atk->add_option("--method", aa.method, "grad, random or random-f")
      ->check(CLI::IsMember({"grad", "random", "random-f"}));
  atk->add_option("--budget", aa.budget, "Maximum number of unit perturbations");
  atk->add_option("--k", aa.k, "Number of states (default 10 for grad, 40 for random baselines)");
  atk->add_option("--pfreq", aa.pfreq, "Frequency filter threshold");
  atk->add_option("--traj", aa.traj, "Trajectories collected from the policy");
  atk->add_option("--horizon", aa.horizon, "Trajectory length");
  atk->add_option("--seed", aa.seed, "Seed");
  atk->add_option("--out", aa.out, "Output file (default: standard output)");
  atk->callback([&] { status = cmd_attack(aa); });

  BatArgs ka;
  BatArgs fa;
  auto* bat = app.add_subcommand("bat", "Boosted adversarial training");
  bat->require_subcommand(1);
  auto* kick = bat->add_subcommand("kickstart", "Distill the policy onto itself under perturbed states");
  add_bat_options(kick, ka);
  kick->add_option("--epochs", ka.config.epochs, "Epochs");
  kick->add_option("--temp", ka.config.temperature, "Teacher temperature on perturbed states");
  kick->add_option("--alpha", ka.config.alpha, "Value slack as a fraction of |V|");
  kick->add_option("--beta", ka.config.beta, "Weight of the perturbed-state loss");
  kick->add_option("--lr", ka.config.lr, "Adam learning rate");
  kick->add_option("--minibatch", ka.config.minibatch, "Minibatch rows");
  kick->add_option("--traj", ka.config.trajectories, "Teacher trajectories");
  kick->add_option("--horizon", ka.config.horizon, "Trajectory length");
  kick->add_option("--report", ka.csv, "Per-epoch loss CSV (default: OUT.csv)");
  kick->callback([&] { status = cmd_bat_kickstart(ka); });
  auto* fine = bat->add_subcommand("finetune", "PPO from the kick-started policy over the BAT states");
  add_bat_options(fine, fa);
  fine->add_option("--steps", fa.config.finetune_steps, "Environment steps");
  fine->callback([&] { status = cmd_bat_finetune(fa); });

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Score a policy from a set of initial states");
  ev->add_option("--policy", ea.policy, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--layout", ea.layout, "Layout file")->required()->check(CLI::ExistingFile);
  ev->add_option("--states", ea.states, "Attack result file or 'standard'");
  ev->add_option("--games", ea.games, "Games per state");
  ev->add_option("--horizon", ea.horizon, "Steps per game");
  ev->add_option("--seed", ea.seed, "Seed");
  ev->add_flag("--deterministic", ea.deterministic, "Argmax actions instead of sampling");
  ev->add_option("--report", ea.report, "csv or md")->check(CLI::IsMember({"csv", "md"}));
  ev->add_option("--out", ea.out, "Report file (default: standard output)");
  ev->add_option("--log", ea.log, "Also write the per-episode scores here");
  ev->callback([&] { status = cmd_eval(ea); });

  std::string exp_kind;
  std::string exp_config;
  auto* exp = app.add_subcommand("experiment", "Run a configured attack or defense experiment");
  exp->add_option("kind", exp_kind, "attack or defense")->required()->check(CLI::IsMember({"attack", "defense"}));
  exp->add_option("--config", exp_config, "Config file")->required()->check(CLI::ExistingFile);
  exp->callback([&] { status = cmd_experiment(exp_kind, exp_config); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    fmt::print(stderr, "envrobust: error: {}\n", e.what());
    return 1;
  }
  return status;
}
