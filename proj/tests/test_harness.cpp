#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "envrobust/harness.hpp"
#include "envrobust/random.hpp"
#include "test_support.hpp"

using namespace envrobust;
using namespace envrobust::harness;
using envrobust::testing::shipped_layout;

namespace {

// A policy whose head is dominated by the (Wait, Wait) joint action.
nn::PolicyParams waiting_policy(const gridworld::Layout& layout) {
  auto p = nn::PolicyParams::initialize(nn::architecture_for(layout, {16, 16}), 1);
  const std::size_t n = p.num_params();
  const std::size_t value_head = 16 + 1;
  const std::size_t policy_bias = n - value_head - nn::kJoint;
  p.params()[policy_bias + static_cast<std::size_t>(gridworld::joint_action_index(
                              {gridworld::Action::Wait, gridworld::Action::Wait}))] = 1e4f;
  return p;
}

nn::PolicyParams noisy_policy(const gridworld::Layout& layout, std::uint64_t seed) {
  auto p = nn::PolicyParams::initialize(nn::architecture_for(layout, {16, 16}), seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 0.3f);
  for (auto& w : p.params()) w += g(rng);
  return p;
}

ExperimentConfig tiny_config(const std::string& kind, const std::string& extra = "", int agents = 2) {
  std::istringstream in(
      "layout = cross.layout\n"
      "seed = 3\n"
      "agents = " + std::to_string(agents) + "\n"
      "train_steps = 200\n"
      "train_horizon = 50\n"
      "episodes_per_update = 2\n"
      "hidden = 16, 16\n"
      "games = 2\n"
      "horizon = 60\n"
      "k = 3\n"
      "random_k = 3\n"
      "attack_trajectories = 2\n"
      "attack_horizon = 40\n"
      "bat_trajectories = 2\n"
      "bat_horizon = 30\n"
      "bat_epochs = 2\n"
      "bat_finetune_steps = 100\n"
      "pool_steps = 150\n" +
      extra);
  auto kv = KeyValues::parse(in);
  return parse_experiment_config(kv, kind, ENVROBUST_LAYOUT_DIR);
}

std::string render(const Report& r, ReportFormat f) {
  std::ostringstream out;
  emit_report(out, r, f);
  return out.str();
}

}  // namespace

TEST(EvaluateTest, WaitingPolicyScoresZero) {
  const auto layout = shipped_layout("cross");
  EvalSpec spec;
  spec.games = 5;
  spec.horizon = 100;
  for (const bool det : {false, true}) {
    spec.deterministic = det;
    const auto st = evaluate(waiting_policy(layout), layout, spec);
    EXPECT_EQ(st.grand_mean, 0.0);
    EXPECT_EQ(st.grand_std_err, 0.0);
    EXPECT_EQ(st.n, 5u);
  }
}

TEST(EvaluateTest, ReproducibleAndThreadIndependent) {
  const auto layout = shipped_layout("coordination_ring");
  const auto policy = noisy_policy(layout, 2);
  EvalSpec spec;
  spec.games = 6;
  spec.horizon = 120;
  spec.seed = 5;
  spec.states = states_from(attack::random_attack(layout, 3, 3, false, nullptr, 1.0, 1));
  const auto a = run_episodes(policy, layout, spec);
  const auto b = run_episodes(policy, layout, spec);
  spec.exec = kernels::Exec::Serial;
  const auto c = run_episodes(policy, layout, spec);
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_EQ(a.scores, c.scores);
  EXPECT_EQ(a.episodes(), 18u);

  // Each episode is replayable on its own from its seed.
  auto rng = make_rng(5, {tag(Stream::Eval), 2, 4});
  EXPECT_EQ(play_episode(policy, layout, spec.states[2].perturbation, 120, false, rng), a.scores[2][4]);
}

TEST(EvaluateTest, RejectsMismatchAndInfeasibleStates) {
  const auto ring = shipped_layout("coordination_ring");
  const auto cross = shipped_layout("cross");
  const auto policy = noisy_policy(cross, 1);
  EvalSpec spec;
  spec.games = 1;
  spec.horizon = 5;
  EXPECT_THROW(run_episodes(policy, shipped_layout("matrix"), spec), ConfigError);
  const auto pot = cross.cells_of(gridworld::TileKind::Pot).front();
  spec.states = {{"bad", gridworld::Perturbation{{gridworld::UnitPerturbation::onion_on_counter(pot)}}}};
  EXPECT_THROW(run_episodes(policy, cross, spec), FeasibilityError);
  spec.states = standard_states();
  spec.games = 0;
  EXPECT_THROW(run_episodes(policy, cross, spec), ConfigError);
  (void)ring;
}

TEST(StatisticsTest, MatchesHighPrecisionReference) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(2 + rng() % 300);
    for (auto& x : v) x = u(rng) + 1e6;  // large offset stresses cancellation
    long double sum = 0;
    for (const double x : v) sum += x;
    const long double mean = sum / v.size();
    long double ss = 0;
    for (const double x : v) ss += (x - mean) * (x - mean);
    const long double se = std::sqrt(ss / (v.size() - 1) / v.size());
    const auto m = mean_and_error(v);
    EXPECT_NEAR(m.mean, static_cast<double>(mean), 1e-12 * std::abs(static_cast<double>(mean)));
    EXPECT_NEAR(m.std_err, static_cast<double>(se), 1e-9 * static_cast<double>(se));
    EXPECT_EQ(m.n, v.size());
  }
  EXPECT_EQ(mean_and_error(std::vector<double>{4.0}).std_err, 0.0);
  EXPECT_EQ(mean_and_error(std::vector<double>{}).n, 0u);
}

TEST(StatisticsTest, GrandMeanWeighsStatesEqually) {
  EpisodeLog a{{"s0", "s1"}, {{1, 2, 3}, {10}}};
  EpisodeLog b{{"t0"}, {{4, 4}}};
  const auto st = summarize({a, b});
  ASSERT_EQ(st.states.size(), 3u);
  EXPECT_DOUBLE_EQ(st.grand_mean, (2.0 + 10.0 + 4.0) / 3.0);
  EXPECT_EQ(st.n, 6u);
  EXPECT_DOUBLE_EQ(st.grand_std_err, mean_and_error(std::vector<double>{1, 2, 3, 10, 4, 4}).std_err);
}

TEST(EpisodeLogTest, RoundTripRebuildsIdenticalReport) {
  const auto layout = shipped_layout("cross");
  EvalSpec spec;
  spec.games = 4;
  spec.horizon = 80;
  spec.states = states_from(attack::random_attack(layout, 2, 2, false, nullptr, 1.0, 3));
  const auto log = run_episodes(noisy_policy(layout, 4), layout, spec);
  std::stringstream ss;
  write_episode_log(ss, log);
  const auto back = read_episode_log(ss);
  EXPECT_EQ(back.labels, log.labels);
  EXPECT_EQ(back.scores, log.scores);
  Report r1{{make_row("p", "random", layout.name, summarize({log}))}, {}};
  Report r2{{make_row("p", "random", layout.name, summarize({back}))}, {}};
  EXPECT_EQ(render(r1, ReportFormat::Csv), render(r2, ReportFormat::Csv));

  std::stringstream bad("envrobust-episodes 1\nstates 2\nstate 1 x\n3\n");
  EXPECT_THROW(read_episode_log(bad), ConfigError);
}

TEST(ReportTest, EmptyCsvIsHeaderOnly) {
  EXPECT_EQ(render(Report{}, ReportFormat::Csv), "method,attack,layout,mean,stderr,n\n");
}

TEST(ReportTest, MarkdownAndCsvCarryTheSameNumbers) {
  Report r;
  r.rows = {{"Extra SP", "none", "coordination_ring", 341.8, 16.2, 40, false},
            {"Extra SP", "grad", "coordination_ring", 36.8, 6.3, 400, false},
            {"BAT+SP", "none", "coordination_ring", 0, 0, 0, true},
            {"a,b", "q\"x", "l", 1.23456, 0.5, 3, false}};
  r.metadata = {{"grad_attack", "regenerated"}};
  std::istringstream csv(render(r, ReportFormat::Csv));
  std::istringstream md(render(r, ReportFormat::Md));
  const auto from_csv = parse_report_rows(csv, ReportFormat::Csv);
  const auto from_md = parse_report_rows(md, ReportFormat::Md);
  ASSERT_EQ(from_csv.size(), r.rows.size());
  ASSERT_EQ(from_md.size(), r.rows.size() - 1 + 1);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(from_csv[i].method, from_md[i].method);
    EXPECT_EQ(from_csv[i].attack, from_md[i].attack);
    EXPECT_EQ(from_csv[i].mean, from_md[i].mean);
    EXPECT_EQ(from_csv[i].std_err, from_md[i].std_err);
    EXPECT_EQ(from_csv[i].n, from_md[i].n);
    EXPECT_EQ(from_csv[i].skipped, from_md[i].skipped);
  }
  EXPECT_EQ(from_csv[0].mean, 341.8);
  EXPECT_TRUE(from_csv[2].skipped);
  EXPECT_EQ(from_csv[3].method, "a,b");
  EXPECT_EQ(from_csv[3].attack, "q\"x");
  EXPECT_EQ(render(r, ReportFormat::Md), render(r, ReportFormat::Md));
  EXPECT_NE(render(r, ReportFormat::Md).find("341.8 ± 16.2"), std::string::npos);
}

TEST(ReportTest, UnwritablePathThrows) {
  EXPECT_THROW(save_report("/nonexistent/dir/report.csv", Report{}, ReportFormat::Csv), ConfigError);
  EXPECT_THROW(parse_report_format("xlsx"), ConfigError);
}

TEST(ExperimentConfigTest, ParsesAndValidates) {
  const auto c = tiny_config("attack", "methods = none, grad\nformat = md\n");
  EXPECT_EQ(c.layout.name, "cross");
  EXPECT_EQ(c.methods, (std::vector<std::string>{"none", "grad"}));
  EXPECT_EQ(c.format, ReportFormat::Md);
  EXPECT_EQ(c.train.hidden, (std::vector<int>{16, 16}));
  EXPECT_EQ(c.train.shaping.anneal_steps, 200u);  // defaults to the training budget
  EXPECT_THROW(tiny_config("attack", "methods = none, magic\n"), ConfigError);
  EXPECT_THROW(tiny_config("attack", "gamez = 3\n"), ConfigError);
  EXPECT_THROW(tiny_config("defense", "methods = grad\n"), ConfigError);
  EXPECT_THROW(tiny_config("attack", "", 0), ConfigError);
  EXPECT_THROW(tiny_config("attack", "seed = 4\n"), ConfigError);  // duplicate key
  EXPECT_THROW(tiny_config("sideways"), ConfigError);
}

TEST(ExperimentConfigTest, FingerprintTracksTrainingSettings) {
  rl::TrainConfig a, b;
  EXPECT_EQ(train_fingerprint(a), train_fingerprint(b));
  b.ppo.lr = 2e-3;
  EXPECT_NE(train_fingerprint(a), train_fingerprint(b));
  b = a;
  b.exec = kernels::Exec::Serial;  // execution mode does not change results
  EXPECT_EQ(train_fingerprint(a), train_fingerprint(b));
}

TEST(CacheTest, SecondLookupLoadsTheSameCheckpoint) {
  auto c = tiny_config("attack");
  c.cache_dir = (std::filesystem::temp_directory_path() / "envrobust_cache_test").string();
  std::filesystem::remove_all(c.cache_dir);
  int calls = 0;
  const auto layout = shipped_layout("cross");
  auto make = [&] {
    ++calls;
    return noisy_policy(layout, 8);
  };
  const auto a = cached_policy(c, "x", make);
  const auto b = cached_policy(c, "x", make);
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(a.params_hash(), b.params_hash());
  std::filesystem::remove_all(c.cache_dir);
}

TEST(AttackExperimentTest, ProtocolAndReproducibility) {
  const auto c = tiny_config("attack");
  const auto r1 = run_attack_experiment(c);
  const auto r2 = run_attack_experiment(c);
  EXPECT_EQ(render(r1, ReportFormat::Csv), render(r2, ReportFormat::Csv));
  EXPECT_EQ(render(r1, ReportFormat::Md), render(r2, ReportFormat::Md));
  ASSERT_EQ(r1.rows.size(), 2u * 5u + 5u);

  // "none" is the plain evaluation on the standard state.
  const auto agent0 = rl::train_self_play(c.layout, c.train_steps, derive_seed(c.seed, {tag(Stream::Agent), 0}),
                                          c.train).policy;
  const auto agent1 = rl::train_self_play(c.layout, c.train_steps, derive_seed(c.seed, {tag(Stream::Agent), 1}),
                                          c.train).policy;
  EvalSpec spec;
  spec.games = c.games;
  spec.horizon = c.horizon;
  spec.seed = derive_seed(c.seed, {tag(Stream::Eval), 0});
  EXPECT_EQ(r1.rows[0].attack, "none");
  EXPECT_EQ(r1.rows[0].mean, evaluate(agent0, c.layout, spec).grand_mean);

  // Transfer on agent 0 uses the states generated against agent 1.
  attack::GradAttackConfig g;
  g.epsilon = c.epsilon;
  g.k = c.k;
  g.p_freq = c.p_freq;
  g.trajectories = c.attack_trajectories;
  g.horizon = c.attack_horizon;
  g.seed = derive_seed(c.seed, {tag(Stream::Attack), 1});
  spec.states = states_from(attack::grad_attack(agent1, c.layout, g));
  EXPECT_EQ(r1.rows[4].attack, "transfer");
  EXPECT_EQ(r1.rows[4].mean, evaluate(agent0, c.layout, spec).grand_mean);
  EXPECT_EQ(r1.rows[4].n, spec.states.size() * static_cast<std::size_t>(c.games));

  EXPECT_THROW(run_attack_experiment(tiny_config("attack", "", 1)), ConfigError);
  EXPECT_NO_THROW(run_attack_experiment(tiny_config("attack", "methods = none\n", 1)));
}

TEST(DefenseExperimentTest, GridIsCompleteWithSkippedCells) {
  const auto c = tiny_config("defense", "methods = sp, extra_sp, div_start, bat_sp\n", 1);
  const auto r = run_defense_experiment(c);
  ASSERT_EQ(r.rows.size(), kDefenseMethods.size() * kDefenseAttacks.size());
  for (const auto& row : r.rows) {
    const bool fcp = row.method.find("FCP") != std::string::npos;
    EXPECT_EQ(row.skipped, fcp) << row.method;
    if (!fcp) EXPECT_GT(row.n, 0u);
  }
  bool has_reattack_note = false;
  for (const auto& [k, v] : r.metadata) has_reattack_note |= k == "grad_attack";
  EXPECT_TRUE(has_reattack_note);
  EXPECT_EQ(render(r, ReportFormat::Csv), render(run_defense_experiment(c), ReportFormat::Csv));
}

TEST(DefenseExperimentTest, FcpRowsRun) {
  const auto c = tiny_config("defense", "methods = fcp, extra_fcp, bat_fcp\n", 1);
  const auto r = run_defense_experiment(c);
  for (const auto& row : r.rows) EXPECT_EQ(row.skipped, row.method.find("FCP") == std::string::npos) << row.method;
}
