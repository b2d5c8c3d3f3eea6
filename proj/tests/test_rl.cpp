#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "envrobust/featurize.hpp"
#include "envrobust/rl.hpp"
#include "test_support.hpp"

using namespace envrobust;
using namespace envrobust::rl;
using envrobust::testing::shipped_layout;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.horizon = 40;
  c.episodes_per_update = 2;
  c.hidden = {16};
  c.ppo.minibatch = 32;
  c.ppo.epochs = 2;
  return c;
}

RolloutBatch random_batch(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> g(0.0, 1.0);
  RolloutBatch b;
  b.obs_size = 0;
  b.actions.assign(n, 0);
  b.controls.assign(n, nn::Control::Joint);
  b.log_probs.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    b.values.push_back(g(rng));
    b.rewards.push_back(g(rng));
    b.dones.push_back(i + 1 == n || rng() % 7 == 0);
  }
  return b;
}

// A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}, written recursively.
double gae_recursive(const RolloutBatch& b, std::size_t t, double gamma, double lambda) {
  const bool last = b.dones[t] != 0;
  const double next_v = last ? 0.0 : b.values[t + 1];
  const double delta = b.rewards[t] + gamma * next_v - b.values[t];
  return delta + (last ? 0.0 : gamma * lambda * gae_recursive(b, t + 1, gamma, lambda));
}

}  // namespace

TEST(GaeTest, MatchesRecursiveReferenceExactly) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    RolloutBatch b = random_batch(rng, 200);
    gae_and_returns(b, 0.99, 0.95, false);
    for (std::size_t t = 0; t < b.size(); ++t) {
      EXPECT_EQ(b.advantages[t], gae_recursive(b, t, 0.99, 0.95));
      EXPECT_EQ(b.returns[t], b.advantages[t] + b.values[t]);
    }
  }
}

TEST(GaeTest, MatchesExplicitDiscountedSum) {
  std::mt19937_64 rng(2);
  RolloutBatch b = random_batch(rng, 300);
  const double gamma = 0.9, lambda = 0.8;
  gae_and_returns(b, gamma, lambda, false);
  for (std::size_t t = 0; t < b.size(); ++t) {
    double sum = 0.0, w = 1.0;
    for (std::size_t u = t; u < b.size(); ++u) {
      const double next_v = b.dones[u] ? 0.0 : b.values[u + 1];
      sum += w * (b.rewards[u] + gamma * next_v - b.values[u]);
      if (b.dones[u]) break;
      w *= gamma * lambda;
    }
    EXPECT_NEAR(b.advantages[t], sum, 1e-12);
  }
}

TEST(GaeTest, GammaZeroGivesOneStepAdvantage) {
  std::mt19937_64 rng(3);
  for (const double lambda : {0.0, 0.5, 1.0}) {
    RolloutBatch b = random_batch(rng, 50);
    gae_and_returns(b, 0.0, lambda, false);
    for (std::size_t t = 0; t < b.size(); ++t) EXPECT_EQ(b.advantages[t], b.rewards[t] - b.values[t]);
  }
}

TEST(GaeTest, ConstantRewardsClosedForm) {
  // One episode of length L with r = 1, V = 0: A_t = sum_{l < L-t} (gamma lambda)^l.
  const std::size_t L = 30;
  RolloutBatch b;
  b.rewards.assign(L, 1.0);
  b.values.assign(L, 0.0);
  b.dones.assign(L, 0);
  b.dones.back() = 1;
  b.actions.assign(L, 0);
  const double x = 0.99 * 0.95;
  gae_and_returns(b, 0.99, 0.95, false);
  for (std::size_t t = 0; t < L; ++t)
    EXPECT_NEAR(b.advantages[t], (1.0 - std::pow(x, static_cast<double>(L - t))) / (1.0 - x), 1e-12);
}

TEST(GaeTest, NormalizationGivesZeroMeanUnitVariance) {
  std::mt19937_64 rng(4);
  RolloutBatch b = random_batch(rng, 500);
  gae_and_returns(b, 0.99, 0.95, true);
  double mean = 0.0, var = 0.0;
  for (const double a : b.advantages) mean += a;
  mean /= 500.0;
  for (const double a : b.advantages) var += (a - mean) * (a - mean);
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_NEAR(var / 500.0, 1.0, 1e-6);
}

TEST(RolloutTest, DeterministicAndThreadIndependent) {
  const auto layout = shipped_layout("cross");
  const auto policy = initial_policy(layout, nn::HeadType::Joint, 5, small_config());
  RolloutSpec spec;
  spec.episodes = 5;
  spec.horizon = 60;
  spec.seed = 11;
  const auto a = collect_rollouts(policy, layout, InitDistribution::point_mass(), spec);
  const auto b = collect_rollouts(policy, layout, InitDistribution::point_mass(), spec);
  spec.exec = kernels::Exec::Serial;
  const auto c = collect_rollouts(policy, layout, InitDistribution::point_mass(), spec);
  a.validate();
  EXPECT_EQ(a.actions, b.actions);
  EXPECT_EQ(a.log_probs, b.log_probs);
  EXPECT_EQ(a.obs, c.obs);
  EXPECT_EQ(a.actions, c.actions);
  spec.seed = 12;
  EXPECT_NE(collect_rollouts(policy, layout, InitDistribution::point_mass(), spec).actions, a.actions);
}

TEST(RolloutTest, PointMassStartsEveryEpisodeFromStandardState) {
  const auto layout = shipped_layout("coordination_ring");
  const auto policy = initial_policy(layout, nn::HeadType::Joint, 5, small_config());
  RolloutSpec spec;
  spec.episodes = 4;
  spec.horizon = 30;
  const auto batch = collect_rollouts(policy, layout, InitDistribution::point_mass(), spec);
  const auto standard = featurize::encode(layout, gridworld::reset(layout));
  ASSERT_EQ(batch.episode_starts.size(), 4u);
  for (const std::size_t s : batch.episode_starts) {
    const auto row = batch.row(s);
    EXPECT_TRUE(std::equal(row.begin(), row.end(), standard.data.begin()));
    EXPECT_EQ(batch.dones[s + 29], 1);
    for (std::size_t t = s; t < s + 29; ++t) EXPECT_EQ(batch.dones[t], 0);
  }
  // Without shaping the rewards are the delivery rewards.
  for (std::size_t e = 0; e < 4; ++e) {
    double sum = 0.0;
    for (std::size_t t = 0; t < 30; ++t) sum += batch.rewards[batch.episode_starts[e] + t];
    EXPECT_EQ(sum, batch.episode_scores[e]);
  }
}

TEST(RolloutTest, LogProbsMatchFreshForwardPasses) {
  const auto layout = shipped_layout("cross");
  const auto policy = initial_policy(layout, nn::HeadType::Joint, 8, small_config());
  RolloutSpec spec;
  spec.episodes = 2;
  spec.horizon = 25;
  const auto batch = collect_rollouts(policy, layout, InitDistribution::point_mass(), spec);
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const auto out = policy.forward(batch.row(r));
    EXPECT_EQ(batch.log_probs[r], nn::log_prob(nn::to_double(out.logits), nn::Control::Joint, batch.actions[r]));
    EXPECT_EQ(batch.values[r], static_cast<double>(out.value));
  }
}

TEST(RolloutTest, InfeasibleOptionsAreSkipped) {
  const auto layout = shipped_layout("cross");
  const auto policy = initial_policy(layout, nn::HeadType::Joint, 1, small_config());
  const auto pot = layout.cells_of(gridworld::TileKind::Pot).front();
  InitDistribution init;
  init.options.push_back({gridworld::Perturbation{{gridworld::UnitPerturbation::onions_in_pot(pot, 1),
                                                   gridworld::UnitPerturbation::onions_in_pot(pot, 2)}},
                          1.0});
  init.options.push_back({gridworld::Perturbation{{gridworld::UnitPerturbation::onions_in_pot(pot, 2)}}, 1.0});
  EXPECT_THROW(init.validate(layout), FeasibilityError);
  RolloutSpec spec;
  spec.episodes = 6;
  spec.horizon = 5;
  const auto batch = collect_rollouts(policy, layout, init, spec);
  for (const std::size_t k : batch.episode_init) EXPECT_EQ(k, 1u);
}

TEST(InitDistributionTest, ValidatesWeights) {
  const auto layout = shipped_layout("cross");
  InitDistribution empty;
  EXPECT_THROW(empty.validate(layout), ConfigError);
  InitDistribution negative = InitDistribution::point_mass();
  negative.options[0].weight = -1.0;
  EXPECT_THROW(negative.validate(layout), ConfigError);
  EXPECT_TRUE(InitDistribution::point_mass().is_standard_point_mass());

  InitDistribution skewed = InitDistribution::uniform({{}, {}});
  skewed.options[0].weight = 0.0;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(skewed.sample(rng), 1u);
}

TEST(PpoLossTest, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 1.0);
  PpoConfig config;
  for (const nn::Control control : {nn::Control::Joint, nn::Control::Player0, nn::Control::Player1}) {
    std::array<double, nn::kJoint> z{};
    for (auto& v : z) v = g(rng);
    const int action = 20;
    // old log prob close to the current one keeps the ratio inside the clip range
    const double old_lp = nn::log_prob(z, control, action) + 0.05;
    std::array<double, nn::kJoint> dl{};
    double dv = 0.0;
    ppo_row_loss(z, 0.3, action, control, old_lp, 1.7, 0.9, config, dl, dv);
    EXPECT_NEAR(dv, config.vf_coef * (0.3 - 0.9), 1e-12);
    for (int k = 0; k < nn::kJoint; ++k) {
      auto zp = z, zm = z;
      zp[k] += 1e-6;
      zm[k] -= 1e-6;
      double d = 0.0;
      const double fd = (ppo_row_loss(zp, 0.3, action, control, old_lp, 1.7, 0.9, config, dl, d) -
                         ppo_row_loss(zm, 0.3, action, control, old_lp, 1.7, 0.9, config, dl, d)) /
                        2e-6;
      std::array<double, nn::kJoint> dl0{};
      ppo_row_loss(z, 0.3, action, control, old_lp, 1.7, 0.9, config, dl0, d);
      EXPECT_NEAR(fd, dl0[k], 1e-7);
    }
  }
}

TEST(PpoLossTest, ZeroAdvantageGivesZeroPolicyGradient) {
  std::array<double, nn::kJoint> z{};
  for (int k = 0; k < nn::kJoint; ++k) z[k] = 0.1 * k;
  PpoConfig config;
  config.ent_coef = 0.0;
  std::array<double, nn::kJoint> dl{};
  double dv = 0.0;
  ppo_row_loss(z, 1.0, 3, nn::Control::Joint, -3.0, 0.0, 1.0, config, dl, dv);
  for (const double d : dl) EXPECT_EQ(d, 0.0);
}

TEST(PpoLossTest, ClippedRatiosContributeNoPolicyGradient) {
  std::array<double, nn::kJoint> z{};
  for (int k = 0; k < nn::kJoint; ++k) z[k] = 0.05 * k;
  PpoConfig config;
  config.ent_coef = 0.0;
  const double lp = nn::log_prob(z, nn::Control::Joint, 7);
  std::array<double, nn::kJoint> dl{};
  double dv = 0.0;
  PpoStats stats;
  // ratio = e^0.5 > 1.2 with positive advantage: clipped.
  ppo_row_loss(z, 0.0, 7, nn::Control::Joint, lp - 0.5, 1.0, 0.0, config, dl, dv, &stats);
  for (const double d : dl) EXPECT_EQ(d, 0.0);
  EXPECT_EQ(stats.clip_fraction, 1.0);
  EXPECT_NEAR(stats.policy_loss, -1.2, 1e-12);
  // Same ratio with negative advantage: the unclipped term is the minimum, gradient flows.
  ppo_row_loss(z, 0.0, 7, nn::Control::Joint, lp - 0.5, -1.0, 0.0, config, dl, dv, &stats);
  EXPECT_GT(std::abs(dl[7]), 0.0);
  // ratio = e^-0.5 < 0.8 with negative advantage: clipped.
  ppo_row_loss(z, 0.0, 7, nn::Control::Joint, lp + 0.5, -1.0, 0.0, config, dl, dv, &stats);
  for (const double d : dl) EXPECT_EQ(d, 0.0);
}

TEST(PpoUpdateTest, SingleUpdateDecreasesSurrogateOnItsBatch) {
  const auto layout = shipped_layout("coordination_ring");
  auto cfg = small_config();
  auto policy = initial_policy(layout, nn::HeadType::Joint, 3, cfg);
  RolloutSpec spec;
  spec.episodes = 2;
  spec.horizon = 100;
  auto batch = collect_rollouts(policy, layout, InitDistribution::point_mass(), spec);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& r : batch.rewards) r = g(rng);  // synthetic signal
  gae_and_returns(batch, 0.99, 0.95);

  auto batch_loss = [&](const nn::PolicyParams& p) {
    double total = 0.0;
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const auto out = p.forward(batch.row(r));
      std::array<double, nn::kJoint> dl{};
      double dv = 0.0;
      total += ppo_row_loss(nn::to_double(out.logits), out.value, batch.actions[r], batch.controls[r],
                            batch.log_probs[r], batch.advantages[r], batch.returns[r], cfg.ppo, dl, dv);
    }
    return total / static_cast<double>(batch.size());
  };
  const double before = batch_loss(policy);
  PpoConfig ppo = cfg.ppo;
  ppo.epochs = 1;
  ppo.minibatch = batch.size();
  ppo.lr = 1e-3;
  nn::AdamState adam;
  ppo_update(policy, batch, ppo, adam, 1);
  EXPECT_LT(batch_loss(policy), before);
}

TEST(PpoUpdateTest, NanAdvantageAborts) {
  const auto layout = shipped_layout("cross");
  auto policy = initial_policy(layout, nn::HeadType::Joint, 3, small_config());
  RolloutSpec spec;
  spec.episodes = 1;
  spec.horizon = 10;
  auto batch = collect_rollouts(policy, layout, InitDistribution::point_mass(), spec);
  gae_and_returns(batch, 0.99, 0.95);
  batch.advantages[4] = std::nan("");
  nn::AdamState adam;
  EXPECT_THROW(ppo_update(policy, batch, PpoConfig{}, adam, 1), NumericalError);
}

TEST(TrainTest, SelfPlayIsDeterministicAndSeedSensitive) {
  const auto layout = shipped_layout("coordination_ring");
  const auto cfg = small_config();
  const auto a = train_self_play(layout, 400, 7, cfg);
  const auto b = train_self_play(layout, 400, 7, cfg);
  const auto c = train_self_play(layout, 400, 8, cfg);
  EXPECT_EQ(a.policy.params_hash(), b.policy.params_hash());
  EXPECT_NE(a.policy.params_hash(), c.policy.params_hash());
  EXPECT_EQ(a.policy.meta().steps, 400u);
  EXPECT_EQ(a.metrics.size(), 5u);
}

TEST(TrainTest, SerialAndParallelTrainingAgree) {
  const auto layout = shipped_layout("cross");
  auto cfg = small_config();
  const auto a = train_self_play(layout, 160, 3, cfg);
  cfg.exec = kernels::Exec::Serial;
  const auto b = train_self_play(layout, 160, 3, cfg);
  // Chunked and plain summation may differ in the last bit of the gradient.
  ASSERT_EQ(a.policy.num_params(), b.policy.num_params());
  for (std::size_t i = 0; i < a.policy.num_params(); ++i)
    EXPECT_NEAR(a.policy.params()[i], b.policy.params()[i], 1e-4);
}

TEST(TrainTest, HistoryIsMonotoneInSteps) {
  const auto layout = shipped_layout("coordination_ring");
  auto cfg = small_config();
  cfg.checkpoint_every = 160;
  const auto r = train_self_play(layout, 800, 2, cfg);
  ASSERT_GE(r.history.size(), 2u);
  for (std::size_t i = 1; i < r.history.size(); ++i)
    EXPECT_GT(r.history[i].meta().steps, r.history[i - 1].meta().steps);
  EXPECT_EQ(r.history.back().params_hash(), r.policy.params_hash());
}

TEST(TrainTest, PointMassDiversifiedStartEqualsSelfPlay) {
  const auto layout = shipped_layout("coordination_ring");
  const auto cfg = small_config();
  const auto sp = train_self_play(layout, 320, 21, cfg);
  const auto ds = train_div_start(layout, InitDistribution::point_mass(), 320, 21, cfg);
  EXPECT_TRUE(std::equal(sp.policy.params().begin(), sp.policy.params().end(), ds.policy.params().begin()));
}

TEST(TrainTest, ContinuedTrainingRecordsLineage) {
  const auto layout = shipped_layout("cross");
  const auto cfg = small_config();
  const auto first = train_self_play(layout, 80, 1, cfg);
  const auto second = train_ppo(first.policy, layout, InitDistribution::point_mass(), nullptr, 80, 2, cfg);
  EXPECT_EQ(second.policy.meta().steps, 160u);
  EXPECT_EQ(second.policy.meta().parent, first.policy.meta().id);
}

TEST(FcpTest, PartnerSamplingIsUniform) {
  constexpr int kEpisodes = 10000;
  std::array<int, PartnerPool::kSize> counts{};
  std::array<int, 2> players{};
  for (int e = 0; e < kEpisodes; ++e) {
    const auto a = fcp_assignment(99, static_cast<std::uint64_t>(e), PartnerPool::kSize);
    ++counts[a.partner];
    ++players[static_cast<std::size_t>(a.learner_player)];
  }
  const double p = 1.0 / PartnerPool::kSize;
  const double sigma = std::sqrt(kEpisodes * p * (1 - p));
  for (const int c : counts) EXPECT_LT(std::abs(c - kEpisodes * p), 3 * sigma);
  // 13 simultaneous 3-sigma checks would fail too often; the character split gets 4 sigma.
  EXPECT_LT(std::abs(players[0] - kEpisodes / 2.0), 4 * std::sqrt(kEpisodes * 0.25));
}

TEST(FcpTest, PartnersStayFrozenAndLearnerControlsOneCharacter) {
  const auto layout = shipped_layout("coordination_ring");
  const auto cfg = small_config();
  PartnerPool pool;
  for (std::uint64_t i = 0; i < PartnerPool::kSize; ++i)
    pool.partners.push_back(initial_policy(layout, nn::HeadType::Joint, 100 + i, cfg));
  std::vector<std::uint64_t> hashes;
  for (const auto& p : pool.partners) hashes.push_back(p.params_hash());

  const auto result = train_fcp(layout, pool, 240, 4, cfg);
  for (std::size_t i = 0; i < pool.partners.size(); ++i) EXPECT_EQ(pool.partners[i].params_hash(), hashes[i]);
  EXPECT_EQ(result.policy.arch().head, nn::HeadType::Factorized);

  RolloutSpec spec;
  spec.episodes = 6;
  spec.horizon = 10;
  spec.seed = 4;
  spec.pool = &pool;
  const auto batch = collect_rollouts(result.policy, layout, InitDistribution::point_mass(), spec);
  for (std::size_t e = 0; e < spec.episodes; ++e) {
    const auto a = fcp_assignment(4, e, pool.partners.size());
    const auto expected = a.learner_player == 0 ? nn::Control::Player0 : nn::Control::Player1;
    EXPECT_EQ(batch.controls[batch.episode_starts[e]], expected);
  }
}

TEST(FcpTest, PoolValidation) {
  const auto layout = shipped_layout("coordination_ring");
  PartnerPool pool;
  pool.partners.push_back(initial_policy(layout, nn::HeadType::Joint, 1, small_config()));
  EXPECT_THROW(pool.validate(layout), ConfigError);
  EXPECT_THROW(train_fcp(layout, pool, 80, 1, small_config()), ConfigError);
}

TEST(ShapingTest, AnnealsAndRewardsEvents) {
  ShapingConfig s{3.0, 3.0, 5.0, 1000};
  EXPECT_DOUBLE_EQ(s.scale(0), 1.0);
  EXPECT_DOUBLE_EQ(s.scale(500), 0.5);
  EXPECT_DOUBLE_EQ(s.scale(1000), 0.0);
  EXPECT_DOUBLE_EQ(ShapingConfig{}.scale(0), 0.0);

  const auto layout = shipped_layout("cross");
  gridworld::StepResult r;
  r.state = gridworld::reset(layout);
  r.events.push_back({0, gridworld::EventKind::OnionInPot, {}});
  r.events.push_back({1, gridworld::EventKind::SoupPickup, {}});
  EXPECT_DOUBLE_EQ(s.bonus(layout, r), 8.0);
  // A dish with no started pot earns nothing.
  r.events = {{0, gridworld::EventKind::DishPickup, {}}};
  r.state.players[0].held = gridworld::ItemKind::Dish;
  EXPECT_DOUBLE_EQ(s.bonus(layout, r), 0.0);
  r.state.pots.begin()->second.onion_count = 1;
  EXPECT_DOUBLE_EQ(s.bonus(layout, r), 3.0);
}

TEST(MetricsTest, CsvHasHeaderAndOneRowPerUpdate) {
  std::ostringstream out;
  write_metrics_csv(out, {MetricsRow{800, 20.0, 0.5, {}}, MetricsRow{1600, 40.0, 0.0, {}}});
  const std::string s = out.str();
  EXPECT_EQ(s.substr(0, s.find('\n')),
            "step,mean_score,shaping_scale,policy_loss,value_loss,entropy,approx_kl,clip_fraction");
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 3);
  EXPECT_NE(s.find("1600,40,0,"), std::string::npos);
}
