#include "envrobust/rl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "envrobust/featurize.hpp"
#include "envrobust/random.hpp"

namespace envrobust::rl {

using gridworld::Layout;
using gridworld::Perturbation;

// ---------------------------------------------------------------------------

InitDistribution InitDistribution::point_mass(Perturbation p) {
  InitDistribution d;
  d.options.push_back({std::move(p), 1.0});
  return d;
}

InitDistribution InitDistribution::uniform(const std::vector<Perturbation>& support) {
  InitDistribution d;
  for (const auto& p : support) d.options.push_back({p, 1.0});
  return d;
}

void InitDistribution::validate(const Layout& layout) const {
  if (options.empty()) throw ConfigError("initial-state distribution has no support");
  double total = 0.0;
  for (const auto& o : options) {
    if (!(o.weight >= 0.0) || !std::isfinite(o.weight)) throw ConfigError("initial-state weights must be nonnegative");
    total += o.weight;
    gridworld::check_feasible(layout, o.perturbation);
  }
  if (!(total > 0.0)) throw ConfigError("initial-state weights sum to zero");
}

std::size_t InitDistribution::sample(std::mt19937_64& rng) const {
  if (options.size() == 1) return 0;
  std::vector<double> w;
  w.reserve(options.size());
  for (const auto& o : options) w.push_back(o.weight);
  return sample_index(w, rng);
}

bool InitDistribution::is_standard_point_mass() const {
  return options.size() == 1 && options.front().perturbation.empty();
}

// ---------------------------------------------------------------------------

namespace {

std::array<double, nn::kJoint> joint_probs(const std::array<float, nn::kJoint>& logits) {
  return nn::softmax_t<float>(logits, 1.0).probs;
}

}  // namespace

int sample_joint(const std::array<float, nn::kJoint>& logits, std::mt19937_64& rng) {
  return static_cast<int>(sample_index(joint_probs(logits), rng));
}

std::array<double, gridworld::kNumActions> marginal(const std::array<float, nn::kJoint>& logits, int player) {
  const auto p = joint_probs(logits);
  std::array<double, gridworld::kNumActions> m{};
  for (int a = 0; a < nn::kJoint; ++a) {
    const int own = player == 0 ? a / gridworld::kNumActions : a % gridworld::kNumActions;
    m[static_cast<std::size_t>(own)] += p[static_cast<std::size_t>(a)];
  }
  return m;
}

// ---------------------------------------------------------------------------

double ShapingConfig::scale(std::uint64_t steps) const {
  if (!enabled() || steps >= anneal_steps) return 0.0;
  return 1.0 - static_cast<double>(steps) / static_cast<double>(anneal_steps);
}

double ShapingConfig::bonus(const Layout& layout, const gridworld::StepResult& result) const {
  using gridworld::EventKind;
  using gridworld::ItemKind;
  double b = 0.0;
  for (const auto& e : result.events) {
    switch (e.kind) {
      case EventKind::OnionInPot: b += onion_in_pot; break;
      case EventKind::SoupPickup: b += soup_pickup; break;
      case EventKind::DishPickup: {
        // Only useful dishes count: no more dishes around than started pots.
        int dishes = 0;
        for (const auto& p : result.state.players) dishes += p.held == ItemKind::Dish;
        for (const auto& [cell, item] : result.state.counters) dishes += item == ItemKind::Dish;
        int pots = 0;
        for (const auto& [cell, pot] : result.state.pots) pots += pot.onion_count > 0;
        if (dishes <= pots) b += dish_pickup;
        break;
      }
      default: break;
    }
  }
  (void)layout;
  return b;
}

// ---------------------------------------------------------------------------

PartnerPool PartnerPool::load(const std::vector<std::string>& paths) {
  PartnerPool pool;
  for (const auto& p : paths) pool.partners.push_back(nn::load_checkpoint(p));
  return pool;
}

void PartnerPool::validate(const Layout& layout) const {
  if (partners.size() != kSize)
    throw ConfigError(fmt::format("partner pool needs {} checkpoints, got {}", kSize, partners.size()));
  for (const auto& p : partners) {
    if (p.arch().width != layout.width || p.arch().height != layout.height)
      throw ConfigError(fmt::format("partner {} was trained on a {}x{} grid, layout is {}x{}", p.meta().id,
                                    p.arch().width, p.arch().height, layout.width, layout.height));
  }
}

FcpAssignment fcp_assignment(std::uint64_t seed, std::uint64_t episode, std::size_t pool_size) {
  auto rng = make_rng(seed, {tag(Stream::Partner), episode});
  FcpAssignment a;
  a.partner = static_cast<std::size_t>(uniform_below(rng, pool_size));
  a.learner_player = static_cast<int>(uniform_below(rng, 2));
  return a;
}

void RolloutBatch::validate() const {
  const std::size_t n = actions.size();
  if (obs.size() != n * obs_size || controls.size() != n || log_probs.size() != n || values.size() != n ||
      rewards.size() != n || dones.size() != n)
    throw std::logic_error("rollout batch arrays disagree in length");
  if (!advantages.empty() && (advantages.size() != n || returns.size() != n))
    throw std::logic_error("rollout batch advantages disagree in length");
  if (episode_starts.size() != episode_scores.size()) throw std::logic_error("episode bookkeeping mismatch");
}

namespace {

std::size_t sample_feasible(const Layout& layout, const InitDistribution& init, std::mt19937_64& rng) {
  constexpr int kAttempts = 1000;
  for (int i = 0; i < kAttempts; ++i) {
    const std::size_t k = init.sample(rng);
    const auto& p = init.options[k].perturbation;
    if (p.empty() || gridworld::is_feasible(layout, p)) return k;
    spdlog::warn("skipping infeasible initial state {}", gridworld::to_string(p));
  }
  throw FeasibilityError("no feasible initial state after repeated sampling");
}

void run_episode(const nn::PolicyParams& policy, const Layout& layout, const InitDistribution& init,
                 const RolloutSpec& spec, std::size_t e, RolloutBatch& b) {
  const std::uint64_t global = spec.first_episode + e;
  auto init_rng = make_rng(spec.seed, {tag(Stream::InitialState), global});
  auto rng = make_rng(spec.seed, {tag(Stream::Rollout), global});
  const std::size_t option = sample_feasible(layout, init, init_rng);
  const auto& start = init.options[option].perturbation;

  const nn::PolicyParams* partner = nullptr;
  int learner = -1;
  if (spec.pool != nullptr) {
    const auto a = fcp_assignment(spec.seed, global, spec.pool->partners.size());
    partner = &spec.pool->partners[a.partner];
    learner = a.learner_player;
  }
  const nn::Control control =
      learner < 0 ? nn::Control::Joint : (learner == 0 ? nn::Control::Player0 : nn::Control::Player1);

  nn::Workspace<float> ws;
  nn::Workspace<float> partner_ws;
  gridworld::WorldState state = gridworld::reset(layout, start.empty() ? nullptr : &start);
  const std::size_t base = e * static_cast<std::size_t>(spec.horizon);
  double score = 0.0;
  for (int t = 0; t < spec.horizon; ++t) {
    const std::size_t r = base + static_cast<std::size_t>(t);
    std::span<float> x(b.obs.data() + r * b.obs_size, b.obs_size);
    featurize::encode_into(layout, state, x);
    const auto& out = policy.forward(x, ws);
    int action = 0;
    if (partner == nullptr) {
      action = sample_joint(out.logits, rng);
    } else {
      const auto own = marginal(out.logits, learner);
      const int a_own = static_cast<int>(sample_index(own, rng));
      const auto& pout = partner->forward(x, partner_ws);
      const int a_other = static_cast<int>(sample_index(marginal(pout.logits, 1 - learner), rng));
      action = learner == 0 ? a_own * gridworld::kNumActions + a_other : a_other * gridworld::kNumActions + a_own;
    }
    const auto result = gridworld::step(layout, state, gridworld::joint_action_from_index(action));
    double reward = result.reward;
    if (spec.shaping_scale != 0.0) reward += spec.shaping_scale * spec.shaping.bonus(layout, result);
    score += result.reward;

    b.actions[r] = static_cast<std::uint8_t>(action);
    b.controls[r] = control;
    b.log_probs[r] = nn::log_prob(nn::to_double(out.logits), control, action);
    b.values[r] = static_cast<double>(out.value);
    b.rewards[r] = reward;
    b.dones[r] = t + 1 == spec.horizon;
    state = result.state;
  }
  b.episode_starts[e] = base;
  b.episode_scores[e] = score;
  b.episode_init[e] = option;
}

}  // namespace

RolloutBatch collect_rollouts(const nn::PolicyParams& policy, const Layout& layout, const InitDistribution& init,
                              const RolloutSpec& spec) {
  if (spec.horizon < 1) throw ConfigError("horizon must be at least 1");
  if (init.options.empty()) throw ConfigError("initial-state distribution has no support");
  if (policy.arch().input_size() != featurize::obs_size(layout))
    throw ConfigError("policy input size does not match the layout");

  const std::size_t rows = spec.episodes * static_cast<std::size_t>(spec.horizon);
  RolloutBatch b;
  b.obs_size = featurize::obs_size(layout);
  b.obs.assign(rows * b.obs_size, 0.0f);
  b.actions.assign(rows, 0);
  b.controls.assign(rows, nn::Control::Joint);
  b.log_probs.assign(rows, 0.0);
  b.values.assign(rows, 0.0);
  b.rewards.assign(rows, 0.0);
  b.dones.assign(rows, 0);
  b.episode_starts.assign(spec.episodes, 0);
  b.episode_scores.assign(spec.episodes, 0.0);
  b.episode_init.assign(spec.episodes, 0);

  const auto n = static_cast<long>(spec.episodes);
  const bool parallel = spec.exec == kernels::Exec::Parallel;
#pragma omp parallel for schedule(dynamic, 1) if (parallel)
  for (long e = 0; e < n; ++e) run_episode(policy, layout, init, spec, static_cast<std::size_t>(e), b);
  return b;
}

void gae_and_returns(RolloutBatch& batch, double gamma, double lambda, bool normalize) {
  const std::size_t n = batch.size();
  batch.advantages.assign(n, 0.0);
  batch.returns.assign(n, 0.0);
  double next_adv = 0.0;
  double next_value = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    if (batch.dones[i]) {
      next_adv = 0.0;
      next_value = 0.0;
    }
    const double delta = batch.rewards[i] + gamma * next_value - batch.values[i];
    next_adv = delta + gamma * lambda * next_adv;
    batch.advantages[i] = next_adv;
    batch.returns[i] = next_adv + batch.values[i];
    next_value = batch.values[i];
  }
  if (!normalize || n == 0) return;
  const double mean = std::accumulate(batch.advantages.begin(), batch.advantages.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (const double a : batch.advantages) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  for (double& a : batch.advantages) a = (a - mean) / (sd + 1e-8);
}

// ---------------------------------------------------------------------------

double ppo_row_loss(const std::array<double, nn::kJoint>& logits, double value, int action, nn::Control control,
                    double old_log_prob, double advantage, double ret, const PpoConfig& config,
                    std::span<double> dlogits, double& dvalue, PpoStats* stats) {
  std::array<double, nn::kJoint> dlp{};
  std::array<double, nn::kJoint> dh{};
  const double lp = nn::log_prob(logits, control, action, dlp);
  const double h = nn::entropy(logits, control, dh);
  const double log_ratio = lp - old_log_prob;
  const double ratio = std::exp(log_ratio);
  const double s1 = ratio * advantage;
  const double s2 = std::clamp(ratio, 1.0 - config.clip, 1.0 + config.clip) * advantage;
  const double policy_loss = -std::min(s1, s2);
  // When s2 < s1 the ratio sits outside the clip range and the gradient vanishes.
  const double dpolicy = s1 <= s2 ? -s1 : 0.0;  // d/d(log prob)
  const double err = value - ret;
  const double value_loss = 0.5 * err * err;

  for (int k = 0; k < nn::kJoint; ++k)
    dlogits[static_cast<std::size_t>(k)] =
        dpolicy * dlp[static_cast<std::size_t>(k)] - config.ent_coef * dh[static_cast<std::size_t>(k)];
  dvalue = config.vf_coef * err;

  const double loss = policy_loss + config.vf_coef * value_loss - config.ent_coef * h;
  if (stats != nullptr) {
    stats->policy_loss = policy_loss;
    stats->value_loss = value_loss;
    stats->entropy = h;
    stats->approx_kl = (ratio - 1.0) - log_ratio;
    stats->clip_fraction = std::abs(ratio - 1.0) > config.clip ? 1.0 : 0.0;
    stats->total_loss = loss;
  }
  return loss;
}

PpoStats ppo_update(nn::PolicyParams& policy, const RolloutBatch& batch, const PpoConfig& config,
                    nn::AdamState& adam, std::uint64_t seed, kernels::Exec exec) {
  batch.validate();
  const std::size_t n = batch.size();
  if (n == 0) throw ConfigError("empty rollout batch");
  if (batch.advantages.size() != n) throw ConfigError("rollout batch has no advantages");
  if (config.minibatch == 0 || config.epochs < 1) throw ConfigError("bad PPO minibatch or epoch count");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::vector<double> grad;
  std::vector<PpoStats> row_stats;
  PpoStats total;
  std::size_t counted = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[uniform_below(rng, i + 1)]);
    for (std::size_t start = 0; start < n; start += config.minibatch) {
      const std::size_t m = std::min(config.minibatch, n - start);
      row_stats.assign(m, PpoStats{});
      auto input = [&](std::size_t r, std::vector<float>&) { return batch.row(order[start + r]); };
      auto loss = [&](std::size_t r, const nn::Output<float>& out, std::span<float> dl, float& dv) {
        const std::size_t i = order[start + r];
        std::array<double, nn::kJoint> g{};
        double dvalue = 0.0;
        const double l = ppo_row_loss(nn::to_double(out.logits), static_cast<double>(out.value), batch.actions[i],
                                      batch.controls[i], batch.log_probs[i], batch.advantages[i], batch.returns[i],
                                      config, g, dvalue, &row_stats[r]);
        for (int k = 0; k < nn::kJoint; ++k) dl[static_cast<std::size_t>(k)] = static_cast<float>(g[static_cast<std::size_t>(k)]);
        dv = static_cast<float>(dvalue);
        return l;
      };
      kernels::train_step(policy, m, static_cast<double>(m), input, loss, adam, config.lr, config.max_grad_norm, grad,
                          exec);
      for (const auto& s : row_stats) {
        total.policy_loss += s.policy_loss;
        total.value_loss += s.value_loss;
        total.entropy += s.entropy;
        total.approx_kl += s.approx_kl;
        total.clip_fraction += s.clip_fraction;
        total.total_loss += s.total_loss;
      }
      counted += m;
    }
  }
  const double d = static_cast<double>(counted);
  total.policy_loss /= d;
  total.value_loss /= d;
  total.entropy /= d;
  total.approx_kl /= d;
  total.clip_fraction /= d;
  total.total_loss /= d;
  return total;
}

// ---------------------------------------------------------------------------

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << "step,mean_score,shaping_scale,policy_loss,value_loss,entropy,approx_kl,clip_fraction\n";
  for (const auto& r : rows)
    out << fmt::format("{},{:.6g},{:.6g},{:.6g},{:.6g},{:.6g},{:.6g},{:.6g}\n", r.step, r.mean_score, r.shaping_scale,
                       r.stats.policy_loss, r.stats.value_loss, r.stats.entropy, r.stats.approx_kl,
                       r.stats.clip_fraction);
}

namespace {

void stamp(nn::PolicyParams& p, std::uint64_t seed, std::uint64_t steps, const std::string& parent) {
  p.meta().seed = seed;
  p.meta().steps = steps;
  p.meta().parent = parent;
  p.meta().id = fmt::format("{:016x}", p.params_hash());
}

}  // namespace

TrainResult train_ppo(nn::PolicyParams policy, const Layout& layout, const InitDistribution& init,
                      const PartnerPool* pool, std::uint64_t total_steps, std::uint64_t seed,
                      const TrainConfig& config) {
  if (policy.arch().width != layout.width || policy.arch().height != layout.height)
    throw ConfigError("policy architecture does not match the layout");
  if (config.horizon < 1 || config.episodes_per_update < 1) throw ConfigError("bad horizon or episodes per update");
  init.validate(layout);
  if (pool != nullptr) pool->validate(layout);

  const std::uint64_t base_steps = policy.meta().steps;
  const std::string parent = policy.meta().id;
  const auto horizon = static_cast<std::uint64_t>(config.horizon);

  TrainResult result;
  nn::AdamState adam;
  std::uint64_t trained = 0;
  std::uint64_t episodes = 0;
  std::uint64_t next_snapshot = config.checkpoint_every;
  for (std::uint64_t iter = 0;; ++iter) {
    // Budgets are spent in whole episodes; a budget below one episode still runs one.
    std::uint64_t n_ep = std::min<std::uint64_t>(config.episodes_per_update, (total_steps - trained) / horizon);
    if (n_ep == 0) {
      if (trained > 0 || total_steps == 0) break;
      n_ep = 1;
    }
    RolloutSpec spec;
    spec.episodes = n_ep;
    spec.horizon = config.horizon;
    spec.seed = seed;
    spec.first_episode = episodes;
    spec.shaping = config.shaping;
    spec.shaping_scale = config.shaping.scale(trained);
    spec.pool = pool;
    spec.exec = config.exec;
    RolloutBatch batch = collect_rollouts(policy, layout, init, spec);
    for (double& r : batch.rewards) r *= config.ppo.reward_scale;
    gae_and_returns(batch, config.ppo.gamma, config.ppo.lambda);

    PpoConfig ppo = config.ppo;
    if (config.anneal_lr && total_steps > 0)
      ppo.lr *= 1.0 - static_cast<double>(trained) / static_cast<double>(total_steps);
    MetricsRow row;
    row.stats = ppo_update(policy, batch, ppo, adam, derive_seed(seed, {tag(Stream::Shuffle), iter}), config.exec);
    trained += batch.size();
    episodes += n_ep;
    row.step = base_steps + trained;
    row.mean_score = std::accumulate(batch.episode_scores.begin(), batch.episode_scores.end(), 0.0) /
                     static_cast<double>(n_ep);
    row.shaping_scale = spec.shaping_scale;
    result.metrics.push_back(row);
    spdlog::debug("step {} score {:.1f} entropy {:.3f} kl {:.4f}", row.step, row.mean_score, row.stats.entropy,
                  row.stats.approx_kl);

    if (config.checkpoint_every > 0 && trained >= next_snapshot && trained < total_steps) {
      nn::PolicyParams snap = policy;
      stamp(snap, seed, base_steps + trained, parent);
      result.history.push_back(std::move(snap));
      while (next_snapshot <= trained) next_snapshot += config.checkpoint_every;
    }
    if (trained >= total_steps) break;
  }
  stamp(policy, seed, base_steps + trained, parent);
  result.history.push_back(policy);
  result.policy = std::move(policy);
  return result;
}

nn::PolicyParams initial_policy(const Layout& layout, nn::HeadType head, std::uint64_t seed,
                                const TrainConfig& config) {
  auto p = nn::PolicyParams::initialize(nn::architecture_for(layout, config.hidden, head),
                                        derive_seed(seed, {tag(Stream::Init)}));
  stamp(p, seed, 0, "");
  return p;
}

TrainResult train_self_play(const Layout& layout, std::uint64_t total_steps, std::uint64_t seed,
                            const TrainConfig& config) {
  return train_ppo(initial_policy(layout, nn::HeadType::Joint, seed, config), layout, InitDistribution::point_mass(),
                   nullptr, total_steps, seed, config);
}

TrainResult train_div_start(const Layout& layout, const InitDistribution& init, std::uint64_t total_steps,
                            std::uint64_t seed, const TrainConfig& config) {
  return train_ppo(initial_policy(layout, nn::HeadType::Joint, seed, config), layout, init, nullptr, total_steps,
                   seed, config);
}

TrainResult train_fcp(const Layout& layout, const PartnerPool& pool, std::uint64_t total_steps, std::uint64_t seed,
                      const TrainConfig& config) {
  return train_ppo(initial_policy(layout, nn::HeadType::Factorized, seed, config), layout,
                   InitDistribution::point_mass(), &pool, total_steps, seed, config);
}

PartnerPool build_partner_pool(const Layout& layout, std::uint64_t steps_per_partner, std::uint64_t seed,
                               const TrainConfig& config) {
  constexpr int kSeeds = 4;
  PartnerPool pool;
  for (int j = 0; j < kSeeds; ++j) {
    TrainConfig cfg = config;
    cfg.checkpoint_every = std::max<std::uint64_t>(1, steps_per_partner / 3);
    const std::uint64_t partner_seed = derive_seed(seed, {tag(Stream::Partner), static_cast<std::uint64_t>(j)});
    auto run = train_self_play(layout, steps_per_partner, partner_seed, cfg);
    const auto& h = run.history;
    // Early, mid and final ability levels.
    const std::size_t early = 0;
    const std::size_t mid = h.size() >= 3 ? h.size() - 2 : h.size() - 1;
    for (const std::size_t k : {early, mid, h.size() - 1}) pool.partners.push_back(h[k]);
    spdlog::info("partner {} trained: final score {:.1f}", j,
                 run.metrics.empty() ? 0.0 : run.metrics.back().mean_score);
  }
  return pool;
}

}  // namespace envrobust::rl
