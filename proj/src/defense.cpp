#include "envrobust/defense.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <type_traits>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "envrobust/config.hpp"
#include "envrobust/random.hpp"

namespace envrobust::defense {

using gridworld::Layout;
using gridworld::Perturbation;

void BatConfig::validate() const {
  if (top_adversarial < 0 || random_states < 0) throw ConfigError("BAT state counts must be non-negative");
  if (epsilon < 1) throw ConfigError("BAT epsilon must be at least 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative");
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (minibatch < 1) throw ConfigError("minibatch must be at least 1");
  if (!(max_grad_norm >= 0.0)) throw ConfigError("max_grad_norm must be non-negative");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
  if (trajectories < 2) throw ConfigError("BAT needs at least two trajectories to split");
  if (horizon < 1) throw ConfigError("horizon must be at least 1");
  for (const double w : init_weights)
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("init weights must be finite and non-negative");
}

BatConfig parse_bat_config(std::istream& in) {
  auto kv = KeyValues::parse(in, "bat config");
  BatConfig c;
  c.top_adversarial = static_cast<int>(kv.get_int("top_adversarial", c.top_adversarial));
  c.random_states = static_cast<int>(kv.get_int("random_states", c.random_states));
  c.epsilon = static_cast<int>(kv.get_int("epsilon", c.epsilon));
  c.temperature = kv.get_double("temperature", c.temperature);
  c.alpha = kv.get_double("alpha", c.alpha);
  c.beta = kv.get_double("beta", c.beta);
  c.lr = kv.get_double("lr", c.lr);
  c.epochs = static_cast<int>(kv.get_int("epochs", c.epochs));
  c.minibatch = kv.get_uint("minibatch", c.minibatch);
  c.max_grad_norm = kv.get_double("max_grad_norm", c.max_grad_norm);
  c.train_fraction = kv.get_double("train_fraction", c.train_fraction);
  c.trajectories = static_cast<int>(kv.get_int("trajectories", c.trajectories));
  c.horizon = static_cast<int>(kv.get_int("horizon", c.horizon));
  c.finetune_steps = kv.get_uint("finetune_steps", c.finetune_steps);
  c.init_weights = kv.get_double_list("init_weights", c.init_weights);
  kv.finish();
  c.validate();
  return c;
}

std::vector<Perturbation> bat_perturbations(const Layout& layout, const attack::AttackResult& adversarial,
                                            const BatConfig& config, std::uint64_t seed) {
  config.validate();
  if (!adversarial.layout.empty() && adversarial.layout != layout.name)
    throw ConfigError("adversarial states were generated on layout " + adversarial.layout + ", not " + layout.name);
  std::vector<Perturbation> out;
  std::set<std::string> seen;  // canonical text form
  for (const auto& s : adversarial.states) {
    if (static_cast<int>(out.size()) == config.top_adversarial) break;
    const auto p = s.perturbation.canonical();
    if (!gridworld::is_feasible(layout, p))
      throw FeasibilityError("adversarial state " + gridworld::to_string(p) + " is infeasible on " + layout.name);
    if (seen.insert(gridworld::to_string(p)).second) out.push_back(p);
  }
  if (static_cast<int>(out.size()) < config.top_adversarial)
    spdlog::warn("only {} adversarial states available, wanted {}", out.size(), config.top_adversarial);
  if (config.random_states > 0) {
    // Draw extra candidates so that collisions with the adversarial states can be skipped.
    const int draw = config.random_states + static_cast<int>(out.size());
    const auto random = attack::random_attack(layout, config.epsilon, draw, false, nullptr, 1.0,
                                              derive_seed(seed, {tag(Stream::RandomStates)}));
    int added = 0;
    for (const auto& s : random.states) {
      if (added == config.random_states) break;
      const auto p = s.perturbation.canonical();
      if (seen.insert(gridworld::to_string(p)).second) {
        out.push_back(p);
        ++added;
      }
    }
  }
  return out;
}

rl::InitDistribution bat_init_distribution(const std::vector<Perturbation>& perturbations, const BatConfig& config) {
  std::vector<Perturbation> support{Perturbation{}};
  support.insert(support.end(), perturbations.begin(), perturbations.end());
  auto dist = rl::InitDistribution::uniform(support);
  if (!config.init_weights.empty()) {
    if (config.init_weights.size() != support.size())
      throw ConfigError(fmt::format("init_weights has {} entries but the BAT support has {}",
                                    config.init_weights.size(), support.size()));
    for (std::size_t i = 0; i < support.size(); ++i) dist.options[i].weight = config.init_weights[i];
  }
  return dist;
}

void DistillDataset::perturbed_row(const Layout& layout, std::size_t r, std::size_t p, std::span<float> out) const {
  const auto src = row(r);
  std::copy(src.begin(), src.end(), out.begin());
  deltas[p].apply(layout, out);
}

DistillDataset build_distill_dataset(const nn::PolicyParams& teacher, const Layout& layout,
                                     const std::vector<Perturbation>& perturbations, const BatConfig& config,
                                     std::uint64_t seed, kernels::Exec exec) {
  config.validate();
  DistillDataset d;
  d.obs_size = featurize::obs_size(layout);
  d.temperature = config.temperature;
  d.perturbations = perturbations;
  for (const auto& p : perturbations) d.deltas.push_back(featurize::env_delta(layout, p));

  const auto trajs = attack::collect_attack_trajectories(teacher, layout, config.trajectories, config.horizon,
                                                         derive_seed(seed, {tag(Stream::Dataset)}), exec);
  std::size_t rows = 0;
  for (const auto& t : trajs) rows += t.steps.size();
  d.obs.resize(rows * d.obs_size);
  d.trajectory.reserve(rows);
  for (std::size_t i = 0, r = 0; i < trajs.size(); ++i)
    for (const auto& st : trajs[i].steps) {
      featurize::encode_into(layout, st.state, std::span<float>(d.obs).subspan(r * d.obs_size, d.obs_size));
      d.trajectory.push_back(i);
      ++r;
    }

  std::vector<nn::Output<float>> outs(rows);
  kernels::forward_batch(teacher, rows, [&](std::size_t r, std::vector<float>&) { return d.row(r); },
                         std::span<nn::Output<float>>(outs), exec);
  d.teacher_probs.resize(rows);
  d.tempered_probs.resize(rows);
  d.teacher_values.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    d.teacher_probs[r] = nn::softmax_t(outs[r].logits, 1.0).probs;
    d.tempered_probs[r] = nn::softmax_t(outs[r].logits, config.temperature).probs;
    d.teacher_values[r] = static_cast<double>(outs[r].value);
  }

  // Whole trajectories go to one side of the split.
  std::vector<std::size_t> order(trajs.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed, {tag(Stream::Split)});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_below(rng, i)]);
  const auto n = static_cast<double>(trajs.size());
  const auto n_train = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(config.train_fraction * n)), 1,
                                               trajs.size() - 1);
  std::vector<bool> is_train(trajs.size(), false);
  for (std::size_t i = 0; i < n_train; ++i) is_train[order[i]] = true;
  for (std::size_t r = 0; r < rows; ++r) (is_train[d.trajectory[r]] ? d.train_rows : d.val_rows).push_back(r);
  spdlog::info("distillation dataset: {} rows ({} train, {} validation), {} perturbations", rows,
               d.train_rows.size(), d.val_rows.size(), perturbations.size());
  return d;
}

namespace {

template <class T>
struct LossWorkspace {
  nn::Workspace<T> net;
  std::vector<float> perturbed;
  std::vector<T> input;
  std::array<T, nn::kJoint> dlogits{};
};

// KL(target || softmax(logits)); d/dlogits = softmax(logits) - target.
template <class T>
double kl_and_grad(const std::array<double, nn::kJoint>& target, const std::array<T, nn::kJoint>& logits,
                   std::array<T, nn::kJoint>& dlogits, double weight) {
  const auto q = nn::softmax_t(logits, 1.0);
  nn::ActionDistribution p;
  p.probs = target;
  for (int a = 0; a < nn::kJoint; ++a) {
    const auto i = static_cast<std::size_t>(a);
    dlogits[i] = static_cast<T>(weight * (q.probs[i] - target[i]));
  }
  return nn::kl_divergence(p, q);
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

template <class T>
std::span<const T> as_input(std::span<const float> x, std::vector<T>& buf) {
  if constexpr (std::is_same_v<T, float>) {
    return x;
  } else {
    buf.assign(x.begin(), x.end());
    return buf;
  }
}

template <class T>
KickstartTerms row_loss(const nn::PolicyNetwork<T>& student, const Layout& layout, const DistillDataset& data,
                        std::size_t r, const BatConfig& config, std::span<double> grad, LossWorkspace<T>& ws) {
  const bool want_grad = !grad.empty();
  KickstartTerms t;
  const double v_teacher = data.teacher_values[r];

  const auto x = as_input<T>(data.row(r), ws.input);
  const auto& out = student.forward(x, ws.net);
  t.original = kl_and_grad(data.teacher_probs[r], out.logits, ws.dlogits, 1.0);
  const double dv = static_cast<double>(out.value) - v_teacher;
  t.original += std::abs(dv);
  if (want_grad) student.backward(x, ws.net, ws.dlogits, static_cast<T>(sign(dv)), grad, {});

  const std::size_t n_p = data.deltas.size();
  if (n_p > 0 && config.beta > 0.0) {
    const double w = config.beta / static_cast<double>(n_p);
    ws.perturbed.resize(data.obs_size);
    double sum = 0.0;
    for (std::size_t p = 0; p < n_p; ++p) {
      data.perturbed_row(layout, r, p, ws.perturbed);
      const auto xp = as_input<T>(ws.perturbed, ws.input);
      const auto& o = student.forward(xp, ws.net);
      sum += kl_and_grad(data.tempered_probs[r], o.logits, ws.dlogits, w);
      const double gap = static_cast<double>(o.value) - v_teacher;
      const double excess = std::abs(gap) - config.alpha * std::abs(v_teacher);
      double dvalue = 0.0;
      if (excess > 0.0) {
        sum += excess;
        dvalue = w * sign(gap);
      }
      if (want_grad) student.backward(xp, ws.net, ws.dlogits, static_cast<T>(dvalue), grad, {});
    }
    t.perturbed = sum / static_cast<double>(n_p);
  } else if (n_p > 0) {
    // beta = 0: the perturbed samples carry no weight and are skipped entirely.
    t.perturbed = 0.0;
  }
  t.total = t.original + config.beta * t.perturbed;
  return t;
}

// Sum of row terms over `rows`, in the deterministic chunk order.
KickstartTerms sum_terms(const nn::PolicyParams& student, const Layout& layout, const DistillDataset& data,
                         const std::vector<std::size_t>& rows, std::size_t begin, std::size_t end,
                         const BatConfig& config, std::span<double> grad, kernels::Exec exec) {
  // The scalar channel of chunked_reduce carries the total; the other two
  // terms ride in two extra accumulator slots after the gradient.
  const std::size_t n_params = grad.empty() ? 0 : grad.size();
  std::vector<double> acc(n_params + 2, 0.0);
  auto fn = [&](std::size_t i, LossWorkspace<float>& ws, std::span<double> a) -> double {
    const auto t = row_loss(student, layout, data, rows[begin + i], config, a.first(n_params), ws);
    a[n_params] += t.original;
    a[n_params + 1] += t.perturbed;
    return t.total;
  };
  KickstartTerms out;
  out.total = kernels::chunked_reduce<LossWorkspace<float>>(end - begin, acc.size(), fn, acc, exec);
  out.original = acc[n_params];
  out.perturbed = acc[n_params + 1];
  if (n_params > 0) std::copy(acc.begin(), acc.begin() + static_cast<long>(n_params), grad.begin());
  return out;
}

KickstartTerms scaled(KickstartTerms t, double denom) {
  t.original /= denom;
  t.perturbed /= denom;
  t.total /= denom;
  return t;
}

}  // namespace

template <class T>
KickstartTerms kickstart_loss(const nn::PolicyNetwork<T>& student, const Layout& layout, const DistillDataset& data,
                              std::size_t r, const BatConfig& config, std::span<double> grad) {
  if (r >= data.size()) throw std::out_of_range("distillation row out of range");
  LossWorkspace<T> ws;
  return row_loss(student, layout, data, r, config, grad, ws);
}

template KickstartTerms kickstart_loss(const nn::PolicyNetwork<float>&, const Layout&, const DistillDataset&,
                                       std::size_t, const BatConfig&, std::span<double>);
template KickstartTerms kickstart_loss(const nn::PolicyNetwork<double>&, const Layout&, const DistillDataset&,
                                       std::size_t, const BatConfig&, std::span<double>);

KickstartTerms kickstart_loss_mean(const nn::PolicyParams& student, const Layout& layout, const DistillDataset& data,
                                   const std::vector<std::size_t>& rows, const BatConfig& config,
                                   kernels::Exec exec) {
  if (rows.empty()) return {};
  const auto t = sum_terms(student, layout, data, rows, 0, rows.size(), config, {}, exec);
  return scaled(t, static_cast<double>(rows.size()));
}

void write_kickstart_csv(std::ostream& out, const KickstartReport& report) {
  out << "epoch,train_lo,train_lp,train_loss,val_lo,val_lp,val_loss,selected\n";
  for (const auto& e : report.epochs)
    out << fmt::format("{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{}\n", e.epoch, e.train.original,
                       e.train.perturbed, e.train.total, e.val.original, e.val.perturbed, e.val.total,
                       e.epoch == report.selected_epoch ? 1 : 0);
}

KickstartResult train_kickstart(const nn::PolicyParams& teacher, const Layout& layout, const DistillDataset& data,
                                const BatConfig& config, std::uint64_t seed, kernels::Exec exec) {
  config.validate();
  if (data.train_rows.empty() || data.val_rows.empty()) throw ConfigError("dataset split has an empty side");
  if (teacher.arch().input_size() != data.obs_size) throw ConfigError("teacher does not match the dataset layout");

  nn::PolicyParams student = teacher;
  KickstartResult result{student, {}};
  auto evaluate = [&](int epoch) {
    EpochLoss e;
    e.epoch = epoch;
    e.train = kickstart_loss_mean(student, layout, data, data.train_rows, config, exec);
    e.val = kickstart_loss_mean(student, layout, data, data.val_rows, config, exec);
    if (!std::isfinite(e.train.total) || !std::isfinite(e.val.total))
      throw NumericalError(fmt::format("non-finite kick-start loss at epoch {}", epoch));
    spdlog::info("kick-start epoch {}: train {:.5f} (L_o {:.5f}, L_p {:.5f}) val {:.5f}", epoch, e.train.total,
                 e.train.original, e.train.perturbed, e.val.total);
    result.report.epochs.push_back(e);
    if (epoch == 0 || e.val.total < result.report.selected_val_loss) {
      result.report.selected_epoch = epoch;
      result.report.selected_val_loss = e.val.total;
      result.student = student;
    }
  };
  evaluate(0);

  nn::AdamState adam;
  std::vector<double> grad(student.num_params());
  std::vector<std::size_t> order = data.train_rows;
  const double max_norm = config.max_grad_norm > 0.0 ? config.max_grad_norm : std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    auto rng = make_rng(seed, {tag(Stream::Shuffle), static_cast<std::uint64_t>(epoch)});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_below(rng, i)]);
    for (std::size_t b = 0; b < order.size(); b += config.minibatch) {
      const std::size_t e = std::min(order.size(), b + config.minibatch);
      const auto t = sum_terms(student, layout, data, order, b, e, config, grad, exec);
      const double denom = static_cast<double>(e - b);
      for (auto& g : grad) g /= denom;
      const double norm = nn::clip_grad_norm(grad, max_norm);
      if (!std::isfinite(t.total) || !std::isfinite(norm))
        throw NumericalError(fmt::format("non-finite kick-start loss or gradient in epoch {}", epoch));
      nn::adam_step(student.params(), grad, adam, config.lr);
    }
    evaluate(epoch);
  }

  auto& meta = result.student.meta();
  meta.seed = seed;
  meta.steps = teacher.meta().steps;
  meta.parent = teacher.meta().id;
  meta.id = fmt::format("{:016x}", result.student.params_hash());
  return result;
}

rl::TrainResult bat_finetune(const nn::PolicyParams& student, const Layout& layout, const rl::InitDistribution& init,
                             std::uint64_t steps, std::uint64_t seed, const rl::TrainConfig& config) {
  init.validate(layout);
  return rl::train_ppo(student, layout, init, nullptr, steps, seed, config);
}

BatResult run_bat(const nn::PolicyParams& teacher, const Layout& layout, const attack::AttackResult& adversarial,
                  const BatConfig& config, const rl::TrainConfig& train, std::uint64_t seed) {
  BatResult r;
  r.perturbations = bat_perturbations(layout, adversarial, config, seed);
  const auto data = build_distill_dataset(teacher, layout, r.perturbations, config, seed, train.exec);
  r.kickstart = train_kickstart(teacher, layout, data, config, seed, train.exec);
  const auto init = bat_init_distribution(r.perturbations, config);
  r.finetuned = bat_finetune(r.kickstart.student, layout, init, config.finetune_steps, seed, train);
  r.env_steps = static_cast<std::uint64_t>(config.trajectories) * static_cast<std::uint64_t>(config.horizon) +
                (r.finetuned.policy.meta().steps - r.kickstart.student.meta().steps);
  return r;
}

}  // namespace envrobust::defense
