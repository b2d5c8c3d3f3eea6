#include "envrobust/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "envrobust/featurize.hpp"
#include "envrobust/random.hpp"
#include "envrobust/rl.hpp"

namespace envrobust::attack {

using gridworld::Layout;
using gridworld::Perturbation;
using gridworld::UnitKind;
using gridworld::UnitPerturbation;

std::vector<Trajectory> collect_attack_trajectories(const nn::PolicyParams& policy, const Layout& layout, int n_traj,
                                                    int horizon, std::uint64_t seed, kernels::Exec exec) {
  if (n_traj < 1 || horizon < 1) throw ConfigError("need at least one trajectory of at least one step");
  if (policy.arch().input_size() != featurize::obs_size(layout))
    throw ConfigError("policy input size does not match the layout");
  std::vector<Trajectory> out(static_cast<std::size_t>(n_traj));
  const bool parallel = exec == kernels::Exec::Parallel;
#pragma omp parallel for schedule(dynamic, 1) if (parallel)
  for (int i = 0; i < n_traj; ++i) {
    auto rng = make_rng(seed, {tag(Stream::Attack), static_cast<std::uint64_t>(i)});
    Trajectory& tr = out[static_cast<std::size_t>(i)];
    tr.layout = layout.name;
    tr.policy_id = policy.meta().id;
    tr.seed = seed;
    tr.steps.reserve(static_cast<std::size_t>(horizon));
    std::vector<float> x(featurize::obs_size(layout));
    nn::Workspace<float> ws;
    gridworld::WorldState s = gridworld::reset(layout);
    for (int t = 0; t < horizon; ++t) {
      featurize::encode_into(layout, s, x);
      const auto& o = policy.forward(x, ws);
      TrajectoryStep step;
      step.state = s;
      const auto logits = nn::to_double(o.logits);
      step.greedy_action = nn::argmax(logits);
      step.sampled_action = rl::sample_joint(o.logits, rng);
      step.value = static_cast<double>(o.value);
      auto r = gridworld::step(layout, s, gridworld::joint_action_from_index(step.sampled_action));
      step.reward = r.reward;
      tr.steps.push_back(std::move(step));
      s = std::move(r.state);
    }
  }
  return out;
}

namespace {

struct GradWorkspace {
  nn::Workspace<double> net;
  std::vector<float> obs;
  std::vector<double> input;
  std::vector<double> grad_input;
};

}  // namespace

std::vector<double> action_probability_gradient(const nn::PolicyParams& policy, const Layout& layout,
                                                const std::vector<Trajectory>& trajectories, kernels::Exec exec) {
  const auto net = policy.cast<double>();
  const std::size_t n_obs = featurize::obs_size(layout);
  std::vector<std::size_t> offsets{0};
  for (const auto& tr : trajectories) offsets.push_back(offsets.back() + tr.steps.size());

  auto row_fn = [&](std::size_t row, GradWorkspace& ws, std::span<double> acc) -> double {
    const std::size_t ti = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), row) -
                                                    offsets.begin()) - 1;
    const TrajectoryStep& st = trajectories[ti].steps[row - offsets[ti]];
    ws.obs.resize(n_obs);
    featurize::encode_into(layout, st.state, ws.obs);
    ws.input.assign(ws.obs.begin(), ws.obs.end());
    const auto& out = net.forward(ws.input, ws.net);
    const auto probs = nn::softmax_t(out.logits, 1.0).probs;
    // d pi(a*) / dz_k = pi(a*) ([k = a*] - pi(k))
    const double pa = probs[static_cast<std::size_t>(st.greedy_action)];
    std::array<double, nn::kJoint> dlogits{};
    for (int k = 0; k < nn::kJoint; ++k)
      dlogits[static_cast<std::size_t>(k)] = pa * ((k == st.greedy_action ? 1.0 : 0.0) - probs[static_cast<std::size_t>(k)]);
    ws.grad_input.assign(n_obs, 0.0);
    net.backward(ws.input, ws.net, dlogits, 0.0, {}, ws.grad_input);
    for (std::size_t i = 0; i < n_obs; ++i) acc[i] += ws.grad_input[i];
    return 0.0;
  };
  std::vector<double> g(n_obs, 0.0);
  kernels::chunked_reduce<GradWorkspace>(offsets.back(), n_obs, row_fn, g, exec);
  return g;
}

bool feature_present(const UnitPerturbation& unit, const gridworld::WorldState& state) {
  switch (unit.kind) {
    case UnitKind::OnionOnCounter:
    case UnitKind::DishOnCounter: {
      const auto it = state.counters.find(unit.cell);
      if (it == state.counters.end() || !it->second) return false;
      return *it->second == (unit.kind == UnitKind::OnionOnCounter ? gridworld::ItemKind::Onion
                                                                   : gridworld::ItemKind::Dish);
    }
    case UnitKind::OnionsInPot: {
      const auto it = state.pots.find(unit.cell);
      return it != state.pots.end() && it->second.onion_count == unit.onions;
    }
  }
  return false;
}

std::vector<double> unit_frequencies(const std::vector<Trajectory>& trajectories,
                                     const std::vector<UnitPerturbation>& units) {
  std::vector<double> freq(units.size(), 0.0);
  std::size_t total = 0;
  std::vector<std::size_t> hits(units.size(), 0);
  for (const auto& tr : trajectories) {
    for (const auto& st : tr.steps) {
      ++total;
      for (std::size_t u = 0; u < units.size(); ++u) hits[u] += feature_present(units[u], st.state);
    }
  }
  if (total == 0) return freq;
  for (std::size_t u = 0; u < units.size(); ++u) freq[u] = static_cast<double>(hits[u]) / static_cast<double>(total);
  return freq;
}

std::vector<UnitScore> score_units(const nn::PolicyParams& policy, const Layout& layout,
                                   const std::vector<Trajectory>& trajectories,
                                   const std::vector<UnitPerturbation>& units, kernels::Exec exec) {
  if (units.empty()) return {};
  const auto g = action_probability_gradient(policy, layout, trajectories, exec);
  const auto freq = unit_frequencies(trajectories, units);
  std::vector<UnitScore> out;
  out.reserve(units.size());
  for (std::size_t u = 0; u < units.size(); ++u) {
    const auto delta = featurize::env_delta(layout, units[u]);
    out.push_back({units[u], -delta.dot<double>(layout, g), freq[u]});
  }
  return out;
}

std::vector<UnitScore> frequency_filter(const std::vector<UnitScore>& scores, double p_freq) {
  std::vector<UnitScore> out;
  for (const auto& s : scores)
    if (s.frequency <= p_freq) out.push_back(s);
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(Method m) {
  switch (m) {
    case Method::Grad: return "grad";
    case Method::Random: return "random";
    case Method::RandomFiltered: return "random_f";
  }
  return "grad";
}

Method parse_method(const std::string& s) {
  if (s == "grad") return Method::Grad;
  if (s == "random") return Method::Random;
  if (s == "random_f" || s == "random-f") return Method::RandomFiltered;
  throw ConfigError("unknown attack method '" + s + "' (expected grad, random or random-f)");
}

std::vector<Perturbation> AttackResult::perturbations() const {
  std::vector<Perturbation> out;
  for (const auto& s : states) out.push_back(s.perturbation);
  return out;
}

namespace {

const char* unit_tag(UnitKind k) {
  switch (k) {
    case UnitKind::OnionOnCounter: return "onion_counter";
    case UnitKind::DishOnCounter: return "dish_counter";
    case UnitKind::OnionsInPot: return "pot_onions";
  }
  return "?";
}

[[noreturn]] void bad_file(int line, const std::string& what) {
  throw ConfigError(fmt::format("attack result line {}: {}", line, what));
}

}  // namespace

void write_attack_result(std::ostream& out, const AttackResult& r) {
  out << "envrobust-attack 1\n";
  out << "method " << to_string(r.method) << "\n";
  out << "policy " << (r.policy_id.empty() ? "-" : r.policy_id) << "\n";
  out << "layout " << (r.layout.empty() ? "-" : r.layout) << "\n";
  out << fmt::format("epsilon {}\npfreq {:.17g}\nk {}\nseed {}\ntrajectories {}\nhorizon {}\nsearch {}\n", r.epsilon,
                     r.p_freq, r.k, r.seed, r.trajectories, r.horizon, r.search);
  out << "states " << r.states.size() << "\n";
  for (const auto& s : r.states) {
    out << fmt::format("state {:.17g} {}\n", s.score, s.perturbation.units.size());
    for (const auto& u : s.perturbation.units) {
      out << fmt::format("unit {} {} {}", unit_tag(u.kind), u.cell.x, u.cell.y);
      if (u.kind == UnitKind::OnionsInPot) out << " " << u.onions;
      out << "\n";
    }
  }
}

AttackResult read_attack_result(std::istream& in) {
  AttackResult r;
  std::string line;
  int lineno = 0;
  auto next = [&]() -> std::istringstream {
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line[0] != '#') return std::istringstream(line);
    }
    bad_file(lineno, "unexpected end of file");
  };
  auto field = [&](const char* key) {
    auto ss = next();
    std::string k, v;
    ss >> k >> v;
    if (k != key || v.empty()) bad_file(lineno, std::string("expected '") + key + "'");
    return v;
  };
  {
    auto ss = next();
    std::string magic;
    int version = 0;
    ss >> magic >> version;
    if (magic != "envrobust-attack" || version != 1) bad_file(lineno, "not an attack result file");
  }
  try {
    r.method = parse_method(field("method"));
    r.policy_id = field("policy");
    r.layout = field("layout");
    r.epsilon = std::stoi(field("epsilon"));
    r.p_freq = std::stod(field("pfreq"));
    r.k = std::stoi(field("k"));
    r.seed = std::stoull(field("seed"));
    r.trajectories = std::stoi(field("trajectories"));
    r.horizon = std::stoi(field("horizon"));
    r.search = field("search");
    const std::size_t n = std::stoull(field("states"));
    for (std::size_t i = 0; i < n; ++i) {
      auto ss = next();
      std::string key, score;
      std::size_t m = 0;
      ss >> key >> score >> m;
      if (key != "state" || !ss) bad_file(lineno, "expected 'state <score> <units>'");
      RankedPerturbation rp;
      rp.score = std::strtod(score.c_str(), nullptr);
      for (std::size_t j = 0; j < m; ++j) {
        auto us = next();
        std::string ukey, kind;
        UnitPerturbation u;
        us >> ukey >> kind >> u.cell.x >> u.cell.y;
        if (ukey != "unit" || !us) bad_file(lineno, "expected 'unit <kind> <x> <y>'");
        if (kind == "onion_counter") {
          u.kind = UnitKind::OnionOnCounter;
        } else if (kind == "dish_counter") {
          u.kind = UnitKind::DishOnCounter;
        } else if (kind == "pot_onions") {
          u.kind = UnitKind::OnionsInPot;
          if (!(us >> u.onions)) bad_file(lineno, "pot unit needs an onion count");
        } else {
          bad_file(lineno, "unknown unit kind '" + kind + "'");
        }
        rp.perturbation.units.push_back(u);
      }
      r.states.push_back(std::move(rp));
    }
  } catch (const std::logic_error& e) {  // stoi and friends
    bad_file(lineno, std::string("malformed number: ") + e.what());
  }
  return r;
}

void save_attack_result(const AttackResult& result, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write attack result to " + path);
  write_attack_result(f, result);
  if (!f) throw ConfigError("failed writing " + path);
}

AttackResult load_attack_result(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open attack result " + path);
  return read_attack_result(f);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> by_ordinal(const std::vector<UnitPerturbation>& units) {
  std::vector<std::size_t> idx(units.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return gridworld::unit_less(units[a], units[b]); });
  return idx;
}

// Calls fn(indices) for every subset of 1..epsilon positions of `units` with distinct cells,
// positions in increasing order.
template <class Fn>
void for_each_subset(const std::vector<UnitPerturbation>& units, int epsilon, Fn&& fn) {
  std::vector<std::size_t> chosen;
  auto rec = [&](auto&& self, std::size_t start) -> void {
    for (std::size_t i = start; i < units.size(); ++i) {
      bool clash = false;
      for (const std::size_t c : chosen) clash = clash || units[c].cell == units[i].cell;
      if (clash) continue;
      chosen.push_back(i);
      fn(chosen);
      if (static_cast<int>(chosen.size()) < epsilon) self(self, i + 1);
      chosen.pop_back();
    }
  };
  if (epsilon >= 1) rec(rec, 0);
}

Perturbation make_perturbation(const std::vector<UnitPerturbation>& units, const std::vector<std::size_t>& idx) {
  Perturbation p;
  for (const std::size_t i : idx) p.units.push_back(units[i]);
  return p;
}

}  // namespace

AttackResult compose_adversarial_states(const Layout& layout, const std::vector<UnitScore>& scores, int epsilon,
                                        int k) {
  if (epsilon < 1 || k < 1) throw ConfigError("epsilon and k must be at least 1");
  AttackResult result;
  result.method = Method::Grad;
  result.layout = layout.name;
  result.epsilon = epsilon;
  result.k = k;

  // Candidates in ordinal order; prune to the best kExactUnitLimit when there are too many.
  std::vector<UnitPerturbation> all_units;
  for (const auto& s : scores) all_units.push_back(s.unit);
  std::vector<std::size_t> order = by_ordinal(all_units);
  if (order.size() > kExactUnitLimit) {
    std::vector<std::size_t> best = order;
    std::stable_sort(best.begin(), best.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a].score > scores[b].score; });
    best.resize(kExactUnitLimit);
    std::sort(best.begin(), best.end(), [&](std::size_t a, std::size_t b) {
      return gridworld::unit_less(all_units[a], all_units[b]);
    });
    order = std::move(best);
    result.search = "pruned";
  }
  std::vector<UnitPerturbation> units;
  std::vector<double> unit_score;
  for (const std::size_t i : order) {
    units.push_back(scores[i].unit);
    unit_score.push_back(scores[i].score);
  }

  struct Candidate {
    double score;
    std::array<std::size_t, 8> idx;
    std::size_t n;
  };
  if (epsilon > 8) throw ConfigError("epsilon above 8 is not supported");
  std::vector<Candidate> cands;
  for_each_subset(units, epsilon, [&](const std::vector<std::size_t>& idx) {
    Candidate c{0.0, {}, idx.size()};
    for (std::size_t j = 0; j < idx.size(); ++j) {
      c.idx[j] = idx[j];
      c.score += unit_score[idx[j]];
    }
    cands.push_back(c);
  });
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::lexicographical_compare(a.idx.begin(), a.idx.begin() + static_cast<long>(a.n), b.idx.begin(),
                                        b.idx.begin() + static_cast<long>(b.n));
  });
  for (const auto& c : cands) {
    if (static_cast<int>(result.states.size()) == k) break;
    Perturbation p = make_perturbation(units, std::vector<std::size_t>(c.idx.begin(), c.idx.begin() + static_cast<long>(c.n)));
    if (!gridworld::is_feasible(layout, p)) continue;
    result.states.push_back({std::move(p), c.score});
  }
  if (static_cast<int>(result.states.size()) < k)
    spdlog::warn("only {} feasible perturbations within budget {} (asked for {})", result.states.size(), epsilon, k);
  return result;
}

std::vector<Perturbation> enumerate_perturbations(const Layout& layout, const std::vector<UnitPerturbation>& units,
                                                  int epsilon) {
  std::vector<UnitPerturbation> sorted;
  for (const std::size_t i : by_ordinal(units)) sorted.push_back(units[i]);
  std::vector<Perturbation> out;
  for_each_subset(sorted, epsilon, [&](const std::vector<std::size_t>& idx) {
    Perturbation p = make_perturbation(sorted, idx);
    if (gridworld::is_feasible(layout, p)) out.push_back(std::move(p));
  });
  return out;
}

AttackResult random_attack(const Layout& layout, int epsilon, int k, bool filter,
                           const std::vector<Trajectory>* trajectories, double p_freq, std::uint64_t seed) {
  if (epsilon < 1 || k < 1) throw ConfigError("epsilon and k must be at least 1");
  auto units = gridworld::enumerate_unit_perturbations(layout);
  if (filter) {
    if (trajectories == nullptr) throw ConfigError("the filtered random attack needs trajectories");
    const auto freq = unit_frequencies(*trajectories, units);
    std::vector<UnitPerturbation> kept;
    for (std::size_t u = 0; u < units.size(); ++u)
      if (freq[u] <= p_freq) kept.push_back(units[u]);
    units = std::move(kept);
    if (units.empty()) throw ConfigError(fmt::format("no unit perturbation has frequency <= {}", p_freq));
  }
  auto pool = enumerate_perturbations(layout, units, epsilon);
  if (pool.empty()) throw ConfigError("no feasible perturbation within budget");
  auto rng = make_rng(seed, {tag(Stream::RandomStates)});
  const std::size_t n = std::min(pool.size(), static_cast<std::size_t>(k));
  if (n < static_cast<std::size_t>(k))
    spdlog::warn("only {} feasible perturbations within budget {} (asked for {})", pool.size(), epsilon, k);

  AttackResult result;
  result.method = filter ? Method::RandomFiltered : Method::Random;
  result.layout = layout.name;
  result.epsilon = epsilon;
  result.k = k;
  result.seed = seed;
  result.p_freq = filter ? p_freq : 1.0;
  if (trajectories != nullptr) {
    result.trajectories = static_cast<int>(trajectories->size());
    result.horizon = trajectories->empty() ? 0 : static_cast<int>(trajectories->front().steps.size());
    if (!trajectories->empty()) result.policy_id = trajectories->front().policy_id;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(uniform_below(rng, pool.size() - i));
    std::swap(pool[i], pool[j]);
    result.states.push_back({pool[i], std::nan("")});
  }
  return result;
}

AttackResult grad_attack(const nn::PolicyParams& policy, const Layout& layout, const GradAttackConfig& config) {
  const auto trajectories =
      collect_attack_trajectories(policy, layout, config.trajectories, config.horizon, config.seed, config.exec);
  const auto scores =
      score_units(policy, layout, trajectories, gridworld::enumerate_unit_perturbations(layout), config.exec);
  const auto filtered = frequency_filter(scores, config.p_freq);
  spdlog::info("attack: {} unit perturbations, {} pass the frequency filter", scores.size(), filtered.size());
  AttackResult result = compose_adversarial_states(layout, filtered, config.epsilon, config.k);
  result.policy_id = policy.meta().id;
  result.p_freq = config.p_freq;
  result.seed = config.seed;
  result.trajectories = config.trajectories;
  result.horizon = config.horizon;
  return result;
}

// ---------------------------------------------------------------------------

namespace {

int env_difference(const gridworld::WorldState& a, const gridworld::WorldState& b) {
  int d = 0;
  for (const auto& [cell, item] : a.counters) d += b.counters.at(cell) != item;
  for (const auto& [cell, pot] : a.pots) d += !(b.pots.at(cell) == pot);
  return d;
}

}  // namespace

double persistence_fraction(const nn::PolicyParams& policy, const Layout& layout, const Perturbation& perturbation,
                            int horizon, std::uint64_t seed) {
  if (horizon < 1) return 0.0;
  auto rng_a = make_rng(seed, {tag(Stream::Attack)});
  auto rng_b = rng_a;
  gridworld::WorldState a = gridworld::reset(layout);
  gridworld::WorldState b = gridworld::reset(layout, perturbation);
  const int initial = env_difference(a, b);
  std::vector<float> x(featurize::obs_size(layout));
  int kept = 0;
  for (int t = 0; t < horizon; ++t) {
    featurize::encode_into(layout, a, x);
    const int act_a = rl::sample_joint(policy.forward(x).logits, rng_a);
    featurize::encode_into(layout, b, x);
    const int act_b = rl::sample_joint(policy.forward(x).logits, rng_b);
    a = gridworld::step(layout, a, gridworld::joint_action_from_index(act_a)).state;
    b = gridworld::step(layout, b, gridworld::joint_action_from_index(act_b)).state;
    kept += env_difference(a, b) >= initial;
  }
  return static_cast<double>(kept) / horizon;
}

}  // namespace envrobust::attack
