#include "envrobust/harness.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "envrobust/featurize.hpp"
#include "envrobust/random.hpp"

namespace envrobust::harness {

namespace fs = std::filesystem;
using gridworld::Layout;
using gridworld::Perturbation;

std::vector<InitialState> standard_states() { return {{"standard", Perturbation{}}}; }

std::vector<InitialState> states_from(const attack::AttackResult& result) {
  std::vector<InitialState> out;
  for (const auto& s : result.states) out.push_back({gridworld::to_string(s.perturbation), s.perturbation});
  return out;
}

std::size_t EpisodeLog::episodes() const {
  std::size_t n = 0;
  for (const auto& s : scores) n += s.size();
  return n;
}

double play_episode(const nn::PolicyParams& policy, const Layout& layout, const Perturbation& perturbation,
                    int horizon, bool deterministic, std::mt19937_64& rng) {
  std::vector<float> x(featurize::obs_size(layout));
  nn::Workspace<float> ws;
  auto s = gridworld::reset(layout, perturbation);
  double score = 0.0;
  for (int t = 0; t < horizon; ++t) {
    featurize::encode_into(layout, s, x);
    const auto& out = policy.forward(x, ws);
    const int a = deterministic ? nn::argmax(nn::to_double(out.logits)) : rl::sample_joint(out.logits, rng);
    auto r = gridworld::step(layout, s, gridworld::joint_action_from_index(a));
    score += r.reward;
    s = std::move(r.state);
  }
  return score;
}

EpisodeLog run_episodes(const nn::PolicyParams& policy, const Layout& layout, const EvalSpec& spec) {
  if (policy.arch().width != layout.width || policy.arch().height != layout.height ||
      policy.arch().input_size() != featurize::obs_size(layout))
    throw ConfigError(fmt::format("checkpoint expects a {}x{} grid but layout {} is {}x{}", policy.arch().width,
                                  policy.arch().height, layout.name, layout.width, layout.height));
  if (spec.games < 1) throw ConfigError("games must be at least 1");
  if (spec.horizon < 1) throw ConfigError("horizon must be at least 1");
  for (const auto& s : spec.states)
    if (!gridworld::is_feasible(layout, s.perturbation))
      throw FeasibilityError("initial state " + s.label + " is infeasible on " + layout.name);

  EpisodeLog log;
  const auto n_states = spec.states.size();
  const auto games = static_cast<std::size_t>(spec.games);
  for (const auto& s : spec.states) log.labels.push_back(s.label);
  log.scores.assign(n_states, std::vector<double>(games, 0.0));
  const auto total = static_cast<long>(n_states * games);
  const bool parallel = spec.exec == kernels::Exec::Parallel;
#pragma omp parallel for schedule(dynamic, 1) if (parallel)
  for (long i = 0; i < total; ++i) {
    const auto s = static_cast<std::size_t>(i) / games;
    const auto g = static_cast<std::size_t>(i) % games;
    auto rng = make_rng(spec.seed, {tag(Stream::Eval), s, g});
    log.scores[s][g] = play_episode(policy, layout, spec.states[s].perturbation, spec.horizon, spec.deterministic, rng);
  }
  return log;
}

void write_episode_log(std::ostream& out, const EpisodeLog& log) {
  out << "envrobust-episodes 1\n";
  out << "states " << log.labels.size() << "\n";
  for (std::size_t s = 0; s < log.labels.size(); ++s) {
    out << "state " << log.scores[s].size() << " " << log.labels[s] << "\n";
    for (const double v : log.scores[s]) out << fmt::format("{:.17g}\n", v);
  }
}

EpisodeLog read_episode_log(std::istream& in) {
  auto fail = [](const std::string& what) -> EpisodeLog { throw ConfigError("episode log: " + what); };
  std::string line;
  if (!std::getline(in, line) || line != "envrobust-episodes 1") return fail("bad header");
  std::size_t n_states = 0;
  if (!std::getline(in, line) || std::sscanf(line.c_str(), "states %zu", &n_states) != 1)
    return fail("missing state count");
  EpisodeLog log;
  for (std::size_t s = 0; s < n_states; ++s) {
    if (!std::getline(in, line) || line.rfind("state ", 0) != 0) return fail("missing state record");
    std::istringstream ls(line.substr(6));
    std::size_t games = 0;
    if (!(ls >> games)) return fail("bad game count");
    std::string label;
    std::getline(ls >> std::ws, label);
    log.labels.push_back(label);
    std::vector<double> scores(games);
    for (auto& v : scores) {
      if (!std::getline(in, line)) return fail("truncated scores");
      try {
        v = std::stod(line);
      } catch (const std::logic_error&) {
        return fail("bad score " + line);
      }
    }
    log.scores.push_back(std::move(scores));
  }
  return log;
}

namespace {

// Neumaier-compensated sum.
double compensated_sum(std::span<const double> values) {
  double sum = 0.0, c = 0.0;
  for (const double v : values) {
    const double t = sum + v;
    c += std::abs(sum) >= std::abs(v) ? (sum - t) + v : (v - t) + sum;
    sum = t;
  }
  return sum + c;
}

}  // namespace

MeanError mean_and_error(std::span<const double> values) {
  MeanError m;
  m.n = values.size();
  if (m.n == 0) return m;
  m.mean = compensated_sum(values) / static_cast<double>(m.n);
  if (m.n < 2) return m;
  std::vector<double> sq(m.n);
  for (std::size_t i = 0; i < m.n; ++i) sq[i] = (values[i] - m.mean) * (values[i] - m.mean);
  const double var = compensated_sum(sq) / static_cast<double>(m.n - 1);
  m.std_err = std::sqrt(var / static_cast<double>(m.n));
  return m;
}

ScoreStats summarize(const std::vector<EpisodeLog>& logs) {
  ScoreStats st;
  std::vector<double> means, pooled;
  for (const auto& log : logs)
    for (std::size_t s = 0; s < log.labels.size(); ++s) {
      const auto m = mean_and_error(log.scores[s]);
      st.states.push_back({log.labels[s], m});
      means.push_back(m.mean);
      pooled.insert(pooled.end(), log.scores[s].begin(), log.scores[s].end());
    }
  st.grand_mean = mean_and_error(means).mean;
  st.grand_std_err = mean_and_error(pooled).std_err;
  st.n = pooled.size();
  return st;
}

ScoreStats evaluate(const nn::PolicyParams& policy, const Layout& layout, const EvalSpec& spec) {
  return summarize({run_episodes(policy, layout, spec)});
}

// ---------------------------------------------------------------------------
// Reports

ReportFormat parse_report_format(const std::string& s) {
  if (s == "csv") return ReportFormat::Csv;
  if (s == "md") return ReportFormat::Md;
  throw ConfigError("unknown report format '" + s + "' (expected csv or md)");
}

ReportRow make_row(std::string method, std::string attack, std::string layout, const ScoreStats& stats) {
  return {std::move(method), std::move(attack), std::move(layout), stats.grand_mean, stats.grand_std_err, stats.n,
          false};
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

std::string number(double v) { return fmt::format("{:.3f}", v); }

ReportRow row_from_fields(const std::vector<std::string>& f) {
  if (f.size() != 6) throw ConfigError("report row needs 6 fields");
  ReportRow r{f[0], f[1], f[2], 0.0, 0.0, 0, false};
  if (f[3] == "skipped") {
    r.skipped = true;
  } else {
    r.mean = std::stod(f[3]);
    r.std_err = std::stod(f[4]);
  }
  r.n = static_cast<std::size_t>(std::stoull(f[5]));
  return r;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(' ');
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(' ') - b + 1);
}

}  // namespace

void emit_report(std::ostream& out, const Report& report, ReportFormat format) {
  if (format == ReportFormat::Csv) {
    out << "method,attack,layout,mean,stderr,n\n";
    for (const auto& r : report.rows)
      out << csv_field(r.method) << ',' << csv_field(r.attack) << ',' << csv_field(r.layout) << ','
          << (r.skipped ? "skipped" : number(r.mean)) << ',' << (r.skipped ? "skipped" : number(r.std_err)) << ','
          << r.n << '\n';
    return;
  }
  out << "| method | attack | layout | mean | stderr | n |\n";
  out << "|---|---|---|---:|---:|---:|\n";
  for (const auto& r : report.rows)
    out << "| " << r.method << " | " << r.attack << " | " << r.layout << " | "
        << (r.skipped ? "skipped" : number(r.mean)) << " | " << (r.skipped ? "skipped" : number(r.std_err)) << " | "
        << r.n << " |\n";

  // Method x attack pivot with mean +/- stderr.
  std::vector<std::string> methods, attacks;
  std::map<std::pair<std::string, std::string>, const ReportRow*> cell;
  for (const auto& r : report.rows) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    if (std::find(attacks.begin(), attacks.end(), r.attack) == attacks.end()) attacks.push_back(r.attack);
    cell[{r.method, r.attack}] = &r;
  }
  if (!report.rows.empty()) {
    out << "\n| method |";
    for (const auto& a : attacks) out << ' ' << a << " |";
    out << "\n|---|";
    for (std::size_t i = 0; i < attacks.size(); ++i) out << "---:|";
    out << '\n';
    for (const auto& m : methods) {
      out << "| " << m << " |";
      for (const auto& a : attacks) {
        const auto it = cell.find({m, a});
        if (it == cell.end() || it->second->skipped)
          out << " skipped |";
        else
          out << ' ' << fmt::format("{:.1f} ± {:.1f}", it->second->mean, it->second->std_err) << " |";
      }
      out << '\n';
    }
  }
  if (!report.metadata.empty()) {
    out << '\n';
    for (const auto& [k, v] : report.metadata) out << "- " << k << ": " << v << '\n';
  }
}

void save_report(const std::string& path, const Report& report, ReportFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write report " + path);
  emit_report(out, report, format);
  if (!out) throw ConfigError("error while writing report " + path);
}

std::vector<ReportRow> parse_report_rows(std::istream& in, ReportFormat format) {
  std::vector<ReportRow> rows;
  std::string line;
  if (format == ReportFormat::Csv) {
    if (!std::getline(in, line) || line != "method,attack,layout,mean,stderr,n")
      throw ConfigError("report: bad CSV header");
    while (std::getline(in, line))
      if (!line.empty()) rows.push_back(row_from_fields(split_csv(line)));
    return rows;
  }
  if (!std::getline(in, line) || line.rfind("| method | attack |", 0) != 0) throw ConfigError("report: bad md header");
  std::getline(in, line);  // alignment row
  while (std::getline(in, line) && line.rfind("| ", 0) == 0) {
    std::vector<std::string> f;
    std::size_t start = 1;
    while (true) {
      const auto bar = line.find(" |", start);
      if (bar == std::string::npos) break;
      f.push_back(trim(line.substr(start, bar - start)));
      start = bar + 2;
    }
    rows.push_back(row_from_fields(f));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Experiments

std::string defense_label(const std::string& method) {
  static const std::map<std::string, std::string> names = {
      {"sp", "SP"},           {"extra_sp", "Extra SP"}, {"div_start", "Div. Start"}, {"bat_sp", "BAT+SP"},
      {"fcp", "FCP"},         {"extra_fcp", "Extra FCP"}, {"bat_fcp", "BAT+FCP"}};
  const auto it = names.find(method);
  return it == names.end() ? method : it->second;
}

namespace {

std::string resolve(const std::string& path, const std::string& base_dir) {
  if (path.empty() || fs::path(path).is_absolute() || base_dir.empty()) return path;
  return (fs::path(base_dir) / path).lexically_normal().string();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

ExperimentConfig parse_experiment_config(KeyValues& kv, const std::string& kind, const std::string& base_dir) {
  if (kind != "attack" && kind != "defense") throw ConfigError("experiment kind must be attack or defense");
  ExperimentConfig c;
  c.layout_path = resolve(kv.get_string("layout", ""), base_dir);
  if (c.layout_path.empty()) throw ConfigError("experiment config needs a layout");
  c.layout = gridworld::load_layout_file(c.layout_path);
  c.seed = kv.get_uint("seed", c.seed);
  c.agents = static_cast<int>(kv.get_int("agents", c.agents));
  c.algo = kv.get_string("algo", c.algo);
  c.train_steps = kv.get_uint("train_steps", c.train_steps);
  c.pool_steps = kv.get_uint("pool_steps", c.pool_steps);
  for (const auto& p : kv.get_list("checkpoints", {})) c.checkpoints.push_back(resolve(p, base_dir));
  c.cache_dir = resolve(kv.get_string("cache_dir", ""), base_dir);

  auto& t = c.train;
  t.horizon = static_cast<int>(kv.get_int("train_horizon", t.horizon));
  t.episodes_per_update = kv.get_uint("episodes_per_update", t.episodes_per_update);
  if (kv.has("hidden")) {
    t.hidden.clear();
    for (const double h : kv.get_double_list("hidden", {})) t.hidden.push_back(static_cast<int>(h));
  }
  t.ppo.lr = kv.get_double("lr", t.ppo.lr);
  t.ppo.reward_scale = kv.get_double("reward_scale", t.ppo.reward_scale);
  t.ppo.ent_coef = kv.get_double("ent_coef", t.ppo.ent_coef);
  t.anneal_lr = kv.get_bool("anneal_lr", t.anneal_lr);
  t.shaping.onion_in_pot = kv.get_double("shaping_onion", 3.0);
  t.shaping.dish_pickup = kv.get_double("shaping_dish", 3.0);
  t.shaping.soup_pickup = kv.get_double("shaping_soup", 5.0);
  t.shaping.anneal_steps = kv.get_uint("shaping_anneal", c.train_steps);

  c.epsilon = static_cast<int>(kv.get_int("epsilon", c.epsilon));
  c.k = static_cast<int>(kv.get_int("k", c.k));
  c.random_k = static_cast<int>(kv.get_int("random_k", c.random_k));
  c.p_freq = kv.get_double("p_freq", c.p_freq);
  c.attack_trajectories = static_cast<int>(kv.get_int("attack_trajectories", c.attack_trajectories));
  c.attack_horizon = static_cast<int>(kv.get_int("attack_horizon", c.attack_horizon));

  const auto& allowed = kind == "attack" ? kAttackMethods : kDefenseMethods;
  c.methods = kv.get_list("methods", allowed);
  for (const auto& m : c.methods)
    if (std::find(allowed.begin(), allowed.end(), m) == allowed.end())
      throw ConfigError("unknown " + kind + " method '" + m + "'");
  c.games = static_cast<int>(kv.get_int("games", c.games));
  c.horizon = static_cast<int>(kv.get_int("horizon", c.horizon));
  c.deterministic = kv.get_bool("deterministic", c.deterministic);
  c.workers = static_cast<int>(kv.get_int("workers", c.workers));

  auto& b = c.bat;
  b.top_adversarial = static_cast<int>(kv.get_int("bat_top", b.top_adversarial));
  b.random_states = static_cast<int>(kv.get_int("bat_random", b.random_states));
  b.epsilon = c.epsilon;
  b.temperature = kv.get_double("bat_temperature", b.temperature);
  b.alpha = kv.get_double("bat_alpha", b.alpha);
  b.beta = kv.get_double("bat_beta", b.beta);
  b.lr = kv.get_double("bat_lr", b.lr);
  b.epochs = static_cast<int>(kv.get_int("bat_epochs", b.epochs));
  b.minibatch = kv.get_uint("bat_minibatch", b.minibatch);
  b.train_fraction = kv.get_double("bat_train_fraction", b.train_fraction);
  b.trajectories = static_cast<int>(kv.get_int("bat_trajectories", b.trajectories));
  b.horizon = static_cast<int>(kv.get_int("bat_horizon", b.horizon));
  b.finetune_steps = kv.get_uint("bat_finetune_steps", b.finetune_steps);

  c.out = resolve(kv.get_string("out", ""), base_dir);
  c.format = parse_report_format(kv.get_string("format", "csv"));
  kv.finish();

  if (c.algo != "sp" && c.algo != "fcp") throw ConfigError("algo must be sp or fcp");
  if (c.agents < 1) throw ConfigError("agents must be at least 1");
  if (c.workers < 1) throw ConfigError("workers must be at least 1");
  if (c.games < 1 || c.horizon < 1) throw ConfigError("games and horizon must be at least 1");
  if (c.epsilon < 1 || c.k < 1 || c.random_k < 1) throw ConfigError("epsilon, k and random_k must be at least 1");
  if (c.attack_trajectories < 1 || c.attack_horizon < 1) throw ConfigError("attack trajectories must be non-empty");
  if (t.hidden.empty()) throw ConfigError("hidden must list at least one layer width");
  b.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path, const std::string& kind) {
  auto kv = KeyValues::load(path);
  return parse_experiment_config(kv, kind, fs::path(path).parent_path().string());
}

std::string train_fingerprint(const rl::TrainConfig& c) {
  std::string s = fmt::format(
      "ppo {} {} {} {} {} {} {} {} {} {} | h {} e {} | shaping {} {} {} {} | ckpt {} anneal {} | hidden",
      c.ppo.gamma, c.ppo.lambda, c.ppo.clip, c.ppo.epochs, c.ppo.minibatch, c.ppo.lr, c.ppo.vf_coef, c.ppo.ent_coef,
      c.ppo.max_grad_norm, c.ppo.reward_scale, c.horizon, c.episodes_per_update, c.shaping.onion_in_pot,
      c.shaping.dish_pickup, c.shaping.soup_pickup, c.shaping.anneal_steps, c.checkpoint_every, c.anneal_lr);
  for (const int h : c.hidden) s += fmt::format(" {}", h);
  return fmt::format("{:016x}", fnv1a(s));
}

nn::PolicyParams cached_policy(const ExperimentConfig& config, const std::string& name,
                               const std::function<nn::PolicyParams()>& make) {
  if (config.cache_dir.empty()) return make();
  const fs::path path = fs::path(config.cache_dir) / (name + ".ckpt");
  if (fs::exists(path)) {
    spdlog::info("using cached {}", path.string());
    return nn::load_checkpoint(path.string());
  }
  auto p = make();
  fs::create_directories(config.cache_dir);
  // Write then rename so an interrupted run never leaves a partial checkpoint.
  const auto tmp = path.string() + ".tmp";
  nn::save_checkpoint(p, tmp);
  fs::rename(tmp, path);
  return p;
}

namespace {

// Everything that defines an experiment's agents, folded into cache keys.
std::string base_key(const ExperimentConfig& c) {
  return fmt::format("{}-{:08x}-s{}-{}", c.layout.name,
                     static_cast<std::uint32_t>(fnv1a(gridworld::format_layout(c.layout))), c.seed,
                     train_fingerprint(c.train));
}

std::string bat_key(const defense::BatConfig& b) {
  return fmt::format("{:08x}", static_cast<std::uint32_t>(fnv1a(fmt::format(
                                   "{} {} {} {} {} {} {} {} {} {} {} {} {}", b.top_adversarial, b.random_states,
                                   b.epsilon, b.temperature, b.alpha, b.beta, b.lr, b.epochs, b.minibatch,
                                   b.train_fraction, b.trajectories, b.horizon, b.finetune_steps))));
}

std::uint64_t agent_seed(const ExperimentConfig& c, std::size_t i) {
  return derive_seed(c.seed, {tag(Stream::Agent), i});
}

// Agents are trained per index; the pool is shared by every FCP agent.
class AgentFactory {
 public:
  explicit AgentFactory(const ExperimentConfig& c) : c_(c) {}

  nn::PolicyParams sp(std::size_t i) {
    return cached_policy(c_, fmt::format("{}-sp{}-n{}", base_key(c_), i, c_.train_steps), [&] {
      spdlog::info("training SP agent {} for {} steps", i, c_.train_steps);
      return rl::train_self_play(c_.layout, c_.train_steps, agent_seed(c_, i), c_.train).policy;
    });
  }

  nn::PolicyParams fcp(std::size_t i) {
    const auto& p = pool();
    return cached_policy(c_, fmt::format("{}-fcp{}-n{}-p{}", base_key(c_), i, c_.train_steps, c_.pool_steps), [&] {
      spdlog::info("training FCP agent {} for {} steps", i, c_.train_steps);
      return rl::train_fcp(c_.layout, p, c_.train_steps, agent_seed(c_, i), c_.train).policy;
    });
  }

  const rl::PartnerPool& pool() {
    if (!pool_.partners.empty()) return pool_;
    auto name = [&](std::size_t j) { return fmt::format("{}-pool{}-n{}", base_key(c_), j, c_.pool_steps); };
    bool cached = !c_.cache_dir.empty();
    for (std::size_t j = 0; cached && j < rl::PartnerPool::kSize; ++j)
      cached = fs::exists(fs::path(c_.cache_dir) / (name(j) + ".ckpt"));
    if (cached) {
      for (std::size_t j = 0; j < rl::PartnerPool::kSize; ++j)
        pool_.partners.push_back(nn::load_checkpoint((fs::path(c_.cache_dir) / (name(j) + ".ckpt")).string()));
      return pool_;
    }
    spdlog::info("training the FCP partner pool ({} steps per partner)", c_.pool_steps);
    pool_ = rl::build_partner_pool(c_.layout, c_.pool_steps, derive_seed(c_.seed, {tag(Stream::Partner)}), c_.train);
    for (std::size_t j = 0; j < pool_.partners.size(); ++j)
      cached_policy(c_, name(j), [&] { return pool_.partners[j]; });
    return pool_;
  }

 private:
  const ExperimentConfig& c_;
  rl::PartnerPool pool_;
};

attack::GradAttackConfig grad_config(const ExperimentConfig& c, std::size_t i) {
  attack::GradAttackConfig g;
  g.epsilon = c.epsilon;
  g.k = c.k;
  g.p_freq = c.p_freq;
  g.trajectories = c.attack_trajectories;
  g.horizon = c.attack_horizon;
  g.seed = derive_seed(c.seed, {tag(Stream::Attack), i});
  return g;
}

EvalSpec eval_spec(const ExperimentConfig& c, std::size_t i, std::vector<InitialState> states) {
  EvalSpec s;
  s.states = std::move(states);
  s.games = c.games;
  s.horizon = c.horizon;
  s.seed = derive_seed(c.seed, {tag(Stream::Eval), i});
  s.deterministic = c.deterministic;
  return s;
}

attack::AttackResult random_states(const ExperimentConfig& c, std::size_t i) {
  return attack::random_attack(c.layout, c.epsilon, c.random_k, false, nullptr, 1.0,
                               derive_seed(c.seed, {tag(Stream::RandomStates), i}));
}

double mean_persistence(const nn::PolicyParams& p, const ExperimentConfig& c, const attack::AttackResult& r) {
  if (r.states.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t j = 0; j < r.states.size(); ++j)
    sum += attack::persistence_fraction(p, c.layout, r.states[j].perturbation, c.horizon,
                                        derive_seed(c.seed, {tag(Stream::Eval), j}));
  return sum / static_cast<double>(r.states.size());
}

class ThreadScope {
 public:
  explicit ThreadScope(int n) : saved_(omp_get_max_threads()) { omp_set_num_threads(n); }
  ~ThreadScope() { omp_set_num_threads(saved_); }
  ThreadScope(const ThreadScope&) = delete;
  ThreadScope& operator=(const ThreadScope&) = delete;

 private:
  int saved_;
};

bool wants(const std::vector<std::string>& methods, const std::string& m) {
  return std::find(methods.begin(), methods.end(), m) != methods.end();
}

}  // namespace

nn::PolicyParams experiment_agent(const ExperimentConfig& c, const std::string& algo, std::size_t index) {
  AgentFactory factory(c);
  if (algo == "sp") return factory.sp(index);
  if (algo == "fcp") return factory.fcp(index);
  throw ConfigError("unknown agent algorithm '" + algo + "' (expected sp or fcp)");
}

Report run_attack_experiment(const ExperimentConfig& c) {
  ThreadScope threads(c.workers);
  const auto& layout = c.layout;
  const std::size_t n_policies = c.checkpoints.empty() ? static_cast<std::size_t>(c.agents) : c.checkpoints.size();
  if (wants(c.methods, "transfer") && n_policies < 2)
    throw ConfigError("the transfer attack needs at least two policies");

  std::vector<std::string> labels;
  std::vector<nn::PolicyParams> policies;
  if (!c.checkpoints.empty()) {
    for (const auto& path : c.checkpoints) {
      policies.push_back(nn::load_checkpoint(path));
      labels.push_back(fs::path(path).stem().string());
    }
  } else {
    AgentFactory factory(c);
    for (std::size_t i = 0; i < static_cast<std::size_t>(c.agents); ++i) {
      policies.push_back(c.algo == "sp" ? factory.sp(i) : factory.fcp(i));
      labels.push_back(fmt::format("{}_{}", c.algo, i));
    }
  }
  const std::size_t n = policies.size();

  std::vector<attack::AttackResult> grad(n);
  if (wants(c.methods, "grad") || wants(c.methods, "transfer"))
    for (std::size_t i = 0; i < n; ++i) {
      grad[i] = attack::grad_attack(policies[i], layout, grad_config(c, i));
      spdlog::info("grad attack on {}: {} states ({} search)", labels[i], grad[i].states.size(), grad[i].search);
    }

  Report report;
  std::map<std::string, std::vector<EpisodeLog>> pooled;
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& m : c.methods) {
      std::vector<InitialState> states;
      if (m == "none") {
        states = standard_states();
      } else if (m == "random") {
        states = states_from(random_states(c, i));
      } else if (m == "random_f") {
        const auto g = grad_config(c, i);
        const auto trajs = attack::collect_attack_trajectories(policies[i], layout, g.trajectories, g.horizon, g.seed);
        states = states_from(attack::random_attack(layout, c.epsilon, c.random_k, true, &trajs, c.p_freq,
                                                   derive_seed(c.seed, {tag(Stream::RandomStates), i, 1})));
      } else if (m == "grad") {
        states = states_from(grad[i]);
      } else if (m == "transfer") {
        for (std::size_t j = 0; j < n; ++j)
          if (j != i) {
            const auto s = states_from(grad[j]);
            states.insert(states.end(), s.begin(), s.end());
          }
      }
      auto log = run_episodes(policies[i], layout, eval_spec(c, i, std::move(states)));
      report.rows.push_back(make_row(labels[i], m, layout.name, summarize({log})));
      spdlog::info("{} / {}: mean {:.1f}", labels[i], m, report.rows.back().mean);
      pooled[m].push_back(std::move(log));
    }
    if (wants(c.methods, "grad"))
      report.metadata.emplace_back("persistence." + labels[i],
                                   fmt::format("{:.3f}", mean_persistence(policies[i], c, grad[i])));
  }
  for (const auto& m : c.methods) report.rows.push_back(make_row("all", m, layout.name, summarize(pooled[m])));

  report.metadata.emplace_back("experiment", "attack");
  report.metadata.emplace_back("seed", std::to_string(c.seed));
  report.metadata.emplace_back("policies", std::to_string(n));
  report.metadata.emplace_back("games", std::to_string(c.games));
  report.metadata.emplace_back("epsilon", std::to_string(c.epsilon));
  report.metadata.emplace_back("k", std::to_string(c.k));
  report.metadata.emplace_back("p_freq", fmt::format("{}", c.p_freq));
  report.metadata.emplace_back("actions", c.deterministic ? "argmax" : "sampled");
  return report;
}

Report run_defense_experiment(const ExperimentConfig& c) {
  ThreadScope threads(c.workers);
  const auto& layout = c.layout;
  AgentFactory factory(c);
  const auto& b = c.bat;
  const std::uint64_t extra_steps =
      static_cast<std::uint64_t>(b.trajectories) * static_cast<std::uint64_t>(b.horizon) + b.finetune_steps;
  // Continued training starts from annealed agents, so it uses the sparse reward only.
  rl::TrainConfig finetune = c.train;
  finetune.shaping = {};
  const std::string bkey = bat_key(b);

  std::map<std::string, std::map<std::string, std::vector<EpisodeLog>>> logs;  // method -> attack -> per agent
  for (std::size_t i = 0; i < static_cast<std::size_t>(c.agents); ++i) {
    const std::uint64_t seed_i = agent_seed(c, i);
    const auto key = [&](const std::string& what) {
      return fmt::format("{}-{}{}-n{}-x{}-b{}", base_key(c), what, i, c.train_steps, extra_steps, bkey);
    };
    std::map<std::string, nn::PolicyParams> policies;

    const bool need_sp = wants(c.methods, "sp") || wants(c.methods, "extra_sp") || wants(c.methods, "div_start") ||
                         wants(c.methods, "bat_sp");
    if (need_sp) {
      const auto sp = factory.sp(i);
      const auto adv = attack::grad_attack(sp, layout, grad_config(c, i));
      if (wants(c.methods, "sp")) policies["sp"] = sp;
      if (wants(c.methods, "extra_sp"))
        policies["extra_sp"] = cached_policy(c, key("extra_sp"), [&] {
          return rl::train_ppo(sp, layout, rl::InitDistribution::point_mass(), nullptr, extra_steps, seed_i, finetune)
              .policy;
        });
      if (wants(c.methods, "div_start"))
        policies["div_start"] = cached_policy(c, key("div_start"), [&] {
          const auto init = defense::bat_init_distribution(defense::bat_perturbations(layout, adv, b, seed_i), b);
          return rl::train_div_start(layout, init, c.train_steps + extra_steps, seed_i, c.train).policy;
        });
      if (wants(c.methods, "bat_sp"))
        policies["bat_sp"] = cached_policy(c, key("bat_sp"), [&] {
          return defense::run_bat(sp, layout, adv, b, finetune, seed_i).finetuned.policy;
        });
    }
    const bool need_fcp = wants(c.methods, "fcp") || wants(c.methods, "extra_fcp") || wants(c.methods, "bat_fcp");
    if (need_fcp) {
      const auto fcp = factory.fcp(i);
      if (wants(c.methods, "fcp")) policies["fcp"] = fcp;
      if (wants(c.methods, "extra_fcp"))
        policies["extra_fcp"] = cached_policy(c, key("extra_fcp"), [&] {
          return rl::train_ppo(fcp, layout, rl::InitDistribution::point_mass(), &factory.pool(), extra_steps, seed_i,
                               finetune)
              .policy;
        });
      if (wants(c.methods, "bat_fcp"))
        policies["bat_fcp"] = cached_policy(c, key("bat_fcp"), [&] {
          const auto adv = attack::grad_attack(fcp, layout, grad_config(c, i));
          return defense::run_bat(fcp, layout, adv, b, finetune, seed_i).finetuned.policy;
        });
    }

    const auto random = states_from(random_states(c, i));
    for (const auto& [m, policy] : policies) {
      for (const auto& a : kDefenseAttacks) {
        std::vector<InitialState> states;
        if (a == "none") states = standard_states();
        if (a == "random") states = random;
        if (a == "grad") states = states_from(attack::grad_attack(policy, layout, grad_config(c, i)));
        logs[m][a].push_back(run_episodes(policy, layout, eval_spec(c, i, std::move(states))));
        spdlog::info("{} agent {} / {}: mean {:.1f}", defense_label(m), i, a,
                     summarize({logs[m][a].back()}).grand_mean);
      }
    }
  }

  Report report;
  for (const auto& m : kDefenseMethods)
    for (const auto& a : kDefenseAttacks) {
      if (!wants(c.methods, m)) {
        report.rows.push_back({defense_label(m), a, layout.name, 0.0, 0.0, 0, true});
        continue;
      }
      report.rows.push_back(make_row(defense_label(m), a, layout.name, summarize(logs[m][a])));
    }
  report.metadata.emplace_back("experiment", "defense");
  report.metadata.emplace_back("seed", std::to_string(c.seed));
  report.metadata.emplace_back("agents_per_method", std::to_string(c.agents));
  report.metadata.emplace_back("games", std::to_string(c.games));
  report.metadata.emplace_back("train_steps", std::to_string(c.train_steps));
  report.metadata.emplace_back("extra_steps", std::to_string(extra_steps));
  report.metadata.emplace_back("grad_attack", "regenerated against each evaluated policy (white-box)");
  report.metadata.emplace_back("fcp_finetune", "self-play");
  report.metadata.emplace_back("actions", c.deterministic ? "argmax" : "sampled");
  return report;
}

}  // namespace envrobust::harness
