#include "envrobust/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

namespace envrobust::nn {

void Architecture::validate() const {
  if (channels <= 0 || width <= 0 || height <= 0) throw ConfigError("input dimensions must be positive");
  for (const int h : hidden)
    if (h <= 0) throw ConfigError("zero-width hidden layer");
}

Architecture architecture_for(const gridworld::Layout& layout, std::vector<int> hidden, HeadType head) {
  Architecture arch;
  arch.width = layout.width;
  arch.height = layout.height;
  arch.hidden = std::move(hidden);
  arch.head = head;
  arch.validate();
  return arch;
}

// ---------------------------------------------------------------------------

namespace {

template <class T>
void dense_forward(const typename PolicyNetwork<T>::Layer& layer, const T* params, std::span<const T> x,
                   std::vector<T>& out) {
  const T* bias = params + layer.bias;
  out.assign(bias, bias + layer.out);
  const T* w = params + layer.weights;
  T* o = out.data();
  const std::size_t n_out = layer.out;
  for (std::size_t i = 0; i < layer.in; ++i) {
    const T xi = x[i];
    if (xi == T(0)) continue;
    const T* row = w + i * n_out;
    for (std::size_t j = 0; j < n_out; ++j) o[j] += xi * row[j];
  }
}

template <class T>
void activate(Activation act, std::vector<T>& v) {
  if (act == Activation::Tanh) {
    for (auto& x : v) x = std::tanh(x);
  } else {
    for (auto& x : v) x = std::max(x, T(0));
  }
}

// dz <- dy * act'(y), in place.
template <class T>
void activation_backward(Activation act, std::span<const T> y, std::vector<T>& d) {
  if (act == Activation::Tanh) {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= T(1) - y[i] * y[i];
  } else {
    for (std::size_t i = 0; i < d.size(); ++i)
      if (!(y[i] > T(0))) d[i] = T(0);
  }
}

// Adds parameter gradients of a dense layer and (optionally) writes or
// accumulates the input gradient.
template <class T>
void dense_backward(const typename PolicyNetwork<T>::Layer& layer, const T* params, std::span<const T> x,
                    std::span<const T> dz, std::span<double> grad, std::span<T> dx, bool accumulate_dx) {
  const std::size_t n_out = layer.out;
  if (!grad.empty()) {
    double* gw = grad.data() + layer.weights;
    double* gb = grad.data() + layer.bias;
    for (std::size_t j = 0; j < n_out; ++j) gb[j] += static_cast<double>(dz[j]);
    for (std::size_t i = 0; i < layer.in; ++i) {
      const T xi = x[i];
      if (xi == T(0)) continue;
      double* row = gw + i * n_out;
      for (std::size_t j = 0; j < n_out; ++j) row[j] += static_cast<double>(xi * dz[j]);
    }
  }
  if (!dx.empty()) {
    const T* w = params + layer.weights;
    for (std::size_t i = 0; i < layer.in; ++i) {
      const T* row = w + i * n_out;
      T s = T(0);
      for (std::size_t j = 0; j < n_out; ++j) s += row[j] * dz[j];
      if (accumulate_dx) {
        dx[i] += s;
      } else {
        dx[i] = s;
      }
    }
  }
}

}  // namespace

template <class T>
void PolicyNetwork<T>::build_layout() {
  arch_.validate();
  std::size_t offset = 0;
  auto make = [&offset](std::size_t in, std::size_t out) {
    Layer l{in, out, offset, offset + in * out};
    offset += in * out + out;
    return l;
  };
  actor_trunk_.clear();
  critic_trunk_.clear();
  std::size_t in = arch_.input_size();
  for (const int h : arch_.hidden) {
    actor_trunk_.push_back(make(in, static_cast<std::size_t>(h)));
    in = static_cast<std::size_t>(h);
  }
  const std::size_t actor_final = in;
  std::size_t critic_final = actor_final;
  if (!arch_.shared_trunk) {
    in = arch_.input_size();
    for (const int h : arch_.hidden) {
      critic_trunk_.push_back(make(in, static_cast<std::size_t>(h)));
      in = static_cast<std::size_t>(h);
    }
    critic_final = in;
  }
  policy_head_ = make(actor_final, static_cast<std::size_t>(arch_.policy_outputs()));
  value_head_ = make(critic_final, 1);
  params_.resize(offset);
}

template <class T>
PolicyNetwork<T> PolicyNetwork<T>::initialize(const Architecture& arch, std::uint64_t seed) {
  PolicyNetwork net;
  net.arch_ = arch;
  net.build_layout();
  std::fill(net.params_.begin(), net.params_.end(), T(0));
  std::mt19937_64 rng(seed);
  auto fill = [&](const Layer& l, double gain) {
    const double limit = gain / std::sqrt(static_cast<double>(l.in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (std::size_t k = 0; k < l.in * l.out; ++k) net.params_[l.weights + k] = static_cast<T>(dist(rng));
  };
  for (const auto& l : net.actor_trunk_) fill(l, 1.0);
  for (const auto& l : net.critic_trunk_) fill(l, 1.0);
  // Small policy head so a fresh network starts close to uniform.
  fill(net.policy_head_, 0.01);
  fill(net.value_head_, 1.0);
  net.meta_.seed = seed;
  return net;
}

template <class T>
PolicyNetwork<T> PolicyNetwork<T>::from_params(const Architecture& arch, std::vector<T> params, Metadata meta) {
  PolicyNetwork net;
  net.arch_ = arch;
  net.build_layout();
  if (params.size() != net.params_.size())
    throw ConfigError("parameter count " + std::to_string(params.size()) + " does not match architecture (" +
                      std::to_string(net.params_.size()) + ")");
  net.params_ = std::move(params);
  net.meta_ = std::move(meta);
  return net;
}

template <class T>
void PolicyNetwork<T>::check_input(std::size_t n) const {
  if (n != arch_.input_size())
    throw ConfigError("input size " + std::to_string(n) + " does not match network input " +
                      std::to_string(arch_.input_size()));
}

template <class T>
Output<T> PolicyNetwork<T>::forward(std::span<const T> input) const {
  Workspace<T> ws;
  return forward(input, ws);
}

template <class T>
const Output<T>& PolicyNetwork<T>::forward(std::span<const T> input, Workspace<T>& ws) const {
  check_input(input.size());
  const T* p = params_.data();
  ws.actor.resize(actor_trunk_.size());
  std::span<const T> x = input;
  for (std::size_t k = 0; k < actor_trunk_.size(); ++k) {
    dense_forward<T>(actor_trunk_[k], p, x, ws.actor[k]);
    activate(arch_.activation, ws.actor[k]);
    x = ws.actor[k];
  }
  const std::span<const T> actor_final = x;
  std::span<const T> critic_final = actor_final;
  if (!arch_.shared_trunk) {
    ws.critic.resize(critic_trunk_.size());
    x = input;
    for (std::size_t k = 0; k < critic_trunk_.size(); ++k) {
      dense_forward<T>(critic_trunk_[k], p, x, ws.critic[k]);
      activate(arch_.activation, ws.critic[k]);
      x = ws.critic[k];
    }
    critic_final = x;
  }

  dense_forward<T>(policy_head_, p, actor_final, ws.head);
  if (arch_.head == HeadType::Joint) {
    std::copy(ws.head.begin(), ws.head.end(), ws.out.logits.begin());
  } else {
    constexpr int n = gridworld::kNumActions;
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        ws.out.logits[static_cast<std::size_t>(a * n + b)] =
            ws.head[static_cast<std::size_t>(a)] + ws.head[static_cast<std::size_t>(n + b)];
  }
  std::vector<T>& value = ws.scratch_c;
  dense_forward<T>(value_head_, p, critic_final, value);
  ws.out.value = value[0];
  return ws.out;
}

template <class T>
void PolicyNetwork<T>::backward(std::span<const T> input, Workspace<T>& ws, std::span<const T> dlogits, T dvalue,
                                std::span<double> grad_params, std::span<T> grad_input) const {
  check_input(input.size());
  if (dlogits.size() != static_cast<std::size_t>(kJoint)) throw ConfigError("dlogits must have 36 entries");
  if (!grad_params.empty() && grad_params.size() != params_.size())
    throw ConfigError("gradient buffer size does not match parameters");
  if (!grad_input.empty()) {
    check_input(grad_input.size());
    std::fill(grad_input.begin(), grad_input.end(), T(0));
  }
  const T* p = params_.data();

  // Policy head.
  std::vector<T> dhead(static_cast<std::size_t>(arch_.policy_outputs()), T(0));
  if (arch_.head == HeadType::Joint) {
    std::copy(dlogits.begin(), dlogits.end(), dhead.begin());
  } else {
    constexpr int n = gridworld::kNumActions;
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) {
        const T g = dlogits[static_cast<std::size_t>(a * n + b)];
        dhead[static_cast<std::size_t>(a)] += g;
        dhead[static_cast<std::size_t>(n + b)] += g;
      }
    }
  }

  auto trunk_output = [&](const std::vector<std::vector<T>>& acts) -> std::span<const T> {
    return acts.empty() ? input : std::span<const T>(acts.back());
  };
  const std::span<const T> actor_final = trunk_output(ws.actor);
  const std::span<const T> critic_final = arch_.shared_trunk ? actor_final : trunk_output(ws.critic);

  std::vector<T>& d_actor = ws.scratch_a;
  std::vector<T>& d_critic = ws.scratch_b;
  d_actor.assign(actor_final.size(), T(0));
  d_critic.assign(critic_final.size(), T(0));

  const bool actor_has_trunk = !actor_trunk_.empty();
  dense_backward<T>(policy_head_, p, actor_final, dhead, grad_params,
                    actor_has_trunk ? std::span<T>(d_actor) : grad_input, !actor_has_trunk);
  const T dv[1] = {dvalue};
  if (arch_.shared_trunk) {
    dense_backward<T>(value_head_, p, critic_final, dv, grad_params,
                      actor_has_trunk ? std::span<T>(d_critic) : grad_input, !actor_has_trunk);
    if (actor_has_trunk)
      for (std::size_t i = 0; i < d_actor.size(); ++i) d_actor[i] += d_critic[i];
  } else {
    const bool critic_has_trunk = !critic_trunk_.empty();
    dense_backward<T>(value_head_, p, critic_final, dv, grad_params,
                      critic_has_trunk ? std::span<T>(d_critic) : grad_input, !critic_has_trunk);
  }

  auto backprop_trunk = [&](const std::vector<Layer>& trunk, const std::vector<std::vector<T>>& acts,
                            std::vector<T> d) {
    std::vector<T> d_prev;
    for (std::size_t k = trunk.size(); k-- > 0;) {
      activation_backward<T>(arch_.activation, acts[k], d);
      const std::span<const T> x = k == 0 ? input : std::span<const T>(acts[k - 1]);
      if (k == 0) {
        dense_backward<T>(trunk[k], p, x, d, grad_params, grad_input, true);
      } else {
        d_prev.assign(trunk[k].in, T(0));
        dense_backward<T>(trunk[k], p, x, d, grad_params, d_prev, false);
        std::swap(d, d_prev);
      }
    }
  };
  if (actor_has_trunk) backprop_trunk(actor_trunk_, ws.actor, d_actor);
  if (!arch_.shared_trunk && !critic_trunk_.empty()) backprop_trunk(critic_trunk_, ws.critic, d_critic);
}

template <class T>
std::uint64_t PolicyNetwork<T>::params_hash() const {
  std::uint64_t h = 1469598103934665603ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(params_.data());
  for (std::size_t i = 0; i < params_.size() * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

template class PolicyNetwork<float>;
template class PolicyNetwork<double>;

// ---------------------------------------------------------------------------

template <class T>
ActionDistribution softmax_t(std::span<const T> logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
  if (logits.size() != static_cast<std::size_t>(kJoint)) throw ConfigError("expected 36 logits");
  ActionDistribution d;
  d.temperature = temperature;
  double mx = -std::numeric_limits<double>::infinity();
  for (const T z : logits) mx = std::max(mx, static_cast<double>(z));
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    d.probs[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
    total += d.probs[i];
  }
  for (auto& p : d.probs) p /= total;
  return d;
}

template ActionDistribution softmax_t<float>(std::span<const float>, double);
template ActionDistribution softmax_t<double>(std::span<const double>, double);

double kl_divergence(const ActionDistribution& p, const ActionDistribution& q) {
  double kl = 0.0;
  for (std::size_t i = 0; i < p.probs.size(); ++i) {
    if (p.probs[i] <= 0.0) continue;
    kl += p.probs[i] * (std::log(p.probs[i]) - std::log(std::max(q.probs[i], kKlFloor)));
  }
  return std::max(kl, 0.0);
}

namespace {

int num_groups(Control control) {
  return control == Control::Joint ? kJoint : gridworld::kNumActions;
}

struct GroupedLogProbs {
  std::array<double, kJoint> probs{};        // joint softmax
  std::array<double, kJoint> group_logp{};   // log P(group), indexed by group
  std::array<double, kJoint> group_prob{};   // P(group)
};

GroupedLogProbs grouped(const std::array<double, kJoint>& logits, Control control) {
  GroupedLogProbs g;
  double mx = -std::numeric_limits<double>::infinity();
  for (const double z : logits) mx = std::max(mx, z);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    g.probs[i] = std::exp(logits[i] - mx);
    total += g.probs[i];
  }
  const double log_total = std::log(total) + mx;
  for (auto& p : g.probs) p /= total;

  const int n = num_groups(control);
  for (int k = 0; k < n; ++k) {
    double gmx = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < kJoint; ++a)
      if (control_group(control, a) == k) gmx = std::max(gmx, logits[static_cast<std::size_t>(a)]);
    double s = 0.0;
    for (int a = 0; a < kJoint; ++a)
      if (control_group(control, a) == k) s += std::exp(logits[static_cast<std::size_t>(a)] - gmx);
    g.group_logp[static_cast<std::size_t>(k)] = std::log(s) + gmx - log_total;
    g.group_prob[static_cast<std::size_t>(k)] = std::exp(g.group_logp[static_cast<std::size_t>(k)]);
  }
  return g;
}

}  // namespace

double log_prob(const std::array<double, kJoint>& logits, Control control, int action, std::span<double> dlogits) {
  if (action < 0 || action >= kJoint) throw ConfigError("action index out of range");
  const GroupedLogProbs g = grouped(logits, control);
  const int group = control_group(control, action);
  const double lp = g.group_logp[static_cast<std::size_t>(group)];
  if (!dlogits.empty()) {
    // d log m_g / dz_k = [k in g] p_k / m_g - p_k
    const double mg = g.group_prob[static_cast<std::size_t>(group)];
    for (int k = 0; k < kJoint; ++k) {
      const double pk = g.probs[static_cast<std::size_t>(k)];
      const double in_group = control_group(control, k) == group && mg > 0.0 ? pk / mg : 0.0;
      dlogits[static_cast<std::size_t>(k)] = in_group - pk;
    }
  }
  return lp;
}

double entropy(const std::array<double, kJoint>& logits, Control control, std::span<double> dlogits) {
  const GroupedLogProbs g = grouped(logits, control);
  const int n = num_groups(control);
  double h = 0.0;
  for (int k = 0; k < n; ++k) {
    const double m = g.group_prob[static_cast<std::size_t>(k)];
    if (m > 0.0) h -= m * g.group_logp[static_cast<std::size_t>(k)];
  }
  if (!dlogits.empty()) {
    // dH/dz_k = -p_k (log m_{g(k)} + H)
    for (int k = 0; k < kJoint; ++k) {
      const double pk = g.probs[static_cast<std::size_t>(k)];
      const double lm = g.group_logp[static_cast<std::size_t>(control_group(control, k))];
      dlogits[static_cast<std::size_t>(k)] = pk > 0.0 ? -pk * (lm + h) : 0.0;
    }
  }
  return h;
}

int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

// ---------------------------------------------------------------------------

template <class T>
void adam_step(std::span<T> params, std::span<const double> grad, AdamState& state, double lr,
               const AdamConfig& config) {
  if (grad.size() != params.size()) throw ConfigError("gradient size does not match parameters");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    if (lr == 0.0) continue;
    const double update = lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + config.eps);
    params[i] = static_cast<T>(static_cast<double>(params[i]) - update);
  }
}

template void adam_step<float>(std::span<float>, std::span<const double>, AdamState&, double, const AdamConfig&);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamState&, double, const AdamConfig&);

double clip_grad_norm(std::span<double> grad, double max_norm) {
  double sq = 0.0;
  for (const double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-12);
    for (auto& g : grad) g *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoint format (little-endian):
//   8 bytes magic "ENVRBCKP", u32 version,
//   i32 channels, width, height, u32 n_hidden, i32 widths..., u8 activation, u8 head, u8 shared,
//   u64 param count, f32 params...,
//   u64 seed, u64 steps, u32 len + id bytes, u32 len + parent bytes,
//   u64 FNV-1a checksum of everything before it.

namespace {

constexpr char kMagic[8] = {'E', 'N', 'V', 'R', 'B', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  template <class V>
  void put(V v) {
    const auto* b = reinterpret_cast<const char*>(&v);
    buf_.append(b, sizeof v);
  }
  void put_bytes(const void* data, std::size_t n) { buf_.append(static_cast<const char*>(data), n); }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  std::string& str() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  template <class V>
  V get() {
    V v;
    take(&v, sizeof v);
    return v;
  }
  void take(void* out, std::size_t n) {
    if (pos_ + n > data_.size()) throw CheckpointError("checkpoint is truncated");
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    if (n > (1u << 20)) throw CheckpointError("checkpoint string field is implausibly long");
    std::string s(n, '\0');
    take(s.data(), n);
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::string serialize_checkpoint(const PolicyParams& params) {
  Writer w;
  w.put_bytes(kMagic, sizeof kMagic);
  w.put(kVersion);
  const Architecture& a = params.arch();
  w.put(static_cast<std::int32_t>(a.channels));
  w.put(static_cast<std::int32_t>(a.width));
  w.put(static_cast<std::int32_t>(a.height));
  w.put(static_cast<std::uint32_t>(a.hidden.size()));
  for (const int h : a.hidden) w.put(static_cast<std::int32_t>(h));
  w.put(static_cast<std::uint8_t>(a.activation));
  w.put(static_cast<std::uint8_t>(a.head));
  w.put(static_cast<std::uint8_t>(a.shared_trunk ? 1 : 0));
  w.put(static_cast<std::uint64_t>(params.num_params()));
  w.put_bytes(params.params().data(), params.num_params() * sizeof(float));
  w.put(params.meta().seed);
  w.put(params.meta().steps);
  w.put_string(params.meta().id);
  w.put_string(params.meta().parent);
  w.put(fnv1a(w.str()));
  return w.str();
}

PolicyParams deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  char magic[8];
  r.take(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw CheckpointError("not a checkpoint file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Architecture a;
  a.channels = r.get<std::int32_t>();
  a.width = r.get<std::int32_t>();
  a.height = r.get<std::int32_t>();
  const auto n_hidden = r.get<std::uint32_t>();
  if (n_hidden > 64) throw CheckpointError("implausible hidden layer count");
  a.hidden.clear();
  for (std::uint32_t i = 0; i < n_hidden; ++i) a.hidden.push_back(r.get<std::int32_t>());
  const auto act = r.get<std::uint8_t>();
  const auto head = r.get<std::uint8_t>();
  const auto shared = r.get<std::uint8_t>();
  if (act > 1 || head > 1 || shared > 1) throw CheckpointError("corrupt architecture descriptor");
  a.activation = static_cast<Activation>(act);
  a.head = static_cast<HeadType>(head);
  a.shared_trunk = shared == 1;
  const auto count = r.get<std::uint64_t>();
  if (count > (1ull << 32)) throw CheckpointError("implausible parameter count");
  std::vector<float> values(count);
  r.take(values.data(), count * sizeof(float));
  Metadata meta;
  meta.seed = r.get<std::uint64_t>();
  meta.steps = r.get<std::uint64_t>();
  meta.id = r.get_string();
  meta.parent = r.get_string();
  const std::size_t body = r.pos();
  const auto checksum = r.get<std::uint64_t>();
  if (checksum != fnv1a(std::string_view(bytes).substr(0, body))) throw CheckpointError("checkpoint checksum mismatch");
  if (r.pos() != bytes.size()) throw CheckpointError("trailing bytes after checkpoint");
  try {
    return PolicyParams::from_params(a, std::move(values), std::move(meta));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint architecture mismatch: ") + e.what());
  }
}

void save_checkpoint(const PolicyParams& params, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint '" + path + "'");
  const std::string bytes = serialize_checkpoint(params);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

PolicyParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace envrobust::nn
