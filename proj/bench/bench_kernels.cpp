#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "envrobust/attack.hpp"
#include "envrobust/gridworld.hpp"
#include "envrobust/harness.hpp"
#include "envrobust/kernels.hpp"
#include "envrobust/log.hpp"
#include "envrobust/nn.hpp"

using namespace envrobust;

namespace {

const gridworld::Layout& ring() {
  static const auto layout = gridworld::load_layout_file(ENVROBUST_LAYOUT_DIR "/coordination_ring.layout");
  return layout;
}

struct Fixture {
  nn::PolicyParams net;
  std::vector<float> obs;
  std::size_t width = 0;

  explicit Fixture(std::size_t rows) {
    const auto arch = nn::architecture_for(ring());
    net = nn::PolicyParams::initialize(arch, 7);
    width = arch.input_size();
    obs.resize(rows * width);
    std::mt19937_64 rng(11);
    std::bernoulli_distribution bit(0.05);
    for (auto& v : obs) v = bit(rng) ? 1.0f : 0.0f;
  }
  std::span<const float> row(std::size_t r) const { return std::span<const float>(obs).subspan(r * width, width); }
};

kernels::Exec exec_of(const benchmark::State& state) {
  return state.range(1) ? kernels::Exec::Parallel : kernels::Exec::Serial;
}

void BM_ForwardBatch(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  Fixture f(rows);
  std::vector<nn::Output<float>> out(rows);
  for (auto _ : state) {
    kernels::forward_batch(f.net, rows, [&](std::size_t r, std::vector<float>&) { return f.row(r); },
                           std::span<nn::Output<float>>(out), exec_of(state));
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * rows));
}

void BM_AccumulateGradient(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  Fixture f(rows);
  std::vector<double> grad(f.net.num_params());
  for (auto _ : state) {
    const double loss = kernels::accumulate_gradient(
        f.net, rows, [&](std::size_t r, std::vector<float>&) { return f.row(r); },
        [](std::size_t, const nn::Output<float>& o, std::span<float> dlogits, float& dvalue) {
          for (int a = 0; a < nn::kJoint; ++a) dlogits[a] = o.logits[a];
          dvalue = o.value;
          return 0.5 * static_cast<double>(o.value * o.value);
        },
        grad, exec_of(state));
    benchmark::DoNotOptimize(loss);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * rows));
}

void BM_ScoreUnits(benchmark::State& state) {
  Fixture f(0);
  const auto trajs = attack::collect_attack_trajectories(f.net, ring(), 2, static_cast<int>(state.range(0)), 3);
  const auto units = gridworld::enumerate_unit_perturbations(ring());
  for (auto _ : state) {
    auto scores = attack::score_units(f.net, ring(), trajs, units, exec_of(state));
    benchmark::DoNotOptimize(scores.data());
  }
}

void BM_Evaluate(benchmark::State& state) {
  Fixture f(0);
  harness::EvalSpec spec;
  spec.games = 8;
  spec.horizon = static_cast<int>(state.range(0));
  spec.exec = exec_of(state);
  for (auto _ : state) {
    auto log = harness::run_episodes(f.net, ring(), spec);
    benchmark::DoNotOptimize(log.scores.data());
  }
}

}  // namespace

// Second argument: 0 = serial reference, 1 = OpenMP.
BENCHMARK(BM_ForwardBatch)->ArgsProduct({{256, 4096}, {0, 1}})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_AccumulateGradient)->ArgsProduct({{256, 4096}, {0, 1}})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ScoreUnits)->ArgsProduct({{200}, {0, 1}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Evaluate)->ArgsProduct({{200}, {0, 1}})->Unit(benchmark::kMillisecond);

int main(int argc, char** argv) {
  configure_logging();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
