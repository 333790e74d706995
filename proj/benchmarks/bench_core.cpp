#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "sdtc/autodiff.hpp"
#include "sdtc/features.hpp"
#include "sdtc/network.hpp"

using namespace sdtc;

namespace {

std::vector<Matrix> random_segments(std::size_t count, Eigen::Index rows, Eigen::Index cols) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n;
  std::vector<Matrix> out;
  for (std::size_t s = 0; s < count; ++s) {
    Matrix m(rows, cols);
    // Random walk columns so the generalized eigenproblem is not degenerate.
    for (Eigen::Index c = 0; c < cols; ++c) {
      double x = 0;
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = (x = 0.9 * x + n(rng));
    }
    out.push_back(std::move(m));
  }
  return out;
}

// FD001-sized network: L=28, J+P=16, 64 filters, D=8, two 16-d advanced capsules.
ModelConfig fd001_model() {
  ModelConfig c;
  c.window_length = 28;
  c.channels = 16;
  c.filters = 64;
  c.capsule_dim = 8;
  c.capsule_channels = 8;
  c.capsule_kernel = {1, 8};
  c.num_advanced = 2;
  c.advanced_dim = 16;
  c.lstm_units = 16;
  c.output_scale = 125.0;
  return c;
}

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

static void BM_FitSfa(benchmark::State& state) {
  const auto rows = static_cast<Eigen::Index>(state.range(0));
  const auto segments = random_segments(10, rows, 14);
  for (auto _ : state) benchmark::DoNotOptimize(fit_sfa(segments));
  state.SetItemsProcessed(state.iterations() * 10 * rows);
}
BENCHMARK(BM_FitSfa)->Arg(100)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);

static void BM_DynamicRouting(benchmark::State& state) {
  const auto inputs = static_cast<std::size_t>(state.range(0));
  const auto predictions = random_tensor({inputs, 2, 16}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(dynamic_routing(predictions, 3));
}
BENCHMARK(BM_DynamicRouting)->Arg(32)->Arg(224)->Arg(1024);

static void BM_Predict(benchmark::State& state) {
  const auto config = fd001_model();
  std::mt19937_64 rng(1);
  const auto params = init_parameters(config, rng);
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto frames = random_tensor({batch, config.sequence_length, config.window_length, config.channels}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(predict(config, params, frames));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_Predict)->Arg(1)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_ForwardBackward(benchmark::State& state) {
  const auto config = fd001_model();
  std::mt19937_64 rng(1);
  const auto params = init_parameters(config, rng);
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto frames = random_tensor({batch, config.sequence_length, config.window_length, config.channels}, 5);
  std::mt19937_64 dropout_rng(2);
  for (auto _ : state) {
    Tape tape;
    BoundParameters bound(tape, params);
    ForwardOptions opts;
    opts.mode = Mode::training;
    opts.rng = &dropout_rng;
    auto out = model_forward(tape, config, bound, frames, opts);
    tape.backward(ad::sum(out));
    benchmark::DoNotOptimize(bound.gradients());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_ForwardBackward)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
