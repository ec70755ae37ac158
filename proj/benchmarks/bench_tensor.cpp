#include <benchmark/benchmark.h>

#include "mixri/matcher.hpp"
#include "mixri/ops.hpp"
#include "mixri/rng.hpp"

using namespace mixri;

static void BM_MatmulF32(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(7);
  Tensor a = ops::randn({n, n}, Dtype::Float32, rng);
  Tensor b = ops::randn({n, n}, Dtype::Float32, rng);
  for (auto _ : state) {
    Tensor c = ops::matmul(a, b);
    benchmark::DoNotOptimize(c.data<float>());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_MatmulF32)->Arg(64)->Arg(256)->Arg(512);

static void BM_Conv2dForwardBackward(benchmark::State& state) {
  Rng rng(7);
  Tensor x = ops::randn({13, 32, 32, 32}, Dtype::Float32, rng);
  x.set_requires_grad(true);
  Tensor w = ops::randn({32, 32, 3, 3}, Dtype::Float32, rng, 0.0, 0.05);
  w.set_requires_grad(true);
  for (auto _ : state) {
    Tensor y = ops::conv2d(x, w, std::nullopt, 1, 1);
    Tensor l = ops::reduce_sum(y);
    backward(l);
    x.zero_grad();
    w.zero_grad();
    benchmark::DoNotOptimize(l.value_at(0));
  }
}
BENCHMARK(BM_Conv2dForwardBackward);

static void BM_EncoderForward(benchmark::State& state) {
  MatcherConfig cfg;
  cfg.feature_dim = 64;
  cfg.image_size = 64;
  Matcher matcher(cfg);
  Rng rng(7);
  Tensor images = ops::randn({13, 3, 64, 64}, Dtype::Float32, rng);
  ops::NoGrad ng;
  for (auto _ : state) {
    Tensor f = matcher.encode(images);
    benchmark::DoNotOptimize(f.value_at(0));
  }
}
BENCHMARK(BM_EncoderForward);

BENCHMARK_MAIN();
