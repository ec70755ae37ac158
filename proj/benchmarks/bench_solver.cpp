#include <benchmark/benchmark.h>

#include "mixri/pose_solver.hpp"
#include "mixri/rng.hpp"
#include "mixri/scene.hpp"

using namespace mixri;

namespace {

std::vector<Correspondence2D3D> synth_corrs(int n, double outlier_ratio, double noise_px,
                                            const Intrinsics& K, const Pose& pose, Rng& rng) {
  std::vector<Correspondence2D3D> corrs;
  for (int i = 0; i < n; ++i) {
    Correspondence2D3D c;
    c.point = Eigen::Vector3d(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                              rng.uniform(-0.05, 0.05));
    const auto proj = try_project(c.point, K, pose);
    if (!proj) {
      --i;
      continue;
    }
    c.pixel = proj->pixel;
    if (rng.uniform() < outlier_ratio)
      c.pixel = Eigen::Vector2d(rng.uniform(0, 64), rng.uniform(0, 64));
    else
      c.pixel += Eigen::Vector2d(rng.normal(0, noise_px), rng.normal(0, noise_px));
    corrs.push_back(c);
  }
  return corrs;
}

}  // namespace

static void BM_RansacPnp(benchmark::State& state) {
  Rng rng(11);
  const Intrinsics K = default_intrinsics(64);
  const Pose pose = look_at(Eigen::Vector3d(0.2, 0.1, -0.3), Eigen::Vector3d::Zero(),
                            Eigen::Vector3d(0, 0, 1));
  const auto corrs = synth_corrs(120, 0.3, 1.0, K, pose, rng);
  SolverConfig cfg;
  cfg.seed = 5;
  for (auto _ : state) {
    PoseEstimate est = ransac_pnp(corrs, K, cfg);
    benchmark::DoNotOptimize(est.mean_reprojection_error);
  }
}
BENCHMARK(BM_RansacPnp);

BENCHMARK_MAIN();
