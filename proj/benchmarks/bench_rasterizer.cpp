#include <benchmark/benchmark.h>

#include "mixri/scene.hpp"

using namespace mixri;

static void BM_RasterizeSphere(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  const TriMesh mesh = make_object(ObjectKind::TexturedSphere, 3);
  const Intrinsics K = default_intrinsics(size);
  const Pose pose = look_at(Eigen::Vector3d(0, 0, -bank_camera_radius(mesh)),
                            Eigen::Vector3d::Zero(), Eigen::Vector3d(0, 0, 1));
  for (auto _ : state) {
    ReferenceView v = rasterize(mesh, pose, K, size, size);
    benchmark::DoNotOptimize(v.depth.values.data());
  }
}
BENCHMARK(BM_RasterizeSphere)->Arg(64)->Arg(224);

static void BM_CropResize(benchmark::State& state) {
  const TriMesh mesh = make_object(ObjectKind::TexturedCube, 3);
  const Intrinsics K = default_intrinsics(96);
  const Pose pose = look_at(Eigen::Vector3d(0.1, 0.2, -bank_camera_radius(mesh)),
                            Eigen::Vector3d::Zero(), Eigen::Vector3d(0, 0, 1));
  const ReferenceView v = rasterize(mesh, pose, K, 96, 96);
  for (auto _ : state) {
    ReferenceView c = crop_and_resize(v, 64);
    benchmark::DoNotOptimize(c.rgb.data.data());
  }
}
BENCHMARK(BM_CropResize);

BENCHMARK_MAIN();
