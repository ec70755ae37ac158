#include "mixri/pipeline.hpp"

#include <chrono>
#include <cmath>

#include "mixri/thread_pool.hpp"

namespace mixri {

namespace {

double ms_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

ObjectAssets make_assets(const std::string& object_id, const TriMesh& mesh,
                         const std::vector<ReferenceView>& bank, int S, int M, uint64_t seed,
                         double tau) {
  std::vector<Eigen::Matrix3d> rotations;
  rotations.reserve(bank.size());
  for (const auto& v : bank) rotations.push_back(v.pose.R);
  const std::vector<int> picked = fps_select(rotations, S, seed);
  ObjectAssets assets;
  assets.object_id = object_id;
  assets.mesh = mesh;
  for (int i : picked) assets.refs.push_back(bank[static_cast<size_t>(i)]);
  assets.corrs = sample_points(assets.refs, M, seed ^ 0x434f5252ULL, tau);
  return assets;
}

InferenceResult run_inference(Matcher& matcher, const ObjectAssets& assets,
                              const ReferenceView& query, const SolverConfig& solver) {
  const auto t_total = std::chrono::steady_clock::now();
  InferenceResult out;
  const int out_size = matcher.config().image_size;
  ReferenceView crop = crop_and_resize(query, out_size);
  out.crop_intrinsics = crop.intrinsics;
  out.crop_size = out_size;

  MatcherInput input = build_matcher_input(matcher, assets, crop.rgb);
  const int N = input.n_points;

  ops::NoGrad ng;
  auto t0 = std::chrono::steady_clock::now();
  Tensor fmaps = matcher.encode(input.images);
  out.timings.encode_ms = ms_since(t0);

  const int64_t D = matcher.config().feature_dim;
  const int64_t grid = matcher.config().grid_size();
  const int S = static_cast<int>(assets.refs.size());

  t0 = std::chrono::steady_clock::now();
  Tensor f0 = ops::permute(ops::reshape(ops::slice(fmaps, 0, 0, 1), {D, grid * grid}), {1, 0});
  std::vector<Tensor> token_slices;
  for (int s = 0; s < S; ++s) {
    Tensor fm = ops::reshape(ops::slice(fmaps, 0, s + 1, 1), {D, grid, grid});
    std::vector<std::array<double, 2>> coords(input.ref_coords.begin() + s * N,
                                              input.ref_coords.begin() + (s + 1) * N);
    token_slices.push_back(ops::reshape(matcher.retrieve_tokens(fm, coords), {1, N, D}));
  }
  Tensor tokens = ops::concat(token_slices, 0);
  Matcher::MixResult mixed = matcher.mix_features(tokens, input.ref_occ, input.ref_coords, f0);
  out.timings.mix_ms = ms_since(t0);

  t0 = std::chrono::steady_clock::now();
  Tensor cost = matcher.build_cost_volume(mixed.fused, mixed.query);
  MatchPrediction pred = matcher.predict_heads(cost);
  out.timings.heads_ms = ms_since(t0);

  out.occ_prob.resize(static_cast<size_t>(N));
  out.coords.resize(static_cast<size_t>(N));
  for (int k = 0; k < N; ++k) {
    out.occ_prob[static_cast<size_t>(k)] = pred.occ_prob.value_at(k);
    out.coords[static_cast<size_t>(k)] =
        Eigen::Vector2d(pred.coords.value_at(2 * k), pred.coords.value_at(2 * k + 1));
  }

  t0 = std::chrono::steady_clock::now();
  const std::vector<Correspondence2D3D> corrs = filter_by_occlusion(
      assets.corrs.points, out.occ_prob, out.coords, solver.tau_occ, out_size, out_size);
  out.correspondences_used = static_cast<int>(corrs.size());
  if (static_cast<int>(corrs.size()) >= solver.min_correspondences)
    out.estimate = ransac_pnp(corrs, crop.intrinsics, solver);
  else
    out.estimate.success = false;
  out.timings.solver_ms = ms_since(t0);
  out.timings.total_ms = ms_since(t_total);
  return out;
}

std::vector<EvalRecord> eval_suite(Matcher& matcher, const ObjectAssets& assets,
                                   const EvalSuiteConfig& cfg) {
  if (cfg.query_count <= 0) throw std::invalid_argument("eval_suite: query_count must be positive");
  std::vector<EvalRecord> records(static_cast<size_t>(cfg.query_count));
  Rng root(cfg.seed ^ 0x4556414cULL);
  std::vector<uint64_t> query_seeds(static_cast<size_t>(cfg.query_count));
  std::vector<bool> query_clutter(static_cast<size_t>(cfg.query_count));
  for (int q = 0; q < cfg.query_count; ++q) {
    Rng r = root.fork(static_cast<uint64_t>(q));
    query_clutter[static_cast<size_t>(q)] = r.uniform() < cfg.clutter_prob;
    query_seeds[static_cast<size_t>(q)] = r.next_u64();
  }

  parallel_for(cfg.query_count, [&](int64_t q) {
    const QuerySample sample = make_query_sample(
        assets, cfg.render_size, matcher.config().image_size, cfg.dist_min, cfg.dist_max,
        query_clutter[static_cast<size_t>(q)], cfg.clutter, cfg.photometric,
        query_seeds[static_cast<size_t>(q)]);

    EvalRecord rec;
    rec.object_id = assets.object_id;
    rec.seed = query_seeds[static_cast<size_t>(q)];
    rec.gt_pose = sample.view.pose;

    PoseEstimate est;
    if (cfg.oracle_correspondences) {
      std::vector<Correspondence2D3D> corrs;
      for (int k = 0; k < sample.labeled.num_points(); ++k) {
        const QueryTruth& t = sample.labeled.query_truth[static_cast<size_t>(k)];
        if (t.occluded) continue;
        Correspondence2D3D c;
        c.point = sample.labeled.points[static_cast<size_t>(k)];
        const int W = sample.view.rgb.width, H = sample.view.rgb.height;
        c.pixel = Eigen::Vector2d((t.coord.x() + 1.0) / 2.0 * (W - 1), (t.coord.y() + 1.0) / 2.0 * (H - 1));
        corrs.push_back(c);
      }
      SolverConfig solver = cfg.solver;
      solver.seed = cfg.solver.seed ^ static_cast<uint64_t>(q);
      if (static_cast<int>(corrs.size()) >= solver.min_correspondences)
        est = ransac_pnp(corrs, sample.view.intrinsics, solver);
    } else {
      SolverConfig solver = cfg.solver;
      solver.seed = cfg.solver.seed ^ static_cast<uint64_t>(q);
      // run_inference crops the raw render itself, exactly like cmd_infer
      est = run_inference(matcher, assets, sample.raw, solver).estimate;
    }

    rec.solver_success = est.success;
    if (est.success) {
      rec.est_pose = est.pose;
      rec.rot_err_deg = rotation_angle(est.pose.R, rec.gt_pose.R) * 180.0 / M_PI;
      rec.trans_err_m = (est.pose.t - rec.gt_pose.t).norm();
      rec.mssd = mssd(est.pose, rec.gt_pose, assets.mesh);
      rec.mspd = mspd(est.pose, rec.gt_pose, assets.mesh, sample.view.intrinsics);
      const auto verts = metric_vertices(assets.mesh);
      rec.vertex_distances.reserve(verts.size());
      for (const auto& v : verts)
        rec.vertex_distances.push_back(
            static_cast<float>((est.pose.apply(v) - rec.gt_pose.apply(v)).norm()));
    } else {
      rec.rot_err_deg = 180.0;
      rec.trans_err_m = std::numeric_limits<double>::infinity();
      rec.mssd = std::numeric_limits<double>::infinity();
      rec.mspd = std::numeric_limits<double>::infinity();
    }
    records[static_cast<size_t>(q)] = std::move(rec);
  });
  return records;
}

}  // namespace mixri
