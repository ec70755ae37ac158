#pragma once

#include <string>
#include <vector>

#include "mixri/checkpoint.hpp"
#include "mixri/metrics.hpp"
#include "mixri/pose_solver.hpp"
#include "mixri/trainer.hpp"

namespace mixri {

struct StageTimings {
  double encode_ms = 0, mix_ms = 0, heads_ms = 0, solver_ms = 0, total_ms = 0;
};

struct InferenceResult {
  PoseEstimate estimate;
  Intrinsics crop_intrinsics;      // intrinsics of the cropped query frame
  int crop_size = 0;
  int correspondences_used = 0;    // after the occlusion gate
  std::vector<double> occ_prob;    // per point
  std::vector<Eigen::Vector2d> coords;  // normalized predictions
  StageTimings timings;
};

/// Full inference path: crop-and-resize around the query mask, encode, mix,
/// cost volume + heads, occlusion gate, RANSAC-PnP. `query` needs rgb, mask
/// and intrinsics; depth and pose are ignored.
InferenceResult run_inference(Matcher& matcher, const ObjectAssets& assets,
                              const ReferenceView& query, const SolverConfig& solver);

struct EvalSuiteConfig {
  int query_count = 100;
  uint64_t seed = 0;
  int render_size = 96;
  double clutter_prob = 0.5;
  ClutterConfig clutter{1, 0.3};
  PhotometricConfig photometric{0.9, 1.1, 0.01};
  double dist_min = 0.85, dist_max = 1.3;
  SolverConfig solver;
  /// when true, bypass the network and feed ground-truth correspondences to
  /// the solver (pipeline check)
  bool oracle_correspondences = false;
};

/// Renders a seeded suite of query poses for one object, runs inference on
/// each, and scores pose errors. Parallel over queries, deterministic.
std::vector<EvalRecord> eval_suite(Matcher& matcher, const ObjectAssets& assets,
                                   const EvalSuiteConfig& cfg);

/// FPS-selects S views from a loaded bank and samples correspondences.
ObjectAssets make_assets(const std::string& object_id, const TriMesh& mesh,
                         const std::vector<ReferenceView>& bank, int S, int M, uint64_t seed,
                         double tau = 0.004);

}  // namespace mixri
