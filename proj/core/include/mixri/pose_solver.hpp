#pragma once

#include <cstdint>
#include <vector>

#include "mixri/geometry.hpp"

namespace mixri {

struct Correspondence2D3D {
  Eigen::Vector3d point;  // object frame
  Eigen::Vector2d pixel;  // image
};

struct SolverConfig {
  double tau_occ = 0.8;              // occlusion gate on predicted flags
  double inlier_threshold_px = 4.0;  // reprojection inlier radius
  int max_iterations = 1000;
  double confidence = 0.999;
  int min_correspondences = 6;
  int refine_iterations = 10;
  uint64_t seed = 0;
};

struct PoseEstimate {
  Pose pose;
  std::vector<int> inliers;
  double mean_reprojection_error = 0.0;  // pixels, over inliers
  bool success = false;
};

/// Keeps points whose predicted occlusion probability is <= tau_occ and
/// denormalizes their [-1,1] coordinates back to pixels.
std::vector<Correspondence2D3D> filter_by_occlusion(const std::vector<Eigen::Vector3d>& points,
                                                    const std::vector<double>& occ_prob,
                                                    const std::vector<Eigen::Vector2d>& norm_coords,
                                                    double tau_occ, int width, int height);

/// Algebraic pose candidates from >= 4 correspondences (EPnP, with a
/// homography path for planar point sets), each polished by a few
/// Gauss-Newton steps on reprojection error. Throws std::domain_error on
/// degenerate (collinear) input.
std::vector<Pose> pnp_minimal(const std::vector<Correspondence2D3D>& corrs, const Intrinsics& K);

/// Gauss-Newton on total squared reprojection error with step halving;
/// the error is non-increasing across iterations. Returns the RMS pixel error.
double refine_pose(Pose& pose, const std::vector<Correspondence2D3D>& corrs, const Intrinsics& K,
                   int iterations);

/// Hypothesize-and-verify with adaptive iteration count, then Gauss-Newton
/// refinement over the inliers. Deterministic given cfg.seed.
PoseEstimate ransac_pnp(const std::vector<Correspondence2D3D>& corrs, const Intrinsics& K,
                        const SolverConfig& cfg);

}  // namespace mixri
