#pragma once

#include <string>
#include <vector>

#include "mixri/rasterizer.hpp"

namespace mixri {

/// Ground-truth label of one 3D point in the query image: normalized [-1,1]
/// coordinates, or the (-1,-1) sentinel when occluded (disambiguated from the
/// image corner by the flag, never by the coordinate).
struct QueryTruth {
  Eigen::Vector2d coord = Eigen::Vector2d(-1, -1);
  bool occluded = true;
};

/// N 3D object points with their projections and occlusion flags across S
/// reference views, plus optional ground-truth query labels.
struct CorrespondenceSet {
  std::vector<Eigen::Vector3d> points;                      // N
  std::vector<std::vector<PointObservation>> observations;  // N x S
  std::vector<QueryTruth> query_truth;                      // empty or N

  int num_points() const { return static_cast<int>(points.size()); }
  int num_views() const { return points.empty() ? 0 : static_cast<int>(observations[0].size()); }
};

/// For each view, samples M pixels inside the eroded mask, unprojects them,
/// and labels every point in every view (tau depth rule). Produces N = M*S
/// points; each is visible in its source view. A view whose eroded mask is
/// empty raises an error naming the view.
CorrespondenceSet sample_points(const std::vector<ReferenceView>& views, int M, uint64_t seed,
                                double tau = 0.004, int erode_iterations = 3);

/// Projects every point into the query view; occluded or out-of-image points
/// get the (-1,-1) sentinel, visible ones normalized coordinates.
CorrespondenceSet label_query(const CorrespondenceSet& cs, const ReferenceView& query,
                              double tau = 0.004);

// Cache file: magic, version, N, S, seed, config hash, then points (N x 3
// f64), then observations (N x S x (2 f64 + 1 byte flag)), little-endian.
void save_correspondences(const std::string& path, const CorrespondenceSet& cs, uint64_t seed,
                          uint64_t config_hash);
CorrespondenceSet load_correspondences(const std::string& path, uint64_t* seed = nullptr,
                                       uint64_t* config_hash = nullptr);

}  // namespace mixri
