#pragma once

#include <string>
#include <vector>

#include "mixri/geometry.hpp"
#include "mixri/mesh.hpp"
#include "mixri/rasterizer.hpp"

namespace mixri {

struct EvalRecord {
  std::string object_id;
  uint64_t seed = 0;
  Pose gt_pose;
  Pose est_pose;
  bool solver_success = true;
  double mssd = 0.0;      // meters
  double mspd = 0.0;      // pixels
  double rot_err_deg = 0.0;
  double trans_err_m = 0.0;
  std::vector<float> vertex_distances;  // per subsampled vertex, for heatmaps
};

/// Deterministic vertex subsample (index stride) capped at max_vertices.
std::vector<Eigen::Vector3d> metric_vertices(const TriMesh& mesh, int max_vertices = 1000);

/// Maximum symmetry-aware surface distance:
/// min over symmetries S of max over vertices v of |est(v) - gt(S v)|.
double mssd(const Pose& est, const Pose& gt, const TriMesh& mesh, int max_vertices = 1000);

/// Maximum symmetry-aware projection distance, pixels.
double mspd(const Pose& est, const Pose& gt, const TriMesh& mesh, const Intrinsics& K,
            int max_vertices = 1000);

struct RecallSummary {
  double ar = 0.0;           // mean of the two metric recalls (2-metric variant)
  double mssd_recall = 0.0;  // over thresholds {0.05..0.5 step 0.05} x diameter
  double mspd_recall = 0.0;  // over thresholds {5..50 step 5} x (width/640)
};

/// BOP-style average recall over the standard threshold grids. VSD is not
/// part of this pipeline, so the reported AR averages MSSD and MSPD only.
RecallSummary average_recall(const std::vector<EvalRecord>& records, double diameter,
                             int image_width);

/// Per-threshold pass counts for one record, e.g. "mssd=7;mspd=10".
std::string ar_flags(const EvalRecord& record, double diameter, int image_width);

struct ErrorHeatmap {
  std::vector<float> distance;  // H*W meters, -1 outside the render
  ImageRGB color;               // blue (0) -> red (>= 0.05 m)
};

/// Renders the mesh under est and colors each covered pixel by how far its
/// surface point moved relative to gt, clamped to [0, 0.05] m.
ErrorHeatmap error_heatmap(const Pose& est, const Pose& gt, const TriMesh& mesh,
                           const Intrinsics& K, int width, int height);

/// Report files: CSV rows plus a JSON summary.
void write_eval_report(const std::string& csv_path, const std::string& json_path,
                       const std::vector<EvalRecord>& records, double diameter, int image_width);

}  // namespace mixri
