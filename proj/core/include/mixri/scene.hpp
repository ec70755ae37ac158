#pragma once

#include <string>
#include <vector>

#include "mixri/rasterizer.hpp"

namespace mixri {

/// f = image width, principal point at the pixel-grid center.
Intrinsics default_intrinsics(int image_size);

/// Camera distance used for reference banks: 2.5x the bounding-sphere radius,
/// so the object fills most of the crop without clipping.
double bank_camera_radius(const TriMesh& mesh);

/// One view per icosphere vertex, all looking at the origin.
/// size must be an icosphere vertex count (12, 42, 162, 642).
std::vector<ReferenceView> build_reference_bank(const TriMesh& mesh, const Intrinsics& K,
                                                int size = 162, int image_size = 224);

struct ClutterConfig {
  int occluder_count = 0;
  double coverage = 0.3;  // fraction of the object's projected disc hidden
};

struct PhotometricConfig {
  double brightness_min = 1.0, brightness_max = 1.0;
  double noise_std = 0.0;
};

struct QueryRender {
  ReferenceView view;  // view.pose is the ground-truth pose
  bool usable = true;  // false when occluders wiped out the mask
};

QueryRender render_query(const TriMesh& mesh, const Pose& query_pose, const Intrinsics& K,
                         int width, int height, const ClutterConfig& clutter,
                         const PhotometricConfig& photometric, uint64_t seed);

/// Square crop around the mask bounding box with 20% margin, resized to
/// out_size; rgb bilinear, depth/mask nearest, intrinsics rescaled. Regions
/// outside the source image read as empty.
ReferenceView crop_and_resize(const ReferenceView& in, int out_size, double margin = 0.2);

struct BankManifest {
  int version = 1;
  std::string object_kind;
  uint64_t object_seed = 0;
  int view_count = 0;
  int image_size = 0;
  Intrinsics intrinsics;
  double camera_radius = 0.0;
  uint64_t seed = 0;
  uint64_t config_hash = 0;
};

void save_bank(const std::string& dir, const std::vector<ReferenceView>& views,
               const BankManifest& manifest);
BankManifest load_bank_manifest(const std::string& dir);
std::vector<ReferenceView> load_bank(const std::string& dir, BankManifest* manifest = nullptr);

}  // namespace mixri
