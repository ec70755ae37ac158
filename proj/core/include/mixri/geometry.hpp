#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <vector>

#include "mixri/image.hpp"

namespace mixri {

/// Rigid transform mapping object coordinates to camera coordinates.
struct Pose {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return R * p + t; }
  Pose inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
  Pose compose(const Pose& other) const {  // this ∘ other
    return {R * other.R, R * other.t + t};
  }
  Eigen::Vector3d camera_center() const { return -(R.transpose() * t); }
  bool is_valid_rotation(double tol = 1e-9) const;
};

/// Pinhole intrinsics; pixel coordinates have integer values at pixel centers.
struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;

  Eigen::Matrix3d K() const {
    Eigen::Matrix3d k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }
};

struct PointObservation {
  int view_index = -1;
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
  bool occluded = true;
};

struct ProjectedPoint {
  Eigen::Vector2d pixel;
  double depth;  // camera-frame z, meters
};

/// Back-projects pixel u at depth d to an object-frame 3D point.
Eigen::Vector3d unproject(const Eigen::Vector2d& u, double d, const Intrinsics& K, const Pose& T);

/// Projects an object-frame 3D point; throws if it sits at/behind the camera.
ProjectedPoint project(const Eigen::Vector3d& p, const Intrinsics& K, const Pose& T);

/// Non-throwing variant for hypothesis scoring; nullopt when behind camera.
std::optional<ProjectedPoint> try_project(const Eigen::Vector3d& p, const Intrinsics& K,
                                          const Pose& T);

/// Labels a 3D point against one view: occluded when the projection leaves the
/// image, lands on an empty depth pixel, or disagrees with the stored depth by
/// more than tau. Depth is read at the nearest pixel.
PointObservation occlusion_label(const Eigen::Vector3d& p, const DepthMap& depth,
                                 const Intrinsics& K, const Pose& T, double tau,
                                 int view_index = -1);

/// Out-of-plane rotation distance in [0,1]: geodesic distance over pi after
/// removing the roll about the optical axis from both rotations.
double out_of_plane_distance(const Eigen::Matrix3d& R0, const Eigen::Matrix3d& R1);

/// Greedy farthest-point selection under out_of_plane_distance. The first
/// index is drawn uniformly from the seed; ties break to the lowest index.
std::vector<int> fps_select(const std::vector<Eigen::Matrix3d>& bank_rotations, int S,
                            uint64_t seed);

/// Morphological erosion with a full 3x3 structuring element, `iterations` times.
MaskImage erode_mask(const MaskImage& mask, int iterations = 3);

/// Camera poses at the vertices of a subdivided icosahedron, all looking at
/// the origin from `radius` with zero roll (world +z projected as up, +x at
/// the poles). Level 0 -> 12 views, level 2 -> 162.
std::vector<Pose> icosphere_viewpoints(int subdivisions, double radius);

/// Look-at pose: camera at eye, +z toward target, image up approximating -up.
Pose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up);

/// Geodesic rotation angle between two rotations, radians.
double rotation_angle(const Eigen::Matrix3d& R0, const Eigen::Matrix3d& R1);

/// Nearest orthonormal matrix with det +1.
Eigen::Matrix3d orthonormalize(const Eigen::Matrix3d& R);

}  // namespace mixri
