// Test-only oracles, written independently of the library code they check.
#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "mixri/geometry.hpp"
#include "mixri/mesh.hpp"
#include "mixri/rng.hpp"

namespace mixri::testing {

/// Moller-Trumbore ray/triangle intersection; returns the ray parameter t.
inline std::optional<double> ray_triangle(const Eigen::Vector3d& origin,
                                          const Eigen::Vector3d& dir, const Eigen::Vector3d& v0,
                                          const Eigen::Vector3d& v1, const Eigen::Vector3d& v2) {
  const Eigen::Vector3d e1 = v1 - v0, e2 = v2 - v0;
  const Eigen::Vector3d h = dir.cross(e2);
  const double a = e1.dot(h);
  if (std::abs(a) < 1e-14) return std::nullopt;
  const double f = 1.0 / a;
  const Eigen::Vector3d s = origin - v0;
  const double u = f * s.dot(h);
  if (u < -1e-12 || u > 1.0 + 1e-12) return std::nullopt;
  const Eigen::Vector3d q = s.cross(e1);
  const double v = f * dir.dot(q);
  if (v < -1e-12 || u + v > 1.0 + 1e-12) return std::nullopt;
  const double t = f * e2.dot(q);
  if (t <= 1e-12) return std::nullopt;
  return t;
}

/// First-hit distance of the ray through the full mesh (brute force).
inline std::optional<double> ray_cast(const TriMesh& mesh, const Eigen::Vector3d& origin,
                                      const Eigen::Vector3d& dir) {
  std::optional<double> best;
  for (const auto& tri : mesh.triangles) {
    const auto t = ray_triangle(origin, dir, mesh.vertices[static_cast<size_t>(tri[0])],
                                mesh.vertices[static_cast<size_t>(tri[1])],
                                mesh.vertices[static_cast<size_t>(tri[2])]);
    if (t && (!best || *t < *best)) best = *t;
  }
  return best;
}

/// Ray-cast visibility of an on-surface point from a camera pose: the first
/// surface the camera ray meets must be the point itself.
inline bool oracle_visible(const TriMesh& mesh, const Pose& pose, const Eigen::Vector3d& p,
                           double tol = 1e-6) {
  const Eigen::Vector3d c = pose.camera_center();
  Eigen::Vector3d dir = p - c;
  const double dist = dir.norm();
  dir /= dist;
  const auto hit = ray_cast(mesh, c, dir);
  if (!hit) return false;  // numerical miss; treat as not visible
  return *hit >= dist - tol;
}

/// Uniform point on the mesh surface (triangle by area, then barycentric).
inline Eigen::Vector3d sample_surface_point(const TriMesh& mesh, Rng& rng, int* tri_index = nullptr) {
  std::vector<double> cum;
  double total = 0.0;
  for (const auto& tri : mesh.triangles) {
    const Eigen::Vector3d& a = mesh.vertices[static_cast<size_t>(tri[0])];
    const Eigen::Vector3d& b = mesh.vertices[static_cast<size_t>(tri[1])];
    const Eigen::Vector3d& c = mesh.vertices[static_cast<size_t>(tri[2])];
    total += 0.5 * ((b - a).cross(c - a)).norm();
    cum.push_back(total);
  }
  const double pick = rng.uniform(0.0, total);
  size_t idx = 0;
  while (idx + 1 < cum.size() && cum[idx] < pick) ++idx;
  if (tri_index) *tri_index = static_cast<int>(idx);
  const auto& tri = mesh.triangles[idx];
  double u = rng.uniform(), v = rng.uniform();
  if (u + v > 1.0) {
    u = 1.0 - u;
    v = 1.0 - v;
  }
  return mesh.vertices[static_cast<size_t>(tri[0])] * (1 - u - v) +
         mesh.vertices[static_cast<size_t>(tri[1])] * u +
         mesh.vertices[static_cast<size_t>(tri[2])] * v;
}

/// Random rotation from a uniform quaternion.
inline Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  while (q.norm() < 1e-9) q = Eigen::Quaterniond(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

/// True when the projected pixel sits within one pixel of a depth
/// discontinuity or image border (the silhouette band the labels exclude).
inline bool near_silhouette(const DepthMap& depth, const Eigen::Vector2d& pixel,
                            double jump = 0.01) {
  const int px = static_cast<int>(std::lround(pixel.x()));
  const int py = static_cast<int>(std::lround(pixel.y()));
  if (px < 1 || px >= depth.width - 1 || py < 1 || py >= depth.height - 1) return true;
  const double center = depth.at(px, py);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const double d = depth.at(px + dx, py + dy);
      if (d <= 0.0 || std::abs(d - center) > jump) return true;
    }
  return false;
}

}  // namespace mixri::testing
