#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <vector>

namespace mixri {

enum class ObjectKind { TexturedCube, TexturedSphere, TwoPartTool };

const char* object_kind_name(ObjectKind k);
ObjectKind object_kind_from_name(const std::string& name);

/// Triangle mesh in the object frame (meters). Color comes from a procedural
/// 3D texture keyed by texture_seed; symmetries list rotations mapping the
/// mesh onto itself (always contains the identity).
struct TriMesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<int, 3>> triangles;
  uint64_t texture_seed = 0;
  std::vector<Eigen::Matrix3d> symmetries;

  bool watertight() const;        // every edge shared by exactly two triangles
  double bounding_radius() const; // from the origin
  double diameter() const;        // max pairwise vertex distance
  Eigen::Vector3d centroid() const;
};

TriMesh make_object(ObjectKind kind, uint64_t seed);

/// Axis-aligned box mesh centered at `center` with half extents `half`.
TriMesh make_box(const Eigen::Vector3d& center, const Eigen::Vector3d& half, uint64_t texture_seed);

/// Deterministic high-frequency 3D texture, RGB in [0,1].
Eigen::Vector3f procedural_color(uint64_t texture_seed, const Eigen::Vector3d& p);

}  // namespace mixri
