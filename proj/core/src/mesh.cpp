#include "mixri/mesh.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "mixri/rng.hpp"

namespace mixri {

const char* object_kind_name(ObjectKind k) {
  switch (k) {
    case ObjectKind::TexturedCube: return "textured_cube";
    case ObjectKind::TexturedSphere: return "textured_sphere";
    case ObjectKind::TwoPartTool: return "two_part_tool";
  }
  return "unknown";
}

ObjectKind object_kind_from_name(const std::string& name) {
  if (name == "textured_cube") return ObjectKind::TexturedCube;
  if (name == "textured_sphere") return ObjectKind::TexturedSphere;
  if (name == "two_part_tool") return ObjectKind::TwoPartTool;
  throw std::invalid_argument("unknown object kind: " + name);
}

bool TriMesh::watertight() const {
  std::map<std::pair<int, int>, int> edge_count;
  for (const auto& t : triangles) {
    for (int e = 0; e < 3; ++e) {
      int a = t[e], b = t[(e + 1) % 3];
      if (a < 0 || b < 0 || a >= static_cast<int>(vertices.size()) ||
          b >= static_cast<int>(vertices.size()))
        return false;
      if (a > b) std::swap(a, b);
      edge_count[{a, b}]++;
    }
  }
  for (const auto& [edge, count] : edge_count)
    if (count != 2) return false;
  return true;
}

double TriMesh::bounding_radius() const {
  double r = 0.0;
  for (const auto& v : vertices) r = std::max(r, v.norm());
  return r;
}

double TriMesh::diameter() const {
  double d = 0.0;
  for (size_t i = 0; i < vertices.size(); ++i)
    for (size_t j = i + 1; j < vertices.size(); ++j)
      d = std::max(d, (vertices[i] - vertices[j]).norm());
  return d;
}

Eigen::Vector3d TriMesh::centroid() const {
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  for (const auto& v : vertices) c += v;
  return vertices.empty() ? c : Eigen::Vector3d(c / static_cast<double>(vertices.size()));
}

namespace {

// value noise on an integer lattice
double lattice_value(uint64_t seed, int64_t x, int64_t y, int64_t z, int channel) {
  uint64_t h = seed;
  h = fnv1a64(&x, sizeof(x), h);
  h = fnv1a64(&y, sizeof(y), h);
  h = fnv1a64(&z, sizeof(z), h);
  h = fnv1a64(&channel, sizeof(channel), h);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(uint64_t seed, const Eigen::Vector3d& p, int channel) {
  const int64_t x0 = static_cast<int64_t>(std::floor(p.x()));
  const int64_t y0 = static_cast<int64_t>(std::floor(p.y()));
  const int64_t z0 = static_cast<int64_t>(std::floor(p.z()));
  const double fx = smooth(p.x() - x0), fy = smooth(p.y() - y0), fz = smooth(p.z() - z0);
  double acc = 0.0;
  for (int dz = 0; dz <= 1; ++dz)
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
        acc += w * lattice_value(seed, x0 + dx, y0 + dy, z0 + dz, channel);
      }
  return acc;
}

TriMesh icosphere_mesh(int level, double radius) {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  TriMesh m;
  m.vertices = {{-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0},
                {0, -1, phi}, {0, 1, phi}, {0, -1, -phi}, {0, 1, -phi},
                {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1}};
  for (auto& v : m.vertices) v.normalize();
  m.triangles = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                 {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                 {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                 {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int l = 0; l < level; ++l) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      m.vertices.push_back((m.vertices[a] + m.vertices[b]).normalized());
      const int idx = static_cast<int>(m.vertices.size()) - 1;
      midpoint[key] = idx;
      return idx;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(m.triangles.size() * 4);
    for (const auto& f : m.triangles) {
      const int a = mid(f[0], f[1]), b = mid(f[1], f[2]), c = mid(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    m.triangles = std::move(next);
  }
  for (auto& v : m.vertices) v *= radius;
  return m;
}

Eigen::Matrix3d axis_rotation(const Eigen::Vector3d& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

// Closure of a generator set; rotations deduplicated by Frobenius distance.
std::vector<Eigen::Matrix3d> rotation_group(const std::vector<Eigen::Matrix3d>& generators,
                                            size_t max_size) {
  std::vector<Eigen::Matrix3d> group{Eigen::Matrix3d::Identity()};
  auto contains = [&](const Eigen::Matrix3d& r) {
    for (const auto& g : group)
      if ((g - r).norm() < 1e-6) return true;
    return false;
  };
  bool grew = true;
  while (grew && group.size() <= max_size) {
    grew = false;
    for (size_t i = 0; i < group.size(); ++i)
      for (const auto& gen : generators) {
        const Eigen::Matrix3d r = gen * group[i];
        if (!contains(r)) {
          group.push_back(r);
          grew = true;
        }
      }
  }
  return group;
}

}  // namespace

TriMesh make_box(const Eigen::Vector3d& center, const Eigen::Vector3d& half,
                 uint64_t texture_seed) {
  TriMesh m;
  m.texture_seed = texture_seed;
  for (int i = 0; i < 8; ++i)
    m.vertices.push_back(center + Eigen::Vector3d((i & 1) ? half.x() : -half.x(),
                                                  (i & 2) ? half.y() : -half.y(),
                                                  (i & 4) ? half.z() : -half.z()));
  m.triangles = {{0, 2, 1}, {1, 2, 3},   // z-
                 {4, 5, 6}, {5, 7, 6},   // z+
                 {0, 1, 4}, {1, 5, 4},   // y-
                 {2, 6, 3}, {3, 6, 7},   // y+
                 {0, 4, 2}, {2, 4, 6},   // x-
                 {1, 3, 5}, {3, 7, 5}};  // x+
  m.symmetries = {Eigen::Matrix3d::Identity()};
  return m;
}

TriMesh make_object(ObjectKind kind, uint64_t seed) {
  Rng rng(seed ^ 0x6d69785249ULL);
  const uint64_t tex = rng.next_u64();
  switch (kind) {
    case ObjectKind::TexturedCube: {
      // 10 cm cube; the texture breaks all rotational symmetry.
      TriMesh m = make_box(Eigen::Vector3d::Zero(), Eigen::Vector3d(0.05, 0.05, 0.05), tex);
      return m;
    }
    case ObjectKind::TexturedSphere: {
      TriMesh m = icosphere_mesh(3, 0.06);
      m.texture_seed = tex;
      // The tessellation is invariant under the icosahedral rotation group:
      // 72 deg about a vertex axis and a half turn about an edge midpoint.
      const Eigen::Vector3d v0 = m.vertices[0].normalized();
      const Eigen::Vector3d edge_mid = (m.vertices[0] + m.vertices[1]).normalized();
      m.symmetries = rotation_group(
          {axis_rotation(v0, 2.0 * M_PI / 5.0), axis_rotation(edge_mid, M_PI)}, 60);
      return m;
    }
    case ObjectKind::TwoPartTool: {
      // L-shaped tool: a slab with a perpendicular post; the post shadows the
      // slab from many viewpoints.
      TriMesh slab = make_box(Eigen::Vector3d(0, 0, -0.01), Eigen::Vector3d(0.06, 0.025, 0.01), tex);
      TriMesh post = make_box(Eigen::Vector3d(0.035, 0, 0.025), Eigen::Vector3d(0.018, 0.02, 0.025),
                              tex ^ 0x9e3779b97f4a7c15ULL);
      TriMesh m = slab;
      const int off = static_cast<int>(m.vertices.size());
      for (const auto& v : post.vertices) m.vertices.push_back(v);
      for (const auto& t : post.triangles) m.triangles.push_back({t[0] + off, t[1] + off, t[2] + off});
      m.texture_seed = tex;
      m.symmetries = {Eigen::Matrix3d::Identity()};
      return m;
    }
  }
  throw std::invalid_argument("make_object: bad kind");
}

Eigen::Vector3f procedural_color(uint64_t texture_seed, const Eigen::Vector3d& p) {
  Eigen::Vector3f c;
  for (int ch = 0; ch < 3; ++ch) {
    // two octaves of value noise, then a contrast stretch
    const double v = 0.65 * value_noise(texture_seed, p * 55.0, ch) +
                     0.35 * value_noise(texture_seed, p * 170.0, ch + 3);
    const double stretched = 0.5 + 1.6 * (v - 0.5);
    c[ch] = static_cast<float>(std::clamp(stretched, 0.0, 1.0));
  }
  return c;
}

}  // namespace mixri
