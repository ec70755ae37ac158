#include "mixri/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "mixri/rng.hpp"

namespace mixri {

bool Pose::is_valid_rotation(double tol) const {
  const Eigen::Matrix3d err = R.transpose() * R - Eigen::Matrix3d::Identity();
  return err.cwiseAbs().maxCoeff() <= tol && std::abs(R.determinant() - 1.0) <= tol;
}

Eigen::Vector3d unproject(const Eigen::Vector2d& u, double d, const Intrinsics& K, const Pose& T) {
  if (d <= 0.0) throw std::invalid_argument("unproject: depth must be positive, got " + std::to_string(d));
  const Eigen::Vector3d ray((u.x() - K.cx) / K.fx, (u.y() - K.cy) / K.fy, 1.0);
  const Eigen::Vector3d p_cam = d * ray;
  return T.inverse().apply(p_cam);
}

ProjectedPoint project(const Eigen::Vector3d& p, const Intrinsics& K, const Pose& T) {
  auto r = try_project(p, K, T);
  if (!r) throw std::domain_error("project: point at or behind the camera plane");
  return *r;
}

std::optional<ProjectedPoint> try_project(const Eigen::Vector3d& p, const Intrinsics& K,
                                          const Pose& T) {
  const Eigen::Vector3d pc = T.apply(p);
  if (pc.z() <= 1e-9) return std::nullopt;
  return ProjectedPoint{{K.fx * pc.x() / pc.z() + K.cx, K.fy * pc.y() / pc.z() + K.cy}, pc.z()};
}

PointObservation occlusion_label(const Eigen::Vector3d& p, const DepthMap& depth,
                                 const Intrinsics& K, const Pose& T, double tau, int view_index) {
  PointObservation obs;
  obs.view_index = view_index;
  auto proj = try_project(p, K, T);
  if (!proj) return obs;  // behind camera counts as occluded
  obs.pixel = proj->pixel;
  const int px = static_cast<int>(std::lround(proj->pixel.x()));
  const int py = static_cast<int>(std::lround(proj->pixel.y()));
  if (px < 0 || px >= depth.width || py < 0 || py >= depth.height) return obs;
  const double stored = depth.at(px, py);
  if (stored <= 0.0) return obs;  // no surface at that pixel
  if (std::abs(proj->depth - stored) > tau) return obs;
  obs.occluded = false;
  return obs;
}

namespace {

// Minimal rotation carrying the canonical viewing direction e_z onto v.
Eigen::Matrix3d min_rotation_from_z(const Eigen::Vector3d& v_in) {
  const Eigen::Vector3d v = v_in.normalized();
  const Eigen::Vector3d ez(0, 0, 1);
  const double c = ez.dot(v);
  if (c < -1.0 + 1e-12) {
    // antipodal: half turn about x
    Eigen::Matrix3d r;
    r << 1, 0, 0, 0, -1, 0, 0, 0, -1;
    return r;
  }
  const Eigen::Vector3d w = ez.cross(v);
  Eigen::Matrix3d wx;
  wx << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return Eigen::Matrix3d::Identity() + wx + wx * wx / (1.0 + c);
}

}  // namespace

double rotation_angle(const Eigen::Matrix3d& R0, const Eigen::Matrix3d& R1) {
  const double tr = (R0.transpose() * R1).trace();
  return std::acos(std::clamp((tr - 1.0) / 2.0, -1.0, 1.0));
}

double out_of_plane_distance(const Eigen::Matrix3d& R0, const Eigen::Matrix3d& R1) {
  // Viewing direction = optical axis expressed in the world frame (third row).
  const Eigen::Matrix3d r0 = min_rotation_from_z(R0.row(2).transpose());
  const Eigen::Matrix3d r1 = min_rotation_from_z(R1.row(2).transpose());
  return rotation_angle(r0, r1) / M_PI;
}

std::vector<int> fps_select(const std::vector<Eigen::Matrix3d>& bank_rotations, int S,
                            uint64_t seed) {
  const int n = static_cast<int>(bank_rotations.size());
  if (S > n)
    throw std::invalid_argument("fps_select: requested " + std::to_string(S) + " of " +
                                std::to_string(n) + " views");
  Rng rng(seed);
  std::vector<int> picked;
  picked.reserve(static_cast<size_t>(S));
  if (S == 0) return picked;

  std::vector<double> min_dist(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
  int cur = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
  picked.push_back(cur);
  for (int step = 1; step < S; ++step) {
    int best = -1;
    double best_d = -1.0;
    for (int i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i], out_of_plane_distance(bank_rotations[cur], bank_rotations[i]));
      const bool taken = std::find(picked.begin(), picked.end(), i) != picked.end();
      if (!taken && min_dist[i] > best_d) {
        best_d = min_dist[i];
        best = i;
      }
    }
    cur = best;
    picked.push_back(cur);
  }
  return picked;
}

MaskImage erode_mask(const MaskImage& mask, int iterations) {
  MaskImage cur = mask;
  for (int it = 0; it < iterations; ++it) {
    MaskImage next = MaskImage::make(mask.width, mask.height);
    for (int y = 0; y < mask.height; ++y)
      for (int x = 0; x < mask.width; ++x) {
        bool keep = true;
        for (int dy = -1; dy <= 1 && keep; ++dy)
          for (int dx = -1; dx <= 1 && keep; ++dx) {
            const int nx = x + dx, ny = y + dy;
            if (nx < 0 || nx >= mask.width || ny < 0 || ny >= mask.height || !cur.at(nx, ny))
              keep = false;
          }
        next.set(x, y, keep ? 1 : 0);
      }
    cur = std::move(next);
  }
  return cur;
}

Pose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up) {
  const Eigen::Vector3d zc = (target - eye).normalized();
  Eigen::Vector3d yc = -(up - up.dot(zc) * zc);
  if (yc.norm() < 1e-9) {
    // up parallel to the optical axis; fall back to world +x
    const Eigen::Vector3d alt(1, 0, 0);
    yc = -(alt - alt.dot(zc) * zc);
  }
  yc.normalize();
  const Eigen::Vector3d xc = yc.cross(zc);
  Pose pose;
  pose.R.row(0) = xc;
  pose.R.row(1) = yc;
  pose.R.row(2) = zc;
  pose.t = -(pose.R * eye);
  return pose;
}

std::vector<Pose> icosphere_viewpoints(int subdivisions, double radius) {
  if (subdivisions < 0) throw std::invalid_argument("icosphere_viewpoints: negative subdivision");
  // Icosahedron vertices from the golden-rectangle construction.
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Eigen::Vector3d> verts = {
      {-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0},
      {0, -1, phi}, {0, 1, phi}, {0, -1, -phi}, {0, 1, -phi},
      {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1}};
  for (auto& v : verts) v.normalize();
  std::vector<std::array<int, 3>> faces = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
      {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
      {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};

  for (int level = 0; level < subdivisions; ++level) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      const Eigen::Vector3d m = (verts[a] + verts[b]).normalized();
      verts.push_back(m);
      const int idx = static_cast<int>(verts.size()) - 1;
      midpoint[key] = idx;
      return idx;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(faces.size() * 4);
    for (const auto& f : faces) {
      const int m01 = mid(f[0], f[1]);
      const int m12 = mid(f[1], f[2]);
      const int m20 = mid(f[2], f[0]);
      next.push_back({f[0], m01, m20});
      next.push_back({f[1], m12, m01});
      next.push_back({f[2], m20, m12});
      next.push_back({m01, m12, m20});
    }
    faces = std::move(next);
  }

  std::vector<Pose> poses;
  poses.reserve(verts.size());
  const Eigen::Vector3d up(0, 0, 1);
  for (const auto& v : verts)
    poses.push_back(look_at(v * radius, Eigen::Vector3d::Zero(), up));
  return poses;
}

Eigen::Matrix3d orthonormalize(const Eigen::Matrix3d& R) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(R, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d out = svd.matrixU() * svd.matrixV().transpose();
  if (out.determinant() < 0) {
    Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
    flip(2, 2) = -1;
    out = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return out;
}

}  // namespace mixri
