#include "mixri/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mixri {

namespace {

constexpr double kNearZ = 1e-4;

struct CamVertex {
  Eigen::Vector3d cam;  // camera-space position
  Eigen::Vector3d obj;  // object-space position (texture lookup)
};

CamVertex lerp(const CamVertex& a, const CamVertex& b, double t) {
  return {a.cam + t * (b.cam - a.cam), a.obj + t * (b.obj - a.obj)};
}

// Sutherland-Hodgman against the z = kNearZ plane.
int clip_near(const CamVertex in[3], CamVertex out[4]) {
  int n = 0;
  for (int i = 0; i < 3; ++i) {
    const CamVertex& cur = in[i];
    const CamVertex& nxt = in[(i + 1) % 3];
    const bool cin = cur.cam.z() > kNearZ;
    const bool nin = nxt.cam.z() > kNearZ;
    if (cin) out[n++] = cur;
    if (cin != nin) {
      const double t = (kNearZ - cur.cam.z()) / (nxt.cam.z() - cur.cam.z());
      out[n++] = lerp(cur, nxt, t);
    }
  }
  return n;
}

struct Raster {
  int width, height;
  ImageRGB* rgb;
  DepthMap* depth;
  MaskImage* mask;
};

void draw_mesh(const TriMesh& mesh, const Pose& pose, const Intrinsics& K, Raster r,
               bool is_object) {
  // camera-frame light with an ambient floor
  const Eigen::Vector3d light = Eigen::Vector3d(0.25, -0.35, 0.9).normalized();
  const double ambient = 0.35;

  std::vector<Eigen::Vector3d> cam(mesh.vertices.size());
  for (size_t i = 0; i < mesh.vertices.size(); ++i) cam[i] = pose.apply(mesh.vertices[i]);

  for (const auto& tri : mesh.triangles) {
    CamVertex raw[3] = {{cam[tri[0]], mesh.vertices[tri[0]]},
                        {cam[tri[1]], mesh.vertices[tri[1]]},
                        {cam[tri[2]], mesh.vertices[tri[2]]}};
    CamVertex poly[4];
    const int npoly = clip_near(raw, poly);
    if (npoly < 3) continue;

    // flat shading from the unclipped face normal, oriented toward the camera
    Eigen::Vector3d n = (raw[1].cam - raw[0].cam).cross(raw[2].cam - raw[0].cam);
    const double nl = n.norm();
    if (nl < 1e-18) continue;
    n /= nl;
    if (n.z() > 0) n = -n;
    const double intensity = ambient + (1.0 - ambient) * std::max(0.0, -n.dot(light));

    for (int f = 1; f + 1 < npoly; ++f) {
      const CamVertex* v[3] = {&poly[0], &poly[f], &poly[f + 1]};
      double px[3], py[3], iz[3];
      Eigen::Vector3d obj_over_z[3];
      for (int i = 0; i < 3; ++i) {
        const double z = v[i]->cam.z();
        px[i] = K.fx * v[i]->cam.x() / z + K.cx;
        py[i] = K.fy * v[i]->cam.y() / z + K.cy;
        iz[i] = 1.0 / z;
        obj_over_z[i] = v[i]->obj / z;
      }
      const double area =
          (px[1] - px[0]) * (py[2] - py[0]) - (px[2] - px[0]) * (py[1] - py[0]);
      if (std::abs(area) < 1e-12) continue;

      const int x_min = std::max(0, static_cast<int>(std::ceil(std::min({px[0], px[1], px[2]}))));
      const int x_max =
          std::min(r.width - 1, static_cast<int>(std::floor(std::max({px[0], px[1], px[2]}))));
      const int y_min = std::max(0, static_cast<int>(std::ceil(std::min({py[0], py[1], py[2]}))));
      const int y_max =
          std::min(r.height - 1, static_cast<int>(std::floor(std::max({py[0], py[1], py[2]}))));

      for (int y = y_min; y <= y_max; ++y)
        for (int x = x_min; x <= x_max; ++x) {
          // barycentric at the pixel center (integer coordinates)
          const double w0 = ((px[1] - x) * (py[2] - y) - (px[2] - x) * (py[1] - y)) / area;
          const double w1 = ((px[2] - x) * (py[0] - y) - (px[0] - x) * (py[2] - y)) / area;
          const double w2 = 1.0 - w0 - w1;
          if (w0 < 0 || w1 < 0 || w2 < 0) continue;
          const double inv_z = w0 * iz[0] + w1 * iz[1] + w2 * iz[2];
          const double z = 1.0 / inv_z;
          const float prev = r.depth->at(x, y);
          if (prev > 0.f && static_cast<double>(prev) <= z) continue;
          const Eigen::Vector3d obj =
              (w0 * obj_over_z[0] + w1 * obj_over_z[1] + w2 * obj_over_z[2]) * z;
          const Eigen::Vector3f base = procedural_color(mesh.texture_seed, obj);
          float* px_out = r.rgb->px(x, y);
          px_out[0] = static_cast<float>(base[0] * intensity);
          px_out[1] = static_cast<float>(base[1] * intensity);
          px_out[2] = static_cast<float>(base[2] * intensity);
          r.depth->set(x, y, static_cast<float>(z));
          r.mask->set(x, y, is_object ? 1 : 0);
        }
    }
  }
}

}  // namespace

ReferenceView rasterize(const TriMesh& mesh, const Pose& pose, const Intrinsics& K, int width,
                        int height, const std::vector<std::pair<TriMesh, Pose>>& occluders) {
  ReferenceView view;
  view.rgb = ImageRGB::make(width, height);
  view.depth = DepthMap::make(width, height);
  view.mask = MaskImage::make(width, height);
  view.pose = pose;
  view.intrinsics = K;

  Raster r{width, height, &view.rgb, &view.depth, &view.mask};
  draw_mesh(mesh, pose, K, r, true);
  if (view.mask.count() == 0)
    throw std::runtime_error("rasterize: object projects to an empty mask");
  for (const auto& [omesh, opose] : occluders) draw_mesh(omesh, opose, K, r, false);
  return view;
}

}  // namespace mixri
