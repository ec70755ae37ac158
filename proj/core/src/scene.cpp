#include "mixri/scene.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "mixri/image_io.hpp"
#include "mixri/rng.hpp"
#include "mixri/thread_pool.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mixri {

Intrinsics default_intrinsics(int image_size) {
  Intrinsics K;
  K.fx = K.fy = static_cast<double>(image_size);
  K.cx = K.cy = (image_size - 1) / 2.0;
  return K;
}

double bank_camera_radius(const TriMesh& mesh) { return 2.5 * mesh.bounding_radius(); }

std::vector<ReferenceView> build_reference_bank(const TriMesh& mesh, const Intrinsics& K, int size,
                                                int image_size) {
  int level = -1;
  for (int l = 0; l <= 4; ++l) {
    const int count = l == 0 ? 12 : 10 * (1 << (2 * l)) + 2;
    if (count == size) level = l;
  }
  if (level < 0)
    throw std::invalid_argument("build_reference_bank: size " + std::to_string(size) +
                                " is not an icosphere vertex count (12, 42, 162, 642)");
  const std::vector<Pose> poses = icosphere_viewpoints(level, bank_camera_radius(mesh));
  std::vector<ReferenceView> views(poses.size());
  parallel_for(static_cast<int64_t>(poses.size()), [&](int64_t i) {
    views[static_cast<size_t>(i)] =
        rasterize(mesh, poses[static_cast<size_t>(i)], K, image_size, image_size);
  });
  return views;
}

namespace {

// Chord offset a in [-1,1] such that the disc fraction beyond the chord is
// `coverage`: (acos(a) - a*sqrt(1-a^2)) / pi = coverage.
double chord_offset(double coverage) {
  double lo = -1.0, hi = 1.0;
  for (int i = 0; i < 60; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double f = (std::acos(mid) - mid * std::sqrt(std::max(0.0, 1.0 - mid * mid))) / M_PI;
    if (f > coverage)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<std::pair<TriMesh, Pose>> make_occluders(const TriMesh& mesh, const Pose& pose,
                                                     const ClutterConfig& clutter, Rng& rng) {
  std::vector<std::pair<TriMesh, Pose>> occluders;
  if (clutter.occluder_count <= 0) return occluders;

  const Eigen::Vector3d center_cam = pose.apply(mesh.centroid());
  const double dist = center_cam.z();
  const double r = mesh.bounding_radius();

  for (int i = 0; i < clutter.occluder_count; ++i) {
    const double phi = rng.uniform(0.0, 2.0 * M_PI);
    const double frac = clutter.coverage / clutter.occluder_count;
    const double a = chord_offset(frac);
    const double z2 = 0.55 * dist;
    const double r2 = r * z2 / dist;  // object silhouette radius at the slab depth

    const Eigen::Vector3d dir(std::cos(phi), std::sin(phi), 0.0);
    const Eigen::Vector3d perp(-std::sin(phi), std::cos(phi), 0.0);
    const double slab_half = 0.5;
    const Eigen::Vector3d slab_center_cam =
        center_cam * (z2 / dist) + dir * (a * r2 + slab_half);

    // slab frame -> camera frame
    Pose occ_pose;
    Eigen::Matrix3d R_cs;
    R_cs.col(0) = dir;
    R_cs.col(1) = perp;
    R_cs.col(2) = Eigen::Vector3d(0, 0, 1);
    occ_pose.R = R_cs;
    occ_pose.t = slab_center_cam;

    TriMesh slab = make_box(Eigen::Vector3d::Zero(), Eigen::Vector3d(slab_half, slab_half, 0.004),
                            rng.next_u64());
    occluders.emplace_back(std::move(slab), occ_pose);
  }
  return occluders;
}

}  // namespace

QueryRender render_query(const TriMesh& mesh, const Pose& query_pose, const Intrinsics& K,
                         int width, int height, const ClutterConfig& clutter,
                         const PhotometricConfig& photometric, uint64_t seed) {
  Rng rng(seed);
  const auto occluders = make_occluders(mesh, query_pose, clutter, rng);
  QueryRender out;
  out.view = rasterize(mesh, query_pose, K, width, height, occluders);
  out.usable = out.view.mask.count() > 0;

  const double brightness = rng.uniform(photometric.brightness_min, photometric.brightness_max);
  const bool noisy = photometric.noise_std > 0.0;
  if (brightness != 1.0 || noisy) {
    for (auto& v : out.view.rgb.data) {
      double x = v * brightness;
      if (noisy) x += rng.normal(0.0, photometric.noise_std);
      v = static_cast<float>(std::clamp(x, 0.0, 1.0));
    }
  }
  return out;
}

ReferenceView crop_and_resize(const ReferenceView& in, int out_size, double margin) {
  int min_x = in.mask.width, max_x = -1, min_y = in.mask.height, max_y = -1;
  for (int y = 0; y < in.mask.height; ++y)
    for (int x = 0; x < in.mask.width; ++x)
      if (in.mask.at(x, y)) {
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
      }
  if (max_x < 0) throw std::runtime_error("crop_and_resize: empty mask");

  const double bw = max_x - min_x + 1, bh = max_y - min_y + 1;
  const double side = std::max(bw, bh) * (1.0 + margin);
  const double cx = 0.5 * (min_x + max_x), cy = 0.5 * (min_y + max_y);
  // crop window top-left boundary in continuous input coordinates
  const double x0 = cx - side / 2.0, y0 = cy - side / 2.0;
  const double s = static_cast<double>(out_size) / side;

  ReferenceView out;
  out.rgb = ImageRGB::make(out_size, out_size);
  out.depth = DepthMap::make(out_size, out_size);
  out.mask = MaskImage::make(out_size, out_size);
  out.pose = in.pose;
  out.intrinsics.fx = in.intrinsics.fx * s;
  out.intrinsics.fy = in.intrinsics.fy * s;
  out.intrinsics.cx = s * (in.intrinsics.cx - x0 + 0.5) - 0.5;
  out.intrinsics.cy = s * (in.intrinsics.cy - y0 + 0.5) - 0.5;

  for (int j = 0; j < out_size; ++j) {
    const double yi = y0 + (j + 0.5) / s - 0.5;
    for (int i = 0; i < out_size; ++i) {
      const double xi = x0 + (i + 0.5) / s - 0.5;
      // nearest for mask and depth
      const int nx = static_cast<int>(std::lround(xi));
      const int ny = static_cast<int>(std::lround(yi));
      if (nx >= 0 && nx < in.mask.width && ny >= 0 && ny < in.mask.height) {
        out.mask.set(i, j, in.mask.at(nx, ny));
        out.depth.set(i, j, in.depth.at(nx, ny));
      }
      // bilinear rgb, zero outside
      const int bx0 = static_cast<int>(std::floor(xi));
      const int by0 = static_cast<int>(std::floor(yi));
      const double fx = xi - bx0, fy = yi - by0;
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int dy = 0; dy <= 1; ++dy)
          for (int dx = 0; dx <= 1; ++dx) {
            const int sx = bx0 + dx, sy = by0 + dy;
            if (sx < 0 || sx >= in.rgb.width || sy < 0 || sy >= in.rgb.height) continue;
            const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
            acc += w * in.rgb.px(sx, sy)[c];
          }
        out.rgb.px(i, j)[c] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// bank persistence

namespace {

std::string view_stem(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "view_%03d", i);
  return buf;
}

json pose_to_json(const Pose& pose) {
  json arr = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) arr.push_back(pose.R(r, c));
  for (int r = 0; r < 3; ++r) arr.push_back(pose.t(r));
  return arr;
}

Pose pose_from_json(const json& arr) {
  if (arr.size() != 12) throw std::runtime_error("meta.json: pose must hold 12 numbers");
  Pose pose;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) pose.R(r, c) = arr[r * 3 + c].get<double>();
  for (int r = 0; r < 3; ++r) pose.t(r) = arr[9 + r].get<double>();
  return pose;
}

}  // namespace

void save_bank(const std::string& dir, const std::vector<ReferenceView>& views,
               const BankManifest& manifest) {
  fs::create_directories(dir);
  for (size_t i = 0; i < views.size(); ++i) {
    const std::string stem = (fs::path(dir) / view_stem(static_cast<int>(i))).string();
    const ReferenceView& v = views[i];
    write_png_rgb(stem + ".rgb.png", v.rgb);
    write_depth_bin(stem + ".depth.bin", v.depth);
    write_png_gray(stem + ".mask.png", v.mask);
    json meta;
    meta["pose"] = pose_to_json(v.pose);
    meta["intrinsics"] = {v.intrinsics.fx, v.intrinsics.fy, v.intrinsics.cx, v.intrinsics.cy};
    std::ofstream f(stem + ".meta.json");
    f << meta.dump(2) << "\n";
  }
  json m;
  m["version"] = manifest.version;
  m["object_kind"] = manifest.object_kind;
  m["object_seed"] = manifest.object_seed;
  m["view_count"] = manifest.view_count;
  m["image_size"] = manifest.image_size;
  m["intrinsics"] = {manifest.intrinsics.fx, manifest.intrinsics.fy, manifest.intrinsics.cx,
                     manifest.intrinsics.cy};
  m["camera_radius"] = manifest.camera_radius;
  m["seed"] = manifest.seed;
  m["config_hash"] = manifest.config_hash;
  std::ofstream f(fs::path(dir) / "bank.json");
  f << m.dump(2) << "\n";
}

BankManifest load_bank_manifest(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "bank.json");
  if (!f) throw std::runtime_error("missing bank manifest: " + dir + "/bank.json");
  json m = json::parse(f);
  BankManifest manifest;
  manifest.version = m.at("version").get<int>();
  manifest.object_kind = m.at("object_kind").get<std::string>();
  manifest.object_seed = m.at("object_seed").get<uint64_t>();
  manifest.view_count = m.at("view_count").get<int>();
  manifest.image_size = m.at("image_size").get<int>();
  manifest.intrinsics.fx = m.at("intrinsics")[0].get<double>();
  manifest.intrinsics.fy = m.at("intrinsics")[1].get<double>();
  manifest.intrinsics.cx = m.at("intrinsics")[2].get<double>();
  manifest.intrinsics.cy = m.at("intrinsics")[3].get<double>();
  manifest.camera_radius = m.at("camera_radius").get<double>();
  manifest.seed = m.at("seed").get<uint64_t>();
  manifest.config_hash = m.at("config_hash").get<uint64_t>();
  return manifest;
}

std::vector<ReferenceView> load_bank(const std::string& dir, BankManifest* manifest_out) {
  BankManifest manifest = load_bank_manifest(dir);
  if (manifest_out) *manifest_out = manifest;
  std::vector<ReferenceView> views(static_cast<size_t>(manifest.view_count));
  for (int i = 0; i < manifest.view_count; ++i) {
    const std::string stem = (fs::path(dir) / view_stem(i)).string();
    ReferenceView& v = views[static_cast<size_t>(i)];
    v.rgb = read_png_rgb(stem + ".rgb.png");
    v.depth = read_depth_bin(stem + ".depth.bin");
    v.mask = read_png_gray(stem + ".mask.png");
    std::ifstream f(stem + ".meta.json");
    if (!f) throw std::runtime_error("missing view metadata: " + stem + ".meta.json");
    json meta = json::parse(f);
    v.pose = pose_from_json(meta.at("pose"));
    v.intrinsics.fx = meta.at("intrinsics")[0].get<double>();
    v.intrinsics.fy = meta.at("intrinsics")[1].get<double>();
    v.intrinsics.cx = meta.at("intrinsics")[2].get<double>();
    v.intrinsics.cy = meta.at("intrinsics")[3].get<double>();
  }
  return views;
}

}  // namespace mixri
