#include "mixri/metrics.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace mixri {

std::vector<Eigen::Vector3d> metric_vertices(const TriMesh& mesh, int max_vertices) {
  const int n = static_cast<int>(mesh.vertices.size());
  const int stride = std::max(1, (n + max_vertices - 1) / max_vertices);
  std::vector<Eigen::Vector3d> out;
  for (int i = 0; i < n; i += stride) out.push_back(mesh.vertices[static_cast<size_t>(i)]);
  return out;
}

double mssd(const Pose& est, const Pose& gt, const TriMesh& mesh, int max_vertices) {
  const auto verts = metric_vertices(mesh, max_vertices);
  const auto& syms = mesh.symmetries;
  if (syms.empty()) throw std::invalid_argument("mssd: symmetry set must contain the identity");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& S : syms) {
    Pose gts;
    gts.R = gt.R * S;
    gts.t = gt.t;
    double worst = 0.0;
    for (const auto& v : verts) {
      const double d = (est.apply(v) - gts.apply(v)).norm();
      if (d > worst) worst = d;
      if (worst >= best) break;  // cannot beat the current minimum
    }
    if (worst < best) best = worst;
  }
  return best;
}

double mspd(const Pose& est, const Pose& gt, const TriMesh& mesh, const Intrinsics& K,
            int max_vertices) {
  const auto verts = metric_vertices(mesh, max_vertices);
  const auto& syms = mesh.symmetries;
  if (syms.empty()) throw std::invalid_argument("mspd: symmetry set must contain the identity");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& S : syms) {
    Pose gts;
    gts.R = gt.R * S;
    gts.t = gt.t;
    double worst = 0.0;
    bool valid = true;
    for (const auto& v : verts) {
      const auto pe = try_project(v, K, est);
      const auto pg = try_project(v, K, gts);
      if (!pe || !pg) {
        valid = false;  // behind-camera vertex; skip this symmetry with a note
        break;
      }
      const double d = (pe->pixel - pg->pixel).norm();
      if (d > worst) worst = d;
      if (worst >= best) break;
    }
    if (valid && worst < best) best = worst;
  }
  if (!std::isfinite(best))
    throw std::domain_error("mspd: every symmetry places vertices behind the camera");
  return best;
}

namespace {

int passes_mssd(double value, double diameter) {
  int count = 0;
  for (int k = 1; k <= 10; ++k)
    if (value <= k * 0.05 * diameter) ++count;
  return count;
}

int passes_mspd(double value, int image_width) {
  const double scale = static_cast<double>(image_width) / 640.0;
  int count = 0;
  for (int k = 1; k <= 10; ++k)
    if (value <= k * 5.0 * scale) ++count;
  return count;
}

}  // namespace

RecallSummary average_recall(const std::vector<EvalRecord>& records, double diameter,
                             int image_width) {
  if (records.empty()) throw std::invalid_argument("average_recall: no records");
  double mssd_acc = 0.0, mspd_acc = 0.0;
  for (const auto& r : records) {
    mssd_acc += r.solver_success ? passes_mssd(r.mssd, diameter) / 10.0 : 0.0;
    mspd_acc += r.solver_success ? passes_mspd(r.mspd, image_width) / 10.0 : 0.0;
  }
  RecallSummary s;
  s.mssd_recall = mssd_acc / static_cast<double>(records.size());
  s.mspd_recall = mspd_acc / static_cast<double>(records.size());
  s.ar = 0.5 * (s.mssd_recall + s.mspd_recall);
  return s;
}

std::string ar_flags(const EvalRecord& record, double diameter, int image_width) {
  const int a = record.solver_success ? passes_mssd(record.mssd, diameter) : 0;
  const int b = record.solver_success ? passes_mspd(record.mspd, image_width) : 0;
  return "mssd=" + std::to_string(a) + ";mspd=" + std::to_string(b);
}

ErrorHeatmap error_heatmap(const Pose& est, const Pose& gt, const TriMesh& mesh,
                           const Intrinsics& K, int width, int height) {
  const ReferenceView render = rasterize(mesh, est, K, width, height);
  ErrorHeatmap out;
  out.distance.assign(static_cast<size_t>(width) * height, -1.f);
  out.color = ImageRGB::make(width, height);
  constexpr double kMax = 0.05;  // meters at full red
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      if (!render.mask.at(x, y)) continue;
      const double d = render.depth.at(x, y);
      const Eigen::Vector3d p = unproject(Eigen::Vector2d(x, y), d, K, est);
      const double err = (est.apply(p) - gt.apply(p)).norm();
      out.distance[static_cast<size_t>(y) * width + x] = static_cast<float>(err);
      const float t = static_cast<float>(std::clamp(err / kMax, 0.0, 1.0));
      float* px = out.color.px(x, y);
      px[0] = t;
      px[1] = 0.1f;
      px[2] = 1.f - t;
    }
  return out;
}

void write_eval_report(const std::string& csv_path, const std::string& json_path,
                       const std::vector<EvalRecord>& records, double diameter, int image_width) {
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot open for writing: " + csv_path);
  csv << "object,seed,rot_err_deg,trans_err_m,mssd,mspd,ar_flags\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%s,%llu,%.9g,%.9g,%.9g,%.9g,%s\n", r.object_id.c_str(),
                  static_cast<unsigned long long>(r.seed), r.rot_err_deg, r.trans_err_m, r.mssd,
                  r.mspd, ar_flags(r, diameter, image_width).c_str());
    csv << buf;
  }
  csv.close();

  const RecallSummary s = average_recall(records, diameter, image_width);
  json j;
  j["ar"] = s.ar;
  j["ar_note"] = "2-metric variant: mean of MSSD and MSPD recalls (no VSD)";
  j["mssd_recall"] = s.mssd_recall;
  j["mspd_recall"] = s.mspd_recall;
  j["records"] = records.size();
  j["diameter"] = diameter;
  j["image_width"] = image_width;
  std::ofstream jf(json_path);
  if (!jf) throw std::runtime_error("cannot open for writing: " + json_path);
  jf << j.dump(2) << "\n";
}

}  // namespace mixri
