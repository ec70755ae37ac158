#include "mixri/pose_solver.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mixri/rng.hpp"

namespace mixri {

std::vector<Correspondence2D3D> filter_by_occlusion(const std::vector<Eigen::Vector3d>& points,
                                                    const std::vector<double>& occ_prob,
                                                    const std::vector<Eigen::Vector2d>& norm_coords,
                                                    double tau_occ, int width, int height) {
  std::vector<Correspondence2D3D> out;
  for (size_t k = 0; k < points.size(); ++k) {
    if (occ_prob[k] > tau_occ) continue;
    Correspondence2D3D c;
    c.point = points[k];
    c.pixel = Eigen::Vector2d((norm_coords[k].x() + 1.0) / 2.0 * (width - 1),
                              (norm_coords[k].y() + 1.0) / 2.0 * (height - 1));
    out.push_back(c);
  }
  return out;
}

namespace {

double reprojection_error(const Pose& pose, const Correspondence2D3D& c, const Intrinsics& K) {
  auto proj = try_project(c.point, K, pose);
  if (!proj) return std::numeric_limits<double>::infinity();
  return (proj->pixel - c.pixel).norm();
}

double mean_error(const Pose& pose, const std::vector<Correspondence2D3D>& corrs,
                  const Intrinsics& K) {
  double acc = 0.0;
  for (const auto& c : corrs) acc += reprojection_error(pose, c, K);
  return corrs.empty() ? 0.0 : acc / static_cast<double>(corrs.size());
}

// Absolute orientation (Horn): rigid transform taking object points onto
// camera points.
Pose absolute_orientation(const std::vector<Eigen::Vector3d>& obj,
                          const std::vector<Eigen::Vector3d>& cam) {
  Eigen::Vector3d co = Eigen::Vector3d::Zero(), cc = Eigen::Vector3d::Zero();
  const double n = static_cast<double>(obj.size());
  for (const auto& p : obj) co += p;
  for (const auto& p : cam) cc += p;
  co /= n;
  cc /= n;
  Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
  for (size_t i = 0; i < obj.size(); ++i) H += (obj[i] - co) * (cam[i] - cc).transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d R = svd.matrixV() * svd.matrixU().transpose();
  if (R.determinant() < 0) {
    Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
    flip(2, 2) = -1;
    R = svd.matrixV() * flip * svd.matrixU().transpose();
  }
  Pose pose;
  pose.R = R;
  pose.t = cc - R * co;
  return pose;
}

// ---- EPnP (non-planar point sets) ----

struct EpnpWork {
  std::vector<Eigen::Vector3d> control;   // 4 control points, object frame
  Eigen::MatrixXd alphas;                 // n x 4 barycentric coordinates
  Eigen::Matrix<double, 12, 4> nullv;     // 4 smallest eigenvectors of MtM
  Eigen::Matrix<double, 6, 10> L;
  Eigen::Matrix<double, 6, 1> rho;
};

void epnp_prepare(const std::vector<Correspondence2D3D>& corrs, const Intrinsics& K,
                  const Eigen::Vector3d& centroid, const Eigen::Matrix3d& basis, EpnpWork& w) {
  const size_t n = corrs.size();
  w.control.resize(4);
  w.control[0] = centroid;
  for (int i = 0; i < 3; ++i) w.control[static_cast<size_t>(i) + 1] = centroid + basis.col(i);

  Eigen::Matrix3d B;
  for (int i = 0; i < 3; ++i) B.col(i) = basis.col(i);
  const Eigen::Matrix3d Binv = B.inverse();

  w.alphas.resize(static_cast<Eigen::Index>(n), 4);
  for (size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d a = Binv * (corrs[i].point - centroid);
    w.alphas(static_cast<Eigen::Index>(i), 1) = a.x();
    w.alphas(static_cast<Eigen::Index>(i), 2) = a.y();
    w.alphas(static_cast<Eigen::Index>(i), 3) = a.z();
    w.alphas(static_cast<Eigen::Index>(i), 0) = 1.0 - a.sum();
  }

  Eigen::MatrixXd M(2 * static_cast<Eigen::Index>(n), 12);
  for (size_t i = 0; i < n; ++i) {
    const double u = corrs[i].pixel.x(), v = corrs[i].pixel.y();
    for (int j = 0; j < 4; ++j) {
      const double a = w.alphas(static_cast<Eigen::Index>(i), j);
      M(2 * static_cast<Eigen::Index>(i), 3 * j) = a * K.fx;
      M(2 * static_cast<Eigen::Index>(i), 3 * j + 1) = 0.0;
      M(2 * static_cast<Eigen::Index>(i), 3 * j + 2) = a * (K.cx - u);
      M(2 * static_cast<Eigen::Index>(i) + 1, 3 * j) = 0.0;
      M(2 * static_cast<Eigen::Index>(i) + 1, 3 * j + 1) = a * K.fy;
      M(2 * static_cast<Eigen::Index>(i) + 1, 3 * j + 2) = a * (K.cy - v);
    }
  }
  const Eigen::Matrix<double, 12, 12> MtM = M.transpose() * M;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 12, 12>> eig(MtM);
  for (int i = 0; i < 4; ++i) w.nullv.col(i) = eig.eigenvectors().col(i);  // ascending order

  // L * beta10 = rho over the 6 control-point pair distances
  const int pairs[6][2] = {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}};
  for (int p = 0; p < 6; ++p) {
    const int a = pairs[p][0], b = pairs[p][1];
    w.rho(p) = (w.control[static_cast<size_t>(a)] - w.control[static_cast<size_t>(b)]).squaredNorm();
    Eigen::Vector3d dv[4];
    for (int k = 0; k < 4; ++k)
      dv[k] = w.nullv.col(k).segment<3>(3 * a) - w.nullv.col(k).segment<3>(3 * b);
    // beta10 order: b11 b12 b22 b13 b23 b33 b14 b24 b34 b44
    w.L(p, 0) = dv[0].dot(dv[0]);
    w.L(p, 1) = 2 * dv[0].dot(dv[1]);
    w.L(p, 2) = dv[1].dot(dv[1]);
    w.L(p, 3) = 2 * dv[0].dot(dv[2]);
    w.L(p, 4) = 2 * dv[1].dot(dv[2]);
    w.L(p, 5) = dv[2].dot(dv[2]);
    w.L(p, 6) = 2 * dv[0].dot(dv[3]);
    w.L(p, 7) = 2 * dv[1].dot(dv[3]);
    w.L(p, 8) = 2 * dv[2].dot(dv[3]);
    w.L(p, 9) = dv[3].dot(dv[3]);
  }
}

Eigen::Vector4d betas_case1(const EpnpWork& w) {
  // assume x ~ b1 v1: use columns b11 b12 b13 b14
  Eigen::Matrix<double, 6, 4> L;
  L.col(0) = w.L.col(0);
  L.col(1) = w.L.col(1);
  L.col(2) = w.L.col(3);
  L.col(3) = w.L.col(6);
  const Eigen::Vector4d b = L.colPivHouseholderQr().solve(w.rho);
  Eigen::Vector4d betas;
  betas[0] = std::sqrt(std::abs(b[0]));
  betas[1] = b[0] != 0.0 ? b[1] / betas[0] : 0.0;
  betas[2] = b[0] != 0.0 ? b[2] / betas[0] : 0.0;
  betas[3] = b[0] != 0.0 ? b[3] / betas[0] : 0.0;
  return betas;
}

Eigen::Vector4d betas_case2(const EpnpWork& w) {
  // columns b11 b12 b22
  Eigen::Matrix<double, 6, 3> L;
  L.col(0) = w.L.col(0);
  L.col(1) = w.L.col(1);
  L.col(2) = w.L.col(2);
  const Eigen::Vector3d b = L.colPivHouseholderQr().solve(w.rho);
  Eigen::Vector4d betas = Eigen::Vector4d::Zero();
  betas[0] = std::sqrt(std::abs(b[0]));
  betas[1] = std::sqrt(std::abs(b[2]));
  if (b[1] < 0) betas[1] = -betas[1];
  return betas;
}

Eigen::Vector4d betas_case3(const EpnpWork& w) {
  // columns b11 b12 b22 b13 b23
  Eigen::Matrix<double, 6, 5> L;
  L.col(0) = w.L.col(0);
  L.col(1) = w.L.col(1);
  L.col(2) = w.L.col(2);
  L.col(3) = w.L.col(3);
  L.col(4) = w.L.col(4);
  const Eigen::Matrix<double, 5, 1> b = L.colPivHouseholderQr().solve(w.rho);
  Eigen::Vector4d betas = Eigen::Vector4d::Zero();
  betas[0] = std::sqrt(std::abs(b[0]));
  betas[1] = std::sqrt(std::abs(b[2]));
  if (b[1] < 0) betas[1] = -betas[1];
  betas[2] = b[0] != 0.0 ? b[3] / betas[0] : 0.0;
  return betas;
}

void betas_gauss_newton(const EpnpWork& w, Eigen::Vector4d& betas) {
  for (int it = 0; it < 6; ++it) {
    Eigen::Matrix<double, 6, 4> J;
    Eigen::Matrix<double, 6, 1> r;
    const double b1 = betas[0], b2 = betas[1], b3 = betas[2], b4 = betas[3];
    const Eigen::Matrix<double, 10, 1> b10{b1 * b1, b1 * b2, b2 * b2, b1 * b3, b2 * b3,
                                           b3 * b3, b1 * b4, b2 * b4, b3 * b4, b4 * b4};
    r = w.L * b10 - w.rho;
    for (int p = 0; p < 6; ++p) {
      J(p, 0) = 2 * w.L(p, 0) * b1 + w.L(p, 1) * b2 + w.L(p, 3) * b3 + w.L(p, 6) * b4;
      J(p, 1) = w.L(p, 1) * b1 + 2 * w.L(p, 2) * b2 + w.L(p, 4) * b3 + w.L(p, 7) * b4;
      J(p, 2) = w.L(p, 3) * b1 + w.L(p, 4) * b2 + 2 * w.L(p, 5) * b3 + w.L(p, 8) * b4;
      J(p, 3) = w.L(p, 6) * b1 + w.L(p, 7) * b2 + w.L(p, 8) * b3 + 2 * w.L(p, 9) * b4;
    }
    const Eigen::Vector4d step = (J.transpose() * J)
                                     .ldlt()
                                     .solve(-(J.transpose() * r));
    betas += step;
  }
}

Pose epnp_pose_from_betas(const std::vector<Correspondence2D3D>& corrs, const EpnpWork& w,
                          const Eigen::Vector4d& betas) {
  Eigen::Matrix<double, 12, 1> x = Eigen::Matrix<double, 12, 1>::Zero();
  for (int k = 0; k < 4; ++k) x += betas[k] * w.nullv.col(k);
  std::vector<Eigen::Vector3d> cam(corrs.size());
  double depth_sum = 0.0;
  for (size_t i = 0; i < corrs.size(); ++i) {
    Eigen::Vector3d p = Eigen::Vector3d::Zero();
    for (int j = 0; j < 4; ++j) p += w.alphas(static_cast<Eigen::Index>(i), j) * x.segment<3>(3 * j);
    cam[i] = p;
    depth_sum += p.z();
  }
  if (depth_sum < 0)
    for (auto& p : cam) p = -p;
  std::vector<Eigen::Vector3d> obj(corrs.size());
  for (size_t i = 0; i < corrs.size(); ++i) obj[i] = corrs[i].point;
  return absolute_orientation(obj, cam);
}

// ---- planar path: pose from a DLT homography ----

std::vector<Pose> planar_pose(const std::vector<Correspondence2D3D>& corrs, const Intrinsics& K,
                              const Eigen::Vector3d& centroid, const Eigen::Matrix3d& axes) {
  // plane coordinates (s,t) along the two principal directions
  const size_t n = corrs.size();
  Eigen::MatrixXd A(2 * static_cast<Eigen::Index>(n), 9);
  for (size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d d = corrs[i].point - centroid;
    const double s = axes.col(0).normalized().dot(d);
    const double t = axes.col(1).normalized().dot(d);
    // normalized image coordinates
    const double u = (corrs[i].pixel.x() - K.cx) / K.fx;
    const double v = (corrs[i].pixel.y() - K.cy) / K.fy;
    A.row(2 * static_cast<Eigen::Index>(i)) << s, t, 1, 0, 0, 0, -u * s, -u * t, -u;
    A.row(2 * static_cast<Eigen::Index>(i) + 1) << 0, 0, 0, s, t, 1, -v * s, -v * t, -v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);
  Eigen::Matrix3d H;
  H << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);

  std::vector<Pose> out;
  for (int sign = 0; sign < 2; ++sign) {
    Eigen::Matrix3d Hs = sign ? Eigen::Matrix3d(-H) : H;
    const double lambda = 2.0 / (Hs.col(0).norm() + Hs.col(1).norm());
    Eigen::Vector3d r1 = lambda * Hs.col(0);
    Eigen::Vector3d r2 = lambda * Hs.col(1);
    Eigen::Vector3d t = lambda * Hs.col(2);
    Eigen::Matrix3d Rp;
    Rp.col(0) = r1;
    Rp.col(1) = r2;
    Rp.col(2) = r1.cross(r2);
    Rp = orthonormalize(Rp);
    // plane frame -> camera; compose with object -> plane frame
    Eigen::Matrix3d P;
    P.col(0) = axes.col(0).normalized();
    P.col(1) = axes.col(1).normalized();
    P.col(2) = axes.col(0).normalized().cross(axes.col(1).normalized());
    Pose pose;
    pose.R = Rp * P.transpose();
    pose.t = t - pose.R * centroid;
    // keep candidates that put the centroid in front
    if (pose.apply(centroid).z() > 0) out.push_back(pose);
  }
  return out;
}

}  // namespace

double refine_pose(Pose& pose, const std::vector<Correspondence2D3D>& corrs, const Intrinsics& K,
                   int iterations) {
  const size_t n = corrs.size();
  auto total_sq = [&](const Pose& p) {
    double acc = 0.0;
    for (const auto& c : corrs) {
      const double e = reprojection_error(p, c, K);
      if (!std::isfinite(e)) return std::numeric_limits<double>::infinity();
      acc += e * e;
    }
    return acc;
  };
  double cur = total_sq(pose);
  for (int it = 0; it < iterations; ++it) {
    Eigen::Matrix<double, 6, 6> JtJ = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> Jtr = Eigen::Matrix<double, 6, 1>::Zero();
    for (const auto& c : corrs) {
      const Eigen::Vector3d pc = pose.apply(c.point);
      if (pc.z() <= 1e-9) continue;
      const double iz = 1.0 / pc.z();
      const Eigen::Vector2d proj(K.fx * pc.x() * iz + K.cx, K.fy * pc.y() * iz + K.cy);
      const Eigen::Vector2d r = proj - c.pixel;
      Eigen::Matrix<double, 2, 3> A;
      A << K.fx * iz, 0, -K.fx * pc.x() * iz * iz, 0, K.fy * iz, -K.fy * pc.y() * iz * iz;
      Eigen::Matrix3d px_hat;
      px_hat << 0, -pc.z(), pc.y(), pc.z(), 0, -pc.x(), -pc.y(), pc.x(), 0;
      Eigen::Matrix<double, 2, 6> J;
      J.block<2, 3>(0, 0) = -A * px_hat;  // d(proj)/d(rotation increment)
      J.block<2, 3>(0, 3) = A;            // d(proj)/d(translation)
      JtJ += J.transpose() * J;
      Jtr += J.transpose() * r;
    }
    Eigen::Matrix<double, 6, 1> step = JtJ.ldlt().solve(-Jtr);
    // halve the step until the error does not increase
    bool accepted = false;
    for (int half = 0; half < 8; ++half) {
      Pose trial = pose;
      const Eigen::Vector3d omega = step.head<3>();
      const double angle = omega.norm();
      Eigen::Matrix3d dR = Eigen::Matrix3d::Identity();
      if (angle > 1e-16) dR = Eigen::AngleAxisd(angle, omega / angle).toRotationMatrix();
      trial.R = orthonormalize(dR * pose.R);
      trial.t = dR * pose.t + step.tail<3>();
      const double trial_err = total_sq(trial);
      if (trial_err <= cur) {
        pose = trial;
        cur = trial_err;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
  }
  return n ? std::sqrt(cur / static_cast<double>(n)) : 0.0;
}

std::vector<Pose> pnp_minimal(const std::vector<Correspondence2D3D>& corrs, const Intrinsics& K) {
  const size_t n = corrs.size();
  if (n < 4) throw std::invalid_argument("pnp_minimal: needs at least 4 correspondences");

  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& c : corrs) centroid += c.point;
  centroid /= static_cast<double>(n);
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& c : corrs) {
    const Eigen::Vector3d d = c.point - centroid;
    cov += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);  // ascending eigenvalues
  const Eigen::Vector3d evals = eig.eigenvalues().cwiseMax(0.0);
  if (evals(1) <= 1e-12 * std::max(evals(2), 1e-300))
    throw std::domain_error("pnp_minimal: degenerate (collinear) correspondences");

  // principal axes scaled like the point spread, largest first
  Eigen::Matrix3d axes;
  for (int i = 0; i < 3; ++i) {
    const double scale = std::sqrt(std::max(evals(2 - i), 1e-12) / static_cast<double>(n));
    axes.col(i) = eig.eigenvectors().col(2 - i) * std::max(scale, 1e-9);
  }

  std::vector<Pose> candidates;
  const bool planar = evals(0) <= 1e-8 * evals(2);
  if (planar) {
    candidates = planar_pose(corrs, K, centroid, axes);
  } else {
    EpnpWork w;
    epnp_prepare(corrs, K, centroid, axes, w);
    for (auto betas : {betas_case1(w), betas_case2(w), betas_case3(w)}) {
      betas_gauss_newton(w, betas);
      candidates.push_back(epnp_pose_from_betas(corrs, w, betas));
    }
  }
  if (candidates.empty()) throw std::domain_error("pnp_minimal: no viable pose candidate");

  // polish each candidate and order by fit
  for (auto& pose : candidates) refine_pose(pose, corrs, K, 10);
  std::sort(candidates.begin(), candidates.end(), [&](const Pose& a, const Pose& b) {
    return mean_error(a, corrs, K) < mean_error(b, corrs, K);
  });
  return candidates;
}

PoseEstimate ransac_pnp(const std::vector<Correspondence2D3D>& corrs, const Intrinsics& K,
                        const SolverConfig& cfg) {
  const int n = static_cast<int>(corrs.size());
  if (n < cfg.min_correspondences)
    throw std::invalid_argument("ransac_pnp: " + std::to_string(n) + " correspondences, need " +
                                std::to_string(cfg.min_correspondences));

  Rng rng(cfg.seed ^ 0x52414e53ULL);
  constexpr int kSubset = 4;
  PoseEstimate best;
  int best_inliers = 0;
  double best_err = std::numeric_limits<double>::infinity();

  auto count_inliers = [&](const Pose& pose, std::vector<int>* idx, double* err_out) {
    int count = 0;
    double err_acc = 0.0;
    if (idx) idx->clear();
    for (int i = 0; i < n; ++i) {
      const double e = reprojection_error(pose, corrs[static_cast<size_t>(i)], K);
      if (e <= cfg.inlier_threshold_px) {
        ++count;
        err_acc += e;
        if (idx) idx->push_back(i);
      }
    }
    if (err_out) *err_out = count ? err_acc / count : 0.0;
    return count;
  };

  int64_t needed = cfg.max_iterations;
  for (int64_t it = 0; it < needed && it < cfg.max_iterations; ++it) {
    int pick[kSubset];
    for (int j = 0; j < kSubset; ++j) {
      bool fresh;
      do {
        pick[j] = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
        fresh = true;
        for (int q = 0; q < j; ++q) fresh = fresh && pick[q] != pick[j];
      } while (!fresh);
    }
    std::vector<Correspondence2D3D> subset;
    subset.reserve(kSubset);
    for (int j = 0; j < kSubset; ++j) subset.push_back(corrs[static_cast<size_t>(pick[j])]);

    std::vector<Pose> candidates;
    try {
      candidates = pnp_minimal(subset, K);
    } catch (const std::domain_error&) {
      continue;  // degenerate subset, resample
    }
    for (const auto& pose : candidates) {
      double err;
      const int count = count_inliers(pose, nullptr, &err);
      if (count > best_inliers || (count == best_inliers && err < best_err)) {
        best_inliers = count;
        best_err = err;
        best.pose = pose;
        // adaptive bound from the inlier ratio
        const double w = static_cast<double>(count) / n;
        const double denom = std::log(std::max(1e-12, 1.0 - std::pow(w, kSubset)));
        if (denom < 0) {
          const int64_t bound =
              static_cast<int64_t>(std::ceil(std::log(1.0 - cfg.confidence) / denom));
          needed = std::min<int64_t>(cfg.max_iterations, std::max<int64_t>(bound, it + 1));
        }
      }
    }
  }

  if (best_inliers < std::max(cfg.min_correspondences, kSubset)) {
    best.success = false;
    return best;
  }

  // refine on inliers, then re-gate against the refined pose
  for (int round = 0; round < 2; ++round) {
    std::vector<int> idx;
    count_inliers(best.pose, &idx, nullptr);
    if (static_cast<int>(idx.size()) < kSubset) break;
    std::vector<Correspondence2D3D> inl;
    inl.reserve(idx.size());
    for (int i : idx) inl.push_back(corrs[static_cast<size_t>(i)]);
    refine_pose(best.pose, inl, K, cfg.refine_iterations);
  }
  double final_err = 0.0;
  best_inliers = count_inliers(best.pose, &best.inliers, &final_err);
  best.mean_reprojection_error = final_err;
  best.success = best_inliers >= std::max(cfg.min_correspondences, kSubset);
  return best;
}

}  // namespace mixri
