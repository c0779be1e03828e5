#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "rigslam/camera.hpp"
#include "rigslam/frame.hpp"
#include "rigslam/optimizer.hpp"

namespace rigslam {

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();  // unit length
};

/// World-frame viewing ray of a pixel. t_cw maps world to camera.
inline Ray back_project(const PinholeIntrinsics& intr,
                        const RigidTransform& t_cw, const Vec2& pixel) {
  const Vec3 dir_cam((pixel.x() - intr.cx) / intr.fx,
                     (pixel.y() - intr.cy) / intr.fy, 1.0);
  const Mat3 r_wc = t_cw.rotation.matrix().transpose();
  Ray ray;
  ray.origin = -(r_wc * t_cw.translation);
  ray.direction = (r_wc * dir_cam).normalized();
  return ray;
}

/// Midpoint of the common perpendicular of two rays, or nullopt when the
/// rays are too close to parallel for the 2x2 solve to mean anything.
inline std::optional<Vec3> triangulate_midpoint(const Ray& a, const Ray& b) {
  const double dd = a.direction.dot(b.direction);
  const double det = 1.0 - dd * dd;  // directions are unit length
  if (det < 1e-12) return std::nullopt;
  const Vec3 w = b.origin - a.origin;
  const double s = (w.dot(a.direction) - dd * w.dot(b.direction)) / det;
  const double t = (dd * w.dot(a.direction) - w.dot(b.direction)) / det;
  const Vec3 foot_a = a.origin + s * a.direction;
  const Vec3 foot_b = b.origin + t * b.direction;
  return 0.5 * (foot_a + foot_b);
}

/// Triangulates a matched unique feature of a frame from its first two
/// observing cameras. Returns nullopt for monocular ids, near-parallel
/// rays, or a result behind either camera.
inline std::optional<Vec3> triangulate_feature(const CameraRig& rig,
                                               const BundledFrame& frame,
                                               std::int64_t unique_id) {
  const auto it = frame.unique_ids.find(unique_id);
  if (it == frame.unique_ids.end() || it->second.size() < 2)
    return std::nullopt;
  Ray rays[2];
  int cams[2];
  for (int k = 0; k < 2; ++k) {
    const auto [cam, feat] = it->second[k];
    cams[k] = cam;
    rays[k] = back_project(rig.camera(cam).intrinsics,
                           camera_pose(rig, frame.pose, cam),
                           frame.features[cam][feat].pixel);
  }
  const auto point = triangulate_midpoint(rays[0], rays[1]);
  if (!point) return std::nullopt;
  for (int k = 0; k < 2; ++k)
    if (act(camera_pose(rig, frame.pose, cams[k]), *point).z() <= kMinDepth)
      return std::nullopt;
  return point;
}

/// Reprojection error of a world point against one feature observation.
inline std::optional<double> reprojection_error(const CameraRig& rig,
                                                const RigPose& pose, int cam,
                                                const Vec2& pixel,
                                                const Vec3& point) {
  const auto px = try_project(rig.camera(cam).intrinsics,
                              act(camera_pose(rig, pose, cam), point));
  if (!px) return std::nullopt;
  return (*px - pixel).norm();
}

// ---------------------------------------------------------------------------
// Two-view relative pose for single-camera bootstrap.
// ---------------------------------------------------------------------------

struct TwoViewResult {
  RigidTransform t_ba;            // frame a to frame b, unit translation
  std::vector<bool> inliers;      // per input match
  double median_parallax = 0.0;   // radians, over inlier triangulations
  std::vector<Vec3> points;       // triangulated inliers, frame-a coords
};

namespace detail {

/// Least-squares essential matrix from normalized image points, with the
/// rank-2 unit-singular-value projection applied.
inline Mat3 essential_eight_point(const std::vector<Vec3>& xa,
                                  const std::vector<Vec3>& xb,
                                  const std::vector<int>& idx) {
  Eigen::MatrixXd a(idx.size(), 9);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const Vec3& p = xa[idx[r]];
    const Vec3& q = xb[idx[r]];
    a.row(r) << q.x() * p.x(), q.x() * p.y(), q.x() * p.z(),
        q.y() * p.x(), q.y() * p.y(), q.y() * p.z(),
        q.z() * p.x(), q.z() * p.y(), q.z() * p.z();
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::Matrix<double, 9, 1> e = svd.matrixV().col(8);
  Mat3 em;
  em << e(0), e(1), e(2), e(3), e(4), e(5), e(6), e(7), e(8);
  Eigen::JacobiSVD<Mat3> esvd(em, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return esvd.matrixU() * Eigen::Vector3d(1, 1, 0).asDiagonal() *
         esvd.matrixV().transpose();
}

/// Symmetric squared epipolar distance in normalized coordinates.
inline double epipolar_error2(const Mat3& e, const Vec3& xa, const Vec3& xb) {
  const Vec3 la = e * xa;             // line in image b
  const Vec3 lb = e.transpose() * xb; // line in image a
  const double num = xb.dot(la);
  const double da = la.head<2>().squaredNorm();
  const double db = lb.head<2>().squaredNorm();
  if (da < 1e-18 || db < 1e-18) return std::numeric_limits<double>::max();
  return num * num * (1.0 / da + 1.0 / db);
}

/// Depth of the frame-a point along both views for a candidate (r, t);
/// used for the cheirality vote.
inline std::optional<Vec3> triangulate_normalized(const Mat3& r,
                                                  const Vec3& t,
                                                  const Vec3& xa,
                                                  const Vec3& xb) {
  Ray ra{Vec3::Zero(), xa.normalized()};
  Ray rb{-(r.transpose() * t), (r.transpose() * xb).normalized()};
  const auto p = triangulate_midpoint(ra, rb);
  if (!p) return std::nullopt;
  if (p->z() <= kMinDepth) return std::nullopt;
  if ((r * *p + t).z() <= kMinDepth) return std::nullopt;
  return p;
}

}  // namespace detail

/// Relative pose of two views of one camera from pixel matches, via a
/// seeded eight-point RANSAC and a cheirality vote over the four
/// decompositions. Translation is normalized to unit length (scale is
/// unobservable from one camera). Returns nullopt when fewer than 8
/// matches, when no decomposition puts >= 70% of inliers in front of
/// both views, or when the parallax is too small to trust.
inline std::optional<TwoViewResult> two_view_relative_pose(
    const PinholeIntrinsics& intr, const std::vector<Vec2>& pix_a,
    const std::vector<Vec2>& pix_b, double sigma, std::uint64_t seed,
    double min_parallax_rad = 0.004) {
  const std::size_t n = pix_a.size();
  if (n != pix_b.size() || n < 8) return std::nullopt;

  std::vector<Vec3> xa(n), xb(n);
  for (std::size_t i = 0; i < n; ++i) {
    xa[i] = Vec3((pix_a[i].x() - intr.cx) / intr.fx,
                 (pix_a[i].y() - intr.cy) / intr.fy, 1.0);
    xb[i] = Vec3((pix_b[i].x() - intr.cx) / intr.fx,
                 (pix_b[i].y() - intr.cy) / intr.fy, 1.0);
  }
  // Pixel-space gate mapped to normalized coordinates. The symmetric
  // error sums two transfer distances, each fed by noise from both
  // images, hence the factor 4 on sigma^2.
  const double f = 0.5 * (intr.fx + intr.fy);
  const double gate2 = 5.991 * 4.0 * (sigma / f) * (sigma / f);

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  Mat3 best_e = Mat3::Zero();
  int best_count = -1;
  for (int iter = 0; iter < 60; ++iter) {
    std::vector<int> sample;
    while (sample.size() < 8) {
      const int c = static_cast<int>(pick(rng));
      if (std::find(sample.begin(), sample.end(), c) == sample.end())
        sample.push_back(c);
    }
    const Mat3 e = detail::essential_eight_point(xa, xb, sample);
    int count = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (detail::epipolar_error2(e, xa[i], xb[i]) < gate2) ++count;
    if (count > best_count) {
      best_count = count;
      best_e = e;
    }
  }
  if (best_count < 8) return std::nullopt;

  // Refit on the consensus set.
  std::vector<int> inlier_idx;
  for (std::size_t i = 0; i < n; ++i)
    if (detail::epipolar_error2(best_e, xa[i], xb[i]) < gate2)
      inlier_idx.push_back(static_cast<int>(i));
  const Mat3 e = detail::essential_eight_point(xa, xb, inlier_idx);

  const Eigen::JacobiSVD<Mat3> svd(e,
                                   Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU(), v = svd.matrixV();
  if (u.determinant() < 0) u.col(2) *= -1.0;
  if (v.determinant() < 0) v.col(2) *= -1.0;
  Mat3 w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Mat3 r1 = u * w * v.transpose();
  const Mat3 r2 = u * w.transpose() * v.transpose();
  const Vec3 t = u.col(2);

  const Mat3 rots[4] = {r1, r1, r2, r2};
  const Vec3 trans[4] = {t, -t, t, -t};
  int best_combo = -1, best_front = -1;
  for (int c = 0; c < 4; ++c) {
    int front = 0;
    for (int i : inlier_idx)
      if (detail::triangulate_normalized(rots[c], trans[c], xa[i], xb[i]))
        ++front;
    if (front > best_front) {
      best_front = front;
      best_combo = c;
    }
  }
  if (best_front < static_cast<int>(0.7 * inlier_idx.size())) {
    return std::nullopt;
  }

  // Polish with bundle adjustment (first view fixed as the gauge),
  // re-gating every match by reprojection against the refined geometry
  // between rounds. The minimal-sample fit alone is too biased to trust.
  const CameraRig mono(std::vector<CameraModel>{
      CameraModel{intr, RigidTransform::identity(), std::max(sigma, 1e-3)}});
  const Mat2 info = mono.camera(0).information();
  const double sg = std::max(sigma, 0.25);
  const double reproj_gate2 = 5.991 * sg * sg;
  RigidTransform t_ba(Rotation3(rots[best_combo]), trans[best_combo]);
  std::vector<int> kept;
  BaProblem ba;
  for (int round = 0; round < 3; ++round) {
    kept.clear();
    std::vector<Vec3> seeds;
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = detail::triangulate_normalized(
          t_ba.rotation.matrix(), t_ba.translation, xa[i], xb[i]);
      if (!p) continue;
      const Vec2 ra = *try_project(intr, *p) - pix_a[i];
      const Vec2 rb = *try_project(intr, act(t_ba, *p)) - pix_b[i];
      if (ra.squaredNorm() > reproj_gate2 || rb.squaredNorm() > reproj_gate2)
        continue;
      kept.push_back(static_cast<int>(i));
      seeds.push_back(*p);
    }
    if (kept.size() < 8) return std::nullopt;
    ba = BaProblem{};
    ba.rig = mono;
    ba.poses[0] =
        PoseVariable{RigPose{RigidTransform::identity(), 0.0}, true};
    ba.poses[1] = PoseVariable{RigPose{t_ba, 0.0}, false};
    for (std::size_t j = 0; j < kept.size(); ++j) {
      const auto pid = static_cast<std::int64_t>(j);
      ba.points[pid] = PointVariable{seeds[j], false};
      ba.observations.push_back(Observation{0, 0, pid, pix_a[kept[j]], info});
      ba.observations.push_back(Observation{1, 0, pid, pix_b[kept[j]], info});
    }
    solve_lm(ba);
    t_ba = ba.poses.at(1).pose.c1;
  }

  const double scale = t_ba.translation.norm();
  if (scale < 1e-9) return std::nullopt;

  TwoViewResult out;
  out.inliers.assign(n, false);
  out.t_ba = RigidTransform(t_ba.rotation, t_ba.translation / scale);
  std::vector<double> parallax;
  const Vec3 cb =
      -(out.t_ba.rotation.matrix().transpose() * out.t_ba.translation);
  for (std::size_t j = 0; j < kept.size(); ++j) {
    const Vec3 p = ba.points.at(static_cast<std::int64_t>(j)).position / scale;
    if (p.z() <= kMinDepth || act(out.t_ba, p).z() <= kMinDepth) continue;
    out.inliers[kept[j]] = true;
    out.points.push_back(p);
    parallax.push_back(std::acos(
        std::clamp(p.normalized().dot((p - cb).normalized()), -1.0, 1.0)));
  }
  if (parallax.empty()) return std::nullopt;
  std::nth_element(parallax.begin(), parallax.begin() + parallax.size() / 2,
                   parallax.end());
  out.median_parallax = parallax[parallax.size() / 2];
  if (out.median_parallax < min_parallax_rad) return std::nullopt;
  return out;
}

}  // namespace rigslam
