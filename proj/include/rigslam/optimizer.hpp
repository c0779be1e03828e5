#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Cholesky>

#include "rigslam/camera.hpp"
#include "rigslam/errors.hpp"
#include "rigslam/map.hpp"
#include "rigslam/se3.hpp"

namespace rigslam {

using Mat26 = Eigen::Matrix<double, 2, 6>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat63 = Eigen::Matrix<double, 6, 3>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

/// Reprojection residual e = u - h(R_i1 (R_1w P + t_1w) + t_i1).
inline Vec2 residual(const CameraRig& rig, const RigidTransform& c1, int i,
                     const Vec3& point_world, const Vec2& u) {
  const Vec3 p_cam = act(rig.camera(i).extrinsic, act(c1, point_world));
  return u - project(rig.camera(i).intrinsics, p_cam);
}

namespace detail {

// d(pixel)/d(point in camera i), the shared projection block.
inline Mat23 projection_block(const PinholeIntrinsics& intr,
                              const Vec3& p_cam) {
  const double z = p_cam.z();
  if (z <= kMinDepth)
    throw BehindCamera("jacobian: point at depth " + std::to_string(z));
  Mat23 d;
  d << intr.fx / z, 0.0, -intr.fx * p_cam.x() / (z * z),
       0.0, intr.fy / z, -intr.fy * p_cam.y() / (z * z);
  return d;
}

}  // namespace detail

/// Derivative of the residual with respect to a left-multiplicative twist
/// on the camera-1 pose, columns ordered (rotation | translation).
inline Mat26 jacobian_pose(const CameraRig& rig, const RigidTransform& c1,
                           int i, const Vec3& point_world) {
  const Vec3 p_c1 = act(c1, point_world);
  const Mat3 r_i1 = rig.camera(i).extrinsic.rotation.matrix();
  const Vec3 p_cam = r_i1 * p_c1 + rig.camera(i).extrinsic.translation;
  const Mat23 d = detail::projection_block(rig.camera(i).intrinsics, p_cam);
  Mat26 j;
  j.leftCols<3>() = -d * r_i1 * skew(-p_c1);
  j.rightCols<3>() = -d * r_i1;
  return j;
}

/// Derivative of the residual with respect to the world point.
inline Mat23 jacobian_point(const CameraRig& rig, const RigidTransform& c1,
                            int i, const Vec3& point_world) {
  const Vec3 p_c1 = act(c1, point_world);
  const Mat3 r_i1 = rig.camera(i).extrinsic.rotation.matrix();
  const Vec3 p_cam = r_i1 * p_c1 + rig.camera(i).extrinsic.translation;
  const Mat23 d = detail::projection_block(rig.camera(i).intrinsics, p_cam);
  return -d * r_i1 * c1.rotation.matrix();
}

/// Kernel threshold: sqrt of the 95% chi-square quantile with 2 dof.
inline const double kHuberDelta = std::sqrt(5.991);

struct HuberKernel {
  double delta = kHuberDelta;

  /// Robust cost of a squared whitened residual and its derivative
  /// d(cost)/d(r2), the IRLS weight.
  std::pair<double, double> evaluate(double r2) const {
    const double d2 = delta * delta;
    if (r2 <= d2) return {r2, 1.0};
    const double r = std::sqrt(r2);
    return {2.0 * delta * r - d2, delta / r};
  }
};

inline std::pair<double, double> huber_cost(double r2, double delta) {
  return HuberKernel{delta}.evaluate(r2);
}

struct Observation {
  std::int64_t pose_id = -1;
  int camera_id = 0;
  std::int64_t point_id = -1;
  Vec2 pixel = Vec2::Zero();
  Mat2 information = Mat2::Identity();
};

struct PoseVariable {
  RigPose pose;
  bool fixed = false;
};

struct PointVariable {
  Vec3 position = Vec3::Zero();
  bool fixed = false;
};

struct SolverSettings {
  int max_iterations = 50;
  double initial_lambda = 1e-4;
  double lambda_increase = 10.0;
  double lambda_decrease = 0.5;
  double lambda_max = 1e8;
  double cost_tolerance = 1e-10;  // relative decrease on an accepted step
  double step_tolerance = 1e-12;  // update vector norm
  std::string trace_path;         // per-iteration trace file, empty = off
};

struct BaProblem {
  CameraRig rig;
  std::map<std::int64_t, PoseVariable> poses;
  std::map<std::int64_t, PointVariable> points;
  std::vector<Observation> observations;
  HuberKernel kernel;
  SolverSettings settings;
};

enum class Termination {
  kMaxIterations,
  kCostTolerance,
  kStepTolerance,
  kLambdaLimit,
};

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::kMaxIterations: return "max_iterations";
    case Termination::kCostTolerance: return "cost_tolerance";
    case Termination::kStepTolerance: return "step_tolerance";
    case Termination::kLambdaLimit: return "lambda_limit";
  }
  return "unknown";
}

struct SolveReport {
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::vector<double> cost_trace;  // initial cost, then each accepted cost
  Termination reason = Termination::kMaxIterations;
};

namespace detail {

inline void validate_problem(const BaProblem& p) {
  if (p.kernel.delta <= 0.0) throw Error("ba: kernel delta must be positive");
  bool any_fixed = false;
  bool any_free_point = false;
  for (const auto& [id, v] : p.poses) any_fixed |= v.fixed;
  for (const auto& [id, v] : p.points) {
    any_fixed |= v.fixed;
    any_free_point |= !v.fixed;
  }
  if (!any_fixed && any_free_point)
    throw Error("ba: gauge is unconstrained (no fixed variable)");
  for (const auto& o : p.observations) {
    if (!p.poses.count(o.pose_id))
      throw UnknownId("ba: observation references pose " +
                      std::to_string(o.pose_id));
    if (!p.points.count(o.point_id))
      throw UnknownId("ba: observation references point " +
                      std::to_string(o.point_id));
    const Mat2& q = o.information;
    if (std::abs(q(0, 1) - q(1, 0)) > 1e-12 || q(0, 0) <= 0.0 ||
        q.determinant() <= 0.0)
      throw Error("ba: observation information is not SPD");
  }
}

// Robust cost over the active (in-front) observations of a variable state.
template <typename PoseLookup, typename PointLookup>
double robust_cost(const BaProblem& p, const PoseLookup& pose_of,
                   const PointLookup& point_of) {
  double total = 0.0;
  for (const auto& o : p.observations) {
    const RigidTransform& c1 = pose_of(o.pose_id);
    const Vec3& pt = point_of(o.point_id);
    const Vec3 p_cam =
        act(p.rig.camera(o.camera_id).extrinsic, act(c1, pt));
    if (p_cam.z() <= kMinDepth) continue;
    const Vec2 e =
        o.pixel - *try_project(p.rig.camera(o.camera_id).intrinsics, p_cam);
    total += p.kernel.evaluate(e.dot(o.information * e)).first;
  }
  return total;
}

}  // namespace detail

/// Levenberg-Marquardt with Schur elimination of the point variables.
/// Free variables are updated in place; fixed ones are never written.
inline SolveReport solve_lm(BaProblem& p) {
  detail::validate_problem(p);

  std::vector<std::int64_t> pose_ids, point_ids;
  std::map<std::int64_t, int> pose_index, point_index;
  for (const auto& [id, v] : p.poses)
    if (!v.fixed) {
      pose_index[id] = static_cast<int>(pose_ids.size());
      pose_ids.push_back(id);
    }
  for (const auto& [id, v] : p.points)
    if (!v.fixed) {
      point_index[id] = static_cast<int>(point_ids.size());
      point_ids.push_back(id);
    }
  const int np = static_cast<int>(pose_ids.size());
  const int nl = static_cast<int>(point_ids.size());

  std::ofstream trace;
  if (!p.settings.trace_path.empty()) {
    trace.open(p.settings.trace_path);
    trace << std::setprecision(17);
    trace << "# iteration lambda cost step_norm accepted\n";
  }

  const auto pose_of = [&](std::int64_t id) -> const RigidTransform& {
    return p.poses.at(id).pose.c1;
  };
  const auto point_of = [&](std::int64_t id) -> const Vec3& {
    return p.points.at(id).position;
  };

  SolveReport report;
  double cost = detail::robust_cost(p, pose_of, point_of);
  report.initial_cost = cost;
  report.cost_trace.push_back(cost);
  report.reason = Termination::kMaxIterations;

  double lambda = p.settings.initial_lambda;

  for (int iter = 1; iter <= p.settings.max_iterations; ++iter) {
    report.iterations = iter;

    // Linearize at the current state.
    Eigen::MatrixXd hpp = Eigen::MatrixXd::Zero(6 * np, 6 * np);
    Eigen::VectorXd gp = Eigen::VectorXd::Zero(6 * np);
    std::vector<Mat3> hll(nl, Mat3::Zero());
    std::vector<Vec3> gl(nl, Vec3::Zero());
    // Off-diagonal pose-point blocks, keyed per point for the reduction.
    std::vector<std::vector<std::pair<int, Mat63>>> hpl(nl);

    for (const auto& o : p.observations) {
      const auto& pv = p.poses.at(o.pose_id);
      const auto& lv = p.points.at(o.point_id);
      const Vec3 p_cam = act(p.rig.camera(o.camera_id).extrinsic,
                             act(pv.pose.c1, lv.position));
      if (p_cam.z() <= kMinDepth) continue;  // dropped this iteration
      const Vec2 e = o.pixel -
                     *try_project(p.rig.camera(o.camera_id).intrinsics, p_cam);
      const double r2 = e.dot(o.information * e);
      const double w = p.kernel.evaluate(r2).second;
      const Mat2 wi = w * o.information;

      const int pi = pv.fixed ? -1 : pose_index.at(o.pose_id);
      const int li = lv.fixed ? -1 : point_index.at(o.point_id);
      Mat26 jp;
      Mat23 jl;
      if (pi >= 0)
        jp = jacobian_pose(p.rig, pv.pose.c1, o.camera_id, lv.position);
      if (li >= 0)
        jl = jacobian_point(p.rig, pv.pose.c1, o.camera_id, lv.position);
      if (pi >= 0) {
        hpp.block<6, 6>(6 * pi, 6 * pi) += jp.transpose() * wi * jp;
        gp.segment<6>(6 * pi) += jp.transpose() * wi * e;
      }
      if (li >= 0) {
        hll[li] += jl.transpose() * wi * jl;
        gl[li] += jl.transpose() * wi * e;
      }
      if (pi >= 0 && li >= 0)
        hpl[li].emplace_back(pi, jp.transpose() * wi * jl);
    }

    // Try steps at increasing damping until one is accepted.
    bool stop = false;
    while (true) {
      // Damped point blocks; points without active observations freeze.
      std::vector<Mat3> a_inv(nl);
      std::vector<bool> frozen(nl, false);
      bool solvable = true;
      for (int k = 0; k < nl; ++k) {
        if (hll[k].diagonal().maxCoeff() <= 0.0) {
          frozen[k] = true;
          continue;
        }
        Mat3 a = hll[k];
        a.diagonal() += lambda * hll[k].diagonal();
        const Eigen::LDLT<Mat3> ldlt(a);
        if (ldlt.info() != Eigen::Success) {
          solvable = false;
          break;
        }
        a_inv[k] = ldlt.solve(Mat3::Identity());
        if (!a_inv[k].allFinite()) {
          solvable = false;
          break;
        }
      }

      Eigen::VectorXd dp = Eigen::VectorXd::Zero(6 * np);
      if (solvable && np > 0) {
        Eigen::MatrixXd s = hpp;
        s.diagonal() += lambda * hpp.diagonal();
        Eigen::VectorXd rhs = -gp;
        for (int k = 0; k < nl; ++k) {
          if (frozen[k]) continue;
          for (const auto& [pi_a, w_a] : hpl[k]) {
            rhs.segment<6>(6 * pi_a) += w_a * (a_inv[k] * gl[k]);
            for (const auto& [pi_b, w_b] : hpl[k])
              s.block<6, 6>(6 * pi_a, 6 * pi_b) -=
                  w_a * a_inv[k] * w_b.transpose();
          }
        }
        // Poses with no active observations freeze coordinate-wise.
        for (int r = 0; r < 6 * np; ++r) {
          if (hpp(r, r) <= 0.0) {
            s.row(r).setZero();
            s.col(r).setZero();
            s(r, r) = 1.0;
            rhs(r) = 0.0;
          }
        }
        const Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
        solvable = ldlt.info() == Eigen::Success;
        if (solvable) {
          dp = ldlt.solve(rhs);
          solvable = dp.allFinite();
        }
      }

      if (!solvable) {
        lambda *= p.settings.lambda_increase;
        if (lambda > p.settings.lambda_max)
          throw SingularSystem(
              "ba: damped normal equations unsolvable at lambda_max");
        continue;
      }

      std::vector<Vec3> dl(nl, Vec3::Zero());
      double step_sq = dp.squaredNorm();
      for (int k = 0; k < nl; ++k) {
        if (frozen[k]) continue;
        Vec3 r = gl[k];
        for (const auto& [pi_a, w_a] : hpl[k])
          r += w_a.transpose() * dp.segment<6>(6 * pi_a);
        dl[k] = -(a_inv[k] * r);
        step_sq += dl[k].squaredNorm();
      }
      const double step_norm = std::sqrt(step_sq);

      if (step_norm < p.settings.step_tolerance) {
        if (trace.is_open())
          trace << iter << ' ' << lambda << ' ' << cost << ' ' << step_norm
                << " 0\n";
        report.reason = Termination::kStepTolerance;
        stop = true;
        break;
      }

      // Trial state.
      std::map<std::int64_t, RigidTransform> trial_poses;
      std::map<std::int64_t, Vec3> trial_points;
      for (int k = 0; k < np; ++k)
        trial_poses[pose_ids[k]] =
            compose(exp_se3(Twist::from_vector(dp.segment<6>(6 * k))),
                    p.poses.at(pose_ids[k]).pose.c1);
      for (int k = 0; k < nl; ++k)
        trial_points[point_ids[k]] =
            p.points.at(point_ids[k]).position + dl[k];
      const auto trial_pose_of =
          [&](std::int64_t id) -> const RigidTransform& {
        const auto it = trial_poses.find(id);
        return it != trial_poses.end() ? it->second : p.poses.at(id).pose.c1;
      };
      const auto trial_point_of = [&](std::int64_t id) -> const Vec3& {
        const auto it = trial_points.find(id);
        return it != trial_points.end() ? it->second
                                        : p.points.at(id).position;
      };
      const double new_cost =
          detail::robust_cost(p, trial_pose_of, trial_point_of);
      const bool accept = new_cost < cost;
      if (trace.is_open())
        trace << iter << ' ' << lambda << ' ' << (accept ? new_cost : cost)
              << ' ' << step_norm << ' ' << (accept ? 1 : 0) << '\n';

      if (accept) {
        for (const auto& [id, c1] : trial_poses) p.poses.at(id).pose.c1 = c1;
        for (const auto& [id, pos] : trial_points)
          p.points.at(id).position = pos;
        const double rel = (cost - new_cost) / std::max(cost, 1e-300);
        cost = new_cost;
        report.cost_trace.push_back(cost);
        lambda *= p.settings.lambda_decrease;
        if (rel < p.settings.cost_tolerance) {
          report.reason = Termination::kCostTolerance;
          stop = true;
        }
        break;
      }
      lambda *= p.settings.lambda_increase;
      if (lambda > p.settings.lambda_max) {
        report.reason = Termination::kLambdaLimit;
        stop = true;
        break;
      }
    }
    if (stop) break;
  }

  report.final_cost = cost;
  return report;
}

// ---------------------------------------------------------------------------
// Problem builders for the three bundle-adjustment tiers.
// ---------------------------------------------------------------------------

namespace detail {

inline void add_frame_observations(BaProblem& problem, std::int64_t pose_id,
                                   const BundledFrame& frame,
                                   std::int64_t unique_id,
                                   std::int64_t point_id) {
  for (const auto& [cam, feat] : frame.unique_ids.at(unique_id)) {
    Observation o;
    o.pose_id = pose_id;
    o.camera_id = cam;
    o.point_id = point_id;
    o.pixel = frame.features[cam][feat].pixel;
    o.information = problem.rig.camera(cam).information();
    problem.observations.push_back(o);
  }
}

}  // namespace detail

/// Single free pose, every matched point fixed. matches maps unique
/// feature ids of the frame to map point ids.
inline BaProblem build_motion_only(
    const BundledMap& map, const CameraRig& rig, const BundledFrame& frame,
    const std::map<std::int64_t, std::int64_t>& matches) {
  BaProblem problem;
  problem.rig = rig;
  problem.poses[0] = PoseVariable{frame.pose, false};
  for (const auto& [unique_id, point_id] : matches) {
    if (!problem.points.count(point_id))
      problem.points[point_id] = PointVariable{map.point(point_id).position,
                                               true};
    detail::add_frame_observations(problem, 0, frame, unique_id, point_id);
  }
  if (problem.observations.size() < 6)
    throw TooFewMatches("motion-only ba: " +
                        std::to_string(problem.observations.size()) +
                        " observations, need 6");
  return problem;
}

/// Local BA around a center keyframe: the covisible set is free, points
/// they see are free, and any outside keyframe observing those points is
/// included fixed. With no fixed boundary, the lowest-id free pose is
/// fixed to pin the gauge.
inline BaProblem build_local_ba(const BundledMap& map, const CameraRig& rig,
                                std::int64_t center_id) {
  BaProblem problem;
  problem.rig = rig;

  std::set<std::int64_t> local;  // B_L
  local.insert(map.keyframe(center_id).id);
  for (const auto& [kf, w] : map.covisibility().neighbors(center_id))
    local.insert(kf);

  std::set<std::int64_t> local_points;  // P_L
  for (std::int64_t kf : local)
    for (std::int64_t pt : map.keyframe(kf).observed_points())
      local_points.insert(pt);

  std::set<std::int64_t> boundary;  // B_F
  for (std::int64_t pt : local_points)
    for (std::int64_t kf : map.point(pt).observing_keyframes())
      if (!local.count(kf)) boundary.insert(kf);

  for (std::int64_t kf : local)
    problem.poses[kf] = PoseVariable{map.keyframe(kf).frame.pose, false};
  for (std::int64_t kf : boundary)
    problem.poses[kf] = PoseVariable{map.keyframe(kf).frame.pose, true};
  if (boundary.empty())
    problem.poses[*local.begin()].fixed = true;

  for (std::int64_t pt : local_points)
    problem.points[pt] = PointVariable{map.point(pt).position, false};

  for (const auto& [kf, var] : problem.poses) {
    for (const auto& [unique_id, point_id] :
         map.keyframe(kf).point_for_unique)
      if (local_points.count(point_id))
        detail::add_frame_observations(problem, kf, map.keyframe(kf).frame,
                                       unique_id, point_id);
  }
  return problem;
}

/// Global BA: everything free except the origin keyframe (lowest id).
inline BaProblem build_global_ba(const BundledMap& map,
                                 const CameraRig& rig) {
  if (map.keyframe_count() == 0) throw Error("global ba: empty map");
  BaProblem problem;
  problem.rig = rig;
  const std::int64_t origin = map.keyframe_ids().front();
  for (std::int64_t kf : map.keyframe_ids())
    problem.poses[kf] =
        PoseVariable{map.keyframe(kf).frame.pose, kf == origin};
  for (std::int64_t pt : map.point_ids())
    problem.points[pt] = PointVariable{map.point(pt).position, false};
  for (std::int64_t kf : map.keyframe_ids())
    for (const auto& [unique_id, point_id] :
         map.keyframe(kf).point_for_unique)
      detail::add_frame_observations(problem, kf, map.keyframe(kf).frame,
                                     unique_id, point_id);
  return problem;
}

/// Writes optimized poses and points back into the map.
inline void apply_solution(BundledMap& map, const BaProblem& problem) {
  for (const auto& [id, v] : problem.poses)
    if (!v.fixed) map.set_keyframe_pose(id, v.pose.c1);
  for (const auto& [id, v] : problem.points)
    if (!v.fixed) map.set_point_position(id, v.position);
}

/// Motion-only BA with outlier reclassification: runs the solver, marks
/// observations whose whitened norm exceeds the kernel threshold as
/// outliers, and repeats on the inliers. Returns the inlier flags aligned
/// with problem.observations and leaves the refined pose in the problem.
/// When report is given it receives the last round's solve report.
inline std::vector<bool> solve_motion_only(BaProblem& problem,
                                           int rounds = 4,
                                           SolveReport* report = nullptr) {
  std::vector<bool> inlier(problem.observations.size(), true);
  const std::vector<Observation> all = problem.observations;
  SolveReport last;
  for (int round = 0; round < rounds; ++round) {
    problem.observations.clear();
    for (std::size_t k = 0; k < all.size(); ++k)
      if (inlier[k]) problem.observations.push_back(all[k]);
    if (problem.observations.size() < 6)
      throw TooFewMatches("motion-only ba: too few inliers");
    last = solve_lm(problem);

    const RigidTransform& c1 = problem.poses.at(0).pose.c1;
    for (std::size_t k = 0; k < all.size(); ++k) {
      const auto& o = all[k];
      const Vec3 p_cam =
          act(problem.rig.camera(o.camera_id).extrinsic,
              act(c1, problem.points.at(o.point_id).position));
      if (p_cam.z() <= kMinDepth) {
        inlier[k] = false;
        continue;
      }
      const Vec2 e =
          o.pixel -
          *try_project(problem.rig.camera(o.camera_id).intrinsics, p_cam);
      inlier[k] = e.dot(o.information * e) <=
                  problem.kernel.delta * problem.kernel.delta;
    }
  }
  problem.observations = all;
  if (report) *report = last;
  return inlier;
}

}  // namespace rigslam
