#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "rigslam/camera.hpp"
#include "rigslam/errors.hpp"
#include "rigslam/frame.hpp"
#include "rigslam/map.hpp"
#include "rigslam/optimizer.hpp"
#include "rigslam/pose_graph.hpp"

namespace rigslam {

struct LoopClosureSettings {
  int min_inliers = 20;          // relative-pose solve acceptance
  int max_hamming = 50;          // descriptor gate for point matching
  double merge_chi2 = 5.991;     // mutual reprojection agreement gate
  SolverSettings relative_solver;
  SolverSettings pose_graph_solver;
  SolverSettings global_solver;
};

struct LoopClosureReport {
  std::int64_t current = -1;
  std::int64_t candidate = -1;
  int matches = 0;               // descriptor matches fed to the solve
  int inliers = 0;               // surviving the motion-only rounds
  RigidTransform corrected_pose; // current keyframe after re-localization
  int merged_points = 0;
  SolveReport pose_graph;
  SolveReport global_ba;
};

namespace detail {

/// Keyframes of the locality: the keyframe plus its covisible neighbors.
inline std::set<std::int64_t> locality(const BundledMap& map,
                                       std::int64_t kf_id) {
  std::set<std::int64_t> out{kf_id};
  for (const auto& [id, w] : map.covisibility().neighbors(kf_id))
    out.insert(id);
  return out;
}

inline std::set<std::int64_t> observed_by(const BundledMap& map,
                                          const std::set<std::int64_t>& kfs) {
  std::set<std::int64_t> out;
  for (std::int64_t kf : kfs)
    for (std::int64_t pt : map.keyframe(kf).observed_points()) out.insert(pt);
  return out;
}

/// Greedy one-to-one descriptor matching of the keyframe's unique
/// features against a point set, best distances first.
inline std::map<std::int64_t, std::int64_t> match_features_to_points(
    const BundledMap& map, const BundledKeyframe& kf,
    const std::set<std::int64_t>& points, int max_hamming) {
  struct Candidate {
    int dist;
    std::int64_t unique, point;
  };
  std::vector<Candidate> candidates;
  for (const auto& [unique, views] : kf.frame.unique_ids) {
    const auto& [cam, idx] = views.front();
    const Descriptor256& d = kf.frame.features[cam][idx].descriptor;
    for (std::int64_t pt : points) {
      const int dist = hamming_distance(d, map.point(pt).descriptor);
      if (dist <= max_hamming) candidates.push_back({dist, unique, pt});
    }
  }
  std::sort(candidates.begin(), candidates.end(),
            [](const Candidate& a, const Candidate& b) {
              if (a.dist != b.dist) return a.dist < b.dist;
              if (a.unique != b.unique) return a.unique < b.unique;
              return a.point < b.point;
            });
  std::map<std::int64_t, std::int64_t> matches;
  std::set<std::int64_t> used_points;
  for (const auto& c : candidates) {
    if (matches.count(c.unique) || used_points.count(c.point)) continue;
    matches[c.unique] = c.point;
    used_points.insert(c.point);
  }
  return matches;
}

/// Squared pixel error of a world point against one recorded camera view,
/// or nothing if the point falls behind or off that camera.
inline std::optional<double> view_error2(const CameraRig& rig,
                                         const BundledFrame& frame, int cam,
                                         int feat, const Vec3& point) {
  const Vec3 p_cam = act(camera_pose(rig, frame.pose, cam), point);
  if (p_cam.z() <= kMinDepth) return std::nullopt;
  const auto pixel = try_project(rig.camera(cam).intrinsics, p_cam);
  if (!pixel) return std::nullopt;
  return (*pixel - frame.features[cam][feat].pixel).squaredNorm();
}

}  // namespace detail

/// Fuses a detected loop: re-localizes the current keyframe against the
/// candidate's local points, spreads the correction over the covisibility
/// pose graph (loop edge included, origin keyframe fixed), carries every
/// map point along with its anchor keyframe, merges duplicate points that
/// mutually agree under reprojection, and finishes with global BA.
/// The rig and the origin keyframe pose come out bit-identical.
inline LoopClosureReport close_loop(BundledMap& map, const CameraRig& rig,
                                    std::int64_t current,
                                    std::int64_t candidate,
                                    const LoopClosureSettings& settings = {}) {
  LoopClosureReport report;
  report.current = current;
  report.candidate = candidate;

  const BundledKeyframe& cur_kf = map.keyframe(current);
  const BundledKeyframe& cand_kf = map.keyframe(candidate);

  // Step 1: relative pose by motion-only BA against the candidate's
  // locality. Tried from both the drifted pose and the candidate's pose;
  // the start with more inliers (then lower cost) wins.
  const auto cand_local = detail::locality(map, candidate);
  const auto cand_points = detail::observed_by(map, cand_local);
  const auto matches = detail::match_features_to_points(
      map, cur_kf, cand_points, settings.max_hamming);
  report.matches = int(matches.size());

  BaProblem best_problem;
  int best_inliers = -1;
  for (const RigidTransform& start :
       {cur_kf.frame.pose.c1, cand_kf.frame.pose.c1}) {
    BundledFrame frame = cur_kf.frame;
    frame.pose.c1 = start;
    try {
      BaProblem problem = build_motion_only(map, rig, frame, matches);
      problem.settings = settings.relative_solver;
      const auto inlier = solve_motion_only(problem);
      const int count = int(std::count(inlier.begin(), inlier.end(), true));
      if (count > best_inliers) {  // ties keep the earlier start
        best_inliers = count;
        best_problem = std::move(problem);
      }
    } catch (const TooFewMatches&) {
      continue;
    }
  }
  if (best_inliers < settings.min_inliers)
    throw LoopRejected("loop: " + std::to_string(std::max(best_inliers, 0)) +
                       " inliers against candidate " +
                       std::to_string(candidate) + ", need " +
                       std::to_string(settings.min_inliers));
  report.inliers = best_inliers;
  report.corrected_pose = best_problem.poses.at(0).pose.c1;

  // Step 2: pose graph over covisibility edges plus the loop edge. The
  // edges hold the current relative geometry; only the loop edge is in
  // conflict, so solving spreads the drift over the whole trajectory.
  PoseGraphProblem graph;
  const std::int64_t origin = map.keyframe_ids().front();
  for (std::int64_t kf : map.keyframe_ids())
    graph.poses[kf] = map.keyframe(kf).frame.pose.c1;
  graph.fixed = {origin};
  for (const auto& [pair, w] : map.covisibility().counts()) {
    if (w < CovisibilityGraph::kEdgeThreshold) continue;
    graph.edges.push_back(
        {pair.first, pair.second,
         compose(graph.poses.at(pair.first),
                 invert(graph.poses.at(pair.second)))});
  }
  graph.edges.push_back(
      {current, candidate,
       compose(report.corrected_pose, invert(graph.poses.at(candidate)))});
  report.pose_graph = solve_pose_graph(graph, settings.pose_graph_solver);

  // Carry each point with its anchor (lowest-id observing keyframe) so
  // local structure follows the corrected trajectory.
  std::map<std::int64_t, RigidTransform> old_pose;
  for (std::int64_t kf : map.keyframe_ids())
    old_pose[kf] = map.keyframe(kf).frame.pose.c1;
  for (std::int64_t pt : map.point_ids()) {
    const auto observers = map.point(pt).observing_keyframes();
    if (observers.empty()) continue;
    const std::int64_t anchor = *observers.begin();
    const Vec3 in_anchor = act(old_pose.at(anchor), map.point(pt).position);
    map.set_point_position(
        pt, act(invert(graph.poses.at(anchor)), in_anchor));
  }
  for (std::int64_t kf : map.keyframe_ids())
    if (kf != origin) map.set_keyframe_pose(kf, graph.poses.at(kf));

  // Step 3: merge duplicates between the two localities. A pair merges
  // when each point reprojects onto the other's recorded view within the
  // gate, in both keyframe regions (mutual agreement).
  const auto cur_local = detail::locality(map, current);
  const auto cur_points = detail::observed_by(map, cur_local);
  std::vector<std::pair<std::int64_t, std::int64_t>> merges;  // old, new
  std::set<std::int64_t> consumed;
  for (std::int64_t new_pt : cur_points) {
    if (cand_points.count(new_pt)) continue;
    const MapPoint& np = map.point(new_pt);
    int best_dist = settings.max_hamming + 1;
    std::int64_t best_old = -1;
    for (std::int64_t old_pt : cand_points) {
      if (cur_points.count(old_pt) || consumed.count(old_pt)) continue;
      const int dist = hamming_distance(np.descriptor,
                                        map.point(old_pt).descriptor);
      if (dist < best_dist) {
        best_dist = dist;
        best_old = old_pt;
      }
    }
    if (best_old < 0) continue;

    const auto agree = [&](const MapPoint& views_of,
                           const Vec3& position) {
      for (const auto& [kf, cam, feat] : views_of.observations) {
        const double sigma = rig.camera(cam).noise_sigma;
        const double gate2 =
            settings.merge_chi2 * std::max(sigma * sigma, 0.25);
        const auto err2 = detail::view_error2(
            rig, map.keyframe(kf).frame, cam, feat, position);
        if (err2 && *err2 <= gate2) return true;
      }
      return false;
    };
    if (!agree(map.point(best_old), np.position)) continue;
    if (!agree(np, map.point(best_old).position)) continue;
    merges.emplace_back(best_old, new_pt);
    consumed.insert(best_old);
  }
  for (const auto& [old_pt, new_pt] : merges) {
    for (std::int64_t kf : map.point(new_pt).observing_keyframes()) {
      std::int64_t unique = -1;
      for (const auto& [u, p] : map.keyframe(kf).point_for_unique)
        if (p == new_pt) {
          unique = u;
          break;
        }
      map.remove_observation(kf, new_pt);
      if (unique >= 0 && !map.point(old_pt).observing_keyframes().count(kf))
        map.add_observation(kf, unique, old_pt);
    }
    map.remove_point(new_pt);
  }
  report.merged_points = int(merges.size());

  // Step 4: global BA over the corrected map.
  BaProblem global = build_global_ba(map, rig);
  global.settings = settings.global_solver;
  report.global_ba = solve_lm(global);
  apply_solution(map, global);
  return report;
}

}  // namespace rigslam
