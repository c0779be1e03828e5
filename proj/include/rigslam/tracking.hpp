#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "rigslam/camera.hpp"
#include "rigslam/errors.hpp"
#include "rigslam/frame.hpp"
#include "rigslam/map.hpp"
#include "rigslam/optimizer.hpp"
#include "rigslam/triangulation.hpp"

namespace rigslam {

// ---------------------------------------------------------------------------
// Frame-to-map tracking: constant-velocity prediction, grid-accelerated
// matching against the local map, motion-only BA, and the new-keyframe
// decision. Single-threaded; the map is only written through the
// initialization and insertion entry points, never by track_frame.
// ---------------------------------------------------------------------------

enum class TrackingStatus { kUninitialized, kOk, kLost };

inline const char* to_string(TrackingStatus s) {
  switch (s) {
    case TrackingStatus::kUninitialized:
      return "UNINITIALIZED";
    case TrackingStatus::kOk:
      return "OK";
    case TrackingStatus::kLost:
      return "LOST";
  }
  return "?";
}

struct TrackerSettings {
  double search_radius = 15.0;  // px around the predicted projection;
                                // doubled once before declaring LOST
  int max_hamming = 50;         // descriptor gate for map-point matching
  int min_inliers = 10;         // post-BA matches below this -> LOST
  int min_init_matched = 30;    // cross-camera matches to found the map
  int min_bootstrap_matches = 30;    // two-frame matches for the
                                     // single-camera bootstrap
  double triangulation_sigma_floor = 1.0;  // px, gates for near-noiseless
                                           // input stay solvable
  double keyframe_match_fraction = 0.9;  // need_new_keyframe threshold
  int keyframe_max_interval = 20;        // frames since last insertion
  SolverSettings solver;                 // motion-only BA
};

struct TrackerState {
  RigPose last_pose;
  RigidTransform velocity;  // last relative motion, identity unless OK
  std::int64_t reference_keyframe = -1;
  TrackingStatus status = TrackingStatus::kUninitialized;
  int frames_since_keyframe = 0;
};

/// Constant-velocity extrapolation of the last tracked pose.
inline RigPose predict_pose(const TrackerState& state) {
  if (state.status != TrackingStatus::kOk)
    throw NotTracking(std::string("predict_pose: tracker is ") +
                      to_string(state.status));
  RigPose out;
  out.c1 = compose(state.velocity, state.last_pose.c1);
  return out;
}

namespace detail {

/// Point ids of the reference keyframe's covisibility neighborhood.
inline std::set<std::int64_t> local_point_ids(const BundledMap& map,
                                              std::int64_t reference) {
  std::set<std::int64_t> kfs{reference};
  for (const auto& [kf, w] : map.covisibility().neighbors(reference))
    kfs.insert(kf);
  std::set<std::int64_t> points;
  for (std::int64_t kf : kfs)
    for (std::int64_t p : map.keyframe(kf).observed_points())
      points.insert(p);
  return points;
}

/// Greedy one-to-one assignment of frame unique ids to map points.
/// Candidates are features within `radius` of a point's projection whose
/// descriptor is within `max_hamming` of the point's; ties resolve by
/// (distance, unique id, point id), so the result is deterministic.
inline std::map<std::int64_t, std::int64_t> match_to_local_map(
    const BundledMap& map, const CameraRig& rig, const BundledFrame& frame,
    const RigPose& predicted, const std::set<std::int64_t>& point_ids,
    double radius, int max_hamming) {
  std::vector<std::tuple<int, std::int64_t, std::int64_t>> candidates;
  for (std::int64_t pid : point_ids) {
    const MapPoint& pt = map.point(pid);
    for (int cam = 0; cam < rig.camera_count(); ++cam) {
      const auto px = try_project(rig.camera(cam).intrinsics,
                                  act(camera_pose(rig, predicted, cam),
                                      pt.position));
      if (!px || !pixel_in_bounds(rig.camera(cam).intrinsics, *px)) continue;
      for (int idx : features_in_radius(frame, cam, *px, radius)) {
        const Feature& feat = frame.features[cam][idx];
        const int d = hamming_distance(pt.descriptor, feat.descriptor);
        if (d <= max_hamming)
          candidates.emplace_back(d, feat.unique_id, pid);
      }
    }
  }
  std::sort(candidates.begin(), candidates.end());
  std::map<std::int64_t, std::int64_t> matches;
  std::set<std::int64_t> used_points;
  for (const auto& [d, unique, pid] : candidates) {
    if (matches.count(unique) || used_points.count(pid)) continue;
    matches[unique] = pid;
    used_points.insert(pid);
  }
  return matches;
}

}  // namespace detail

struct TrackResult {
  TrackerState state;
  std::map<std::int64_t, std::int64_t> matches;  // unique id -> point id
  std::map<std::int64_t, std::int64_t> inlier_matches;
  SolveReport report;        // last motion-only round (valid when solved)
  double search_radius = 0;  // radius that produced the result
  bool solved = false;       // a motion-only BA ran to completion
};

/// Tracks one frame against the local map at the predicted pose. LOST is
/// a status, not an error: the returned state then carries the predicted
/// pose, an identity velocity, and the map is untouched (the signature
/// cannot mutate it). A failed first pass retries once with the search
/// radius doubled.
inline TrackResult track_frame(const BundledMap& map, const CameraRig& rig,
                               const TrackerState& state,
                               const BundledFrame& frame,
                               const TrackerSettings& settings = {}) {
  if (map.keyframe_count() == 0)
    throw Error("track_frame: map not initialized");
  RigPose predicted = predict_pose(state);
  predicted.timestamp = frame.timestamp;
  const std::set<std::int64_t> local =
      detail::local_point_ids(map, state.reference_keyframe);

  TrackResult result;
  result.state = state;

  for (int attempt = 0; attempt < 2; ++attempt) {
    const double radius = settings.search_radius * (attempt == 0 ? 1.0 : 2.0);
    result.search_radius = radius;
    result.matches = detail::match_to_local_map(
        map, rig, frame, predicted, local, radius, settings.max_hamming);
    result.inlier_matches.clear();
    result.solved = false;

    BaProblem problem;
    std::vector<bool> flags;
    try {
      BundledFrame posed = frame;
      posed.pose = predicted;
      problem = build_motion_only(map, rig, posed, result.matches);
      problem.settings = settings.solver;
      flags = solve_motion_only(problem, 4, &result.report);
    } catch (const TooFewMatches&) {
      continue;
    }
    result.solved = true;

    // A match is an inlier when every view of its unique id survived
    // reclassification. Observations were emitted in match order.
    std::size_t k = 0;
    for (const auto& [unique, pid] : result.matches) {
      const std::size_t views = frame.unique_ids.at(unique).size();
      bool all = true;
      for (std::size_t v = 0; v < views; ++v)
        if (!flags[k + v]) all = false;
      if (all) result.inlier_matches[unique] = pid;
      k += views;
    }

    if (static_cast<int>(result.inlier_matches.size()) >=
        settings.min_inliers) {
      result.state.last_pose = problem.poses.at(0).pose;
      result.state.velocity =
          compose(result.state.last_pose.c1, invert(state.last_pose.c1));
      result.state.status = TrackingStatus::kOk;
      result.state.frames_since_keyframe = state.frames_since_keyframe + 1;
      return result;
    }
  }

  result.state.last_pose = predicted;
  result.state.velocity = RigidTransform::identity();
  result.state.status = TrackingStatus::kLost;
  return result;
}

/// Keyframe decision: too few tracked points relative to the reference
/// keyframe, or too long since the last insertion.
inline bool need_new_keyframe(const TrackerState& state, int tracked_matches,
                              const BundledMap& map,
                              const TrackerSettings& settings = {}) {
  if (state.status != TrackingStatus::kOk)
    throw NotTracking("need_new_keyframe: tracker is not OK");
  const auto& ref = map.keyframe(state.reference_keyframe);
  const double ref_count = static_cast<double>(ref.point_for_unique.size());
  if (tracked_matches < settings.keyframe_match_fraction * ref_count)
    return true;
  return state.frames_since_keyframe >= settings.keyframe_max_interval;
}

/// Founds the map when the frame has enough cross-camera matched
/// features: the frame becomes keyframe 0 at its current pose and every
/// matched id that triangulates becomes a map point (scale is metric from
/// the rig baseline). Returns the keyframe id, or nullopt if the frame is
/// not good enough. Single-camera rigs bootstrap via
/// try_initialize_two_view instead.
inline std::optional<std::int64_t> try_initialize(
    BundledMap& map, const CameraRig& rig, const BundledFrame& frame,
    TrackerState& state, const TrackerSettings& settings = {}) {
  int matched = 0;
  for (const auto& [id, views] : frame.unique_ids)
    if (views.size() >= 2) ++matched;
  if (matched < settings.min_init_matched) return std::nullopt;

  const std::int64_t kf_id = map.insert_keyframe(frame);
  for (const auto& [unique, views] : frame.unique_ids) {
    if (views.size() < 2) continue;
    const auto p = triangulate_feature(rig, frame, unique);
    if (!p) continue;
    const auto [cam, feat] = views.front();
    const std::int64_t pid =
        map.create_point(*p, frame.features[cam][feat].descriptor);
    map.add_observation(kf_id, unique, pid);
  }

  state.last_pose = frame.pose;
  state.velocity = RigidTransform::identity();
  state.reference_keyframe = kf_id;
  state.status = TrackingStatus::kOk;
  state.frames_since_keyframe = 0;
  return kf_id;
}

namespace detail {

/// Mutual-best descriptor matches between two feature lists, gate
/// max_hamming, ties to the lowest index.
inline std::vector<std::pair<int, int>> mutual_matches(
    const std::vector<Feature>& a, const std::vector<Feature>& b,
    int max_hamming) {
  const auto best_into = [&](const std::vector<Feature>& from,
                             const std::vector<Feature>& to) {
    std::vector<int> best(from.size(), -1);
    for (std::size_t i = 0; i < from.size(); ++i) {
      int best_d = max_hamming + 1;
      for (std::size_t j = 0; j < to.size(); ++j) {
        const int d = hamming_distance(from[i].descriptor, to[j].descriptor);
        if (d < best_d) {
          best_d = d;
          best[i] = static_cast<int>(j);
        }
      }
    }
    return best;
  };
  const auto ab = best_into(a, b);
  const auto ba = best_into(b, a);
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (ab[i] >= 0 && ba[ab[i]] == static_cast<int>(i))
      out.emplace_back(static_cast<int>(i), ab[i]);
  return out;
}

}  // namespace detail

/// Two-frame bootstrap for a single-camera rig: mutual descriptor
/// matches feed an essential-matrix relative pose (unit baseline, so the
/// map scale is arbitrary) and both frames become keyframes with the
/// triangulated inliers as points. Returns the two keyframe ids, or
/// nullopt when matching, the solve, or the parallax is too weak.
inline std::optional<std::pair<std::int64_t, std::int64_t>>
try_initialize_two_view(BundledMap& map, const CameraRig& rig,
                        const BundledFrame& first, const BundledFrame& second,
                        std::uint64_t seed, TrackerState& state,
                        const TrackerSettings& settings = {}) {
  const auto matches = detail::mutual_matches(
      first.features[0], second.features[0], settings.max_hamming);
  if (static_cast<int>(matches.size()) < settings.min_bootstrap_matches)
    return std::nullopt;

  std::vector<Vec2> pix_a, pix_b;
  for (const auto& [i, j] : matches) {
    pix_a.push_back(first.features[0][i].pixel);
    pix_b.push_back(second.features[0][j].pixel);
  }
  const double sigma = std::max(rig.camera(0).noise_sigma,
                                settings.triangulation_sigma_floor);
  const auto rel =
      two_view_relative_pose(rig.camera(0).intrinsics, pix_a, pix_b, sigma,
                             seed);
  if (!rel) return std::nullopt;
  int inliers = 0;
  for (bool f : rel->inliers) inliers += f;
  if (inliers < settings.min_bootstrap_matches) return std::nullopt;

  // rel->t_ba maps camera-0-at-first to camera-0-at-second; points come
  // back in the first camera frame. Lift both through the rig extrinsic
  // and the first frame's pose.
  const RigidTransform& e0 = rig.camera(0).extrinsic;
  const RigidTransform cam_a = compose(e0, first.pose.c1);
  const RigidTransform cam_b = compose(rel->t_ba, cam_a);
  const RigidTransform c1_b = compose(invert(e0), cam_b);

  const std::int64_t kf_a = map.insert_keyframe(first);
  BundledFrame posed = second;
  posed.pose.c1 = c1_b;
  const std::int64_t kf_b = map.insert_keyframe(posed);

  std::size_t point_index = 0;
  for (std::size_t k = 0; k < matches.size(); ++k) {
    if (!rel->inliers[k]) continue;
    const Vec3 world = act(invert(cam_a), rel->points[point_index++]);
    const auto& [i, j] = matches[k];
    const std::int64_t pid =
        map.create_point(world, second.features[0][j].descriptor);
    map.add_observation(kf_a, first.features[0][i].unique_id, pid);
    map.add_observation(kf_b, second.features[0][j].unique_id, pid);
  }

  // The bootstrap pair is usually frames apart, so the per-frame motion
  // is unknown; the search radius absorbs the first post-init frame.
  state.last_pose = posed.pose;
  state.velocity = RigidTransform::identity();
  state.reference_keyframe = kf_b;
  state.status = TrackingStatus::kOk;
  state.frames_since_keyframe = 0;
  return std::make_pair(kf_a, kf_b);
}

struct KeyframeInsertion {
  std::int64_t keyframe_id = -1;
  int observations = 0;     // existing points re-observed
  int created_matched = 0;  // new points from cross-camera pairs
  int created_mono = 0;     // new points matched against the reference
};

/// Promotes a tracked frame to a keyframe at the tracker's refined pose.
/// Inlier matches become observations; unmatched cross-camera ids are
/// triangulated in place; unmatched monocular features are matched
/// same-camera against the reference keyframe's unassociated features
/// and triangulated across the two poses. Updates the tracker state's
/// reference keyframe and resets the insertion counter.
inline KeyframeInsertion insert_keyframe(
    BundledMap& map, const CameraRig& rig, const BundledFrame& frame,
    const std::map<std::int64_t, std::int64_t>& matches, TrackerState& state,
    const TrackerSettings& settings = {}) {
  if (state.status != TrackingStatus::kOk)
    throw NotTracking("insert_keyframe: tracker is not OK");

  BundledFrame posed = frame;
  posed.pose = state.last_pose;
  const std::int64_t reference = state.reference_keyframe;

  KeyframeInsertion out;
  out.keyframe_id = map.insert_keyframe(posed);
  for (const auto& [unique, pid] : matches) {
    map.add_observation(out.keyframe_id, unique, pid);
    ++out.observations;
  }

  const BundledKeyframe& kf = map.keyframe(out.keyframe_id);
  for (const auto& [unique, views] : kf.frame.unique_ids) {
    if (views.size() < 2 || matches.count(unique)) continue;
    const auto p = triangulate_feature(rig, kf.frame, unique);
    if (!p) continue;
    const auto [cam, feat] = views.front();
    const std::int64_t pid =
        map.create_point(*p, kf.frame.features[cam][feat].descriptor);
    map.add_observation(out.keyframe_id, unique, pid);
    ++out.created_matched;
  }

  // Cross-keyframe creation from leftovers: the only depth source a
  // single-camera rig has. The chi-square gate gets a variance floor so
  // noiseless input does not reject everything.
  const BundledKeyframe& ref = map.keyframe(reference);
  const double sigma = std::max(rig.camera(0).noise_sigma,
                                settings.triangulation_sigma_floor);
  const double gate2 = 5.991 * sigma * sigma;
  for (int cam = 0; cam < rig.camera_count(); ++cam) {
    std::vector<Feature> new_mono, ref_mono;
    std::vector<std::int64_t> new_ids, ref_ids;
    const auto collect = [&](const BundledKeyframe& k, int c,
                             std::vector<Feature>& feats,
                             std::vector<std::int64_t>& ids) {
      for (const Feature& f : k.frame.features[c]) {
        if (k.frame.unique_ids.at(f.unique_id).size() != 1) continue;
        if (k.point_for_unique.count(f.unique_id)) continue;
        feats.push_back(f);
        ids.push_back(f.unique_id);
      }
    };
    collect(map.keyframe(out.keyframe_id), cam, new_mono, new_ids);
    collect(ref, cam, ref_mono, ref_ids);

    for (const auto& [i, j] :
         detail::mutual_matches(new_mono, ref_mono, settings.max_hamming)) {
      const Ray ray_new =
          back_project(rig.camera(cam).intrinsics,
                       camera_pose(rig, map.keyframe(out.keyframe_id)
                                            .frame.pose,
                                   cam),
                       new_mono[i].pixel);
      const Ray ray_ref = back_project(
          rig.camera(cam).intrinsics,
          camera_pose(rig, ref.frame.pose, cam), ref_mono[j].pixel);
      const auto p = triangulate_midpoint(ray_new, ray_ref);
      if (!p) continue;
      const auto ok_view = [&](const RigPose& pose, const Vec2& pixel) {
        if (act(camera_pose(rig, pose, cam), *p).z() <= kMinDepth)
          return false;
        const auto err = reprojection_error(rig, pose, cam, pixel, *p);
        return err && (*err) * (*err) <= gate2;
      };
      if (!ok_view(map.keyframe(out.keyframe_id).frame.pose,
                   new_mono[i].pixel) ||
          !ok_view(ref.frame.pose, ref_mono[j].pixel))
        continue;
      const std::int64_t pid = map.create_point(*p, new_mono[i].descriptor);
      map.add_observation(out.keyframe_id, new_ids[i], pid);
      map.add_observation(reference, ref_ids[j], pid);
      ++out.created_mono;
    }
  }

  state.reference_keyframe = out.keyframe_id;
  state.frames_since_keyframe = 0;
  return out;
}

}  // namespace rigslam
