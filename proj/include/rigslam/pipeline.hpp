#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Geometry>

#include "rigslam/bow.hpp"
#include "rigslam/evaluation.hpp"
#include "rigslam/loop.hpp"
#include "rigslam/sim.hpp"
#include "rigslam/tracking.hpp"

namespace rigslam {

namespace detail {

inline RigidTransform random_pose(std::mt19937_64& rng, double max_angle,
                                  double translation_scale) {
  std::uniform_real_distribution<double> ua(0.0, max_angle);
  std::uniform_real_distribution<double> ut(-translation_scale,
                                            translation_scale);
  const Vec3 axis = random_unit(rng);
  const Eigen::Quaterniond q(Eigen::AngleAxisd(ua(rng), axis));
  return RigidTransform(Rotation3::from_quaternion(q),
                        Vec3(ut(rng), ut(rng), ut(rng)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Analytic-vs-numeric jacobian audit

struct JacobianCheckSettings {
  int trials = 1000;
  std::uint64_t seed = 29;
  double step = 1e-6;       // central-difference half step
  double tolerance = 1e-5;  // on |analytic - numeric| / max(1, magnitudes)
  bool negate = false;      // flip the analytic sign; the audit must then fail
};

struct JacobianCheckResult {
  int trials = 0;
  std::uint64_t seed = 0;
  double tolerance = 0.0;
  double worst_error = 0.0;
  int worst_trial = -1;
  std::string worst_kind;  // "pose" or "point"
  bool pass = false;
};

namespace detail {

// One randomized projection configuration: rig, pose, camera, world point.
struct JacobianProbe {
  CameraRig rig;
  RigidTransform c1;
  int camera = 0;
  Vec3 point = Vec3::Zero();
};

inline JacobianProbe make_probe(std::mt19937_64& rng, int trial) {
  const int ncam = 1 + trial % 3;  // every rig size gets exercised
  std::uniform_real_distribution<double> uf(300.0, 800.0);
  std::vector<CameraModel> cams;
  for (int c = 0; c < ncam; ++c) {
    PinholeIntrinsics intr{uf(rng), uf(rng), 320.0, 240.0, 640, 480};
    const RigidTransform extr =
        c == 0 ? RigidTransform::identity() : random_pose(rng, 0.5, 0.3);
    cams.push_back({intr, extr, 1.0});
  }
  JacobianProbe p{CameraRig(std::move(cams)), random_pose(rng, 0.6, 1.0), 0,
                  Vec3::Zero()};
  std::uniform_int_distribution<int> uc(0, ncam - 1);
  p.camera = uc(rng);
  std::uniform_real_distribution<double> uz(0.5, 50.0);
  std::uniform_real_distribution<double> uxy(-0.8, 0.8);
  const double z = uz(rng);
  const Vec3 p_cam(uxy(rng) * z, uxy(rng) * z, z);
  p.point = act(invert(compose(p.rig.camera(p.camera).extrinsic, p.c1)), p_cam);
  return p;
}

inline double entry_error(double analytic, double numeric) {
  const double scale =
      std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / scale;
}

}  // namespace detail

/// Compares the closed-form reprojection jacobians against central
/// differences over randomized rigs, poses, and points. The worst trial
/// index is reported so any failure can be replayed from the same seed.
inline JacobianCheckResult check_jacobians(
    const JacobianCheckSettings& settings = {}) {
  if (settings.trials <= 0)
    throw ConfigError("jacobian check: trials must be positive");
  if (settings.step <= 0.0)
    throw ConfigError("jacobian check: step must be positive");

  std::mt19937_64 rng(settings.seed);
  JacobianCheckResult out;
  out.trials = settings.trials;
  out.seed = settings.seed;
  out.tolerance = settings.tolerance;

  const double h = settings.step;
  const Vec2 u = Vec2::Zero();  // residual is affine in the measurement
  for (int t = 0; t < settings.trials; ++t) {
    const auto probe = detail::make_probe(rng, t);
    Mat26 jp = jacobian_pose(probe.rig, probe.c1, probe.camera, probe.point);
    Mat23 jx = jacobian_point(probe.rig, probe.c1, probe.camera, probe.point);
    if (settings.negate) {
      jp = -jp;
      jx = -jx;
    }
    const auto note = [&](double err, const char* kind) {
      if (err <= out.worst_error) return;
      out.worst_error = err;
      out.worst_trial = t;
      out.worst_kind = kind;
    };
    for (int i = 0; i < 6; ++i) {
      Twist d{Vec3::Zero(), Vec3::Zero()};
      (i < 3 ? d.rotational : d.translational)[i % 3] = h;
      const Vec2 plus =
          residual(probe.rig, compose(exp_se3(d), probe.c1), probe.camera,
                   probe.point, u);
      Twist m = d;
      m.rotational = -m.rotational;
      m.translational = -m.translational;
      const Vec2 minus =
          residual(probe.rig, compose(exp_se3(m), probe.c1), probe.camera,
                   probe.point, u);
      const Vec2 fd = (plus - minus) / (2.0 * h);
      for (int r = 0; r < 2; ++r)
        note(detail::entry_error(jp(r, i), fd[r]), "pose");
    }
    for (int i = 0; i < 3; ++i) {
      Vec3 d = Vec3::Zero();
      d[i] = h;
      const Vec2 fd = (residual(probe.rig, probe.c1, probe.camera,
                                probe.point + d, u) -
                       residual(probe.rig, probe.c1, probe.camera,
                                probe.point - d, u)) /
                      (2.0 * h);
      for (int r = 0; r < 2; ++r)
        note(detail::entry_error(jx(r, i), fd[r]), "point");
    }
  }
  out.pass = out.worst_error < settings.tolerance;
  return out;
}

// ---------------------------------------------------------------------------
// Sequential pipeline

struct PipelineSettings {
  TrackerSettings tracker;
  MatcherSettings matcher;
  LoopDetectorSettings detector;
  LoopClosureSettings closure;
  // A handful of LM iterations per insertion is enough: the window starts
  // at the tracker's refined pose, and the next insertion polishes again.
  SolverSettings local_ba{.max_iterations = 10};
  bool loop_closing = true;
  // Vocabulary training corpus: random descriptors, independent of any
  // scene, so recognition never keys on the training set.
  int vocab_branching = 10;
  int vocab_levels = 3;
  int vocab_pool = 4000;
  std::uint64_t vocab_seed = 1;
};

struct FrameSummary {
  int frame = -1;
  double timestamp = 0.0;
  TrackingStatus status = TrackingStatus::kUninitialized;
  int matches = 0;
  int inliers = 0;
  double search_radius = 0.0;
  std::int64_t keyframe = -1;        // inserted this frame, -1 otherwise
  std::int64_t loop_candidate = -1;  // detector proposal, -1 otherwise
  std::int64_t loop_closed_with = -1;
  bool loop_rejected = false;
  SolveReport local_ba;  // meaningful only when keyframe >= 0
};

/// Per-frame SLAM loop: bundle, initialize, track, drift, insert + local
/// BA, loop detect + close. Owns the map and tracker state; the live
/// trajectory records each frame's estimate as it was produced (never
/// retroactively edited), while keyframe_trajectory() reads the final
/// optimized keyframe poses out of the map.
class Pipeline {
 public:
  Pipeline(CameraRig rig, PipelineSettings settings, std::uint64_t seed)
      : rig_(std::move(rig)), settings_(settings), bootstrap_seed_(seed) {
    if (settings_.loop_closing) {
      std::mt19937_64 vrng(settings_.vocab_seed);
      std::vector<Descriptor256> pool(settings_.vocab_pool);
      for (auto& d : pool) d = Descriptor256::random(vrng);
      vocab_ = train_vocabulary(pool, settings_.vocab_branching,
                                settings_.vocab_levels, settings_.vocab_seed);
      db_.emplace(vocab_);
      detector_ = LoopDetector(settings_.detector);
    }
  }

  // The keyframe database points at the member vocabulary.
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  FrameSummary step(const SimFrameObservations& obs) {
    return step(to_bundled_frame(rig_, obs, settings_.matcher),
                obs.drift_delta);
  }

  /// odometry_perturbation accumulates frame by frame and is composed
  /// into the estimate at the next keyframe insertion, after local
  /// refinement: the keyframe, the points born with it, and the tracker
  /// state move together, so the map tail stays self-consistent while its
  /// tie to the older map silently degrades. Established structure pulls
  /// the error back out wherever visibility persists; across visibility
  /// breaks it compounds, which is exactly how real odometry drift enters
  /// a map.
  FrameSummary step(BundledFrame frame,
                    const RigidTransform& odometry_perturbation =
                        RigidTransform::identity()) {
    FrameSummary s;
    s.frame = frames_++;
    s.timestamp = frame.timestamp;

    if (state_.status == TrackingStatus::kLost) {
      s.status = state_.status;  // terminal: no relocalization stage
      history_.push_back(s);
      return s;
    }
    if (state_.status == TrackingStatus::kUninitialized) {
      initialize(std::move(frame), s);
      history_.push_back(s);
      return s;
    }

    const TrackResult result =
        track_frame(map_, rig_, state_, frame, settings_.tracker);
    state_ = result.state;
    s.matches = static_cast<int>(result.matches.size());
    s.inliers = static_cast<int>(result.inlier_matches.size());
    s.search_radius = result.search_radius;
    s.status = state_.status;
    if (state_.status != TrackingStatus::kOk) {
      history_.push_back(s);
      return s;
    }
    ++tracked_frames_;
    if (!odometry_perturbation.rotation.matrix().isIdentity(0.0) ||
        !odometry_perturbation.translation.isZero(0.0))
      pending_drift_ = compose(odometry_perturbation, pending_drift_);
    live_.append(frame.timestamp, invert(state_.last_pose.c1));

    if (need_new_keyframe(state_, s.inliers, map_, settings_.tracker)) {
      const KeyframeInsertion ins = insert_keyframe(
          map_, rig_, frame, result.inlier_matches, state_, settings_.tracker);
      s.keyframe = ins.keyframe_id;
      s.local_ba = refine_local(ins.keyframe_id);
      inject_drift(ins.keyframe_id);
      if (settings_.loop_closing) {
        db_->insert(map_.keyframe(ins.keyframe_id));
        attempt_loop(ins.keyframe_id, s);
      }
    }
    history_.push_back(s);
    return s;
  }

  const CameraRig& rig() const { return rig_; }
  const BundledMap& map() const { return map_; }
  const TrackerState& state() const { return state_; }
  const TrajectoryRecord& live_trajectory() const { return live_; }
  const std::vector<FrameSummary>& history() const { return history_; }
  int frames() const { return frames_; }
  int tracked_frames() const { return tracked_frames_; }
  int loop_detections() const { return loop_detections_; }
  int loop_closures() const { return loop_closures_; }
  int loop_rejections() const { return loop_rejections_; }
  const std::vector<LoopClosureReport>& loop_reports() const {
    return loop_reports_;
  }

  /// Final keyframe poses in id (= insertion, = time) order.
  TrajectoryRecord keyframe_trajectory() const {
    TrajectoryRecord out;
    for (std::int64_t id : map_.keyframe_ids()) {
      const auto& pose = map_.keyframe(id).frame.pose;
      out.append(pose.timestamp, invert(pose.c1));
    }
    return out;
  }

 private:
  void initialize(BundledFrame frame, FrameSummary& s) {
    if (rig_.camera_count() >= 2) {
      if (const auto kf =
              try_initialize(map_, rig_, frame, state_, settings_.tracker)) {
        s.keyframe = *kf;
        if (db_) db_->insert(map_.keyframe(*kf));
        live_.append(frame.timestamp, invert(state_.last_pose.c1));
      }
    } else if (!pending_) {
      pending_ = std::move(frame);
    } else if (const auto kfs = try_initialize_two_view(
                   map_, rig_, *pending_, frame, bootstrap_seed_, state_,
                   settings_.tracker)) {
      s.keyframe = kfs->second;
      if (db_) {
        db_->insert(map_.keyframe(kfs->first));
        db_->insert(map_.keyframe(kfs->second));
      }
      const auto& first_pose = map_.keyframe(kfs->first).frame.pose;
      live_.append(first_pose.timestamp, invert(first_pose.c1));
      live_.append(frame.timestamp, invert(state_.last_pose.c1));
      pending_.reset();
    } else {
      pending_ = std::move(frame);  // slide the bootstrap window forward
    }
    s.status = state_.status;
  }

  SolveReport refine_local(std::int64_t kf) {
    BaProblem problem = build_local_ba(map_, rig_, kf);
    problem.settings = settings_.local_ba;
    const SolveReport report = solve_lm(problem);
    apply_solution(map_, problem);
    state_.last_pose = map_.keyframe(kf).frame.pose;
    return report;
  }

  /// Materializes the accumulated odometry perturbation: the fresh
  /// keyframe, the points only it observes, and the tracker state move
  /// together, leaving the tail self-consistent but displaced against the
  /// older map.
  void inject_drift(std::int64_t kf) {
    if (pending_drift_.rotation.matrix().isIdentity(0.0) &&
        pending_drift_.translation.isZero(0.0))
      return;
    const RigidTransform c1_old = map_.keyframe(kf).frame.pose.c1;
    const RigidTransform c1_new = compose(pending_drift_, c1_old);
    const RigidTransform morph =
        compose(compose(invert(c1_old), invert(pending_drift_)), c1_old);
    map_.set_keyframe_pose(kf, c1_new);
    for (std::int64_t id : map_.point_ids()) {
      const auto& pt = map_.point(id);
      const auto kfs = pt.observing_keyframes();
      if (kfs.size() == 1 && *kfs.begin() == kf)
        map_.set_point_position(id, act(morph, pt.position));
    }
    state_.last_pose = map_.keyframe(kf).frame.pose;
    pending_drift_ = RigidTransform::identity();
  }

  void attempt_loop(std::int64_t kf, FrameSummary& s) {
    const auto cand = detector_.detect(map_, *db_, kf);
    if (!cand) return;
    s.loop_candidate = *cand;
    ++loop_detections_;
    try {
      loop_reports_.push_back(
          close_loop(map_, rig_, kf, *cand, settings_.closure));
      s.loop_closed_with = *cand;
      ++loop_closures_;
      state_.last_pose = map_.keyframe(kf).frame.pose;
      state_.velocity = RigidTransform::identity();
    } catch (const LoopRejected&) {
      s.loop_rejected = true;
      ++loop_rejections_;
    }
  }

  CameraRig rig_;
  PipelineSettings settings_;
  std::uint64_t bootstrap_seed_ = 0;

  Vocabulary vocab_;
  std::optional<KeyframeDatabase> db_;
  LoopDetector detector_;

  BundledMap map_;
  TrackerState state_;
  std::optional<BundledFrame> pending_;  // single-camera bootstrap buffer
  RigidTransform pending_drift_;         // accumulated, applied at insertion

  TrajectoryRecord live_;
  std::vector<FrameSummary> history_;
  std::vector<LoopClosureReport> loop_reports_;
  int frames_ = 0;
  int tracked_frames_ = 0;
  int loop_detections_ = 0;
  int loop_closures_ = 0;
  int loop_rejections_ = 0;
};

}  // namespace rigslam
