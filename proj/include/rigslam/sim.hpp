#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "rigslam/camera.hpp"
#include "rigslam/descriptor.hpp"
#include "rigslam/errors.hpp"
#include "rigslam/frame.hpp"

namespace rigslam {

namespace detail {

inline Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vec3 v;
  do {
    v = Vec3(g(rng), g(rng), g(rng));
  } while (v.norm() < 1e-9);
  return v.normalized();
}

}  // namespace detail

/// Landmarks keep pairwise descriptor distance >= 2*max_hamming + 1 so a
/// feature can never alias to the wrong landmark through the matcher gate.
inline constexpr int kDescriptorSeparation = 101;

struct Landmark {
  Vec3 position = Vec3::Zero();
  Descriptor256 descriptor;
};

struct Scene {
  std::vector<Landmark> landmarks;
  std::uint64_t seed = 0;
};

struct SceneBounds {
  Vec3 lo = Vec3(-10.0, -10.0, -2.0);
  Vec3 hi = Vec3(10.0, 10.0, 4.0);
};

inline Scene generate_scene(int n_landmarks, const SceneBounds& bounds,
                            std::uint64_t seed) {
  if (n_landmarks < 1)
    throw Error("generate_scene: need at least one landmark");
  if (n_landmarks > 100000)
    throw SeparationUnsatisfiable(
        "generate_scene: descriptor space too crowded beyond 1e5 landmarks");
  Scene scene;
  scene.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(bounds.lo.x(), bounds.hi.x());
  std::uniform_real_distribution<double> uy(bounds.lo.y(), bounds.hi.y());
  std::uniform_real_distribution<double> uz(bounds.lo.z(), bounds.hi.z());
  scene.landmarks.reserve(n_landmarks);
  for (int i = 0; i < n_landmarks; ++i) {
    Landmark lm;
    lm.position = Vec3(ux(rng), uy(rng), uz(rng));
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      lm.descriptor = Descriptor256::random(rng);
      placed = true;
      for (const auto& other : scene.landmarks)
        if (hamming_distance(lm.descriptor, other.descriptor) <
            kDescriptorSeparation) {
          placed = false;
          break;
        }
    }
    if (!placed)
      throw SeparationUnsatisfiable(
          "generate_scene: could not separate descriptor " +
          std::to_string(i));
    scene.landmarks.push_back(lm);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Trajectories. Poses are for camera 1; +Z looks forward, +Y down.
// ---------------------------------------------------------------------------

enum class TrajectoryKind { kLine, kCircle, kSquareLoop, kLissajous };
enum class LookAt { kForward, kCenter, kPoint };

struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::kCircle;
  double duration = 20.0;  // seconds
  double rate = 10.0;      // frames per second

  double speed = 0.5;  // m/s along line and square paths
  Vec3 line_start = Vec3::Zero();
  Vec3 line_direction = Vec3::UnitX();

  Vec3 center = Vec3::Zero();          // circle and square center
  double circle_radius = 3.0;
  double circle_angular_speed = 0.25;  // rad/s

  double square_side = 6.0;
  double corner_blend = 0.15;  // heading-smoothing fraction of a side

  Vec3 liss_amplitude = Vec3(3.0, 2.0, 0.5);
  Vec3 liss_frequency = Vec3(0.20, 0.40, 0.30);  // rad/s per axis

  LookAt look_at = LookAt::kForward;
  Vec3 look_target = Vec3::Zero();
};

inline void validate(const TrajectorySpec& spec) {
  if (spec.duration <= 0.0 || spec.rate <= 0.0)
    throw ConfigError("trajectory: duration and rate must be positive");
}

namespace detail {

inline Vec3 trajectory_position(const TrajectorySpec& spec, double t) {
  switch (spec.kind) {
    case TrajectoryKind::kLine:
      return spec.line_start +
             spec.speed * t * spec.line_direction.normalized();
    case TrajectoryKind::kCircle: {
      const double a = spec.circle_angular_speed * t;
      return spec.center +
             spec.circle_radius * Vec3(std::cos(a), std::sin(a), 0.0);
    }
    case TrajectoryKind::kSquareLoop: {
      const double side = spec.square_side;
      const double perimeter = 4.0 * side;
      double s = std::fmod(spec.speed * t, perimeter);
      if (s < 0.0) s += perimeter;
      const double h = side / 2.0;
      const int leg = static_cast<int>(s / side);
      const double u = s - leg * side;
      switch (leg) {
        case 0:
          return spec.center + Vec3(-h + u, -h, 0.0);
        case 1:
          return spec.center + Vec3(h, -h + u, 0.0);
        case 2:
          return spec.center + Vec3(h - u, h, 0.0);
        default:
          return spec.center + Vec3(-h, h - u, 0.0);
      }
    }
    case TrajectoryKind::kLissajous:
      return spec.center +
             Vec3(spec.liss_amplitude.x() *
                      std::sin(spec.liss_frequency.x() * t),
                  spec.liss_amplitude.y() *
                      std::sin(spec.liss_frequency.y() * t),
                  spec.liss_amplitude.z() *
                      std::sin(spec.liss_frequency.z() * t));
  }
  return Vec3::Zero();
}

/// Forward direction. The square loop's heading is blended across the
/// corners so the look-at direction never jumps; other kinds use the
/// (numeric) velocity.
inline Vec3 trajectory_forward(const TrajectorySpec& spec, double t) {
  if (spec.kind == TrajectoryKind::kSquareLoop) {
    const double side = spec.square_side;
    const double perimeter = 4.0 * side;
    double s = std::fmod(spec.speed * t, perimeter);
    if (s < 0.0) s += perimeter;
    const double blend = std::clamp(spec.corner_blend, 0.0, 0.49) * side;
    const int leg = static_cast<int>(s / side);
    const double u = s - leg * side;
    double heading = leg * (M_PI / 2.0);  // leg 0 runs along +x
    if (blend > 0.0 && u > side - blend)
      heading += (u - (side - blend)) / (2.0 * blend) * (M_PI / 2.0);
    else if (blend > 0.0 && u < blend)
      heading -= (blend - u) / (2.0 * blend) * (M_PI / 2.0);
    return Vec3(std::cos(heading), std::sin(heading), 0.0);
  }
  const double h = 1e-5;
  const Vec3 v =
      trajectory_position(spec, t + h) - trajectory_position(spec, t - h);
  if (v.norm() < 1e-12) return Vec3::UnitX();
  return v.normalized();
}

inline Rotation3 look_rotation(const Vec3& forward) {
  Vec3 up = Vec3::UnitZ();
  if (std::abs(forward.dot(up)) > 0.99) up = Vec3::UnitY();
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 down = forward.cross(right).normalized();
  Mat3 r_wc;
  r_wc.col(0) = right;
  r_wc.col(1) = down;
  r_wc.col(2) = forward;
  return Rotation3(r_wc);
}

}  // namespace detail

/// Ground-truth camera-1 pose (world to camera) at time t.
inline RigPose trajectory_pose(const TrajectorySpec& spec, double t) {
  const Vec3 p = detail::trajectory_position(spec, t);
  Vec3 forward;
  switch (spec.look_at) {
    case LookAt::kForward:
      forward = detail::trajectory_forward(spec, t);
      break;
    case LookAt::kCenter:
      forward = (spec.center - p).norm() > 1e-9
                    ? (spec.center - p).normalized()
                    : Vec3::UnitX();
      break;
    case LookAt::kPoint:
      forward = (spec.look_target - p).norm() > 1e-9
                    ? (spec.look_target - p).normalized()
                    : Vec3::UnitX();
      break;
  }
  const RigidTransform t_wc(detail::look_rotation(forward), p);
  RigPose pose;
  pose.timestamp = t;
  pose.c1 = invert(t_wc);
  return pose;
}

inline int frame_count(const TrajectorySpec& spec) {
  return static_cast<int>(std::llround(spec.duration * spec.rate));
}

/// Ground-truth trajectory, one pose per frame at the spec rate.
inline std::vector<RigPose> ground_truth_trajectory(
    const TrajectorySpec& spec) {
  validate(spec);
  std::vector<RigPose> out;
  const int n = frame_count(spec);
  out.reserve(n);
  for (int k = 0; k < n; ++k)
    out.push_back(trajectory_pose(spec, k / spec.rate));
  return out;
}

// ---------------------------------------------------------------------------
// Observation generation (the measurement model with controllable noise).
// ---------------------------------------------------------------------------

struct SimObservation {
  int landmark_id = -1;
  Vec2 pixel = Vec2::Zero();
  Descriptor256 descriptor;
  bool is_outlier = false;
};

struct SimFrameObservations {
  double timestamp = 0.0;
  RigPose true_pose;
  /// Body-frame odometry perturbation for this frame, identity unless the
  /// run injects drift. Observations themselves are always rendered from
  /// the true pose; the perturbation is a schedule for the estimator's
  /// dead-reckoning chain, which is where real drift lives.
  RigidTransform drift_delta;
  std::vector<std::vector<SimObservation>> per_camera;
};

/// Odometry-drift injection: each frame carries a small random body-frame
/// perturbation scaled by distance travelled and by heading turned
/// (odometry degrades most while turning). An estimator that composes the
/// deltas into its pose chain drifts off the true path in a seeded,
/// reproducible way, while the pixel data keeps admitting the true
/// configuration exactly, so a loop closure can genuinely recover the
/// error instead of refitting it.
struct DriftSpec {
  bool enabled = false;
  double rot_per_meter = 0.0;     // radians per metre travelled
  double trans_per_meter = 0.0;   // metres per metre travelled
  double rot_per_radian = 0.0;    // radians per radian turned
  double trans_per_radian = 0.0;  // metres per radian turned
};

/// Simulates the rig along the trajectory. Non-outlier pixels carry
/// i.i.d. Gaussian noise clamped to +-6 sigma per axis (so the recorded
/// pixel never strays unboundedly from the true reprojection); outliers
/// replace the pixel with a uniform in-bounds draw. A landmark is emitted
/// only if its noiseless projection is in front of the camera and inside
/// the image. Drift never touches the rendered pixels; it only fills each
/// frame's drift_delta.
inline std::vector<SimFrameObservations> simulate(
    const Scene& scene, const CameraRig& rig, const TrajectorySpec& spec,
    double sigma, double outlier_fraction, std::uint64_t seed,
    const DriftSpec& drift = {}) {
  validate(spec);
  if (sigma < 0.0) throw ConfigError("simulate: sigma must be >= 0");
  if (outlier_fraction < 0.0 || outlier_fraction >= 0.5)
    throw ConfigError("simulate: outlier fraction must be in [0, 0.5)");
  if (drift.rot_per_meter < 0.0 || drift.trans_per_meter < 0.0 ||
      drift.rot_per_radian < 0.0 || drift.trans_per_radian < 0.0)
    throw ConfigError("simulate: drift rates must be >= 0");

  std::mt19937_64 rng(seed);
  std::mt19937_64 drift_rng(seed ^ 0x517cc1b727220a95ull);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<SimFrameObservations> out;
  const int n = frame_count(spec);
  out.reserve(n);
  std::optional<RigidTransform> prev_c1;
  for (int k = 0; k < n; ++k) {
    SimFrameObservations frame;
    frame.timestamp = k / spec.rate;
    frame.true_pose = trajectory_pose(spec, frame.timestamp);
    if (drift.enabled) {
      double dist = 0.0;
      double turn = 0.0;
      if (prev_c1) {
        const RigidTransform rel =
            compose(frame.true_pose.c1, invert(*prev_c1));
        dist = (invert(frame.true_pose.c1).translation -
                invert(*prev_c1).translation)
                   .norm();
        turn = log_se3(rel).rotational.norm();
      }
      prev_c1 = frame.true_pose.c1;
      if (dist > 0.0 || turn > 0.0) {
        const double rot_mag =
            drift.rot_per_meter * dist + drift.rot_per_radian * turn;
        const double trans_mag =
            drift.trans_per_meter * dist + drift.trans_per_radian * turn;
        const Vec3 axis = detail::random_unit(drift_rng);
        const Eigen::Quaterniond q(Eigen::AngleAxisd(rot_mag, axis));
        frame.drift_delta = RigidTransform(
            Rotation3::from_quaternion(q),
            trans_mag * detail::random_unit(drift_rng));
      }
    }
    frame.per_camera.resize(rig.camera_count());
    for (int cam = 0; cam < rig.camera_count(); ++cam) {
      const RigidTransform t_cw = camera_pose(rig, frame.true_pose, cam);
      const auto& intr = rig.camera(cam).intrinsics;
      for (std::size_t j = 0; j < scene.landmarks.size(); ++j) {
        const Vec3& position = scene.landmarks[j].position;
        const auto px = try_project(intr, act(t_cw, position));
        if (!px || !pixel_in_bounds(intr, *px)) continue;
        SimObservation obs;
        obs.landmark_id = static_cast<int>(j);
        obs.descriptor = scene.landmarks[j].descriptor;
        if (outlier_fraction > 0.0 && unit(rng) < outlier_fraction) {
          obs.is_outlier = true;
          obs.pixel = Vec2(unit(rng) * intr.width, unit(rng) * intr.height);
        } else {
          const double nx = std::clamp(gauss(rng), -6.0, 6.0);
          const double ny = std::clamp(gauss(rng), -6.0, 6.0);
          obs.pixel = *px + sigma * Vec2(nx, ny);
        }
        frame.per_camera[cam].push_back(obs);
      }
    }
    out.push_back(std::move(frame));
  }
  return out;
}

/// Feeds one simulated frame to the front end: features are added in
/// (camera, emission) order and bundled across cameras. The frame pose is
/// left at identity; landmark ids and the true pose stay on the sim side.
inline BundledFrame to_bundled_frame(const CameraRig& rig,
                                     const SimFrameObservations& sim,
                                     const MatcherSettings& matcher = {}) {
  BundledFrame f = make_frame(rig, sim.timestamp);
  for (std::size_t cam = 0; cam < sim.per_camera.size(); ++cam)
    for (const auto& obs : sim.per_camera[cam])
      add_feature(f, static_cast<int>(cam), obs.pixel, obs.descriptor);
  bundle_features(f, rig, matcher);
  return f;
}

// ---------------------------------------------------------------------------
// Observation dump: a plain-text replay format. One "frame" line per
// frame, then one "obs" line per observation:
//   frame <index> <timestamp>
//   obs <camera> <landmark> <u> <v> <outlier 0|1> <descriptor hex>
// Landmark ids and outlier flags exist for oracles and cross-checks; a
// SLAM consumer must ignore them.
// ---------------------------------------------------------------------------

inline void write_observations(std::ostream& os,
                               const std::vector<SimFrameObservations>& frames) {
  os << "rigslam-observations 1\n";
  os << std::setprecision(17);
  for (std::size_t k = 0; k < frames.size(); ++k) {
    os << "frame " << k << ' ' << frames[k].timestamp << '\n';
    for (std::size_t cam = 0; cam < frames[k].per_camera.size(); ++cam)
      for (const auto& obs : frames[k].per_camera[cam])
        os << "obs " << cam << ' ' << obs.landmark_id << ' '
           << obs.pixel.x() << ' ' << obs.pixel.y() << ' '
           << (obs.is_outlier ? 1 : 0) << ' ' << obs.descriptor.to_hex()
           << '\n';
  }
}

inline void write_observations(const std::string& path,
                               const std::vector<SimFrameObservations>& frames) {
  std::ofstream os(path);
  if (!os) throw Error("write_observations: cannot open " + path);
  write_observations(os, frames);
}

/// Reads a dump back. True poses are not part of the format; the returned
/// frames carry identity poses.
inline std::vector<SimFrameObservations> read_observations(std::istream& is) {
  std::string header;
  std::getline(is, header);
  if (header != "rigslam-observations 1")
    throw Error("read_observations: bad header '" + header + "'");
  std::vector<SimFrameObservations> frames;
  std::string line;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "frame") {
      std::size_t index;
      double timestamp;
      if (!(ss >> index >> timestamp) || index != frames.size())
        throw Error("read_observations: bad frame record at line " +
                    std::to_string(line_no));
      SimFrameObservations frame;
      frame.timestamp = timestamp;
      frames.push_back(std::move(frame));
    } else if (tag == "obs") {
      if (frames.empty())
        throw Error("read_observations: obs before any frame at line " +
                    std::to_string(line_no));
      int cam;
      SimObservation obs;
      int outlier;
      std::string hex;
      if (!(ss >> cam >> obs.landmark_id >> obs.pixel.x() >> obs.pixel.y() >>
            outlier >> hex) ||
          cam < 0 || (outlier != 0 && outlier != 1))
        throw Error("read_observations: bad obs record at line " +
                    std::to_string(line_no));
      obs.is_outlier = outlier == 1;
      obs.descriptor = Descriptor256::from_hex(hex);
      auto& per_camera = frames.back().per_camera;
      if (static_cast<int>(per_camera.size()) <= cam)
        per_camera.resize(cam + 1);
      per_camera[cam].push_back(std::move(obs));
    } else {
      throw Error("read_observations: unknown record '" + tag +
                  "' at line " + std::to_string(line_no));
    }
  }
  return frames;
}

inline std::vector<SimFrameObservations> read_observations(
    const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("read_observations: cannot open " + path);
  return read_observations(is);
}

}  // namespace rigslam
