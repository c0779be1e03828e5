#pragma once

#include <optional>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "rigslam/errors.hpp"
#include "rigslam/se3.hpp"

namespace rigslam {

/// Depth floor for the pinhole projection; projecting at or below it
/// raises BehindCamera.
inline constexpr double kMinDepth = 1e-6;

struct PinholeIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;
};

/// Pinhole projection of a point given in camera coordinates.
inline Vec2 project(const PinholeIntrinsics& intr, const Vec3& p_cam) {
  if (p_cam.z() <= kMinDepth)
    throw BehindCamera("project: point at depth " +
                       std::to_string(p_cam.z()));
  return Vec2(intr.fx * p_cam.x() / p_cam.z() + intr.cx,
              intr.fy * p_cam.y() / p_cam.z() + intr.cy);
}

/// Non-throwing projection for optimizer and simulator inner loops.
inline std::optional<Vec2> try_project(const PinholeIntrinsics& intr,
                                       const Vec3& p_cam) {
  if (p_cam.z() <= kMinDepth) return std::nullopt;
  return Vec2(intr.fx * p_cam.x() / p_cam.z() + intr.cx,
              intr.fy * p_cam.y() / p_cam.z() + intr.cy);
}

inline bool pixel_in_bounds(const PinholeIntrinsics& intr, const Vec2& px) {
  return px.x() >= 0.0 && px.x() < intr.width && px.y() >= 0.0 &&
         px.y() < intr.height;
}

/// One camera of the rig: intrinsics, the fixed extrinsic mapping
/// camera-1 coordinates to this camera's coordinates, and the pixel
/// measurement covariance.
struct CameraModel {
  PinholeIntrinsics intrinsics;
  RigidTransform extrinsic;  // T_i1, identity for camera 0
  double noise_sigma = 1.0;

  Mat2 noise_covariance() const {
    return noise_sigma * noise_sigma * Mat2::Identity();
  }
  Mat2 information() const {
    return Mat2::Identity() / (noise_sigma * noise_sigma);
  }
};

/// Rig state at one time step: the pose of camera 1 (world -> camera-1
/// coordinates) plus a timestamp. Other cameras derive from the fixed
/// extrinsic chain.
struct RigPose {
  RigidTransform c1;
  double timestamp = 0.0;
};

/// Immutable multi-camera rig. Extrinsics never change during a run.
class CameraRig {
 public:
  CameraRig() = default;

  explicit CameraRig(std::vector<CameraModel> cameras)
      : cameras_(std::move(cameras)) {
    if (cameras_.empty())
      throw ConfigError("rig: needs at least one camera");
    const RigidTransform& e0 = cameras_.front().extrinsic;
    if ((e0.rotation.matrix() - Mat3::Identity()).cwiseAbs().maxCoeff() >
            1e-12 ||
        e0.translation.cwiseAbs().maxCoeff() > 1e-12)
      throw ConfigError("rig: camera 0 extrinsic must be the identity");
    for (std::size_t i = 0; i < cameras_.size(); ++i) {
      const auto& c = cameras_[i];
      const std::string tag = "rig: camera " + std::to_string(i);
      if (c.intrinsics.fx <= 0.0 || c.intrinsics.fy <= 0.0)
        throw ConfigError(tag + ": focal lengths must be positive");
      if (c.intrinsics.cx < 0.0 || c.intrinsics.cx >= c.intrinsics.width ||
          c.intrinsics.cy < 0.0 || c.intrinsics.cy >= c.intrinsics.height)
        throw ConfigError(tag + ": principal point outside the image");
      if (c.noise_sigma <= 0.0)
        throw ConfigError(tag + ": noise_sigma must be positive");
    }
  }

  int camera_count() const { return static_cast<int>(cameras_.size()); }

  const CameraModel& camera(int i) const {
    if (i < 0 || i >= camera_count())
      throw IndexOutOfRange("rig: camera index " + std::to_string(i));
    return cameras_[i];
  }

  const std::vector<CameraModel>& cameras() const { return cameras_; }

  /// Rig truncated to its first k cameras.
  CameraRig first_cameras(int k) const {
    if (k < 1 || k > camera_count())
      throw IndexOutOfRange("rig: cannot take first " + std::to_string(k) +
                            " cameras of " + std::to_string(camera_count()));
    return CameraRig(std::vector<CameraModel>(cameras_.begin(),
                                              cameras_.begin() + k));
  }

 private:
  std::vector<CameraModel> cameras_;
};

/// World -> camera-i transform for the rig at the given pose: T_i1 * c1.
inline RigidTransform camera_pose(const CameraRig& rig, const RigPose& pose,
                                  int i) {
  if (i == 0) return pose.c1;
  return compose(rig.camera(i).extrinsic, pose.c1);
}

struct Observation2d {
  Vec2 pixel;
  bool in_bounds = false;
};

/// Noiseless observation of a world point by camera i.
inline Observation2d observe(const CameraRig& rig, const RigPose& pose,
                             int i, const Vec3& point_world) {
  const auto& intr = rig.camera(i).intrinsics;
  const Vec2 px = project(intr, act(camera_pose(rig, pose, i), point_world));
  return Observation2d{px, pixel_in_bounds(intr, px)};
}

// ---------------------------------------------------------------------------
// Rig configuration files.
//
// YAML layout, one entry per camera (camera 0 first, extrinsic identity):
//
//   cameras:
//     - fx: 458.0
//       fy: 458.0
//       cx: 320.0
//       cy: 240.0
//       width: 640
//       height: 480
//       extrinsic: [1, 0, 0, 0, 0, 0, 0]   # qw qx qy qz tx ty tz
//       noise_sigma: 1.0
//
// The quaternion is normalized on load; loading fails if its norm is off
// by more than 1e-3.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
T require_key(const YAML::Node& node, const std::string& key,
              const std::string& context) {
  const YAML::Node child = node[key];
  if (!child)
    throw ConfigError(context + ": missing key '" + key + "'");
  try {
    return child.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(context + ": bad value for key '" + key + "'");
  }
}

}  // namespace detail

inline CameraRig parse_rig_config(const YAML::Node& root) {
  const YAML::Node cams = root["cameras"];
  if (!cams || !cams.IsSequence() || cams.size() == 0)
    throw ConfigError("rig config: missing non-empty 'cameras' list");

  std::vector<CameraModel> cameras;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const std::string tag = "rig config: camera " + std::to_string(i);
    const YAML::Node& n = cams[i];
    CameraModel c;
    c.intrinsics.fx = detail::require_key<double>(n, "fx", tag);
    c.intrinsics.fy = detail::require_key<double>(n, "fy", tag);
    c.intrinsics.cx = detail::require_key<double>(n, "cx", tag);
    c.intrinsics.cy = detail::require_key<double>(n, "cy", tag);
    c.intrinsics.width = detail::require_key<int>(n, "width", tag);
    c.intrinsics.height = detail::require_key<int>(n, "height", tag);
    const auto ext =
        detail::require_key<std::vector<double>>(n, "extrinsic", tag);
    if (ext.size() != 7)
      throw ConfigError(tag + ": 'extrinsic' must hold 7 numbers "
                              "(qw qx qy qz tx ty tz)");
    Eigen::Quaterniond q(ext[0], ext[1], ext[2], ext[3]);
    if (std::abs(q.norm() - 1.0) > 1e-3)
      throw ConfigError(tag + ": 'extrinsic' quaternion norm " +
                        std::to_string(q.norm()) + " is not unit");
    c.extrinsic = RigidTransform(Rotation3::from_quaternion(q),
                                 Vec3(ext[4], ext[5], ext[6]));
    c.noise_sigma = detail::require_key<double>(n, "noise_sigma", tag);
    cameras.push_back(c);
  }
  return CameraRig(std::move(cameras));
}

inline CameraRig load_rig_config(const std::string& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path);
  } catch (const YAML::BadFile&) {
    throw ConfigError("rig config: cannot open '" + path + "'");
  } catch (const YAML::ParserException& e) {
    throw ConfigError("rig config: parse error at line " +
                      std::to_string(e.mark.line + 1) + " of '" + path +
                      "': " + e.msg);
  }
  return parse_rig_config(root);
}

/// Built-in rigs. "stereo2": two parallel cameras, 11 cm baseline,
/// 640x480, f = 458. "rig3"/"rig4" add divergent-yaw cameras.
inline CameraRig rig_preset(const std::string& name) {
  const PinholeIntrinsics intr{458.0, 458.0, 320.0, 240.0, 640, 480};

  // Camera placed at position p with yaw (about the camera y axis) in the
  // camera-1 frame; the extrinsic is the inverse of that placement.
  const auto make_camera = [&](const Vec3& position, double yaw_rad) {
    Mat3 r;
    r << std::cos(yaw_rad), 0.0, std::sin(yaw_rad),
         0.0, 1.0, 0.0,
         -std::sin(yaw_rad), 0.0, std::cos(yaw_rad);
    const RigidTransform placement(Rotation3(r), position);
    return CameraModel{intr, invert(placement), 1.0};
  };

  std::vector<CameraModel> cams;
  cams.push_back(CameraModel{intr, RigidTransform::identity(), 1.0});
  if (name == "stereo2") {
    cams.push_back(make_camera(Vec3(0.11, 0, 0), 0.0));
  } else if (name == "rig3") {
    cams.push_back(make_camera(Vec3(0.11, 0, 0), 0.0));
    cams.push_back(make_camera(Vec3(0.22, 0, 0), 25.0 * M_PI / 180.0));
  } else if (name == "rig4") {
    cams.push_back(make_camera(Vec3(0.11, 0, 0), 0.0));
    cams.push_back(make_camera(Vec3(0.22, 0, 0), 25.0 * M_PI / 180.0));
    cams.push_back(make_camera(Vec3(-0.11, 0, 0), -25.0 * M_PI / 180.0));
  } else if (name != "mono1") {
    throw ConfigError("rig preset: unknown name '" + name + "'");
  }
  return CameraRig(std::move(cams));
}

/// Resolves "preset:<name>" to a built-in rig, anything else to a file.
inline CameraRig resolve_rig(const std::string& spec) {
  if (spec.rfind("preset:", 0) == 0) return rig_preset(spec.substr(7));
  return load_rig_config(spec);
}

}  // namespace rigslam
