#pragma once

#include <random>

#include "rigslam/se3.hpp"

namespace testutil {

using rigslam::Mat3;
using rigslam::Mat4;
using rigslam::RigidTransform;
using rigslam::Rotation3;
using rigslam::Twist;
using rigslam::Vec3;

inline Vec3 random_unit_vector(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 v(n(rng), n(rng), n(rng));
  while (v.norm() < 1e-6) v = Vec3(n(rng), n(rng), n(rng));
  return v.normalized();
}

/// Rotation angle of R with full precision near identity (acos saturates
/// around sqrt(eps) there; the quaternion atan2 form does not).
inline double rotation_angle(const Mat3& r) {
  const Eigen::Quaterniond q(r);
  return 2.0 * std::atan2(q.vec().norm(), std::abs(q.w()));
}

inline rigslam::Vec6 random_unit_vector6(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  rigslam::Vec6 v;
  do {
    for (int k = 0; k < 6; ++k) v(k) = n(rng);
  } while (v.norm() < 1e-6);
  return v.normalized();
}

inline Rotation3 random_rotation(std::mt19937_64& rng,
                                 double max_angle = M_PI - 0.01) {
  std::uniform_real_distribution<double> u(0.0, max_angle);
  const Vec3 axis = random_unit_vector(rng);
  const double angle = u(rng);
  return rigslam::exp_se3(Twist(axis * angle, Vec3::Zero())).rotation;
}

inline RigidTransform random_transform(std::mt19937_64& rng,
                                       double max_angle = M_PI - 0.01,
                                       double translation_scale = 2.0) {
  std::uniform_real_distribution<double> u(-translation_scale,
                                           translation_scale);
  return RigidTransform(random_rotation(rng, max_angle),
                        Vec3(u(rng), u(rng), u(rng)));
}

}  // namespace testutil
