#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "rigslam/errors.hpp"

namespace rigslam {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Skew-symmetric matrix of v, so that skew(v) * w == v.cross(w).
inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

/// Rotation matrix wrapper that keeps itself orthonormal with det +1.
///
/// Stored as a plain 3x3 matrix. Whenever the orthonormality defect
/// ||R^T R - I||_inf exceeds 1e-7 the matrix is replaced by the nearest
/// rotation (Frobenius sense, via SVD), which bounds drift under long
/// composition chains.
class Rotation3 {
 public:
  Rotation3() : m_(Mat3::Identity()) {}

  explicit Rotation3(const Mat3& m) : m_(m) {
    const double defect = (m_.transpose() * m_ - Mat3::Identity())
                              .cwiseAbs()
                              .maxCoeff();
    if (defect > 1e-7) m_ = nearest_rotation(m_);
  }

  static Rotation3 identity() { return Rotation3(); }

  static Rotation3 from_quaternion(const Eigen::Quaterniond& q) {
    return Rotation3(q.normalized().toRotationMatrix());
  }

  const Mat3& matrix() const { return m_; }

  Rotation3 inverse() const {
    Rotation3 r;
    r.m_ = m_.transpose();
    return r;
  }

  Rotation3 operator*(const Rotation3& rhs) const {
    return Rotation3(m_ * rhs.m_);
  }

  Vec3 operator*(const Vec3& v) const { return m_ * v; }

  /// Projection onto SO(3): the rotation closest to m in Frobenius norm.
  static Mat3 nearest_rotation(const Mat3& m) {
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0.0) {
      Mat3 flip = Mat3::Identity();
      flip(2, 2) = -1.0;
      r = svd.matrixU() * flip * svd.matrixV().transpose();
    }
    return r;
  }

 private:
  Mat3 m_;
};

/// Minimal 6-dof tangent element: rotational part in radians,
/// translational part in length units.
struct Twist {
  Vec3 rotational = Vec3::Zero();
  Vec3 translational = Vec3::Zero();

  Twist() = default;
  Twist(const Vec3& rot, const Vec3& trans)
      : rotational(rot), translational(trans) {}

  static Twist from_vector(const Vec6& v) {
    return Twist(v.head<3>(), v.tail<3>());
  }
  Vec6 to_vector() const {
    Vec6 v;
    v << rotational, translational;
    return v;
  }
  double norm() const { return to_vector().norm(); }
};

/// Rigid transform p -> R*p + t with homogeneous 4x4 semantics.
struct RigidTransform {
  Rotation3 rotation;
  Vec3 translation = Vec3::Zero();

  RigidTransform() = default;
  RigidTransform(const Rotation3& r, const Vec3& t)
      : rotation(r), translation(t) {}

  static RigidTransform identity() { return RigidTransform(); }

  Mat4 homogeneous() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation.matrix();
    m.topRightCorner<3, 1>() = translation;
    return m;
  }
};

inline RigidTransform compose(const RigidTransform& a,
                              const RigidTransform& b) {
  return RigidTransform(a.rotation * b.rotation,
                        a.rotation * b.translation + a.translation);
}

inline RigidTransform invert(const RigidTransform& t) {
  const Rotation3 rinv = t.rotation.inverse();
  return RigidTransform(rinv, -(rinv * t.translation));
}

inline Vec3 act(const RigidTransform& t, const Vec3& p) {
  return t.rotation * p + t.translation;
}

inline RigidTransform operator*(const RigidTransform& a,
                                const RigidTransform& b) {
  return compose(a, b);
}

inline Vec3 operator*(const RigidTransform& t, const Vec3& p) {
  return act(t, p);
}

namespace detail {

/// Rodrigues coefficients A = sin(t)/t, B = (1-cos(t))/t^2,
/// C = (t-sin(t))/t^3, with Taylor branches below t = 1e-8.
struct RodriguesCoeffs {
  double a, b, c;
};

inline RodriguesCoeffs rodrigues_coeffs(double theta) {
  RodriguesCoeffs k;
  const double t2 = theta * theta;
  if (theta < 1e-8) {
    k.a = 1.0 - t2 / 6.0;
    k.b = 0.5 - t2 / 24.0;
    k.c = 1.0 / 6.0 - t2 / 120.0;
  } else {
    k.a = std::sin(theta) / theta;
    k.b = (1.0 - std::cos(theta)) / t2;
    k.c = (theta - std::sin(theta)) / (t2 * theta);
  }
  return k;
}

}  // namespace detail

/// Exponential map of se(3). The rotation follows Rodrigues' formula and
/// the translation goes through the SE(3) left Jacobian, so that
/// exp(xi) * T perturbs T multiplicatively in its own frame.
inline RigidTransform exp_se3(const Twist& xi) {
  const Vec3& w = xi.rotational;
  const double theta = w.norm();
  const auto k = detail::rodrigues_coeffs(theta);
  const Mat3 hat = skew(w);
  const Mat3 hat2 = hat * hat;
  const Mat3 r = Mat3::Identity() + k.a * hat + k.b * hat2;
  const Mat3 v = Mat3::Identity() + k.b * hat + k.c * hat2;
  return RigidTransform(Rotation3(r), v * xi.translational);
}

/// Logarithm of SE(3), the inverse of exp_se3.
///
/// Throws AngleNearPi when the rotation angle reaches pi - 1e-6, where the
/// axis becomes ill-conditioned.
inline Twist log_se3(const RigidTransform& t) {
  const Mat3& r = t.rotation.matrix();
  const double cos_theta =
      std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  if (theta >= M_PI - 1e-6)
    throw AngleNearPi("log_se3: rotation angle within 1e-6 of pi");

  Vec3 vee(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  Vec3 w;
  double vinv_c;  // coefficient of the hat^2 term in V^-1
  const double t2 = theta * theta;
  if (theta < 1e-8) {
    w = 0.5 * vee * (1.0 + t2 / 6.0);
    vinv_c = 1.0 / 12.0 + t2 / 720.0;
  } else {
    w = theta / (2.0 * std::sin(theta)) * vee;
    vinv_c = 1.0 / t2 -
             (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  }
  const Mat3 hat = skew(w);
  const Mat3 vinv = Mat3::Identity() - 0.5 * hat + vinv_c * hat * hat;
  return Twist(w, vinv * t.translation);
}

}  // namespace rigslam
