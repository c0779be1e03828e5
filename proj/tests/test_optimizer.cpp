#include <catch2/catch_amalgamated.hpp>
#include <cstring>

#include <random>

#include "rigslam/optimizer.hpp"
#include "test_util.hpp"

using namespace rigslam;

namespace {

// ---------------------------------------------------------------------------
// Independent oracles. These re-derive predictions from first principles
// (homogeneous matrix chains, central differences, a first-order reference
// minimizer) and never call the analytic Jacobians or the LM solver.
// ---------------------------------------------------------------------------

Vec2 oracle_residual(const CameraRig& rig, const RigidTransform& c1, int i,
                     const Vec3& point, const Vec2& u) {
  const Mat4 t =
      rig.camera(i).extrinsic.homogeneous() * c1.homogeneous();
  Eigen::Vector4d ph;
  ph << point, 1.0;
  const Vec3 pc = (t * ph).head<3>();
  const auto& intr = rig.camera(i).intrinsics;
  return u - Vec2(intr.fx * pc.x() / pc.z() + intr.cx,
                  intr.fy * pc.y() / pc.z() + intr.cy);
}

// Long double mirror of the projection chain, including its own exp map.
// Double-precision central differences bottom out near eps * pixel / step
// (about 1e-7 at a 1e-6 step); the extended mantissa keeps rounding noise
// three orders below the tolerances so they bind on the analytic values.
namespace ld {

using Scalar = long double;
using V3 = Eigen::Matrix<Scalar, 3, 1>;
using M3 = Eigen::Matrix<Scalar, 3, 3>;
using V6 = Eigen::Matrix<Scalar, 6, 1>;

struct Pose {
  M3 r;
  V3 t;
};

M3 skew(const V3& v) {
  M3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

Pose to_ld(const RigidTransform& t) {
  return {t.rotation.matrix().cast<Scalar>(), t.translation.cast<Scalar>()};
}

Pose compose_ld(const Pose& a, const Pose& b) {
  return {a.r * b.r, a.r * b.t + a.t};
}

// Rodrigues on a (rotational | translational) twist; step sizes used here
// stay far from the pi branch.
Pose exp_ld(const V6& xi) {
  const V3 w = xi.head<3>(), v = xi.tail<3>();
  const Scalar th = w.norm();
  const M3 k = skew(w);
  M3 r, vm;
  if (th < Scalar(1e-12)) {
    r = M3::Identity() + k + Scalar(0.5) * k * k;
    vm = M3::Identity() + Scalar(0.5) * k + k * k / Scalar(6);
  } else {
    const Scalar a = std::sin(th) / th;
    const Scalar b = (1 - std::cos(th)) / (th * th);
    const Scalar c = (1 - a) / (th * th);
    r = M3::Identity() + a * k + b * k * k;
    vm = M3::Identity() + b * k + c * k * k;
  }
  return {r, vm * v};
}

Eigen::Matrix<Scalar, 2, 1> pixel(const CameraRig& rig, const Pose& c1,
                                  int i, const V3& point) {
  const Pose cam = compose_ld(to_ld(rig.camera(i).extrinsic), c1);
  const V3 pc = cam.r * point + cam.t;
  const auto& intr = rig.camera(i).intrinsics;
  Eigen::Matrix<Scalar, 2, 1> u;
  u << Scalar(intr.fx) * pc.x() / pc.z() + Scalar(intr.cx),
      Scalar(intr.fy) * pc.y() / pc.z() + Scalar(intr.cy);
  return u;
}

}  // namespace ld

Mat26 fd_jacobian_pose(const CameraRig& rig, const RigidTransform& c1, int i,
                       const Vec3& point, double h = 1e-6) {
  Mat26 j;
  const ld::Pose base = ld::to_ld(c1);
  const ld::V3 p = point.cast<ld::Scalar>();
  for (int k = 0; k < 6; ++k) {
    ld::V6 xi = ld::V6::Zero();
    xi(k) = h;
    const auto fp = ld::pixel(rig, ld::compose_ld(ld::exp_ld(xi), base), i, p);
    xi(k) = -h;
    const auto fm = ld::pixel(rig, ld::compose_ld(ld::exp_ld(xi), base), i, p);
    // residual = u - pixel, so its derivative is minus the pixel's.
    j.col(k) = ((fm - fp) / (2 * ld::Scalar(h))).cast<double>();
  }
  return j;
}

Mat23 fd_jacobian_point(const CameraRig& rig, const RigidTransform& c1,
                        int i, const Vec3& point, double h = 1e-6) {
  Mat23 j;
  const ld::Pose base = ld::to_ld(c1);
  for (int k = 0; k < 3; ++k) {
    ld::V3 dp = ld::V3::Zero();
    dp(k) = h;
    const auto fp = ld::pixel(rig, base, i, point.cast<ld::Scalar>() + dp);
    const auto fm = ld::pixel(rig, base, i, point.cast<ld::Scalar>() - dp);
    j.col(k) = ((fm - fp) / (2 * ld::Scalar(h))).cast<double>();
  }
  return j;
}

// Spec'd mixed tolerance: relative where entries are large, absolute where
// both are below 1.
void require_jacobian_match(const Eigen::MatrixXd& analytic,
                            const Eigen::MatrixXd& fd) {
  for (int r = 0; r < analytic.rows(); ++r)
    for (int c = 0; c < analytic.cols(); ++c) {
      const double a = analytic(r, c), f = fd(r, c);
      const double m = std::max(std::abs(a), std::abs(f));
      if (m < 1.0)
        REQUIRE(std::abs(a - f) < 1e-7);
      else
        REQUIRE(std::abs(a - f) / m < 1e-5);
    }
}

CameraRig random_rig(std::mt19937_64& rng, int ncam) {
  std::uniform_real_distribution<double> uf(300.0, 800.0);
  std::vector<CameraModel> cams;
  for (int c = 0; c < ncam; ++c) {
    PinholeIntrinsics intr{uf(rng), uf(rng), 320.0, 240.0, 640, 480};
    const RigidTransform extr =
        c == 0 ? RigidTransform::identity()
               : testutil::random_transform(rng, 0.5, 0.3);
    cams.push_back({intr, extr, 1.0});
  }
  return CameraRig(std::move(cams));
}

// Point with depth in [zmin, zmax] in camera i, mapped back to the world.
Vec3 random_point_in_front(std::mt19937_64& rng, const CameraRig& rig,
                           const RigidTransform& c1, int i,
                           double zmin = 0.5, double zmax = 50.0) {
  std::uniform_real_distribution<double> uz(zmin, zmax);
  std::uniform_real_distribution<double> uxy(-0.8, 0.8);
  const double z = uz(rng);
  const Vec3 p_cam(uxy(rng) * z, uxy(rng) * z, z);
  return act(invert(compose(rig.camera(i).extrinsic, c1)), p_cam);
}

double pose_error(const RigidTransform& a, const RigidTransform& b) {
  return testutil::rotation_angle(a.rotation.matrix() *
                                  b.rotation.matrix().transpose()) +
         (a.translation - b.translation).norm();
}

// Motion-only test problem: points observed exactly from a ground-truth
// pose; the problem's pose starts from a perturbed guess.
struct MotionOnlySetup {
  CameraRig rig;
  RigidTransform truth;
  BaProblem problem;
};

MotionOnlySetup motion_only_setup(std::mt19937_64& rng, int n_points,
                                  double perturbation,
                                  double pixel_noise = 0.0) {
  MotionOnlySetup s{rig_preset("stereo2"), testutil::random_transform(rng, 0.4, 0.5), {}};
  s.problem.rig = s.rig;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int j = 0; j < n_points; ++j) {
    const Vec3 p = random_point_in_front(rng, s.rig, s.truth, 0);
    s.problem.points[j] = PointVariable{p, true};
    for (int c = 0; c < s.rig.camera_count(); ++c) {
      const Vec3 p_cam = act(compose(s.rig.camera(c).extrinsic, s.truth), p);
      if (p_cam.z() <= kMinDepth) continue;
      Observation o;
      o.pose_id = 0;
      o.camera_id = c;
      o.point_id = j;
      o.pixel = *try_project(s.rig.camera(c).intrinsics, p_cam);
      if (pixel_noise > 0.0)
        o.pixel += pixel_noise * Vec2(noise(rng), noise(rng));
      o.information = s.rig.camera(c).information();
      s.problem.observations.push_back(o);
    }
  }
  Vec6 xi = testutil::random_unit_vector6(rng) * perturbation;
  RigPose start;
  start.c1 = compose(exp_se3(Twist::from_vector(xi)), s.truth);
  s.problem.poses[0] = PoseVariable{start, false};
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Residual
// ---------------------------------------------------------------------------

TEST_CASE("residual is zero for a noiseless observation") {
  std::mt19937_64 rng(41);
  const auto rig = rig_preset("rig3");
  for (int k = 0; k < 30; ++k) {
    const RigidTransform c1 = testutil::random_transform(rng, 0.4, 0.5);
    std::uniform_int_distribution<int> uc(0, rig.camera_count() - 1);
    const int i = uc(rng);
    const Vec3 p = random_point_in_front(rng, rig, c1, i);
    const Vec2 u = observe(rig, RigPose{c1, 0.0}, i, p).pixel;
    REQUIRE(residual(rig, c1, i, p, u).norm() < 1e-9);
  }
}

TEST_CASE("residual is linear in the measured pixel") {
  std::mt19937_64 rng(42);
  const auto rig = rig_preset("stereo2");
  const RigidTransform c1 = testutil::random_transform(rng, 0.3, 0.4);
  const Vec3 p = random_point_in_front(rng, rig, c1, 1);
  const Vec2 u = observe(rig, RigPose{c1, 0.0}, 1, p).pixel;
  const Vec2 e = residual(rig, c1, 1, p, u + Vec2(1.0, -2.0));
  REQUIRE(e.x() == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(e.y() == Catch::Approx(-2.0).margin(1e-12));
}

TEST_CASE("residual matches the homogeneous chain oracle") {
  std::mt19937_64 rng(43);
  for (int k = 0; k < 100; ++k) {
    const auto rig = random_rig(rng, 2 + (k % 2));
    const RigidTransform c1 = testutil::random_transform(rng, 0.5, 0.5);
    std::uniform_int_distribution<int> uc(0, rig.camera_count() - 1);
    std::uniform_real_distribution<double> up(0.0, 640.0);
    const int i = uc(rng);
    const Vec3 p = random_point_in_front(rng, rig, c1, i);
    const Vec2 u(up(rng), up(rng));
    REQUIRE((residual(rig, c1, i, p, u) - oracle_residual(rig, c1, i, p, u))
                .norm() < 1e-9);
  }
}

TEST_CASE("residual throws behind the camera") {
  const auto rig = rig_preset("stereo2");
  REQUIRE_THROWS_AS(
      residual(rig, RigidTransform::identity(), 0, Vec3(0, 0, -2),
               Vec2::Zero()),
      BehindCamera);
}

// ---------------------------------------------------------------------------
// Jacobians
// ---------------------------------------------------------------------------

TEST_CASE("pose jacobian translational block, hand value on the axis") {
  std::vector<CameraModel> cams;
  cams.push_back({PinholeIntrinsics{500.0, 500.0, 320.0, 240.0, 640, 480},
                  RigidTransform::identity(), 1.0});
  const CameraRig rig{std::move(cams)};
  const Mat26 j =
      jacobian_pose(rig, RigidTransform::identity(), 0, Vec3(0, 0, 2));
  Mat23 expected;
  expected << -250.0, 0.0, 0.0, 0.0, -250.0, 0.0;
  REQUIRE((j.rightCols<3>() - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("point jacobian hand value on the axis") {
  std::vector<CameraModel> cams;
  cams.push_back({PinholeIntrinsics{500.0, 500.0, 320.0, 240.0, 640, 480},
                  RigidTransform::identity(), 1.0});
  const CameraRig rig{std::move(cams)};
  const Mat23 j =
      jacobian_point(rig, RigidTransform::identity(), 0, Vec3(0, 0, 2));
  Mat23 expected;
  expected << -250.0, 0.0, 0.0, 0.0, -250.0, 0.0;
  REQUIRE((j - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("pose jacobian rotation block on the axis, against differences") {
  std::vector<CameraModel> cams;
  cams.push_back({PinholeIntrinsics{500.0, 458.0, 320.0, 240.0, 640, 480},
                  RigidTransform::identity(), 1.0});
  const CameraRig rig{std::move(cams)};
  const Vec3 p(0, 0, 2);
  const Mat26 j = jacobian_pose(rig, RigidTransform::identity(), 0, p);
  // On the optical axis with identity extrinsic, only the two off-axis
  // rotations move the pixel: de/dtheta_y = (-fx, 0), de/dtheta_x = (0, fy).
  REQUIRE(j(0, 1) == Catch::Approx(-500.0));
  REQUIRE(j(1, 0) == Catch::Approx(458.0));
  REQUIRE(std::abs(j(0, 0)) < 1e-12);
  REQUIRE(std::abs(j(1, 1)) < 1e-12);
  REQUIRE(std::abs(j(0, 2)) < 1e-12);
  REQUIRE(std::abs(j(1, 2)) < 1e-12);
  require_jacobian_match(j, fd_jacobian_pose(rig, RigidTransform::identity(),
                                             0, p));
}

TEST_CASE("pose jacobian matches central differences on random configs") {
  std::mt19937_64 rng(44);
  for (int k = 0; k < 1000; ++k) {
    const auto rig = random_rig(rng, 1 + (k % 3));
    const RigidTransform c1 = testutil::random_transform(rng, 0.6, 1.0);
    std::uniform_int_distribution<int> uc(0, rig.camera_count() - 1);
    const int i = uc(rng);
    const Vec3 p = random_point_in_front(rng, rig, c1, i);
    require_jacobian_match(jacobian_pose(rig, c1, i, p),
                           fd_jacobian_pose(rig, c1, i, p));
  }
}

TEST_CASE("point jacobian matches central differences on random configs") {
  std::mt19937_64 rng(45);
  for (int k = 0; k < 1000; ++k) {
    const auto rig = random_rig(rng, 1 + (k % 3));
    const RigidTransform c1 = testutil::random_transform(rng, 0.6, 1.0);
    std::uniform_int_distribution<int> uc(0, rig.camera_count() - 1);
    const int i = uc(rng);
    const Vec3 p = random_point_in_front(rng, rig, c1, i);
    require_jacobian_match(jacobian_point(rig, c1, i, p),
                           fd_jacobian_point(rig, c1, i, p));
  }
}

TEST_CASE("point jacobian is equivariant under world rotation") {
  std::mt19937_64 rng(46);
  for (int k = 0; k < 50; ++k) {
    const auto rig = random_rig(rng, 2);
    const RigidTransform c1 = testutil::random_transform(rng, 0.5, 0.5);
    const int i = k % 2;
    const Vec3 p = random_point_in_front(rng, rig, c1, i);
    const Mat23 j = jacobian_point(rig, c1, i, p);

    const Rotation3 g = testutil::random_rotation(rng);
    const RigidTransform gauge(g, Vec3::Zero());
    const RigidTransform c1_rot = compose(c1, invert(gauge));
    const Mat23 j_rot = jacobian_point(rig, c1_rot, i, act(gauge, p));
    REQUIRE((j_rot - j * g.matrix().transpose()).cwiseAbs().maxCoeff() <
            1e-9 * std::max(1.0, j.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("jacobians throw behind the camera") {
  const auto rig = rig_preset("stereo2");
  REQUIRE_THROWS_AS(jacobian_pose(rig, RigidTransform::identity(), 0,
                                  Vec3(0, 0, -1)),
                    BehindCamera);
  REQUIRE_THROWS_AS(jacobian_point(rig, RigidTransform::identity(), 0,
                                   Vec3(0, 0, -1)),
                    BehindCamera);
}

// ---------------------------------------------------------------------------
// Huber kernel
// ---------------------------------------------------------------------------

TEST_CASE("huber kernel values at the anchors") {
  const double d = kHuberDelta;
  const double d2 = d * d;

  auto [c0, w0] = huber_cost(0.0, d);
  REQUIRE(c0 == 0.0);
  REQUIRE(w0 == 1.0);

  auto [ck, wk] = huber_cost(d2, d);
  REQUIRE(ck == Catch::Approx(d2));
  REQUIRE(wk == 1.0);

  auto [c4, w4] = huber_cost(4.0 * d2, d);
  REQUIRE(c4 == Catch::Approx(3.0 * d2));
  REQUIRE(w4 == Catch::Approx(0.5));
}

TEST_CASE("huber cost and slope are continuous at the knee") {
  const double d = 1.7;
  const double d2 = d * d;
  const double eps = 1e-9;
  const auto below = huber_cost(d2 - eps, d);
  const auto above = huber_cost(d2 + eps, d);
  REQUIRE(std::abs(below.first - above.first) < 1e-8);
  REQUIRE(std::abs(below.second - above.second) < 1e-8);
  // Slope matches the analytic derivative on both branches.
  const double h = 1e-6;
  for (double r2 : {0.5 * d2, 2.0 * d2, 10.0 * d2}) {
    const double fd =
        (huber_cost(r2 + h, d).first - huber_cost(r2 - h, d).first) /
        (2.0 * h);
    REQUIRE(huber_cost(r2, d).second == Catch::Approx(fd).epsilon(1e-6));
  }
}

// ---------------------------------------------------------------------------
// solve_lm
// ---------------------------------------------------------------------------

TEST_CASE("zero-residual start terminates immediately, variables intact") {
  std::mt19937_64 rng(47);
  auto s = motion_only_setup(rng, 20, 0.0);
  const Mat3 r_before = s.problem.poses.at(0).pose.c1.rotation.matrix();
  const Vec3 t_before = s.problem.poses.at(0).pose.c1.translation;

  const auto report = solve_lm(s.problem);
  REQUIRE(report.iterations <= 1);
  REQUIRE(report.initial_cost < 1e-18);
  REQUIRE(report.final_cost < 1e-18);
  REQUIRE((s.problem.poses.at(0).pose.c1.rotation.matrix() - r_before)
              .cwiseAbs()
              .maxCoeff() < 1e-12);
  REQUIRE((s.problem.poses.at(0).pose.c1.translation - t_before)
              .cwiseAbs()
              .maxCoeff() < 1e-12);
}

TEST_CASE("motion-only recovery from a 0.1 twist perturbation") {
  std::mt19937_64 rng(48);
  for (int trial = 0; trial < 25; ++trial) {
    auto s = motion_only_setup(rng, 25, 0.1);
    solve_lm(s.problem);
    const RigidTransform& est = s.problem.poses.at(0).pose.c1;
    const double angle = testutil::rotation_angle(
        est.rotation.matrix() * s.truth.rotation.matrix().transpose());
    REQUIRE(angle < 1e-8);
    REQUIRE((est.translation - s.truth.translation).norm() < 1e-8);
  }
}

TEST_CASE("fixed variables are bit-identical after solving") {
  std::mt19937_64 rng(49);
  auto s = motion_only_setup(rng, 20, 0.1, 0.5);
  std::vector<Vec3> before;
  for (const auto& [id, v] : s.problem.points) before.push_back(v.position);
  solve_lm(s.problem);
  int k = 0;
  for (const auto& [id, v] : s.problem.points) {
    REQUIRE(std::memcmp(v.position.data(), before[k].data(),
                        3 * sizeof(double)) == 0);
    ++k;
  }
}

TEST_CASE("accepted cost trace never increases") {
  std::mt19937_64 rng(50);
  auto s = motion_only_setup(rng, 30, 0.2, 1.0);
  const auto report = solve_lm(s.problem);
  REQUIRE(report.cost_trace.size() >= 2);
  for (std::size_t k = 1; k < report.cost_trace.size(); ++k)
    REQUIRE(report.cost_trace[k] < report.cost_trace[k - 1]);
  REQUIRE(report.final_cost == report.cost_trace.back());
  REQUIRE(report.initial_cost == report.cost_trace.front());
}

TEST_CASE("gauge shift of the whole problem leaves the final cost alone") {
  std::mt19937_64 rng(51);
  const auto rig = rig_preset("stereo2");

  // Three noiseless keyframes seeing ten points, all slightly perturbed.
  const auto build = [&](const RigidTransform& gauge) {
    std::mt19937_64 local(99);
    BaProblem problem;
    problem.rig = rig;
    std::vector<RigidTransform> truths;
    for (int k = 0; k < 3; ++k)
      truths.push_back(testutil::random_transform(local, 0.2, 0.3));
    std::vector<Vec3> points;
    for (int j = 0; j < 10; ++j)
      points.push_back(random_point_in_front(local, rig, truths[0], 0));
    for (int k = 0; k < 3; ++k)
      for (int j = 0; j < 10; ++j)
        for (int c = 0; c < 2; ++c) {
          const Vec3 p_cam =
              act(compose(rig.camera(c).extrinsic, truths[k]), points[j]);
          if (p_cam.z() <= kMinDepth) continue;
          Observation o;
          o.pose_id = k;
          o.camera_id = c;
          o.point_id = j;
          o.pixel = *try_project(rig.camera(c).intrinsics, p_cam);
          o.information = rig.camera(c).information();
          problem.observations.push_back(o);
        }
    std::normal_distribution<double> n(0.0, 0.02);
    for (int k = 0; k < 3; ++k) {
      Vec6 xi;
      for (int d = 0; d < 6; ++d) xi(d) = k == 0 ? 0.0 : n(local);
      RigPose pose;
      pose.c1 = compose(exp_se3(Twist::from_vector(xi)),
                        compose(truths[k], invert(gauge)));
      problem.poses[k] = PoseVariable{pose, k == 0};
    }
    for (int j = 0; j < 10; ++j) {
      // Perturb in the unshifted frame so both starts are gauge-equivalent.
      const Vec3 noisy = points[j] + Vec3(n(local), n(local), n(local));
      problem.points[j] = PointVariable{act(gauge, noisy), false};
    }
    return problem;
  };

  auto plain = build(RigidTransform::identity());
  auto shifted = build(testutil::random_transform(rng, 0.8, 5.0));
  const auto ra = solve_lm(plain);
  const auto rb = solve_lm(shifted);
  REQUIRE(std::abs(ra.initial_cost - rb.initial_cost) <
          1e-9 * std::max(1.0, ra.initial_cost));
  REQUIRE(std::abs(ra.final_cost - rb.final_cost) < 1e-9);
}

TEST_CASE("one wild outlier among forty observations stays contained") {
  std::mt19937_64 rng(52);
  double clean_err = 0.0, dirty_err = 0.0;
  {
    auto s = motion_only_setup(rng, 20, 0.05, 1.0);
    auto dirty = s;
    dirty.problem.observations[7].pixel += Vec2(800.0, -650.0);
    solve_lm(s.problem);
    solve_lm(dirty.problem);
    clean_err = pose_error(s.problem.poses.at(0).pose.c1, s.truth);
    dirty_err = pose_error(dirty.problem.poses.at(0).pose.c1, dirty.truth);
  }
  REQUIRE(clean_err > 0.0);
  REQUIRE(dirty_err < 5.0 * clean_err);
}

TEST_CASE("motion-only outlier reclassification flags the planted outlier") {
  std::mt19937_64 rng(53);
  auto s = motion_only_setup(rng, 20, 0.05, 0.5);
  s.problem.observations[11].pixel += Vec2(120.0, 90.0);
  const auto inlier = solve_motion_only(s.problem);
  REQUIRE_FALSE(inlier[11]);
  int kept = 0;
  for (bool b : inlier) kept += b;
  REQUIRE(kept >= static_cast<int>(inlier.size()) - 3);
  REQUIRE(pose_error(s.problem.poses.at(0).pose.c1, s.truth) < 1e-2);
}

TEST_CASE("solver reports singularity for unsolvable systems") {
  std::mt19937_64 rng(54);
  auto s = motion_only_setup(rng, 10, 0.05);
  s.problem.points[0].fixed = false;
  s.problem.points[0].position =
      Vec3(std::numeric_limits<double>::quiet_NaN(), 0, 5);
  REQUIRE_THROWS_AS(solve_lm(s.problem), SingularSystem);
}

TEST_CASE("per-iteration trace file is written when requested") {
  std::mt19937_64 rng(55);
  auto s = motion_only_setup(rng, 20, 0.1, 0.5);
  const std::string path = "lm_trace_test.txt";
  s.problem.settings.trace_path = path;
  const auto report = solve_lm(s.problem);

  std::ifstream in(path);
  REQUIRE(in.good());
  std::string header;
  std::getline(in, header);
  REQUIRE(header.rfind("#", 0) == 0);
  int lines = 0;
  int iter, accepted;
  double lambda, cost, step;
  while (in >> iter >> lambda >> cost >> step >> accepted) {
    REQUIRE(lambda > 0.0);
    REQUIRE(cost >= 0.0);
    REQUIRE(step >= 0.0);
    ++lines;
  }
  REQUIRE(lines >= report.iterations);
  std::remove(path.c_str());
}

// ---------------------------------------------------------------------------
// Reference-minimizer comparison: Nesterov-accelerated, diagonally
// preconditioned gradient descent with finite-difference gradients on the
// same robust cost, sharing no code with the LM path.
// ---------------------------------------------------------------------------

namespace {

struct FlatProblem {
  CameraRig rig;
  std::vector<RigidTransform> pose_ref;  // free poses, chart reference
  std::vector<Vec3> point_ref;           // free points
  std::vector<RigidTransform> fixed_poses;
  std::vector<Vec3> fixed_points;
  // observation: pose slot (>=0 free index, <0 fixed index -1-k), same for
  // points, camera, pixel
  struct Obs {
    int pose_slot, point_slot, camera;
    Vec2 pixel;
    Mat2 information;
  };
  std::vector<Obs> obs;
  double delta = kHuberDelta;

  int dims() const {
    return 6 * static_cast<int>(pose_ref.size()) +
           3 * static_cast<int>(point_ref.size());
  }

  double cost(const Eigen::VectorXd& x) const {
    double total = 0.0;
    for (const auto& o : obs) {
      RigidTransform c1;
      if (o.pose_slot >= 0) {
        Vec6 xi = x.segment<6>(6 * o.pose_slot);
        c1 = compose(exp_se3(Twist::from_vector(xi)), pose_ref[o.pose_slot]);
      } else {
        c1 = fixed_poses[-1 - o.pose_slot];
      }
      Vec3 p;
      if (o.point_slot >= 0)
        p = point_ref[o.point_slot] +
            x.segment<3>(6 * pose_ref.size() + 3 * o.point_slot);
      else
        p = fixed_points[-1 - o.point_slot];
      const Mat4 t =
          rig.camera(o.camera).extrinsic.homogeneous() * c1.homogeneous();
      Eigen::Vector4d ph;
      ph << p, 1.0;
      const Vec3 pc = (t * ph).head<3>();
      if (pc.z() <= kMinDepth) continue;
      const auto& intr = rig.camera(o.camera).intrinsics;
      const Vec2 e = o.pixel - Vec2(intr.fx * pc.x() / pc.z() + intr.cx,
                                    intr.fy * pc.y() / pc.z() + intr.cy);
      const double r2 = e.dot(o.information * e);
      const double d2 = delta * delta;
      total += r2 <= d2 ? r2 : 2.0 * delta * std::sqrt(r2) - d2;
    }
    return total;
  }

  Eigen::VectorXd fd_gradient(const Eigen::VectorXd& x, double h) const {
    Eigen::VectorXd g(x.size());
    Eigen::VectorXd xp = x;
    for (int k = 0; k < x.size(); ++k) {
      xp(k) = x(k) + h;
      const double cp = cost(xp);
      xp(k) = x(k) - h;
      const double cm = cost(xp);
      xp(k) = x(k);
      g(k) = (cp - cm) / (2.0 * h);
    }
    return g;
  }
};

FlatProblem flatten(const BaProblem& p) {
  FlatProblem f;
  f.rig = p.rig;
  f.delta = p.kernel.delta;
  std::map<std::int64_t, int> pose_slot, point_slot;
  for (const auto& [id, v] : p.poses) {
    if (v.fixed) {
      pose_slot[id] = -1 - static_cast<int>(f.fixed_poses.size());
      f.fixed_poses.push_back(v.pose.c1);
    } else {
      pose_slot[id] = static_cast<int>(f.pose_ref.size());
      f.pose_ref.push_back(v.pose.c1);
    }
  }
  for (const auto& [id, v] : p.points) {
    if (v.fixed) {
      point_slot[id] = -1 - static_cast<int>(f.fixed_points.size());
      f.fixed_points.push_back(v.position);
    } else {
      point_slot[id] = static_cast<int>(f.point_ref.size());
      f.point_ref.push_back(v.position);
    }
  }
  for (const auto& o : p.observations)
    f.obs.push_back({pose_slot.at(o.pose_id), point_slot.at(o.point_id),
                     o.camera_id, o.pixel, o.information});
  return f;
}

double reference_minimize(const FlatProblem& f, int max_iterations) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(f.dims());

  // Diagonal curvature estimate as preconditioner.
  Eigen::VectorXd precond(f.dims());
  {
    const double h = 1e-4;
    const double c0 = f.cost(x);
    Eigen::VectorXd xp = x;
    for (int k = 0; k < f.dims(); ++k) {
      xp(k) = h;
      const double cp = f.cost(xp);
      xp(k) = -h;
      const double cm = f.cost(xp);
      xp(k) = 0.0;
      precond(k) = (cp - 2.0 * c0 + cm) / (h * h);
    }
    const double floor = 1e-6 * precond.maxCoeff();
    for (int k = 0; k < f.dims(); ++k)
      precond(k) = std::max(precond(k), floor);
  }

  double step = 0.8;
  Eigen::VectorXd y = x;
  double best = f.cost(x);
  double momentum_k = 0.0;
  Eigen::VectorXd x_prev = x;
  for (int it = 0; it < max_iterations; ++it) {
    const Eigen::VectorXd g = f.fd_gradient(y, 1e-7);
    Eigen::VectorXd x_new = y - step * g.cwiseQuotient(precond);
    double c_new = f.cost(x_new);
    if (c_new > best) {
      // Restart momentum, shrink the step until the plain move descends.
      x_new = x - step * f.fd_gradient(x, 1e-7).cwiseQuotient(precond);
      c_new = f.cost(x_new);
      int backtrack = 0;
      while (c_new > best && backtrack++ < 60) {
        step *= 0.5;
        x_new = x - step * f.fd_gradient(x, 1e-7).cwiseQuotient(precond);
        c_new = f.cost(x_new);
      }
      momentum_k = 0.0;
    }
    const double beta = momentum_k / (momentum_k + 3.0);
    momentum_k += 1.0;
    x_prev = x;
    x = x_new;
    y = x + beta * (x - x_prev);
    if (c_new < best && best - c_new < 1e-14 * std::max(best, 1.0) &&
        it > 100)
      return c_new;
    best = std::min(best, c_new);
  }
  return best;
}

}  // namespace

TEST_CASE("small dense problem agrees with the reference minimizer") {
  std::mt19937_64 rng(56);
  const auto rig = rig_preset("stereo2");
  BaProblem problem;
  problem.rig = rig;

  std::vector<RigidTransform> truths;
  for (int k = 0; k < 3; ++k) {
    Vec6 xi;
    xi << 0.02 * k, -0.03 * k, 0.01 * k, 0.3 * k, 0.05 * k, 0.1 * k;
    truths.push_back(exp_se3(Twist::from_vector(xi)));
  }
  std::vector<Vec3> points;
  std::uniform_real_distribution<double> ux(-1.5, 1.5);
  std::uniform_real_distribution<double> uz(3.0, 6.0);
  for (int j = 0; j < 10; ++j)
    points.push_back(Vec3(ux(rng), 0.6 * ux(rng), uz(rng)));

  std::normal_distribution<double> pix(0.0, 0.5);
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < 10; ++j)
      for (int c = 0; c < 2; ++c) {
        const Vec3 p_cam =
            act(compose(rig.camera(c).extrinsic, truths[k]), points[j]);
        if (p_cam.z() <= kMinDepth) continue;
        Observation o;
        o.pose_id = k;
        o.camera_id = c;
        o.point_id = j;
        o.pixel = *try_project(rig.camera(c).intrinsics, p_cam) +
                  Vec2(pix(rng), pix(rng));
        o.information = rig.camera(c).information();
        problem.observations.push_back(o);
      }

  std::normal_distribution<double> n(0.0, 0.01);
  for (int k = 0; k < 3; ++k) {
    Vec6 xi;
    for (int d = 0; d < 6; ++d) xi(d) = k == 0 ? 0.0 : n(rng);
    RigPose pose;
    pose.c1 = compose(exp_se3(Twist::from_vector(xi)), truths[k]);
    problem.poses[k] = PoseVariable{pose, k == 0};
  }
  for (int j = 0; j < 10; ++j)
    problem.points[j] = PointVariable{
        points[j] + Vec3(n(rng), n(rng), n(rng)), false};

  const FlatProblem flat = flatten(problem);
  const auto report = solve_lm(problem);
  const double c_ref = reference_minimize(flat, 20000);
  REQUIRE(std::abs(report.final_cost - c_ref) <
          1e-6 * std::max({1.0, report.final_cost, c_ref}));
}

// ---------------------------------------------------------------------------
// Problem builders
// ---------------------------------------------------------------------------

namespace {

// Map with keyframes observing chosen subsets of shared points; frames get
// one feature per observed point per camera, exact pixels.
struct MapSetup {
  CameraRig rig = rig_preset("stereo2");
  BundledMap map;
  std::vector<RigidTransform> truths;
  std::vector<Vec3> point_truths;
  std::vector<std::int64_t> kf_ids;
  std::vector<std::int64_t> point_ids;
};

MapSetup build_map(std::mt19937_64& rng, int n_kf, int n_points,
                   const std::vector<std::vector<int>>& visibility,
                   double pose_sigma = 0.0, double pixel_sigma = 0.0,
                   double point_sigma = 0.0) {
  MapSetup s;
  std::uniform_real_distribution<double> ux(-2.0, 2.0);
  std::uniform_real_distribution<double> uz(4.0, 9.0);
  for (int j = 0; j < n_points; ++j)
    s.point_truths.push_back(Vec3(ux(rng), 0.5 * ux(rng), uz(rng)));

  std::normal_distribution<double> n01(0.0, 1.0);
  for (int k = 0; k < n_kf; ++k) {
    // Mild sideways arc so every keyframe still faces the points.
    Vec6 xi;
    xi << 0.0, 0.04 * k, 0.0, 0.25 * k, 0.02 * k, 0.0;
    s.truths.push_back(exp_se3(Twist::from_vector(xi)));
  }

  std::vector<Descriptor256> descs;
  for (int j = 0; j < n_points; ++j)
    descs.push_back(Descriptor256::random(rng));
  for (int j = 0; j < n_points; ++j) {
    Vec3 start = s.point_truths[j];
    for (int d = 0; d < 3; ++d) start(d) += point_sigma * n01(rng);
    s.point_ids.push_back(s.map.create_point(start, descs[j]));
  }

  for (int k = 0; k < n_kf; ++k) {
    auto frame = make_frame(s.rig, 0.1 * k);
    RigPose truth_pose{s.truths[k], 0.1 * k};
    std::vector<std::int64_t> observed;
    for (int j : visibility[k]) {
      for (int c = 0; c < s.rig.camera_count(); ++c) {
        Vec2 px = observe(s.rig, truth_pose, c, s.point_truths[j]).pixel;
        px += pixel_sigma * Vec2(n01(rng), n01(rng));
        add_feature(frame, c, px, descs[j]);
      }
      observed.push_back(j);
    }
    bundle_features(frame, s.rig);

    Vec6 xi = Vec6::Zero();
    for (int d = 0; d < 6; ++d) xi(d) = pose_sigma * n01(rng);
    if (k == 0) xi.setZero();
    frame.pose.c1 = compose(exp_se3(Twist::from_vector(xi)), s.truths[k]);
    const auto kf_id = s.map.insert_keyframe(std::move(frame));
    s.kf_ids.push_back(kf_id);

    // Feature order matches the observed-point order per camera; the
    // bundled unique id of camera-0 feature f is looked up directly.
    const auto& kf = s.map.keyframe(kf_id);
    for (std::size_t f = 0; f < observed.size(); ++f) {
      const std::int64_t u = kf.frame.features[0][f].unique_id;
      s.map.add_observation(kf_id, u, s.point_ids[observed[f]]);
    }
  }
  return s;
}

std::vector<std::vector<int>> all_see_all(int n_kf, int n_points) {
  std::vector<int> all(n_points);
  std::iota(all.begin(), all.end(), 0);
  return std::vector<std::vector<int>>(n_kf, all);
}

}  // namespace

TEST_CASE("motion-only builder: one free pose, forty observations") {
  std::mt19937_64 rng(57);
  auto s = build_map(rng, 1, 20, all_see_all(1, 20));
  const auto& kf = s.map.keyframe(0);
  std::map<std::int64_t, std::int64_t> matches = kf.point_for_unique;

  auto frame = kf.frame;
  const auto problem = build_motion_only(s.map, s.rig, frame, matches);
  REQUIRE(problem.poses.size() == 1);
  REQUIRE_FALSE(problem.poses.at(0).fixed);
  REQUIRE(problem.observations.size() == 40);
  REQUIRE(problem.points.size() == 20);
  for (const auto& [id, v] : problem.points) REQUIRE(v.fixed);
}

TEST_CASE("motion-only builder rejects underdetermined input") {
  std::mt19937_64 rng(58);
  auto s = build_map(rng, 1, 20, all_see_all(1, 20));
  const auto& kf = s.map.keyframe(0);
  std::map<std::int64_t, std::int64_t> matches;
  // Two bundled features = 4 observations < 6.
  int taken = 0;
  for (const auto& [u, p] : kf.point_for_unique) {
    if (taken++ == 2) break;
    matches[u] = p;
  }
  REQUIRE_THROWS_AS(build_motion_only(s.map, s.rig, kf.frame, matches),
                    TooFewMatches);
}

TEST_CASE("single-camera motion-only matches an independent refinement") {
  std::mt19937_64 rng(59);
  const auto rig = rig_preset("mono1");
  const RigidTransform truth = testutil::random_transform(rng, 0.3, 0.4);
  BaProblem problem;
  problem.rig = rig;
  std::vector<Vec3> pts;
  for (int j = 0; j < 15; ++j) {
    // Depths well clear of the start perturbation so no point ever crosses
    // the depth gate; the plain reference below has no such guard.
    const Vec3 p = random_point_in_front(rng, rig, truth, 0, 2.0, 10.0);
    pts.push_back(p);
    problem.points[j] = PointVariable{p, true};
    Observation o;
    o.pose_id = 0;
    o.camera_id = 0;
    o.point_id = j;
    o.pixel = *try_project(
        rig.camera(0).intrinsics,
        act(compose(rig.camera(0).extrinsic, truth), p));
    o.information = Mat2::Identity();
    problem.observations.push_back(o);
  }
  Vec6 xi;
  xi << 0.03, -0.02, 0.04, 0.05, -0.06, 0.02;
  const RigidTransform start = compose(exp_se3(Twist::from_vector(xi)), truth);
  problem.poses[0] = PoseVariable{RigPose{start, 0.0}, false};

  // Independent Gauss-Newton refinement with numerical Jacobians.
  RigidTransform gn = start;
  const auto& intr = rig.camera(0).intrinsics;
  for (int it = 0; it < 60; ++it) {
    Mat6 h = Mat6::Zero();
    Vec6 g = Vec6::Zero();
    for (int j = 0; j < 15; ++j) {
      const Vec2 u = problem.observations[j].pixel;
      // Explicit return type: a deduced one would be an expression template
      // referencing the temporary.
      const auto eval = [&](const RigidTransform& t) -> Vec2 {
        const Vec3 pc = act(t, pts[j]);
        return u - Vec2(intr.fx * pc.x() / pc.z() + intr.cx,
                        intr.fy * pc.y() / pc.z() + intr.cy);
      };
      Mat26 jac;
      const double hstep = 1e-7;
      for (int d = 0; d < 6; ++d) {
        Vec6 e = Vec6::Zero();
        e(d) = hstep;
        const Vec2 p1 = eval(compose(exp_se3(Twist::from_vector(e)), gn));
        e(d) = -hstep;
        const Vec2 p2 = eval(compose(exp_se3(Twist::from_vector(e)), gn));
        jac.col(d) = (p1 - p2) / (2.0 * hstep);
      }
      h += jac.transpose() * jac;
      g += jac.transpose() * eval(gn);
    }
    const Vec6 delta = h.ldlt().solve(-g);
    gn = compose(exp_se3(Twist::from_vector(delta)), gn);
    if (delta.norm() < 1e-14) break;
  }

  solve_lm(problem);
  const RigidTransform& lm = problem.poses.at(0).pose.c1;
  REQUIRE(pose_error(lm, gn) < 1e-6);
  REQUIRE(pose_error(lm, truth) < 1e-6);
}

TEST_CASE("second camera contributes information to the optimum") {
  std::mt19937_64 rng(60);
  auto s = motion_only_setup(rng, 20, 0.1, 1.0);
  auto mono = s;
  mono.problem.observations.erase(
      std::remove_if(mono.problem.observations.begin(),
                     mono.problem.observations.end(),
                     [](const Observation& o) { return o.camera_id == 1; }),
      mono.problem.observations.end());
  REQUIRE(mono.problem.observations.size() == 20);

  const auto r_full = solve_lm(s.problem);
  const auto r_mono = solve_lm(mono.problem);
  REQUIRE(r_full.final_cost != r_mono.final_cost);
  REQUIRE(pose_error(s.problem.poses.at(0).pose.c1,
                     mono.problem.poses.at(0).pose.c1) > 1e-9);
}

TEST_CASE("local ba of an isolated keyframe fixes it and frees its points") {
  std::mt19937_64 rng(61);
  auto s = build_map(rng, 1, 20, all_see_all(1, 20));
  const auto problem = build_local_ba(s.map, s.rig, 0);
  REQUIRE(problem.poses.size() == 1);
  REQUIRE(problem.poses.at(0).fixed);
  REQUIRE(problem.points.size() == 20);
  for (const auto& [id, v] : problem.points) REQUIRE_FALSE(v.fixed);
}

TEST_CASE("local ba of a chain takes the whole chain free") {
  std::mt19937_64 rng(62);
  // kf0 sees points 0..19, kf1 sees 0..39, kf2 sees 20..39: adjacent pairs
  // share 20 >= threshold, the ends share nothing.
  std::vector<std::vector<int>> vis(3);
  for (int j = 0; j < 20; ++j) vis[0].push_back(j);
  for (int j = 0; j < 40; ++j) vis[1].push_back(j);
  for (int j = 20; j < 40; ++j) vis[2].push_back(j);
  auto s = build_map(rng, 3, 40, vis);
  REQUIRE(s.map.covisibility().has_edge(0, 1));
  REQUIRE(s.map.covisibility().has_edge(1, 2));
  REQUIRE_FALSE(s.map.covisibility().has_edge(0, 2));

  const auto problem = build_local_ba(s.map, s.rig, 1);
  REQUIRE(problem.poses.size() == 3);
  REQUIRE(problem.poses.at(0).fixed);  // empty boundary, lowest id pinned
  REQUIRE_FALSE(problem.poses.at(1).fixed);
  REQUIRE_FALSE(problem.poses.at(2).fixed);
  REQUIRE(problem.points.size() == 40);
}

TEST_CASE("local ba membership matches the set definitions") {
  std::mt19937_64 rng(63);
  for (int trial = 0; trial < 10; ++trial) {
    const int n_kf = 6, n_pts = 50;
    std::vector<std::vector<int>> vis(n_kf);
    std::uniform_int_distribution<int> pick(0, 1);
    for (int k = 0; k < n_kf; ++k) {
      // Window + random extras so shared counts straddle the threshold.
      for (int j = 0; j < n_pts; ++j)
        if ((j >= 8 * k && j < 8 * k + 18) || pick(rng) == 0)
          vis[k].push_back(j);
    }
    auto s = build_map(rng, n_kf, n_pts, vis);
    std::uniform_int_distribution<int> centers(0, n_kf - 1);
    const std::int64_t center = centers(rng);
    const auto problem = build_local_ba(s.map, s.rig, center);

    // Brute-force sets straight from the definitions.
    std::set<std::int64_t> bl{center};
    for (std::int64_t other : s.map.keyframe_ids()) {
      if (other == center) continue;
      int shared = 0;
      for (std::int64_t p : s.map.keyframe(center).observed_points())
        if (s.map.point(p).observing_keyframes().count(other)) ++shared;
      if (shared >= CovisibilityGraph::kEdgeThreshold) bl.insert(other);
    }
    std::set<std::int64_t> pl;
    for (std::int64_t kf : bl)
      for (std::int64_t p : s.map.keyframe(kf).observed_points())
        pl.insert(p);
    std::set<std::int64_t> bf;
    for (std::int64_t p : pl)
      for (std::int64_t kf : s.map.point(p).observing_keyframes())
        if (!bl.count(kf)) bf.insert(kf);

    std::set<std::int64_t> got_free, got_fixed, got_points;
    for (const auto& [id, v] : problem.poses)
      (v.fixed ? got_fixed : got_free).insert(id);
    for (const auto& [id, v] : problem.points) got_points.insert(id);

    if (bf.empty()) {
      std::set<std::int64_t> bl_minus_gauge = bl;
      bl_minus_gauge.erase(*bl.begin());
      REQUIRE(got_free == bl_minus_gauge);
      REQUIRE(got_fixed == std::set<std::int64_t>{*bl.begin()});
    } else {
      REQUIRE(got_free == bl);
      REQUIRE(got_fixed == bf);
    }
    REQUIRE(got_points == pl);
  }
}

TEST_CASE("global ba frees everything but the origin") {
  std::mt19937_64 rng(64);
  auto s = build_map(rng, 1, 12, all_see_all(1, 12));
  const auto single = build_global_ba(s.map, s.rig);
  REQUIRE(single.poses.size() == 1);
  REQUIRE(single.poses.at(0).fixed);
  REQUIRE(single.points.size() == 12);
  for (const auto& [id, v] : single.points) REQUIRE_FALSE(v.fixed);

  auto s2 = build_map(rng, 4, 30, all_see_all(4, 30));
  const auto problem = build_global_ba(s2.map, s2.rig);
  REQUIRE(problem.poses.size() == 4);
  REQUIRE(problem.poses.at(0).fixed);
  for (std::int64_t k = 1; k < 4; ++k)
    REQUIRE_FALSE(problem.poses.at(k).fixed);
}

TEST_CASE("global ba shrinks pose error by an order of magnitude") {
  std::mt19937_64 rng(65);
  auto s = build_map(rng, 10, 60, all_see_all(10, 60),
                     /*pose_sigma=*/0.05, /*pixel_sigma=*/0.5,
                     /*point_sigma=*/0.02);
  const auto rmse = [&]() {
    double sum = 0.0;
    for (int k = 0; k < 10; ++k) {
      const Vec3 err = s.map.keyframe(k).frame.pose.c1.translation -
                       s.truths[k].translation;
      sum += err.squaredNorm();
    }
    return std::sqrt(sum / 10.0);
  };
  const double before = rmse();
  auto problem = build_global_ba(s.map, s.rig);
  solve_lm(problem);
  apply_solution(s.map, problem);
  const double after = rmse();
  REQUIRE(before > 0.01);
  REQUIRE(after < 0.1 * before);
}

TEST_CASE("global ba leaves the origin pose bit-identical") {
  std::mt19937_64 rng(66);
  auto s = build_map(rng, 5, 40, all_see_all(5, 40), 0.03, 0.5, 0.01);
  const Mat3 r0 = s.map.keyframe(0).frame.pose.c1.rotation.matrix();
  const Vec3 t0 = s.map.keyframe(0).frame.pose.c1.translation;
  auto problem = build_global_ba(s.map, s.rig);
  solve_lm(problem);
  apply_solution(s.map, problem);
  const Mat3 r1 = s.map.keyframe(0).frame.pose.c1.rotation.matrix();
  const Vec3 t1 = s.map.keyframe(0).frame.pose.c1.translation;
  REQUIRE(std::memcmp(r0.data(), r1.data(), sizeof(double) * 9) == 0);
  REQUIRE(std::memcmp(t0.data(), t1.data(), sizeof(double) * 3) == 0);
}
