#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include <Eigen/Cholesky>

#include "rigslam/errors.hpp"
#include "rigslam/optimizer.hpp"
#include "rigslam/se3.hpp"

namespace rigslam {

/// Relative-pose constraint between keyframes a and b. The measurement is
/// the relative transform in the same convention as the residual below:
/// a consistent edge satisfies measured = T_a * T_b^{-1}.
struct PoseGraphEdge {
  std::int64_t a = 0;
  std::int64_t b = 0;
  RigidTransform measured;
};

struct PoseGraphProblem {
  std::map<std::int64_t, RigidTransform> poses;  // keyframe id -> world->body
  std::set<std::int64_t> fixed;                  // gauge anchors
  std::vector<PoseGraphEdge> edges;
};

/// Edge residual log_se3(measured^{-1} * T_a * T_b^{-1}), zero iff the
/// poses reproduce the measured relative transform.
inline Vec6 pose_graph_residual(const RigidTransform& measured,
                                const RigidTransform& ta,
                                const RigidTransform& tb) {
  return log_se3(compose(invert(measured), compose(ta, invert(tb))))
      .to_vector();
}

namespace detail {

inline void validate_pose_graph(const PoseGraphProblem& p) {
  if (p.poses.empty()) throw Error("pose graph: no poses");
  bool any_fixed = false;
  for (std::int64_t id : p.fixed) {
    if (!p.poses.count(id))
      throw Error("pose graph: fixed id " + std::to_string(id) +
                  " has no pose");
    any_fixed = true;
  }
  if (!any_fixed) throw Error("pose graph: at least one pose must be fixed");
  for (const auto& e : p.edges) {
    if (e.a == e.b) throw Error("pose graph: self edge");
    if (!p.poses.count(e.a) || !p.poses.count(e.b))
      throw Error("pose graph: edge references unknown pose");
  }
}

/// Numeric 6x6 edge Jacobian with respect to the left-multiplicative
/// perturbation of one endpoint, by central differences.
template <typename Eval>
Eigen::Matrix<double, 6, 6> fd_edge_jacobian(const RigidTransform& t,
                                             const Eval& eval) {
  constexpr double kStep = 1e-7;
  Eigen::Matrix<double, 6, 6> j;
  for (int k = 0; k < 6; ++k) {
    Vec6 dv = Vec6::Zero();
    dv(k) = kStep;
    const RigidTransform plus = compose(exp_se3(Twist::from_vector(dv)), t);
    dv(k) = -kStep;
    const RigidTransform minus = compose(exp_se3(Twist::from_vector(dv)), t);
    j.col(k) = (eval(plus) - eval(minus)) / (2.0 * kStep);
  }
  return j;
}

}  // namespace detail

/// Dense Levenberg-Marquardt over the relative-pose constraints. Fixed
/// poses keep their values bit-exactly; free poses take left-multiplied
/// exponential updates.
inline SolveReport solve_pose_graph(PoseGraphProblem& problem,
                                    const SolverSettings& settings = {}) {
  detail::validate_pose_graph(problem);

  std::map<std::int64_t, int> column;  // free pose id -> block index
  for (const auto& [id, pose] : problem.poses)
    if (!problem.fixed.count(id)) {
      const int next = int(column.size());
      column[id] = next;
    }
  const int n = int(column.size()) * 6;

  const auto total_cost = [&]() {
    double c = 0.0;
    for (const auto& e : problem.edges)
      c += 0.5 * pose_graph_residual(e.measured, problem.poses.at(e.a),
                                     problem.poses.at(e.b))
                     .squaredNorm();
    return c;
  };

  SolveReport report;
  report.initial_cost = total_cost();
  report.cost_trace.push_back(report.initial_cost);
  report.final_cost = report.initial_cost;
  if (n == 0 || report.initial_cost < 1e-300) {
    report.reason = Termination::kCostTolerance;
    return report;
  }

  double lambda = settings.initial_lambda;
  double cost = report.initial_cost;
  for (report.iterations = 1; report.iterations <= settings.max_iterations;
       ++report.iterations) {
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(n);
    for (const auto& e : problem.edges) {
      const RigidTransform& ta = problem.poses.at(e.a);
      const RigidTransform& tb = problem.poses.at(e.b);
      const Vec6 r = pose_graph_residual(e.measured, ta, tb);
      const auto ia = column.find(e.a);
      const auto ib = column.find(e.b);
      Eigen::Matrix<double, 6, 6> ja, jb;
      if (ia != column.end())
        ja = detail::fd_edge_jacobian(ta, [&](const RigidTransform& t) {
          return pose_graph_residual(e.measured, t, tb);
        });
      if (ib != column.end())
        jb = detail::fd_edge_jacobian(tb, [&](const RigidTransform& t) {
          return pose_graph_residual(e.measured, ta, t);
        });
      if (ia != column.end()) {
        const int ca = 6 * ia->second;
        h.block<6, 6>(ca, ca) += ja.transpose() * ja;
        g.segment<6>(ca) -= ja.transpose() * r;
      }
      if (ib != column.end()) {
        const int cb = 6 * ib->second;
        h.block<6, 6>(cb, cb) += jb.transpose() * jb;
        g.segment<6>(cb) -= jb.transpose() * r;
      }
      if (ia != column.end() && ib != column.end()) {
        const int ca = 6 * ia->second, cb = 6 * ib->second;
        h.block<6, 6>(ca, cb) += ja.transpose() * jb;
        h.block<6, 6>(cb, ca) += jb.transpose() * ja;
      }
    }

    bool accepted = false;
    while (true) {
      Eigen::MatrixXd damped = h;
      damped.diagonal() += lambda * h.diagonal();
      // Guard against structurally unconstrained poses (no edges).
      for (int i = 0; i < n; ++i)
        if (damped(i, i) == 0.0) damped(i, i) = 1.0;
      const Eigen::VectorXd delta = damped.ldlt().solve(g);

      std::map<std::int64_t, RigidTransform> backup = problem.poses;
      for (const auto& [id, block] : column)
        problem.poses[id] =
            compose(exp_se3(Twist::from_vector(delta.segment<6>(6 * block))),
                    problem.poses[id]);
      const double new_cost = total_cost();
      if (new_cost < cost) {
        const double decrease = (cost - new_cost) / std::max(cost, 1e-300);
        cost = new_cost;
        report.cost_trace.push_back(cost);
        lambda = std::max(settings.lambda_decrease * lambda, 1e-12);
        accepted = true;
        if (decrease < settings.cost_tolerance) {
          report.reason = Termination::kCostTolerance;
          report.final_cost = cost;
          return report;
        }
        if (delta.norm() < settings.step_tolerance) {
          report.reason = Termination::kStepTolerance;
          report.final_cost = cost;
          return report;
        }
        break;
      }
      problem.poses = std::move(backup);
      lambda *= settings.lambda_increase;
      if (lambda > settings.lambda_max) {
        report.reason = Termination::kLambdaLimit;
        report.final_cost = cost;
        return report;
      }
    }
    (void)accepted;
  }
  report.iterations = settings.max_iterations;
  report.reason = Termination::kMaxIterations;
  report.final_cost = cost;
  return report;
}

}  // namespace rigslam
