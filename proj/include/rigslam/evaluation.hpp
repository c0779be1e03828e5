#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "rigslam/errors.hpp"
#include "rigslam/se3.hpp"

namespace rigslam {

struct StampedPose {
  double timestamp = 0.0;
  RigidTransform pose;  // body in world
};

/// Timestamped pose sequence. File form is one pose per line,
/// "timestamp tx ty tz qx qy qz qw", with '#' comment lines.
class TrajectoryRecord {
 public:
  void append(double timestamp, const RigidTransform& pose) {
    if (!entries_.empty() && timestamp <= entries_.back().timestamp)
      throw Error("trajectory: timestamps must be strictly increasing (" +
                  std::to_string(timestamp) + " after " +
                  std::to_string(entries_.back().timestamp) + ")");
    entries_.push_back({timestamp, pose});
  }

  const std::vector<StampedPose>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw Error("trajectory: cannot open " + path);
    write(os);
  }

  void write(std::ostream& os) const {
    os << "# timestamp tx ty tz qx qy qz qw\n" << std::setprecision(17);
    for (const auto& e : entries_) {
      const Eigen::Quaterniond q(e.pose.rotation.matrix());
      os << e.timestamp << ' ' << e.pose.translation.x() << ' '
         << e.pose.translation.y() << ' ' << e.pose.translation.z() << ' '
         << q.x() << ' ' << q.y() << ' ' << q.z() << ' ' << q.w() << '\n';
    }
  }

  static TrajectoryRecord load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("trajectory: cannot open " + path);
    return read(is);
  }

  static TrajectoryRecord read(std::istream& is) {
    TrajectoryRecord record;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ss(line);
      double t, tx, ty, tz, qx, qy, qz, qw;
      if (!(ss >> t >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
        throw Error("trajectory: malformed pose at line " +
                    std::to_string(line_no));
      const Eigen::Quaterniond q(qw, qx, qy, qz);
      if (std::abs(q.norm() - 1.0) > 1e-3)
        throw Error("trajectory: non-unit quaternion at line " +
                    std::to_string(line_no));
      try {
        record.append(t, RigidTransform(Rotation3::from_quaternion(q),
                                        Vec3(tx, ty, tz)));
      } catch (const Error& e) {
        throw Error(std::string(e.what()) + " at line " +
                    std::to_string(line_no));
      }
    }
    return record;
  }

 private:
  std::vector<StampedPose> entries_;
};

struct TrajectoryPair {
  double timestamp = 0.0;  // estimate-side stamp
  double dt = 0.0;         // gt stamp minus estimate stamp
  Vec3 est = Vec3::Zero();
  Vec3 gt = Vec3::Zero();
};

/// Greedy nearest-timestamp association: candidate pairs within max_dt are
/// taken closest-first, each pose used at most once.
inline std::vector<TrajectoryPair> associate(const TrajectoryRecord& est,
                                             const TrajectoryRecord& gt,
                                             double max_dt) {
  if (max_dt <= 0.0) throw Error("associate: max_dt must be positive");
  struct Candidate {
    double adt;
    std::size_t ei, gi;
  };
  std::vector<Candidate> candidates;
  for (std::size_t ei = 0; ei < est.size(); ++ei)
    for (std::size_t gi = 0; gi < gt.size(); ++gi) {
      const double dt =
          gt.entries()[gi].timestamp - est.entries()[ei].timestamp;
      if (std::abs(dt) <= max_dt) candidates.push_back({std::abs(dt), ei, gi});
    }
  std::sort(candidates.begin(), candidates.end(),
            [](const Candidate& a, const Candidate& b) {
              if (a.adt != b.adt) return a.adt < b.adt;
              if (a.ei != b.ei) return a.ei < b.ei;
              return a.gi < b.gi;
            });
  std::vector<bool> est_used(est.size(), false), gt_used(gt.size(), false);
  std::vector<TrajectoryPair> pairs;
  for (const auto& c : candidates) {
    if (est_used[c.ei] || gt_used[c.gi]) continue;
    est_used[c.ei] = true;
    gt_used[c.gi] = true;
    const auto& e = est.entries()[c.ei];
    const auto& g = gt.entries()[c.gi];
    pairs.push_back({e.timestamp, g.timestamp - e.timestamp,
                     e.pose.translation, g.pose.translation});
  }
  if (pairs.empty()) throw NoOverlap("associate: no pairs within max_dt");
  std::sort(pairs.begin(), pairs.end(),
            [](const TrajectoryPair& a, const TrajectoryPair& b) {
              return a.timestamp < b.timestamp;
            });
  return pairs;
}

/// Least-squares rigid alignment (no scale) of the estimated positions
/// onto ground truth: minimizes sum over pairs of |gt - (R est + t)|^2.
inline RigidTransform align_umeyama_se3(const std::vector<TrajectoryPair>& pairs) {
  if (pairs.size() < 3)
    throw DegenerateGeometry("align: need at least 3 pairs");
  Eigen::Matrix3Xd src(3, pairs.size()), dst(3, pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    src.col(i) = pairs[i].est;
    dst.col(i) = pairs[i].gt;
  }
  const Vec3 mean = src.rowwise().mean();
  const Eigen::Matrix3Xd centered = src.colwise() - mean;
  const Eigen::JacobiSVD<Eigen::Matrix3Xd> svd(centered);
  const auto& sv = svd.singularValues();
  if (sv(0) < 1e-15 || sv(1) / sv(0) < 1e-9)
    throw DegenerateGeometry("align: positions are collinear or coincident");
  const Eigen::Matrix4d m = Eigen::umeyama(src, dst, false);
  return RigidTransform(Rotation3(Mat3(m.topLeftCorner<3, 3>())),
                        Vec3(m.topRightCorner<3, 1>()));
}

/// Per-pair aligned translation error norms, pair order preserved.
inline std::vector<double> ape_series(const std::vector<TrajectoryPair>& pairs,
                                      const RigidTransform& alignment) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs)
    out.push_back((p.gt - act(alignment, p.est)).norm());
  return out;
}

inline double ate_rmse(const std::vector<TrajectoryPair>& pairs,
                       const RigidTransform& alignment) {
  if (pairs.empty()) throw Error("ate_rmse: no pairs");
  double sum2 = 0.0;
  for (const auto& p : pairs)
    sum2 += (p.gt - act(alignment, p.est)).squaredNorm();
  return std::sqrt(sum2 / pairs.size());
}

struct RunStatistics {
  double best = 0.0;
  double average = 0.0;
  double median = 0.0;
};

inline RunStatistics summarize_runs(std::vector<double> values) {
  if (values.empty()) throw Error("summarize_runs: no values");
  RunStatistics s;
  s.best = *std::min_element(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  s.average = sum / values.size();
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  s.median = values.size() % 2 ? values[mid]
                               : 0.5 * (values[mid - 1] + values[mid]);
  return s;
}

}  // namespace rigslam
