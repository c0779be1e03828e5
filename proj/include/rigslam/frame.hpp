#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <utility>
#include <vector>

#include "rigslam/camera.hpp"
#include "rigslam/descriptor.hpp"
#include "rigslam/errors.hpp"
#include "rigslam/se3.hpp"

namespace rigslam {

inline constexpr int kGridCols = 64;
inline constexpr int kGridRows = 48;

struct Feature {
  int camera_id = 0;
  Vec2 pixel = Vec2::Zero();
  Descriptor256 descriptor;
  std::int64_t unique_id = -1;  // -1 until bundled
};

inline bool operator==(const Feature& a, const Feature& b) {
  return a.camera_id == b.camera_id && a.pixel.x() == b.pixel.x() &&
         a.pixel.y() == b.pixel.y() && a.descriptor == b.descriptor &&
         a.unique_id == b.unique_id;
}

/// Per-camera occupancy grid over the image plane; cells hold indices
/// into that camera's feature list.
class FeatureGrid {
 public:
  FeatureGrid() = default;
  FeatureGrid(int width, int height)
      : width_(width), height_(height),
        cells_(static_cast<std::size_t>(kGridCols) * kGridRows) {}

  std::pair<int, int> cell_of(const Vec2& px) const {
    int gx = static_cast<int>(std::floor(kGridCols * px.x() / width_));
    int gy = static_cast<int>(std::floor(kGridRows * px.y() / height_));
    gx = std::clamp(gx, 0, kGridCols - 1);
    gy = std::clamp(gy, 0, kGridRows - 1);
    return {gx, gy};
  }

  void insert(int feature_index, const Vec2& px) {
    const auto [gx, gy] = cell_of(px);
    cells_[static_cast<std::size_t>(gy) * kGridCols + gx].push_back(
        feature_index);
  }

  const std::vector<int>& cell(int gx, int gy) const {
    return cells_[static_cast<std::size_t>(gy) * kGridCols + gx];
  }

  int width() const { return width_; }
  int height() const { return height_; }

  friend bool operator==(const FeatureGrid& a, const FeatureGrid& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ &&
           a.cells_ == b.cells_;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::vector<int>> cells_;
};

/// All features seen by the rig at one time step, plus the grids and the
/// unique-ID table produced by cross-camera bundling.
struct BundledFrame {
  double timestamp = 0.0;
  RigPose pose;
  std::vector<std::vector<Feature>> features;  // per camera
  std::vector<FeatureGrid> grids;              // per camera
  // unique_id -> (camera_id, feature index) entries, both in ascending order
  std::map<std::int64_t, std::vector<std::pair<int, int>>> unique_ids;

  int camera_count() const { return static_cast<int>(features.size()); }

  int feature_count() const {
    int n = 0;
    for (const auto& fs : features) n += static_cast<int>(fs.size());
    return n;
  }
};

inline bool operator==(const BundledFrame& a, const BundledFrame& b) {
  const auto pose_eq = [](const RigPose& x, const RigPose& y) {
    return x.timestamp == y.timestamp &&
           (x.c1.rotation.matrix() == y.c1.rotation.matrix()) &&
           (x.c1.translation == y.c1.translation);
  };
  return a.timestamp == b.timestamp && pose_eq(a.pose, b.pose) &&
         a.features == b.features && a.grids == b.grids &&
         a.unique_ids == b.unique_ids;
}

inline BundledFrame make_frame(const CameraRig& rig, double timestamp) {
  BundledFrame f;
  f.timestamp = timestamp;
  f.pose.timestamp = timestamp;
  f.features.resize(rig.camera_count());
  for (int i = 0; i < rig.camera_count(); ++i) {
    const auto& intr = rig.camera(i).intrinsics;
    f.grids.emplace_back(intr.width, intr.height);
  }
  return f;
}

/// Appends a feature and files it in its camera's grid.
inline int add_feature(BundledFrame& frame, int camera_id, const Vec2& pixel,
                       const Descriptor256& descriptor) {
  if (camera_id < 0 || camera_id >= frame.camera_count())
    throw IndexOutOfRange("add_feature: camera " + std::to_string(camera_id));
  auto& list = frame.features[camera_id];
  const int idx = static_cast<int>(list.size());
  list.push_back(Feature{camera_id, pixel, descriptor, -1});
  frame.grids[camera_id].insert(idx, pixel);
  return idx;
}

/// Indices of features of one camera within r pixels of center, scanning
/// only the grid cells that intersect the disc. Ascending index order.
inline std::vector<int> features_in_radius(const BundledFrame& frame,
                                           int camera_id, const Vec2& center,
                                           double r) {
  if (camera_id < 0 || camera_id >= frame.camera_count())
    throw IndexOutOfRange("features_in_radius: camera " +
                          std::to_string(camera_id));
  const auto& grid = frame.grids[camera_id];
  const auto& feats = frame.features[camera_id];
  const auto [gx0, gy0] = grid.cell_of(center - Vec2(r, r));
  const auto [gx1, gy1] = grid.cell_of(center + Vec2(r, r));
  std::vector<int> out;
  for (int gy = gy0; gy <= gy1; ++gy)
    for (int gx = gx0; gx <= gx1; ++gx)
      for (int idx : grid.cell(gx, gy))
        if ((feats[idx].pixel - center).norm() <= r) out.push_back(idx);
  std::sort(out.begin(), out.end());
  return out;
}

struct MatcherSettings {
  int max_hamming = 50;          // descriptor acceptance threshold
  double epipolar_factor = 2.0;  // gate: line distance < factor * sigma
};

namespace detail {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) { parent[find(a)] = find(b); }
};

inline Mat3 intrinsic_matrix(const PinholeIntrinsics& intr) {
  Mat3 k = Mat3::Identity();
  k(0, 0) = intr.fx;
  k(1, 1) = intr.fy;
  k(0, 2) = intr.cx;
  k(1, 2) = intr.cy;
  return k;
}

/// Fundamental matrix mapping pixels of camera a to epipolar lines in
/// camera b, from the fixed rig extrinsics.
inline Mat3 rig_fundamental(const CameraRig& rig, int a, int b) {
  const RigidTransform t_ba =
      compose(rig.camera(b).extrinsic, invert(rig.camera(a).extrinsic));
  const Mat3 e = skew(t_ba.translation) * t_ba.rotation.matrix();
  const Mat3 ka = intrinsic_matrix(rig.camera(a).intrinsics);
  const Mat3 kb = intrinsic_matrix(rig.camera(b).intrinsics);
  return kb.inverse().transpose() * e * ka.inverse();
}

inline double line_distance(const Vec3& line, const Vec2& px) {
  const double n = std::hypot(line.x(), line.y());
  if (n == 0.0) return 0.0;
  return std::abs(line.x() * px.x() + line.y() * px.y() + line.z()) / n;
}

}  // namespace detail

/// Assigns unique feature IDs across cameras: mutual-best descriptor
/// matches within max_hamming that also satisfy the epipolar gate are
/// merged; everything else becomes a monocular ID. IDs are frame-local,
/// assigned in (camera, feature index) scan order.
inline void bundle_features(BundledFrame& frame, const CameraRig& rig,
                            const MatcherSettings& settings = {}) {
  const int ncam = frame.camera_count();
  std::vector<int> offset(ncam + 1, 0);
  for (int c = 0; c < ncam; ++c)
    offset[c + 1] = offset[c] + static_cast<int>(frame.features[c].size());
  detail::UnionFind uf(offset[ncam]);

  for (int a = 0; a < ncam; ++a) {
    for (int b = a + 1; b < ncam; ++b) {
      const auto& fa = frame.features[a];
      const auto& fb = frame.features[b];
      if (fa.empty() || fb.empty()) continue;

      const auto best_into = [&](const std::vector<Feature>& from,
                                 const std::vector<Feature>& to) {
        std::vector<int> best(from.size(), -1);
        for (std::size_t i = 0; i < from.size(); ++i) {
          int best_d = settings.max_hamming + 1;
          for (std::size_t j = 0; j < to.size(); ++j) {
            const int d =
                hamming_distance(from[i].descriptor, to[j].descriptor);
            if (d < best_d) {
              best_d = d;
              best[i] = static_cast<int>(j);
            }
          }
        }
        return best;
      };
      const std::vector<int> a_to_b = best_into(fa, fb);
      const std::vector<int> b_to_a = best_into(fb, fa);

      const Mat3 f_ab = detail::rig_fundamental(rig, a, b);
      // Pure-rotation pairs give a zero fundamental matrix; the gate is
      // then undefined and matching falls back to descriptors alone.
      const bool gated = f_ab.cwiseAbs().maxCoeff() > 1e-12;
      const double tol_a =
          settings.epipolar_factor * rig.camera(a).noise_sigma;
      const double tol_b =
          settings.epipolar_factor * rig.camera(b).noise_sigma;

      for (std::size_t i = 0; i < fa.size(); ++i) {
        const int j = a_to_b[i];
        if (j < 0 || b_to_a[j] != static_cast<int>(i)) continue;
        if (gated) {
          const Vec3 ua(fa[i].pixel.x(), fa[i].pixel.y(), 1.0);
          const Vec3 ub(fb[j].pixel.x(), fb[j].pixel.y(), 1.0);
          if (detail::line_distance(f_ab * ua, fb[j].pixel) >= tol_b)
            continue;
          if (detail::line_distance(f_ab.transpose() * ub, fa[i].pixel) >=
              tol_a)
            continue;
        }
        uf.unite(offset[a] + static_cast<int>(i), offset[b] + j);
      }
    }
  }

  frame.unique_ids.clear();
  std::map<int, std::int64_t> root_to_id;
  std::int64_t next_id = 0;
  for (int c = 0; c < ncam; ++c) {
    for (std::size_t i = 0; i < frame.features[c].size(); ++i) {
      const int root = uf.find(offset[c] + static_cast<int>(i));
      auto [it, inserted] = root_to_id.try_emplace(root, next_id);
      if (inserted) ++next_id;
      frame.features[c][i].unique_id = it->second;
      frame.unique_ids[it->second].emplace_back(c, static_cast<int>(i));
    }
  }
}

struct BundleCounts {
  int unique = 0;
  int monocular = 0;
  int matched = 0;
};

inline BundleCounts bundle_counts(const BundledFrame& frame) {
  BundleCounts c;
  c.unique = static_cast<int>(frame.unique_ids.size());
  for (const auto& [id, entries] : frame.unique_ids) {
    if (entries.size() == 1)
      ++c.monocular;
    else
      ++c.matched;
  }
  return c;
}

}  // namespace rigslam
