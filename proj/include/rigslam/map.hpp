#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "rigslam/errors.hpp"
#include "rigslam/frame.hpp"

namespace rigslam {

struct MapPoint {
  Vec3 position = Vec3::Zero();
  Descriptor256 descriptor;
  // (keyframe id, camera id, feature index), one entry per camera view
  std::set<std::tuple<std::int64_t, int, int>> observations;

  std::set<std::int64_t> observing_keyframes() const {
    std::set<std::int64_t> out;
    for (const auto& [kf, cam, feat] : observations) out.insert(kf);
    return out;
  }
};

inline bool operator==(const MapPoint& a, const MapPoint& b) {
  return (a.position == b.position) && a.descriptor == b.descriptor &&
         a.observations == b.observations;
}

struct BundledKeyframe {
  std::int64_t id = -1;
  BundledFrame frame;
  // unique feature id -> map point id
  std::map<std::int64_t, std::int64_t> point_for_unique;
  // bag-of-words vector: word id -> tf weight, L1-normalized
  std::map<int, double> bow;

  std::set<std::int64_t> observed_points() const {
    std::set<std::int64_t> out;
    for (const auto& [u, p] : point_for_unique) out.insert(p);
    return out;
  }
};

inline bool operator==(const BundledKeyframe& a, const BundledKeyframe& b) {
  return a.id == b.id && a.frame == b.frame &&
         a.point_for_unique == b.point_for_unique && a.bow == b.bow;
}

/// Shared-map-point counts between keyframes. An edge exists iff the
/// count reaches kEdgeThreshold; weights below that are bookkeeping only.
class CovisibilityGraph {
 public:
  static constexpr int kEdgeThreshold = 15;

  int shared_count(std::int64_t a, std::int64_t b) const {
    const auto it = counts_.find(ordered(a, b));
    return it == counts_.end() ? 0 : it->second;
  }

  bool has_edge(std::int64_t a, std::int64_t b) const {
    return shared_count(a, b) >= kEdgeThreshold;
  }

  /// Keyframes connected to a by an edge, heaviest first (ties by id).
  std::vector<std::pair<std::int64_t, int>> neighbors(std::int64_t a) const {
    std::vector<std::pair<std::int64_t, int>> out;
    for (const auto& [pair, w] : counts_) {
      if (w < kEdgeThreshold) continue;
      if (pair.first == a) out.emplace_back(pair.second, w);
      else if (pair.second == a) out.emplace_back(pair.first, w);
    }
    std::sort(out.begin(), out.end(), [](const auto& x, const auto& y) {
      return x.second != y.second ? x.second > y.second : x.first < y.first;
    });
    return out;
  }

  void add_shared(std::int64_t a, std::int64_t b, int delta) {
    if (a == b) return;
    auto key = ordered(a, b);
    const int w = (counts_[key] += delta);
    if (w < 0) throw Error("covisibility: negative shared count");
    if (w == 0) counts_.erase(key);
  }

  void drop_keyframe(std::int64_t a) {
    for (auto it = counts_.begin(); it != counts_.end();) {
      if (it->first.first == a || it->first.second == a)
        it = counts_.erase(it);
      else
        ++it;
    }
  }

  const std::map<std::pair<std::int64_t, std::int64_t>, int>& counts() const {
    return counts_;
  }

  friend bool operator==(const CovisibilityGraph& a,
                         const CovisibilityGraph& b) {
    return a.counts_ == b.counts_;
  }

 private:
  static std::pair<std::int64_t, std::int64_t> ordered(std::int64_t a,
                                                       std::int64_t b) {
    return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
  }
  std::map<std::pair<std::int64_t, std::int64_t>, int> counts_;
};

/// Keyframes, map points and the covisibility graph. Single writer;
/// association edits go through the map so both directions and the
/// covisibility counts stay consistent.
class BundledMap {
 public:
  std::int64_t insert_keyframe(BundledFrame frame) {
    const std::int64_t id = next_keyframe_id_++;
    BundledKeyframe kf;
    kf.id = id;
    kf.frame = std::move(frame);
    keyframes_.emplace(id, std::move(kf));
    return id;
  }

  std::int64_t create_point(const Vec3& position,
                            const Descriptor256& descriptor) {
    const std::int64_t id = next_point_id_++;
    MapPoint p;
    p.position = position;
    p.descriptor = descriptor;
    points_.emplace(id, std::move(p));
    return id;
  }

  bool has_keyframe(std::int64_t id) const { return keyframes_.count(id); }
  bool has_point(std::int64_t id) const { return points_.count(id); }

  const BundledKeyframe& keyframe(std::int64_t id) const {
    const auto it = keyframes_.find(id);
    if (it == keyframes_.end())
      throw UnknownId("map: keyframe " + std::to_string(id));
    return it->second;
  }

  const MapPoint& point(std::int64_t id) const {
    const auto it = points_.find(id);
    if (it == points_.end())
      throw UnknownId("map: point " + std::to_string(id));
    return it->second;
  }

  std::size_t keyframe_count() const { return keyframes_.size(); }
  std::size_t point_count() const { return points_.size(); }

  std::vector<std::int64_t> keyframe_ids() const {
    std::vector<std::int64_t> out;
    for (const auto& [id, kf] : keyframes_) out.push_back(id);
    return out;
  }

  std::vector<std::int64_t> point_ids() const {
    std::vector<std::int64_t> out;
    for (const auto& [id, p] : points_) out.push_back(id);
    return out;
  }

  void set_keyframe_pose(std::int64_t id, const RigidTransform& c1) {
    keyframe_mut(id).frame.pose.c1 = c1;
  }

  void set_point_position(std::int64_t id, const Vec3& position) {
    point_mut(id).position = position;
  }

  void set_bow(std::int64_t id, std::map<int, double> bow) {
    keyframe_mut(id).bow = std::move(bow);
  }

  /// Associates unique feature u of keyframe kf with map point j: records
  /// one observation per camera view of u and updates covisibility.
  void add_observation(std::int64_t kf_id, std::int64_t unique_id,
                       std::int64_t point_id) {
    BundledKeyframe& kf = keyframe_mut(kf_id);
    MapPoint& pt = point_mut(point_id);
    const auto uit = kf.frame.unique_ids.find(unique_id);
    if (uit == kf.frame.unique_ids.end())
      throw UnknownId("map: keyframe " + std::to_string(kf_id) +
                      " has no unique feature " + std::to_string(unique_id));
    if (kf.point_for_unique.count(unique_id))
      throw Error("map: unique feature " + std::to_string(unique_id) +
                  " of keyframe " + std::to_string(kf_id) +
                  " is already associated");
    // At most one unique feature of a keyframe may map to a given point,
    // otherwise removal would be ambiguous.
    if (pt.observing_keyframes().count(kf_id))
      throw Error("map: keyframe " + std::to_string(kf_id) +
                  " already observes point " + std::to_string(point_id));

    kf.point_for_unique[unique_id] = point_id;
    for (const auto& [cam, feat] : uit->second)
      pt.observations.insert({kf_id, cam, feat});
    for (std::int64_t other : pt.observing_keyframes())
      if (other != kf_id) covisibility_.add_shared(kf_id, other, 1);
  }

  /// Removes one keyframe<->point association (all camera views).
  void remove_observation(std::int64_t kf_id, std::int64_t point_id) {
    BundledKeyframe& kf = keyframe_mut(kf_id);
    MapPoint& pt = point_mut(point_id);
    std::int64_t unique_id = -1;
    for (const auto& [u, p] : kf.point_for_unique)
      if (p == point_id) {
        unique_id = u;
        break;
      }
    if (unique_id < 0)
      throw UnknownId("map: keyframe " + std::to_string(kf_id) +
                      " does not observe point " + std::to_string(point_id));
    kf.point_for_unique.erase(unique_id);
    for (auto it = pt.observations.begin(); it != pt.observations.end();)
      it = std::get<0>(*it) == kf_id ? pt.observations.erase(it)
                                     : std::next(it);
    for (std::int64_t other : pt.observing_keyframes())
      covisibility_.add_shared(kf_id, other, -1);
  }

  void remove_point(std::int64_t point_id) {
    MapPoint& pt = point_mut(point_id);
    const auto observers = pt.observing_keyframes();
    for (std::int64_t kf_id : observers) {
      BundledKeyframe& kf = keyframe_mut(kf_id);
      for (auto it = kf.point_for_unique.begin();
           it != kf.point_for_unique.end();)
        it = it->second == point_id ? kf.point_for_unique.erase(it)
                                    : std::next(it);
    }
    for (auto a = observers.begin(); a != observers.end(); ++a)
      for (auto b = std::next(a); b != observers.end(); ++b)
        covisibility_.add_shared(*a, *b, -1);
    points_.erase(point_id);
  }

  void remove_keyframe(std::int64_t kf_id) {
    BundledKeyframe& kf = keyframe_mut(kf_id);
    for (std::int64_t point_id : kf.observed_points()) {
      MapPoint& pt = point_mut(point_id);
      for (auto it = pt.observations.begin(); it != pt.observations.end();)
        it = std::get<0>(*it) == kf_id ? pt.observations.erase(it)
                                       : std::next(it);
      for (std::int64_t other : pt.observing_keyframes())
        covisibility_.add_shared(kf_id, other, -1);
    }
    covisibility_.drop_keyframe(kf_id);  // clears sub-threshold remainders
    keyframes_.erase(kf_id);
  }

  /// Discards keyframes whose map points are at least redundancy_fraction
  /// redundant (a point is redundant when >= min_other_observers other
  /// keyframes observe it). Candidates checked in ascending id order
  /// against the live map. Returns removed ids.
  std::vector<std::int64_t> cull_redundant_keyframes(
      const std::vector<std::int64_t>& candidates,
      double redundancy_fraction = 0.9, int min_other_observers = 3) {
    std::vector<std::int64_t> removed;
    std::vector<std::int64_t> order = candidates;
    std::sort(order.begin(), order.end());
    for (std::int64_t kf_id : order) {
      if (!has_keyframe(kf_id)) continue;
      const auto pts = keyframe(kf_id).observed_points();
      if (pts.empty()) continue;
      int redundant = 0;
      for (std::int64_t p : pts) {
        int others = 0;
        for (std::int64_t obs : point(p).observing_keyframes())
          if (obs != kf_id) ++others;
        if (others >= min_other_observers) ++redundant;
      }
      if (redundant >= redundancy_fraction * static_cast<double>(pts.size())) {
        remove_keyframe(kf_id);
        removed.push_back(kf_id);
      }
    }
    return removed;
  }

  const CovisibilityGraph& covisibility() const { return covisibility_; }

  /// Shared-count recomputation from scratch, for consistency checks.
  CovisibilityGraph recompute_covisibility() const {
    CovisibilityGraph g;
    for (const auto& [pid, pt] : points_) {
      const auto obs = pt.observing_keyframes();
      for (auto a = obs.begin(); a != obs.end(); ++a)
        for (auto b = std::next(a); b != obs.end(); ++b)
          g.add_shared(*a, *b, 1);
    }
    return g;
  }

  /// Referential integrity in both directions; throws on violation.
  void check_integrity() const {
    for (const auto& [kf_id, kf] : keyframes_) {
      for (const auto& [u, p] : kf.point_for_unique) {
        if (!kf.frame.unique_ids.count(u))
          throw Error("integrity: keyframe " + std::to_string(kf_id) +
                      " association for missing unique id");
        const auto pit = points_.find(p);
        if (pit == points_.end())
          throw Error("integrity: dangling point " + std::to_string(p));
        bool found = false;
        for (const auto& [okf, cam, feat] : pit->second.observations)
          if (okf == kf_id) found = true;
        if (!found)
          throw Error("integrity: point " + std::to_string(p) +
                      " missing back-reference to keyframe " +
                      std::to_string(kf_id));
      }
    }
    for (const auto& [pid, pt] : points_) {
      for (const auto& [kf_id, cam, feat] : pt.observations) {
        const auto kit = keyframes_.find(kf_id);
        if (kit == keyframes_.end())
          throw Error("integrity: observation references missing keyframe " +
                      std::to_string(kf_id));
        const auto& frame = kit->second.frame;
        if (cam < 0 || cam >= frame.camera_count() ||
            feat >= static_cast<int>(frame.features[cam].size()))
          throw Error("integrity: observation index out of range");
        const std::int64_t u = frame.features[cam][feat].unique_id;
        const auto ait = kit->second.point_for_unique.find(u);
        if (ait == kit->second.point_for_unique.end() || ait->second != pid)
          throw Error("integrity: observation of point " +
                      std::to_string(pid) + " not mirrored in keyframe " +
                      std::to_string(kf_id));
      }
    }
    if (!(covisibility_ == recompute_covisibility()))
      throw Error("integrity: covisibility counts out of date");
  }

  friend bool operator==(const BundledMap& a, const BundledMap& b) {
    return a.keyframes_ == b.keyframes_ && a.points_ == b.points_ &&
           a.covisibility_ == b.covisibility_ &&
           a.next_keyframe_id_ == b.next_keyframe_id_ &&
           a.next_point_id_ == b.next_point_id_;
  }

  void save(const std::string& path) const;
  static BundledMap load(const std::string& path);

 private:
  BundledKeyframe& keyframe_mut(std::int64_t id) {
    const auto it = keyframes_.find(id);
    if (it == keyframes_.end())
      throw UnknownId("map: keyframe " + std::to_string(id));
    return it->second;
  }

  MapPoint& point_mut(std::int64_t id) {
    const auto it = points_.find(id);
    if (it == points_.end())
      throw UnknownId("map: point " + std::to_string(id));
    return it->second;
  }

  std::map<std::int64_t, BundledKeyframe> keyframes_;
  std::map<std::int64_t, MapPoint> points_;
  CovisibilityGraph covisibility_;
  std::int64_t next_keyframe_id_ = 0;
  std::int64_t next_point_id_ = 0;
};

// ---------------------------------------------------------------------------
// Map file format "rigslam-map 1": whitespace-separated text. Doubles are
// written with 17 significant digits so they round-trip exactly. Grids,
// unique-ID tables, point observations and covisibility counts are derived
// data and are rebuilt on load.
//
//   rigslam-map 1
//   next_ids <next keyframe id> <next point id>
//   keyframes <count>
//     kf <id> <frame timestamp> <pose timestamp>
//     pose <r00 r01 r02 r10 .. r22> <tx ty tz>
//     cameras <n>
//       camera <index> <grid width> <grid height> <feature count>
//         feat <px> <py> <descriptor hex> <unique id>  (per feature)
//     assoc <count> followed by <unique id> <point id> pairs
//     bow <count> followed by <word> <weight> pairs
//   points <count>
//     pt <id> <x y z> <descriptor hex>
// ---------------------------------------------------------------------------

namespace detail {

inline void expect_token(std::istream& in, const std::string& want) {
  std::string got;
  if (!(in >> got) || got != want)
    throw ConfigError("map file: expected '" + want + "', got '" + got + "'");
}

template <typename T>
T read_value(std::istream& in, const std::string& what) {
  T v;
  if (!(in >> v)) throw ConfigError("map file: bad value for " + what);
  return v;
}

}  // namespace detail

inline void BundledMap::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("map save: cannot open '" + path + "'");
  out << std::setprecision(17);
  out << "rigslam-map 1\n";
  out << "next_ids " << next_keyframe_id_ << ' ' << next_point_id_ << '\n';
  out << "keyframes " << keyframes_.size() << '\n';
  for (const auto& [id, kf] : keyframes_) {
    out << "kf " << id << ' ' << kf.frame.timestamp << ' '
        << kf.frame.pose.timestamp << '\n';
    const Mat3 r = kf.frame.pose.c1.rotation.matrix();
    out << "pose";
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) out << ' ' << r(i, j);
    for (int i = 0; i < 3; ++i)
      out << ' ' << kf.frame.pose.c1.translation(i);
    out << '\n';
    out << "cameras " << kf.frame.camera_count() << '\n';
    for (int c = 0; c < kf.frame.camera_count(); ++c) {
      const auto& feats = kf.frame.features[c];
      out << "camera " << c << ' ' << kf.frame.grids[c].width() << ' '
          << kf.frame.grids[c].height() << ' ' << feats.size() << '\n';
      for (const auto& f : feats)
        out << "feat " << f.pixel.x() << ' ' << f.pixel.y() << ' '
            << f.descriptor.to_hex() << ' ' << f.unique_id << '\n';
    }
    out << "assoc " << kf.point_for_unique.size() << '\n';
    for (const auto& [u, p] : kf.point_for_unique)
      out << u << ' ' << p << '\n';
    out << "bow " << kf.bow.size() << '\n';
    for (const auto& [w, v] : kf.bow) out << w << ' ' << v << '\n';
  }
  out << "points " << points_.size() << '\n';
  for (const auto& [id, pt] : points_)
    out << "pt " << id << ' ' << pt.position.x() << ' ' << pt.position.y()
        << ' ' << pt.position.z() << ' ' << pt.descriptor.to_hex() << '\n';
  if (!out) throw ConfigError("map save: write failed for '" + path + "'");
}

inline BundledMap BundledMap::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("map load: cannot open '" + path + "'");
  detail::expect_token(in, "rigslam-map");
  const int version = detail::read_value<int>(in, "version");
  if (version != 1)
    throw ConfigError("map load: unsupported version " +
                      std::to_string(version));

  BundledMap m;
  detail::expect_token(in, "next_ids");
  m.next_keyframe_id_ = detail::read_value<std::int64_t>(in, "next kf id");
  m.next_point_id_ = detail::read_value<std::int64_t>(in, "next point id");

  detail::expect_token(in, "keyframes");
  const auto nkf = detail::read_value<std::size_t>(in, "keyframe count");
  for (std::size_t k = 0; k < nkf; ++k) {
    detail::expect_token(in, "kf");
    BundledKeyframe kf;
    kf.id = detail::read_value<std::int64_t>(in, "keyframe id");
    kf.frame.timestamp = detail::read_value<double>(in, "timestamp");
    kf.frame.pose.timestamp = detail::read_value<double>(in, "pose time");
    detail::expect_token(in, "pose");
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        r(i, j) = detail::read_value<double>(in, "rotation entry");
    Vec3 t;
    for (int i = 0; i < 3; ++i)
      t(i) = detail::read_value<double>(in, "translation entry");
    kf.frame.pose.c1 = RigidTransform(Rotation3(r), t);
    detail::expect_token(in, "cameras");
    const int ncam = detail::read_value<int>(in, "camera count");
    kf.frame.features.resize(ncam);
    for (int c = 0; c < ncam; ++c) {
      detail::expect_token(in, "camera");
      const int ci = detail::read_value<int>(in, "camera index");
      if (ci != c) throw ConfigError("map load: camera index mismatch");
      const int w = detail::read_value<int>(in, "grid width");
      const int h = detail::read_value<int>(in, "grid height");
      const auto nfeat = detail::read_value<std::size_t>(in, "feature count");
      kf.frame.grids.emplace_back(w, h);
      for (std::size_t f = 0; f < nfeat; ++f) {
        detail::expect_token(in, "feat");
        Feature feat;
        feat.camera_id = c;
        feat.pixel.x() = detail::read_value<double>(in, "pixel x");
        feat.pixel.y() = detail::read_value<double>(in, "pixel y");
        feat.descriptor = Descriptor256::from_hex(
            detail::read_value<std::string>(in, "descriptor"));
        feat.unique_id = detail::read_value<std::int64_t>(in, "unique id");
        kf.frame.features[c].push_back(feat);
        kf.frame.grids[c].insert(static_cast<int>(f), feat.pixel);
        if (feat.unique_id >= 0)
          kf.frame.unique_ids[feat.unique_id].emplace_back(
              c, static_cast<int>(f));
      }
    }
    detail::expect_token(in, "assoc");
    const auto nassoc = detail::read_value<std::size_t>(in, "assoc count");
    for (std::size_t a = 0; a < nassoc; ++a) {
      const auto u = detail::read_value<std::int64_t>(in, "unique id");
      const auto p = detail::read_value<std::int64_t>(in, "point id");
      kf.point_for_unique[u] = p;
    }
    detail::expect_token(in, "bow");
    const auto nbow = detail::read_value<std::size_t>(in, "bow count");
    for (std::size_t b = 0; b < nbow; ++b) {
      const int w = detail::read_value<int>(in, "bow word");
      kf.bow[w] = detail::read_value<double>(in, "bow weight");
    }
    m.keyframes_.emplace(kf.id, std::move(kf));
  }

  detail::expect_token(in, "points");
  const auto npt = detail::read_value<std::size_t>(in, "point count");
  for (std::size_t k = 0; k < npt; ++k) {
    detail::expect_token(in, "pt");
    const auto id = detail::read_value<std::int64_t>(in, "point id");
    MapPoint pt;
    pt.position.x() = detail::read_value<double>(in, "x");
    pt.position.y() = detail::read_value<double>(in, "y");
    pt.position.z() = detail::read_value<double>(in, "z");
    pt.descriptor = Descriptor256::from_hex(
        detail::read_value<std::string>(in, "descriptor"));
    m.points_.emplace(id, std::move(pt));
  }

  // Rebuild the derived point observations and covisibility counts.
  for (auto& [kf_id, kf] : m.keyframes_) {
    for (const auto& [u, p] : kf.point_for_unique) {
      const auto pit = m.points_.find(p);
      if (pit == m.points_.end())
        throw ConfigError("map load: association to missing point " +
                          std::to_string(p));
      const auto uit = kf.frame.unique_ids.find(u);
      if (uit == kf.frame.unique_ids.end())
        throw ConfigError("map load: association to missing unique id " +
                          std::to_string(u));
      for (const auto& [cam, feat] : uit->second)
        pit->second.observations.insert({kf_id, cam, feat});
    }
  }
  m.covisibility_ = m.recompute_covisibility();
  return m;
}

}  // namespace rigslam
