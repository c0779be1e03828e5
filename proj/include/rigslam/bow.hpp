#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rigslam/descriptor.hpp"
#include "rigslam/errors.hpp"
#include "rigslam/map.hpp"

namespace rigslam {

using BowVector = std::map<int, double>;

/// Hierarchical descriptor vocabulary: a k-ary tree of depth at most L
/// whose leaves are the words. Every non-root node carries the bitwise
/// majority of the training descriptors routed through it.
class Vocabulary {
 public:
  struct Node {
    Descriptor256 center;
    int parent = -1;
    std::vector<int> children;  // empty => leaf
    int word = -1;              // leaf word id, -1 on interior nodes
  };

  Vocabulary() = default;

  int branching() const { return k_; }
  int depth() const { return depth_; }
  int word_count() const { return word_count_; }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Greedy descent: at each level pick the child with the smallest
  /// Hamming distance (ties toward the earlier child).
  int word_for(const Descriptor256& d) const {
    if (nodes_.empty()) throw Error("vocabulary: not trained");
    int node = 0;
    while (!nodes_[node].children.empty()) {
      int best = -1, best_dist = 257;
      for (int c : nodes_[node].children) {
        const int dist = hamming_distance(d, nodes_[c].center);
        if (dist < best_dist) {
          best_dist = dist;
          best = c;
        }
      }
      node = best;
    }
    return nodes_[node].word;
  }

  /// Corpus idf for a word, from the training pool.
  double idf(int word) const {
    if (word < 0 || word >= word_count_)
      throw IndexOutOfRange("vocabulary: bad word id");
    return idf_[word];
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw Error("vocabulary: cannot open " + path);
    write(os);
  }

  void write(std::ostream& os) const {
    os << "rigslam-vocab 1\n"
       << k_ << ' ' << depth_ << ' ' << word_count_ << ' ' << nodes_.size()
       << '\n'
       << std::setprecision(17);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      os << "node " << i << ' ' << n.parent << ' ' << n.word << ' '
         << n.center.to_hex() << '\n';
    }
    for (int w = 0; w < word_count_; ++w) os << "idf " << w << ' ' << idf_[w] << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("vocabulary: cannot open " + path);
    return read(is);
  }

  static Vocabulary read(std::istream& is) {
    std::string magic;
    int version = 0;
    if (!(is >> magic >> version) || magic != "rigslam-vocab" || version != 1)
      throw ConfigError("vocabulary: unrecognized header");
    Vocabulary v;
    std::size_t node_count = 0;
    if (!(is >> v.k_ >> v.depth_ >> v.word_count_ >> node_count))
      throw ConfigError("vocabulary: malformed size line");
    v.nodes_.resize(node_count);
    v.idf_.assign(v.word_count_, 0.0);
    std::vector<bool> seen_node(node_count, false), seen_idf(v.word_count_, false);
    std::string tag;
    while (is >> tag) {
      if (tag == "node") {
        std::size_t id;
        Node n;
        std::string hex;
        if (!(is >> id >> n.parent >> n.word >> hex) || id >= node_count)
          throw ConfigError("vocabulary: malformed node record");
        n.center = Descriptor256::from_hex(hex);
        v.nodes_[id] = n;
        seen_node[id] = true;
      } else if (tag == "idf") {
        int w;
        double value;
        if (!(is >> w >> value) || w < 0 || w >= v.word_count_)
          throw ConfigError("vocabulary: malformed idf record");
        v.idf_[w] = value;
        seen_idf[w] = true;
      } else {
        throw ConfigError("vocabulary: unknown record '" + tag + "'");
      }
    }
    for (bool s : seen_node)
      if (!s) throw ConfigError("vocabulary: missing node record");
    for (bool s : seen_idf)
      if (!s) throw ConfigError("vocabulary: missing idf record");
    // Rebuild child lists; creation order (ascending id) is the descent order.
    for (std::size_t i = 1; i < node_count; ++i) {
      if (v.nodes_[i].parent < 0 || v.nodes_[i].parent >= int(node_count))
        throw ConfigError("vocabulary: bad parent link");
      v.nodes_[v.nodes_[i].parent].children.push_back(int(i));
    }
    std::set<int> words;
    for (const auto& n : v.nodes_)
      if (n.children.empty() && n.word >= 0) words.insert(n.word);
    if (int(words.size()) != v.word_count_)
      throw ConfigError("vocabulary: leaf words do not cover the word count");
    return v;
  }

 private:
  friend Vocabulary train_vocabulary(const std::vector<Descriptor256>&, int,
                                     int, std::uint64_t);
  int k_ = 0;
  int depth_ = 0;
  int word_count_ = 0;
  std::vector<Node> nodes_;
  std::vector<double> idf_;
};

namespace detail {

inline Descriptor256 majority_center(const std::vector<Descriptor256>& pool,
                                     const std::vector<int>& members) {
  Descriptor256 c;
  for (int bit = 0; bit < 256; ++bit) {
    int ones = 0;
    for (int m : members) ones += pool[m].bit(bit);
    if (2 * ones >= int(members.size())) c.set_bit(bit, true);
  }
  return c;
}

/// One k-medians split under Hamming distance. Seeding is farthest-first
/// from a random start, so the result is deterministic given the rng
/// state. Returns the member lists; centers come out via majority.
inline std::vector<std::vector<int>> kmedians_split(
    const std::vector<Descriptor256>& pool, const std::vector<int>& members,
    int k, std::mt19937_64& rng) {
  std::vector<int> center_members;  // indices into `members`
  std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
  center_members.push_back(int(pick(rng)));
  std::vector<int> min_dist(members.size(), 257);
  while (int(center_members.size()) < k) {
    const Descriptor256& last = pool[members[center_members.back()]];
    int far_idx = -1, far_dist = -1;
    for (std::size_t i = 0; i < members.size(); ++i) {
      min_dist[i] = std::min(min_dist[i],
                             hamming_distance(pool[members[i]], last));
      if (min_dist[i] > far_dist) {
        far_dist = min_dist[i];
        far_idx = int(i);
      }
    }
    center_members.push_back(far_idx);
  }

  std::vector<Descriptor256> centers;
  centers.reserve(k);
  for (int cm : center_members) centers.push_back(pool[members[cm]]);

  std::vector<int> assign(members.size(), -1);
  for (int round = 0; round < 16; ++round) {
    bool changed = false;
    for (std::size_t i = 0; i < members.size(); ++i) {
      int best = 0, best_dist = 257;
      for (int c = 0; c < k; ++c) {
        const int dist = hamming_distance(pool[members[i]], centers[c]);
        if (dist < best_dist) {
          best_dist = dist;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    // Re-seed any emptied cluster with the member farthest from its center.
    for (int c = 0; c < k; ++c) {
      if (std::count(assign.begin(), assign.end(), c)) continue;
      int far_idx = -1, far_dist = -1;
      for (std::size_t i = 0; i < members.size(); ++i) {
        const int dist =
            hamming_distance(pool[members[i]], centers[assign[i]]);
        if (dist > far_dist &&
            std::count(assign.begin(), assign.end(), assign[i]) > 1) {
          far_dist = dist;
          far_idx = int(i);
        }
      }
      if (far_idx >= 0) {
        assign[far_idx] = c;
        centers[c] = pool[members[far_idx]];
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<std::vector<int>> groups(k);
    for (std::size_t i = 0; i < members.size(); ++i)
      groups[assign[i]].push_back(int(i));
    for (int c = 0; c < k; ++c)
      if (!groups[c].empty()) {
        std::vector<int> abs_members;
        for (int i : groups[c]) abs_members.push_back(members[i]);
        centers[c] = majority_center(pool, abs_members);
      }
  }

  std::vector<std::vector<int>> out(k);
  for (std::size_t i = 0; i < members.size(); ++i)
    out[assign[i]].push_back(members[i]);
  out.erase(std::remove_if(out.begin(), out.end(),
                           [](const auto& g) { return g.empty(); }),
            out.end());
  return out;
}

}  // namespace detail

/// Builds the vocabulary tree by recursive k-medians. Branches with fewer
/// than k descriptors stop splitting early, so sparse corpora yield fewer
/// than k^L words. The idf table counts training descriptors per word with
/// add-half smoothing, so every word has positive weight.
inline Vocabulary train_vocabulary(const std::vector<Descriptor256>& pool,
                                   int k, int L, std::uint64_t seed) {
  if (k < 2 || L < 1) throw ConfigError("vocabulary: need k >= 2, L >= 1");
  if (int(pool.size()) < k)
    throw InsufficientData("vocabulary: fewer descriptors than branches");

  Vocabulary v;
  v.k_ = k;
  v.depth_ = L;
  v.nodes_.push_back({});  // root, no center
  std::mt19937_64 rng(seed);

  struct Job {
    int node;
    int level;
    std::vector<int> members;
  };
  std::vector<Job> stack;
  {
    std::vector<int> all(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) all[i] = int(i);
    stack.push_back({0, 0, std::move(all)});
  }
  std::vector<int> word_training_count;
  while (!stack.empty()) {
    Job job = std::move(stack.back());
    stack.pop_back();
    const bool leaf = job.level == L || int(job.members.size()) < k;
    if (leaf) {
      v.nodes_[job.node].word = int(word_training_count.size());
      word_training_count.push_back(int(job.members.size()));
      continue;
    }
    auto groups = detail::kmedians_split(pool, job.members, k, rng);
    // Depth-first in reverse so children are processed in creation order.
    std::vector<Job> children;
    for (auto& g : groups) {
      Vocabulary::Node n;
      n.center = detail::majority_center(pool, g);
      n.parent = job.node;
      const int id = int(v.nodes_.size());
      v.nodes_.push_back(n);
      v.nodes_[job.node].children.push_back(id);
      children.push_back({id, job.level + 1, std::move(g)});
    }
    for (auto it = children.rbegin(); it != children.rend(); ++it)
      stack.push_back(std::move(*it));
  }
  v.word_count_ = int(word_training_count.size());
  const double n = double(pool.size());
  for (int c : word_training_count)
    v.idf_.push_back(std::log((n + 1.0) / (c + 0.5)));
  return v;
}

namespace detail {

/// One representative descriptor per unique feature id: the first
/// observing camera's copy.
inline std::map<int, int> word_counts(const Vocabulary& vocab,
                                      const BundledFrame& frame) {
  std::map<int, int> counts;
  for (const auto& [unique, views] : frame.unique_ids) {
    const auto& [cam, idx] = views.front();
    ++counts[vocab.word_for(frame.features[cam][idx].descriptor)];
  }
  return counts;
}

inline BowVector weighted_bow(const std::map<int, int>& counts,
                              const std::vector<double>& idf) {
  BowVector bow;
  double total = 0.0;
  for (const auto& [w, c] : counts) {
    const double weight = c * idf[w];
    bow[w] = weight;
    total += weight;
  }
  if (total > 0.0)
    for (auto& [w, weight] : bow) weight /= total;
  return bow;
}

}  // namespace detail

/// tf-idf bag-of-words vector of a keyframe using the vocabulary's corpus
/// idf. L1-normalized; empty when the keyframe has no bundled features.
inline BowVector quantize(const Vocabulary& vocab, const BundledKeyframe& kf) {
  std::vector<double> idf(vocab.word_count());
  for (int w = 0; w < vocab.word_count(); ++w) idf[w] = vocab.idf(w);
  return detail::weighted_bow(detail::word_counts(vocab, kf.frame), idf);
}

/// L1 score: 1 - 0.5 * sum |a_i - b_i|, in [0,1] for L1-normalized inputs.
inline double similarity(const BowVector& a, const BowVector& b) {
  double l1 = 0.0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() || ib != b.end()) {
    if (ib == b.end() || (ia != a.end() && ia->first < ib->first))
      l1 += std::abs((ia++)->second);
    else if (ia == a.end() || ib->first < ia->first)
      l1 += std::abs((ib++)->second);
    else {
      l1 += std::abs(ia->second - ib->second);
      ++ia;
      ++ib;
    }
  }
  return std::clamp(1.0 - 0.5 * l1, 0.0, 1.0);
}

/// Keyframe database for loop-candidate retrieval. Stores raw word counts
/// plus an inverted index; idf is recomputed over the current contents the
/// next time a vector is needed after an insert or remove, and the
/// materialized vectors are cached until then.
class KeyframeDatabase {
 public:
  explicit KeyframeDatabase(const Vocabulary& vocab) : vocab_(&vocab) {}

  void insert(const BundledKeyframe& kf) {
    if (counts_.count(kf.id))
      throw Error("keyframe database: duplicate keyframe id");
    auto counts = detail::word_counts(*vocab_, kf.frame);
    for (const auto& [w, c] : counts) index_[w].insert(kf.id);
    counts_[kf.id] = std::move(counts);
    order_.push_back(kf.id);
    dirty_ = true;
  }

  void remove(std::int64_t kf_id) {
    const auto it = counts_.find(kf_id);
    if (it == counts_.end())
      throw UnknownId("keyframe database: unknown keyframe");
    for (const auto& [w, c] : it->second) {
      auto& list = index_[w];
      list.erase(kf_id);
      if (list.empty()) index_.erase(w);
    }
    counts_.erase(it);
    order_.erase(std::remove(order_.begin(), order_.end(), kf_id),
                 order_.end());
    dirty_ = true;
  }

  bool contains(std::int64_t kf_id) const { return counts_.count(kf_id) > 0; }
  std::size_t size() const { return counts_.size(); }
  const std::vector<std::int64_t>& insertion_order() const { return order_; }

  const BowVector& bow(std::int64_t kf_id) const {
    materialize();
    const auto it = cache_.find(kf_id);
    if (it == cache_.end())
      throw UnknownId("keyframe database: unknown keyframe");
    return it->second;
  }

  /// Keyframes sharing at least one word with kf_id, via the index.
  std::set<std::int64_t> sharing_words(std::int64_t kf_id) const {
    const auto it = counts_.find(kf_id);
    if (it == counts_.end())
      throw UnknownId("keyframe database: unknown keyframe");
    std::set<std::int64_t> out;
    for (const auto& [w, c] : it->second) {
      const auto lit = index_.find(w);
      if (lit == index_.end()) continue;
      out.insert(lit->second.begin(), lit->second.end());
    }
    out.erase(kf_id);
    return out;
  }

  /// Index consistency: index[w] holds exactly the keyframes whose word
  /// counts (and therefore materialized vectors) contain w.
  void check_index() const {
    std::map<int, std::set<std::int64_t>> expected;
    for (const auto& [kf, counts] : counts_)
      for (const auto& [w, c] : counts) expected[w].insert(kf);
    if (expected != index_)
      throw Error("keyframe database: inverted index out of sync");
    materialize();
    for (const auto& [kf, counts] : counts_) {
      const auto& vec = cache_.at(kf);
      if (vec.size() != counts.size())
        throw Error("keyframe database: vector support mismatch");
      for (const auto& [w, c] : counts)
        if (!vec.count(w))
          throw Error("keyframe database: vector support mismatch");
    }
  }

 private:
  void materialize() const {
    if (!dirty_) return;
    // Database-side idf: a word seen in every keyframe carries little
    // information. Add-half smoothing keeps all weights positive.
    const double n = double(counts_.size());
    std::vector<double> idf(vocab_->word_count(), std::log((n + 1.0) / 0.5));
    for (const auto& [w, list] : index_)
      idf[w] = std::log((n + 1.0) / (double(list.size()) + 0.5));
    cache_.clear();
    for (const auto& [kf, counts] : counts_)
      cache_[kf] = detail::weighted_bow(counts, idf);
    dirty_ = false;
  }

  const Vocabulary* vocab_;
  std::map<std::int64_t, std::map<int, int>> counts_;
  std::map<int, std::set<std::int64_t>> index_;
  std::vector<std::int64_t> order_;
  mutable bool dirty_ = true;
  mutable std::map<std::int64_t, BowVector> cache_;
};

struct LoopDetectorSettings {
  int exclusion_window = 10;    // recent keyframes never proposed
  int required_consecutive = 3; // detections before a candidate is reported
};

/// Score-gated loop proposal with temporal persistence. The query keyframe
/// must already be in the database; covisibility neighbors set the score
/// bar (s_min) and are excluded as candidates along with the most recent
/// keyframes. A candidate is reported only after required_consecutive
/// detections land on the same place (equal or covisible candidates).
class LoopDetector {
 public:
  explicit LoopDetector(LoopDetectorSettings settings = {})
      : settings_(settings) {}

  std::optional<std::int64_t> detect(const BundledMap& map,
                                     const KeyframeDatabase& db,
                                     std::int64_t current) {
    const auto neighbors = map.covisibility().neighbors(current);
    if (neighbors.empty()) return reset();

    const BowVector& cur = db.bow(current);
    double s_min = 1.0;
    std::set<std::int64_t> excluded{current};
    for (const auto& [id, weight] : neighbors) {
      excluded.insert(id);
      if (db.contains(id)) s_min = std::min(s_min, similarity(cur, db.bow(id)));
    }
    const auto& order = db.insertion_order();
    const auto cur_at = std::find(order.begin(), order.end(), current);
    int remaining = settings_.exclusion_window;
    for (auto it = cur_at; it != order.begin() && remaining > 0; --remaining)
      excluded.insert(*--it);

    std::int64_t best = -1;
    double best_score = -1.0;
    for (std::int64_t cand : db.sharing_words(current)) {
      if (excluded.count(cand)) continue;
      const double s = similarity(cur, db.bow(cand));
      if (s > best_score) {
        best_score = s;
        best = cand;
      }
    }
    if (best < 0 || best_score < s_min) return reset();

    const bool same_place =
        streak_ > 0 && (best == last_candidate_ ||
                        map.covisibility().has_edge(best, last_candidate_));
    streak_ = same_place ? streak_ + 1 : 1;
    last_candidate_ = best;
    if (streak_ < settings_.required_consecutive) return std::nullopt;
    reset();
    return best;
  }

  int streak() const { return streak_; }

 private:
  std::optional<std::int64_t> reset() {
    streak_ = 0;
    last_candidate_ = -1;
    return std::nullopt;
  }

  LoopDetectorSettings settings_;
  int streak_ = 0;
  std::int64_t last_candidate_ = -1;
};

}  // namespace rigslam
