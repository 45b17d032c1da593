#ifndef LCD_SPATIAL_HPP
#define LCD_SPATIAL_HPP

// Exact nearest-neighbor structures over 3D points: a k-d tree for nearest
// and k-nearest queries, and a uniform hash grid for fixed-radius queries.

#include <algorithm>
#include <array>
#include <exception>
#include <mutex>
#include <optional>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <thread>
#include <unordered_map>
#include <vector>

#include "lcd/geom.hpp"

namespace lcd {

class KdTree {
 public:
  struct Neighbor {
    std::size_t index;
    double squared_distance;
  };

  KdTree() = default;
  explicit KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
    order_.resize(points_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    nodes_.reserve(2 * points_.size() / kLeafSize + 2);
    if (!points_.empty()) build(0, points_.size());
  }

  std::size_t size() const { return points_.size(); }
  const std::vector<Vec3>& points() const { return points_; }

  // Nearest point with squared distance <= max_squared_distance. Ties go to
  // the lowest index.
  std::optional<Neighbor> nearest(
      const Vec3& q,
      double max_squared_distance =
          std::numeric_limits<double>::infinity()) const {
    if (points_.empty()) return std::nullopt;
    Neighbor best{std::numeric_limits<std::size_t>::max(),
                  max_squared_distance};
    bool found = false;
    search_nearest(0, q, best, found);
    if (!found) return std::nullopt;
    return best;
  }

  // k nearest sorted by (distance, index).
  std::vector<Neighbor> knn(const Vec3& q, std::size_t k) const {
    std::vector<Neighbor> heap;  // max-heap on (distance, index)
    if (k == 0 || points_.empty()) return heap;
    heap.reserve(k + 1);
    search_knn(0, q, k, heap);
    std::sort_heap(heap.begin(), heap.end(), less);
    return heap;
  }

 private:
  static constexpr std::size_t kLeafSize = 12;

  struct Node {
    std::size_t begin, end;  // range in order_
    int axis = -1;           // -1: leaf
    double split = 0.0;
    std::size_t left = 0, right = 0;
  };

  static bool less(const Neighbor& a, const Neighbor& b) {
    return a.squared_distance < b.squared_distance ||
           (a.squared_distance == b.squared_distance && a.index < b.index);
  }

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back(Node{begin, end});
    if (end - begin <= kLeafSize) return id;
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid,
                     order_.begin() + end, [&](std::size_t a, std::size_t b) {
                       return points_[a](axis) < points_[b](axis);
                     });
    const double split = points_[order_[mid]](axis);
    const std::size_t left = build(begin, mid);
    const std::size_t right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void search_nearest(std::size_t id, const Vec3& q, Neighbor& best,
                      bool& found) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const std::size_t idx = order_[i];
        const double d2 = (points_[idx] - q).squaredNorm();
        if (d2 < best.squared_distance ||
            (d2 == best.squared_distance && idx < best.index)) {
          best = {idx, d2};
          found = true;
        }
      }
      return;
    }
    const double diff = q(node.axis) - node.split;
    const std::size_t first = diff < 0 ? node.left : node.right;
    const std::size_t second = diff < 0 ? node.right : node.left;
    search_nearest(first, q, best, found);
    if (diff * diff <= best.squared_distance) {
      search_nearest(second, q, best, found);
    }
  }

  void search_knn(std::size_t id, const Vec3& q, std::size_t k,
                  std::vector<Neighbor>& heap) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const std::size_t idx = order_[i];
        const Neighbor cand{idx, (points_[idx] - q).squaredNorm()};
        if (heap.size() < k) {
          heap.push_back(cand);
          std::push_heap(heap.begin(), heap.end(), less);
        } else if (less(cand, heap.front())) {
          std::pop_heap(heap.begin(), heap.end(), less);
          heap.back() = cand;
          std::push_heap(heap.begin(), heap.end(), less);
        }
      }
      return;
    }
    const double diff = q(node.axis) - node.split;
    const std::size_t first = diff < 0 ? node.left : node.right;
    const std::size_t second = diff < 0 ? node.right : node.left;
    search_knn(first, q, k, heap);
    if (heap.size() < k || diff * diff <= heap.front().squared_distance) {
      search_knn(second, q, k, heap);
    }
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

// Uniform hash grid with cell size equal to the largest query radius.
// radius() returns every point within the given radius (<= cell size), in
// ascending index order.
class HashGrid {
 public:
  HashGrid(const std::vector<Vec3>& points, double cell_size)
      : points_(&points), cell_(cell_size) {
    if (!(cell_size > 0.0)) throw InvalidArgument("HashGrid: cell size <= 0");
    cells_.reserve(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
      cells_[key(cell_of(points[i]))].push_back(i);
    }
  }

  double cell_size() const { return cell_; }

  void radius(const Vec3& q, double r, std::vector<std::size_t>& out) const {
    out.clear();
    if (r > cell_) throw InvalidArgument("HashGrid: radius exceeds cell size");
    const auto c = cell_of(q);
    const double r2 = r * r;
    for (std::int64_t dz = -1; dz <= 1; ++dz) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          auto it = cells_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
          if (it == cells_.end()) continue;
          for (auto idx : it->second) {
            if (((*points_)[idx] - q).squaredNorm() <= r2) out.push_back(idx);
          }
        }
      }
    }
    std::sort(out.begin(), out.end());
  }

 private:
  using Cell = std::array<std::int64_t, 3>;

  Cell cell_of(const Vec3& p) const {
    return {static_cast<std::int64_t>(std::floor(p.x() / cell_)),
            static_cast<std::int64_t>(std::floor(p.y() / cell_)),
            static_cast<std::int64_t>(std::floor(p.z() / cell_))};
  }
  static std::uint64_t key(const Cell& c) {
    // 21 bits per axis covers +-1e6 cells
    constexpr std::uint64_t mask = (1ULL << 21) - 1;
    return (static_cast<std::uint64_t>(c[0]) & mask) |
           ((static_cast<std::uint64_t>(c[1]) & mask) << 21) |
           ((static_cast<std::uint64_t>(c[2]) & mask) << 42);
  }

  const std::vector<Vec3>* points_;
  double cell_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells_;
};

// Runs fn(i) for i in [0, n) on up to `threads` workers using contiguous
// blocks. fn must only write state owned by index i.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(threads);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const std::size_t block = (n + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t begin = t * block, end = std::min(n, begin + block);
    if (begin >= end) break;
    workers.emplace_back([&, begin, end] {
      try {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace lcd

#endif  // LCD_SPATIAL_HPP
