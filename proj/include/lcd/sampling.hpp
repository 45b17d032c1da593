#ifndef LCD_SAMPLING_HPP
#define LCD_SAMPLING_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "lcd/error.hpp"
#include "lcd/geom.hpp"

namespace lcd {

// Axis-aligned voxel grid. Defaults: 0.1 m voxels over x, y in +-70.4 m and
// z in [-1, 3] m.
struct VoxelGridSpec {
  double voxel_size = 0.1;
  Vec3 min_bound = Vec3(-70.4, -70.4, -1.0);
  Vec3 max_bound = Vec3(70.4, 70.4, 3.0);

  void validate() const {
    if (!(voxel_size > 0.0)) {
      throw InvalidArgument("VoxelGridSpec: voxel_size must be > 0");
    }
    if (!(max_bound.array() > min_bound.array()).all()) {
      throw InvalidArgument("VoxelGridSpec: max bound must exceed min bound");
    }
  }
};

// One point per occupied voxel: the centroid (and mean intensity) of its
// members. Points outside [min, max) are dropped. Output is ordered by
// ascending voxel index, z-major then y then x. An empty result means
// nothing fell inside the bounds.
inline PointCloud voxel_downsample(const PointCloud& cloud,
                                   const VoxelGridSpec& spec) {
  require_non_empty(cloud, "voxel_downsample");
  spec.validate();
  using Key = std::array<std::int64_t, 3>;  // (z, y, x)
  std::vector<std::pair<Key, std::size_t>> keyed;
  keyed.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud[i].position;
    if ((p.array() < spec.min_bound.array()).any() ||
        (p.array() >= spec.max_bound.array()).any()) {
      continue;
    }
    const Vec3 rel = (p - spec.min_bound) / spec.voxel_size;
    keyed.push_back({Key{static_cast<std::int64_t>(std::floor(rel.z())),
                         static_cast<std::int64_t>(std::floor(rel.y())),
                         static_cast<std::int64_t>(std::floor(rel.x()))},
                     i});
  }
  std::sort(keyed.begin(), keyed.end());

  PointCloud out;
  out.frame_id = cloud.frame_id;
  for (std::size_t begin = 0; begin < keyed.size();) {
    std::size_t end = begin;
    Vec3 sum = Vec3::Zero();
    double intensity = 0.0;
    while (end < keyed.size() && keyed[end].first == keyed[begin].first) {
      sum += cloud[keyed[end].second].position;
      intensity += cloud[keyed[end].second].intensity;
      ++end;
    }
    const auto count = static_cast<double>(end - begin);
    out.points.emplace_back(sum / count, intensity / count);
    begin = end;
  }
  return out;
}

struct KeypointSet {
  std::vector<std::size_t> indices;  // into the source cloud, unique
  std::vector<Vec3> coordinates;

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
};

inline KeypointSet keypoints_from_indices(const PointCloud& cloud,
                                          std::vector<std::size_t> indices) {
  KeypointSet kp;
  kp.coordinates.reserve(indices.size());
  for (auto i : indices) kp.coordinates.push_back(cloud.points.at(i).position);
  kp.indices = std::move(indices);
  return kp;
}

// Greedy max-min (Gonzalez) selection. Starts at seed_index and repeatedly
// takes the point farthest from the chosen set; ties go to the lowest index.
// Returns every index when n >= |cloud|.
inline KeypointSet farthest_point_sampling(const PointCloud& cloud,
                                           std::size_t n,
                                           std::size_t seed_index = 0) {
  require_non_empty(cloud, "farthest_point_sampling");
  if (n == 0) throw InvalidArgument("farthest_point_sampling: n must be >= 1");
  const std::size_t total = cloud.size();
  std::vector<std::size_t> chosen;
  if (n >= total) {
    chosen.resize(total);
    for (std::size_t i = 0; i < total; ++i) chosen[i] = i;
    return keypoints_from_indices(cloud, std::move(chosen));
  }
  if (seed_index >= total) {
    throw InvalidArgument("farthest_point_sampling: seed index out of range");
  }
  chosen.reserve(n);
  // Coordinates as separate arrays keep the inner loop vectorizable.
  std::vector<double> xs(total), ys(total), zs(total);
  for (std::size_t i = 0; i < total; ++i) {
    xs[i] = cloud[i].x();
    ys[i] = cloud[i].y();
    zs[i] = cloud[i].z();
  }
  std::vector<double> min_d2(total, std::numeric_limits<double>::infinity());
  std::size_t current = seed_index;
  for (std::size_t k = 0; k < n; ++k) {
    chosen.push_back(current);
    min_d2[current] = -1.0;  // never re-picked, even among duplicates
    const double cx = xs[current], cy = ys[current], cz = zs[current];
    std::size_t best = 0;
    double best_d2 = -1.0;
    for (std::size_t i = 0; i < total; ++i) {
      const double dx = xs[i] - cx, dy = ys[i] - cy, dz = zs[i] - cz;
      const double d2 = std::min(min_d2[i], dx * dx + dy * dy + dz * dz);
      min_d2[i] = d2;
      if (d2 > best_d2) {  // strict: lowest index wins ties
        best_d2 = d2;
        best = i;
      }
    }
    current = best;
  }
  return keypoints_from_indices(cloud, std::move(chosen));
}

}  // namespace lcd

#endif  // LCD_SAMPLING_HPP
