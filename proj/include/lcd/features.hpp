#ifndef LCD_FEATURES_HPP
#define LCD_FEATURES_HPP

// Handcrafted keypoint descriptor. Every channel is computed from
// quantities that do not change under translation or rotation about z:
// covariance eigenvalues, |n_z| of point normals, neighbor distances and
// relative heights.

#include <Eigen/Eigenvalues>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#include "lcd/error.hpp"
#include "lcd/geom.hpp"
#include "lcd/sampling.hpp"
#include "lcd/spatial.hpp"

namespace lcd {

using FeatureMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CostMatrix = Eigen::MatrixXd;

struct FeatureSpec {
  std::vector<double> radii = {0.6, 1.2, 2.4};  // m
  int angle_bins = 8;
  int radial_bins = 8;
  // Blocks with fewer neighbors than this are left at zero.
  std::size_t min_neighbors = 5;
  std::size_t normal_neighbors = 10;
  // Height context over the largest radius: histogram of neighbor heights
  // above the lowest neighbor, plus two scalars. 0 bins disables the block.
  int height_bins = 8;
  double height_range = 4.0;  // m
  unsigned threads = 1;

  // eigenvalue ratios (3) + angle hist + radial hist + height stats (2) +
  // neighbor count (1), per radius
  int block_size() const { return 3 + angle_bins + radial_bins + 2 + 1; }
  int height_block_size() const { return height_bins > 0 ? height_bins + 2 : 0; }
  int dimension() const {
    return static_cast<int>(radii.size()) * block_size() + height_block_size();
  }

  void validate() const {
    if (radii.empty()) throw InvalidArgument("FeatureSpec: no radii");
    for (double r : radii) {
      if (!(r > 0.0)) throw InvalidArgument("FeatureSpec: radius must be > 0");
    }
    if (angle_bins < 1 || radial_bins < 1 || normal_neighbors < 3 ||
        height_bins < 0 || !(height_range > 0.0)) {
      throw InvalidArgument("FeatureSpec: invalid bin or neighbor counts");
    }
  }

  // FNV-1a over the fields that change the descriptor layout or values.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    };
    for (double r : radii) mix(std::bit_cast<std::uint64_t>(r));
    mix(static_cast<std::uint64_t>(angle_bins));
    mix(static_cast<std::uint64_t>(radial_bins));
    mix(min_neighbors);
    mix(normal_neighbors);
    mix(static_cast<std::uint64_t>(height_bins));
    mix(std::bit_cast<std::uint64_t>(height_range));
    return h;
  }
};

struct KeypointFeatures {
  KeypointSet keypoints;
  FeatureMatrix features;  // N x D, unit rows
  std::uint64_t descriptor_spec_hash = 0;

  std::size_t size() const { return keypoints.size(); }
  int dimension() const { return static_cast<int>(features.cols()); }
};

// Unit normal per point from the covariance of its k nearest neighbors
// (smallest eigenvector). Orientation is unspecified.
inline std::vector<Vec3> estimate_normals(const KdTree& tree, std::size_t k,
                                          unsigned threads = 1) {
  const auto& pts = tree.points();
  std::vector<Vec3> normals(pts.size(), Vec3::UnitZ());
  parallel_for(pts.size(), threads, [&](std::size_t i) {
    const auto nn = tree.knn(pts[i], k);
    if (nn.size() < 3) return;
    Vec3 mean = Vec3::Zero();
    for (const auto& n : nn) mean += pts[n.index];
    mean /= static_cast<double>(nn.size());
    Mat3 cov = Mat3::Zero();
    for (const auto& n : nn) {
      const Vec3 d = pts[n.index] - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    normals[i] = es.eigenvectors().col(0).normalized();
  });
  return normals;
}

namespace detail {

// Linear interpolation between neighboring bin centers over [0, 1].
inline void soft_bin(double v, int bins, double weight, double* hist) {
  const double pos = std::clamp(v, 0.0, 1.0) * bins - 0.5;
  if (pos <= 0.0) {
    hist[0] += weight;
    return;
  }
  if (pos >= bins - 1) {
    hist[bins - 1] += weight;
    return;
  }
  const int lo = static_cast<int>(pos);
  const double frac = pos - lo;
  hist[lo] += weight * (1.0 - frac);
  hist[lo + 1] += weight * frac;
}

// `inclination[i]` is the angle between the normal of point i and the
// vertical, scaled to [0, 1].
inline void describe_block(const std::vector<Vec3>& pts,
                           const std::vector<double>& inclination,
                           const std::vector<std::size_t>& nb, const Vec3& kp,
                           double radius, const FeatureSpec& spec,
                           double* out) {
  if (nb.size() < spec.min_neighbors) return;  // stays zero
  const double count = static_cast<double>(nb.size());
  Vec3 mean = Vec3::Zero();
  for (auto i : nb) mean += pts[i];
  mean /= count;
  Mat3 cov = Mat3::Zero();
  double dz_sum = 0.0, dz_sq = 0.0;
  for (auto i : nb) {
    const Vec3 d = pts[i] - mean;
    cov += d * d.transpose();
    const double dz = (pts[i].z() - kp.z()) / radius;
    dz_sum += dz;
    dz_sq += dz * dz;
  }
  cov /= count;
  Eigen::SelfAdjointEigenSolver<Mat3> es(cov, Eigen::EigenvaluesOnly);
  const double e1 = std::max(es.eigenvalues()(2), 0.0);
  const double e2 = std::max(es.eigenvalues()(1), 0.0);
  const double e3 = std::max(es.eigenvalues()(0), 0.0);
  if (e1 > 0.0) {
    out[0] = (e1 - e2) / e1;  // linearity
    out[1] = (e2 - e3) / e1;  // planarity
    out[2] = e3 / e1;         // scattering
  }
  double* angle = out + 3;
  double* radial = angle + spec.angle_bins;
  const double w = 1.0 / count;
  for (auto i : nb) {
    soft_bin(inclination[i], spec.angle_bins, w, angle);
    soft_bin((pts[i] - kp).norm() / radius, spec.radial_bins, w, radial);
  }
  double* tail = radial + spec.radial_bins;
  const double dz_mean = dz_sum / count;
  tail[0] = dz_mean;
  tail[1] = std::sqrt(std::max(0.0, dz_sq / count - dz_mean * dz_mean));
  tail[2] = std::log1p(count) / 8.0;
}

// Heights relative to the lowest neighbor: a soft histogram, the keypoint's
// own height and the local vertical extent, all scaled by height_range.
inline void describe_heights(const std::vector<Vec3>& pts,
                             const std::vector<std::size_t>& nb, const Vec3& kp,
                             const FeatureSpec& spec, double* out) {
  if (nb.size() < spec.min_neighbors) return;
  double lo = kp.z(), hi = kp.z();
  for (auto i : nb) {
    lo = std::min(lo, pts[i].z());
    hi = std::max(hi, pts[i].z());
  }
  const double w = 1.0 / static_cast<double>(nb.size());
  for (auto i : nb) {
    soft_bin((pts[i].z() - lo) / spec.height_range, spec.height_bins, w, out);
  }
  out[spec.height_bins] = (kp.z() - lo) / spec.height_range;
  out[spec.height_bins + 1] = (hi - lo) / spec.height_range;
}

}  // namespace detail

// Features of `keypoints` (drawn from `cloud`) concatenated over all radii
// and L2-normalized. A keypoint with no populated block gets the designated
// empty vector (all entries 1/sqrt(D)).
inline KeypointFeatures extract_features(const PointCloud& cloud,
                                         const KeypointSet& keypoints,
                                         const FeatureSpec& spec) {
  spec.validate();
  if (keypoints.empty()) {
    throw InvalidArgument("extract_features: empty keypoint set");
  }
  require_non_empty(cloud, "extract_features");
  const auto pts = cloud.positions();
  const KdTree tree(pts);
  const auto normals = estimate_normals(tree, spec.normal_neighbors, spec.threads);
  const double max_radius = *std::max_element(spec.radii.begin(), spec.radii.end());
  const HashGrid grid(pts, max_radius);

  const int dim = spec.dimension();
  const int block = spec.block_size();
  KeypointFeatures out;
  out.keypoints = keypoints;
  out.descriptor_spec_hash = spec.hash();
  out.features = FeatureMatrix::Zero(static_cast<Eigen::Index>(keypoints.size()), dim);
  const double empty_value = 1.0 / std::sqrt(static_cast<double>(dim));

  std::vector<double> inclination(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    inclination[i] = std::acos(std::min(1.0, std::abs(normals[i].z()))) / (kPi / 2.0);
  }

  parallel_for(keypoints.size(), spec.threads, [&](std::size_t k) {
    std::vector<std::size_t> all, nb;
    const Vec3& kp = keypoints.coordinates[k];
    double* row = out.features.row(static_cast<Eigen::Index>(k)).data();
    // One query at the largest radius; smaller balls are filtered from it.
    grid.radius(kp, max_radius, all);
    for (std::size_t r = 0; r < spec.radii.size(); ++r) {
      const double r2 = spec.radii[r] * spec.radii[r];
      nb.clear();
      for (auto i : all) {
        if ((pts[i] - kp).squaredNorm() <= r2) nb.push_back(i);
      }
      detail::describe_block(pts, inclination, nb, kp, spec.radii[r], spec,
                             row + r * block);
    }
    if (spec.height_bins > 0) {
      detail::describe_heights(pts, all, kp, spec, row + spec.radii.size() * block);
    }
    auto feature = out.features.row(static_cast<Eigen::Index>(k));
    const double norm = feature.norm();
    if (norm > 0.0) {
      feature /= norm;
    } else {
      feature.setConstant(empty_value);
    }
  });
  return out;
}

// C_ij = 1 - <a_i, b_j> for unit rows, clamped to [0, 2].
inline CostMatrix cost_matrix(const KeypointFeatures& a,
                              const KeypointFeatures& b) {
  if (a.features.cols() != b.features.cols()) {
    throw InvalidArgument("cost_matrix: feature dimensions differ (" +
                          std::to_string(a.features.cols()) + " vs " +
                          std::to_string(b.features.cols()) + ")");
  }
  if (a.descriptor_spec_hash != b.descriptor_spec_hash) {
    throw InvalidArgument("cost_matrix: features come from different specs");
  }
  CostMatrix c = -(a.features * b.features.transpose());
  c.array() += 1.0;
  return c.cwiseMax(0.0).cwiseMin(2.0);
}

// Voxel grid, keypoint count and descriptor settings used to turn a raw
// scan into keypoint features.
struct FrontEndSpec {
  VoxelGridSpec voxel;
  std::size_t keypoints = 4096;
  FeatureSpec features;
  bool random_seed_point = false;  // FPS starts at index 0 unless set
  std::uint64_t seed = 0;
};

struct ScanFeatures {
  PointCloud downsampled;
  KeypointFeatures features;
};

inline ScanFeatures extract_scan_features(const PointCloud& scan,
                                          const FrontEndSpec& spec) {
  ScanFeatures out;
  out.downsampled = voxel_downsample(scan, spec.voxel);
  if (out.downsampled.empty()) {
    throw InvalidArgument("extract_scan_features: no points inside the voxel bounds");
  }
  std::size_t seed_index = 0;
  if (spec.random_seed_point) {
    seed_index = static_cast<std::size_t>(
        (spec.seed * 0x9e3779b97f4a7c15ULL) % out.downsampled.size());
  }
  const auto kps =
      farthest_point_sampling(out.downsampled, spec.keypoints, seed_index);
  out.features = extract_features(out.downsampled, kps, spec.features);
  return out;
}

}  // namespace lcd

#endif  // LCD_FEATURES_HPP
