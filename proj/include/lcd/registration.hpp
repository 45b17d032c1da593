#ifndef LCD_REGISTRATION_HPP
#define LCD_REGISTRATION_HPP

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "lcd/error.hpp"
#include "lcd/features.hpp"
#include "lcd/geom.hpp"
#include "lcd/spatial.hpp"
#include "lcd/synthetic.hpp"
#include "lcd/transport.hpp"

namespace lcd {

struct Match {
  std::size_t source;
  std::size_t target;
  double cost;
};

// Nearest target feature (cosine cost) for every source row; with `mutual`
// only pairs that are each other's nearest survive. Sorted by ascending
// cost, then source index.
inline std::vector<Match> match_features(const KeypointFeatures& a,
                                         const KeypointFeatures& b,
                                         bool mutual) {
  if (a.size() == 0 || b.size() == 0) {
    throw InvalidArgument("match_features: empty feature set");
  }
  const CostMatrix cost = cost_matrix(a, b);
  std::vector<Eigen::Index> col_best(static_cast<std::size_t>(cost.cols()));
  if (mutual) {
    for (Eigen::Index k = 0; k < cost.cols(); ++k) {
      cost.col(k).minCoeff(&col_best[static_cast<std::size_t>(k)]);
    }
  }
  std::vector<Match> matches;
  for (Eigen::Index j = 0; j < cost.rows(); ++j) {
    Eigen::Index best = 0;
    const double c = cost.row(j).minCoeff(&best);
    if (mutual && col_best[static_cast<std::size_t>(best)] != j) continue;
    matches.push_back({static_cast<std::size_t>(j),
                       static_cast<std::size_t>(best), c});
  }
  std::stable_sort(matches.begin(), matches.end(),
                   [](const Match& x, const Match& y) { return x.cost < y.cost; });
  return matches;
}

struct RansacParams {
  int max_iterations = 5000;
  double inlier_threshold = 0.6;  // m
  std::size_t sample_size = 3;
  double min_inlier_fraction = 0.05;
  bool mutual_check = true;

  void validate() const {
    if (max_iterations < 1 || !(inlier_threshold > 0.0) || sample_size < 3 ||
        !(min_inlier_fraction > 0.0)) {
      throw InvalidArgument("RansacParams: invalid parameters");
    }
  }
};

struct RegistrationResult {
  Pose pose;
  double fitness = 0.0;      // [0, 1]
  double inlier_rmse = 0.0;  // m
  int iterations_used = 0;
  bool converged = false;
  std::size_t inliers = 0;
  // ICP only: truncated squared-distance objective at each iteration.
  std::vector<double> objective_history;
};

namespace detail {

inline std::vector<std::size_t> count_inliers(
    const Pose& pose, const std::vector<Vec3>& src,
    const std::vector<Vec3>& dst, double threshold) {
  std::vector<std::size_t> inliers;
  const double t2 = threshold * threshold;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if ((pose * src[i] - dst[i]).squaredNorm() < t2) inliers.push_back(i);
  }
  return inliers;
}

inline Pose fit_subset(const std::vector<Vec3>& src,
                       const std::vector<Vec3>& dst,
                       const std::vector<std::size_t>& subset) {
  std::vector<Vec3> a, b;
  a.reserve(subset.size());
  b.reserve(subset.size());
  for (auto i : subset) {
    a.push_back(src[i]);
    b.push_back(dst[i]);
  }
  return weighted_svd(a, b);
}

}  // namespace detail

// Consensus over feature matches: minimal samples fit by SVD, inliers are
// matches closer than the threshold after transformation. The best model is
// refit on its inliers while that does not lose support. Bit-deterministic
// for a given seed.
inline RegistrationResult ransac_register(const KeypointFeatures& source,
                                          const KeypointFeatures& target,
                                          const RansacParams& params,
                                          std::uint64_t seed) {
  params.validate();
  const auto matches = match_features(source, target, params.mutual_check);
  if (matches.size() < params.sample_size) {
    throw InvalidArgument("ransac_register: only " +
                          std::to_string(matches.size()) +
                          " matches, need " + std::to_string(params.sample_size));
  }
  std::vector<Vec3> src, dst;
  src.reserve(matches.size());
  dst.reserve(matches.size());
  for (const auto& m : matches) {
    src.push_back(source.keypoints.coordinates[m.source]);
    dst.push_back(target.keypoints.coordinates[m.target]);
  }
  const std::size_t n = matches.size();
  const double t2 = params.inlier_threshold * params.inlier_threshold;

  Rng rng(mix_seed(seed, 0x4a5a));
  std::vector<std::size_t> sample(params.sample_size);
  std::size_t best_count = 0;
  Pose best_pose;
  bool have_model = false;
  for (int it = 0; it < params.max_iterations; ++it) {
    for (std::size_t s = 0; s < sample.size(); ++s) {
      bool fresh = false;
      while (!fresh) {
        sample[s] = rng.index(n);
        fresh = std::find(sample.begin(), sample.begin() + s, sample[s]) ==
                sample.begin() + s;
      }
    }
    // Rigid motions preserve pairwise distances; reject samples that don't.
    bool consistent = true;
    for (std::size_t x = 0; x < sample.size() && consistent; ++x) {
      for (std::size_t y = x + 1; y < sample.size(); ++y) {
        const double ds = (src[sample[x]] - src[sample[y]]).norm();
        const double dt = (dst[sample[x]] - dst[sample[y]]).norm();
        if (std::abs(ds - dt) > 2.0 * params.inlier_threshold) {
          consistent = false;
          break;
        }
      }
    }
    if (!consistent) continue;
    Pose model;
    try {
      model = detail::fit_subset(src, dst, sample);
    } catch (const DegenerateGeometry&) {
      continue;
    }
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if ((model * src[i] - dst[i]).squaredNorm() < t2) ++count;
    }
    if (count > best_count) {
      best_count = count;
      best_pose = model;
      have_model = true;
    }
  }

  RegistrationResult result;
  result.iterations_used = params.max_iterations;
  if (!have_model) {
    result.converged = false;
    return result;
  }
  auto inliers = detail::count_inliers(best_pose, src, dst, params.inlier_threshold);
  for (int refine = 0; refine < 10 && inliers.size() >= 3; ++refine) {
    Pose refit;
    try {
      refit = detail::fit_subset(src, dst, inliers);
    } catch (const DegenerateGeometry&) {
      break;
    }
    auto refit_inliers = detail::count_inliers(refit, src, dst, params.inlier_threshold);
    if (refit_inliers.size() < inliers.size()) break;
    const bool same = refit_inliers == inliers;
    best_pose = refit;
    inliers = std::move(refit_inliers);
    if (same) break;
  }
  result.pose = best_pose;
  result.inliers = inliers.size();
  result.fitness = static_cast<double>(inliers.size()) / static_cast<double>(n);
  double sq = 0.0;
  for (auto i : inliers) sq += (best_pose * src[i] - dst[i]).squaredNorm();
  result.inlier_rmse =
      inliers.empty() ? 0.0 : std::sqrt(sq / static_cast<double>(inliers.size()));
  result.converged = result.fitness >= params.min_inlier_fraction;
  return result;
}

enum class IcpVariant { kPointToPoint, kPointToPlane };

struct IcpParams {
  IcpVariant variant = IcpVariant::kPointToPoint;
  int max_iterations = 50;
  double correspondence_distance = 1.0;  // m
  double convergence_epsilon = 1e-6;     // rad + m of the per-step update
  std::size_t normal_neighbors = 10;

  void validate() const {
    if (max_iterations < 1 || !(correspondence_distance > 0.0) ||
        !(convergence_epsilon > 0.0) || normal_neighbors < 3) {
      throw InvalidArgument("IcpParams: invalid parameters");
    }
  }
};

namespace detail {

// Small-angle point-to-plane step: minimizes sum ((R p + t - q) . n)^2 with
// R ~ I + [w]x; returns the exact rigid motion built from (w, t).
inline Pose point_to_plane_step(const std::vector<Vec3>& p,
                                const std::vector<Vec3>& q,
                                const std::vector<Vec3>& n) {
  Eigen::Matrix<double, 6, 6> ata = Eigen::Matrix<double, 6, 6>::Zero();
  Eigen::Matrix<double, 6, 1> atb = Eigen::Matrix<double, 6, 1>::Zero();
  for (std::size_t i = 0; i < p.size(); ++i) {
    Eigen::Matrix<double, 6, 1> row;
    row.head<3>() = p[i].cross(n[i]);
    row.tail<3>() = n[i];
    const double r = (q[i] - p[i]).dot(n[i]);
    ata += row * row.transpose();
    atb += row * r;
  }
  Eigen::LDLT<Eigen::Matrix<double, 6, 6>> ldlt(ata);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ata.diagonal().minCoeff() <= 1e-12) {
    throw DegenerateGeometry("point-to-plane system is singular");
  }
  const Eigen::Matrix<double, 6, 1> x = ldlt.solve(atb);
  if (!x.allFinite()) throw DegenerateGeometry("point-to-plane system is singular");
  const Vec3 w = x.head<3>();
  const double angle = w.norm();
  Mat3 r = Mat3::Identity();
  if (angle > 0.0) r = Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
  return Pose(r, x.tail<3>());
}

}  // namespace detail

// Iterative closest point from `initial`. Fitness is the fraction of source
// points with a target neighbor within correspondence_distance under the
// final pose; inlier_rmse is measured over those pairs.
inline RegistrationResult icp(const PointCloud& source, const PointCloud& target,
                              const Pose& initial, const IcpParams& params) {
  params.validate();
  if (source.size() < 10 || target.size() < 10) {
    throw InvalidArgument("icp: both clouds need at least 10 points");
  }
  const auto src = source.positions();
  const KdTree tree(target.positions());
  std::vector<Vec3> normals;
  if (params.variant == IcpVariant::kPointToPlane) {
    normals = estimate_normals(tree, params.normal_neighbors);
    const auto& tp = tree.points();
    for (std::size_t i = 0; i < normals.size(); ++i) {
      if (normals[i].dot(-tp[i]) < 0.0) normals[i] = -normals[i];
    }
  }
  const double max_d2 = params.correspondence_distance * params.correspondence_distance;

  RegistrationResult result;
  Pose pose = initial;
  bool had_correspondences = false;
  std::vector<Vec3> p, q, nq;
  for (int it = 1; it <= params.max_iterations; ++it) {
    p.clear();
    q.clear();
    nq.clear();
    double objective = 0.0;
    for (const auto& s : src) {
      const Vec3 moved = pose * s;
      const auto nn = tree.nearest(moved, max_d2);
      if (!nn) {
        objective += max_d2;
        continue;
      }
      objective += nn->squared_distance;
      p.push_back(moved);
      q.push_back(tree.points()[nn->index]);
      if (!normals.empty()) nq.push_back(normals[nn->index]);
    }
    result.objective_history.push_back(objective);
    if (p.size() < 3) break;
    had_correspondences = true;
    Pose step;
    try {
      step = params.variant == IcpVariant::kPointToPoint
                 ? weighted_svd(p, q)
                 : detail::point_to_plane_step(p, q, nq);
    } catch (const DegenerateGeometry&) {
      break;
    }
    pose = compose(step, pose);
    result.iterations_used = it;
    const double delta = deg2rad(rotation_angle_deg(step.rotation())) +
                         step.translation().norm();
    if (delta < params.convergence_epsilon) {
      result.converged = true;
      break;
    }
  }
  if (!had_correspondences) result.converged = false;

  result.pose = pose;
  std::size_t matched = 0;
  double sq = 0.0;
  for (const auto& s : src) {
    if (const auto nn = tree.nearest(pose * s, max_d2)) {
      ++matched;
      sq += nn->squared_distance;
    }
  }
  result.inliers = matched;
  result.fitness = static_cast<double>(matched) / static_cast<double>(src.size());
  result.inlier_rmse = matched ? std::sqrt(sq / static_cast<double>(matched)) : 0.0;
  return result;
}

inline constexpr double kSuccessTranslation = 2.0;  // m
inline constexpr double kSuccessRotation = 5.0;     // deg

// Strictly below both limits.
inline bool success_check(const PoseError& err) {
  return err.translation_error < kSuccessTranslation &&
         err.rotation_error < kSuccessRotation;
}

}  // namespace lcd

#endif  // LCD_REGISTRATION_HPP
