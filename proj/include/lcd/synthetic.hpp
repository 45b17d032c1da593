#ifndef LCD_SYNTHETIC_HPP
#define LCD_SYNTHETIC_HPP

// Deterministic synthetic data: structured scene clouds, perturbed
// registration pairs, and a procedural world with looping trajectories.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <tuple>
#include <vector>

#include "lcd/error.hpp"
#include "lcd/geom.hpp"

namespace lcd {

// Portable draws on top of mt19937_64 (std distributions are
// implementation-defined, which would break cross-toolchain determinism).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // [0, n)
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n));
  }
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(2.0 * kPi * u2);
    has_spare_ = true;
    return mag * std::cos(2.0 * kPi * u2);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace detail {

// Surface primitive that can emit uniformly distributed points.
struct Primitive {
  enum class Kind { kBox, kPole, kBlob } kind = Kind::kBox;
  Vec3 center = Vec3::Zero();  // base center for box/pole, centroid for blob
  double yaw = 0.0;
  Vec3 size = Vec3::Ones();    // box: (length, width, height); pole: (r, r, h)
  double intensity = 0.5;

  double area() const {
    switch (kind) {
      case Kind::kBox:
        return 2.0 * (size.x() + size.y()) * size.z() + size.x() * size.y();
      case Kind::kPole:
        return 2.0 * kPi * size.x() * size.z();
      case Kind::kBlob:
        return 4.0 * kPi * size.x() * size.x();
    }
    return 0.0;
  }

  Vec3 sample(Rng& rng) const {
    Vec3 local;
    switch (kind) {
      case Kind::kBox: {
        const double lx = size.x(), ly = size.y(), h = size.z();
        const double side_x = lx * h, side_y = ly * h, top = lx * ly;
        const double pick = rng.uniform(0.0, 2.0 * side_x + 2.0 * side_y + top);
        const double a = rng.uniform(), b = rng.uniform();
        if (pick < 2.0 * side_x) {
          const double y = pick < side_x ? -ly / 2 : ly / 2;
          local = Vec3((a - 0.5) * lx, y, b * h);
        } else if (pick < 2.0 * side_x + 2.0 * side_y) {
          const double x = pick < 2.0 * side_x + side_y ? -lx / 2 : lx / 2;
          local = Vec3(x, (a - 0.5) * ly, b * h);
        } else {
          local = Vec3((a - 0.5) * lx, (b - 0.5) * ly, h);
        }
        break;
      }
      case Kind::kPole: {
        const double phi = rng.uniform(0.0, 2.0 * kPi);
        local = Vec3(size.x() * std::cos(phi), size.x() * std::sin(phi),
                     rng.uniform() * size.z());
        break;
      }
      case Kind::kBlob: {
        local = Vec3(rng.normal(), rng.normal(), rng.normal()) * size.x();
        break;
      }
    }
    const Eigen::AngleAxisd rot(yaw, Vec3::UnitZ());
    return center + rot * local;
  }
};

inline Primitive random_box(Rng& rng, double x, double y, double ground) {
  Primitive p;
  p.kind = Primitive::Kind::kBox;
  p.center = Vec3(x, y, ground);
  p.yaw = rng.uniform(0.0, kPi);
  p.size = Vec3(rng.uniform(0.8, 3.5), rng.uniform(0.6, 2.5),
                rng.uniform(0.5, 3.0));
  p.intensity = rng.uniform(0.1, 0.9);
  return p;
}

inline Primitive random_wall(Rng& rng, double x, double y, double ground) {
  Primitive p;
  p.kind = Primitive::Kind::kBox;
  p.center = Vec3(x, y, ground);
  p.yaw = rng.uniform(0.0, kPi);
  p.size = Vec3(rng.uniform(3.0, 9.0), rng.uniform(0.15, 0.3),
                rng.uniform(1.2, 3.0));
  p.intensity = rng.uniform(0.1, 0.9);
  return p;
}

inline Primitive random_pole(Rng& rng, double x, double y, double ground) {
  Primitive p;
  p.kind = Primitive::Kind::kPole;
  p.center = Vec3(x, y, ground);
  const double r = rng.uniform(0.08, 0.25);
  p.size = Vec3(r, r, rng.uniform(1.5, 4.0));
  p.intensity = rng.uniform(0.1, 0.9);
  return p;
}

inline Primitive random_blob(Rng& rng, double x, double y, double ground) {
  Primitive p;
  p.kind = Primitive::Kind::kBlob;
  const double r = rng.uniform(0.2, 0.6);
  p.center = Vec3(x, y, ground + r + rng.uniform(0.0, 0.8));
  p.size = Vec3(r, r, r);
  p.intensity = rng.uniform(0.1, 0.9);
  return p;
}

}  // namespace detail

// Desk-scale structured scene: a ground plane, vertical boxes, walls and
// poles, and scattered clutter blobs.
struct SceneSpec {
  std::size_t num_points = 8000;
  double extent = 12.0;  // half-width of the square footprint, m
  double ground_z = -0.5;
  double plane_thickness = 0.02;
  double ground_fraction = 0.3;
  double clutter_fraction = 0.1;
  std::size_t num_boxes = 10;
  std::size_t num_walls = 3;
  std::size_t num_poles = 8;
  std::size_t num_blobs = 10;
};

inline PointCloud generate_scene_cloud(const SceneSpec& spec,
                                       std::uint64_t seed) {
  if (spec.num_points < 100) {
    throw InvalidArgument("generate_scene_cloud: need at least 100 points");
  }
  if (spec.extent <= 0.0 || spec.ground_fraction < 0.0 ||
      spec.clutter_fraction < 0.0 ||
      spec.ground_fraction + spec.clutter_fraction > 1.0) {
    throw InvalidArgument("generate_scene_cloud: invalid scene spec");
  }
  Rng rng(mix_seed(seed, 0x5ce9e));
  const double e = spec.extent;
  const double g = spec.ground_z;

  std::vector<detail::Primitive> structure, clutter;
  for (std::size_t i = 0; i < spec.num_boxes; ++i) {
    structure.push_back(detail::random_box(rng, rng.uniform(-e, e),
                                           rng.uniform(-e, e), g));
  }
  for (std::size_t i = 0; i < spec.num_walls; ++i) {
    structure.push_back(detail::random_wall(rng, rng.uniform(-e, e),
                                            rng.uniform(-e, e), g));
  }
  for (std::size_t i = 0; i < spec.num_poles; ++i) {
    structure.push_back(detail::random_pole(rng, rng.uniform(-e, e),
                                            rng.uniform(-e, e), g));
  }
  for (std::size_t i = 0; i < spec.num_blobs; ++i) {
    clutter.push_back(detail::random_blob(rng, rng.uniform(-e, e),
                                          rng.uniform(-e, e), g));
  }

  const auto n = spec.num_points;
  std::size_t n_clutter =
      clutter.empty() ? 0
                      : static_cast<std::size_t>(std::llround(
                            spec.clutter_fraction * static_cast<double>(n)));
  std::size_t n_struct =
      structure.empty()
          ? 0
          : n - n_clutter -
                static_cast<std::size_t>(std::llround(
                    spec.ground_fraction * static_cast<double>(n)));
  const std::size_t n_ground = n - n_clutter - n_struct;

  PointCloud cloud;
  cloud.frame_id = "scene";
  cloud.points.reserve(n);
  for (std::size_t i = 0; i < n_ground; ++i) {
    const double dz = (rng.uniform() - 0.5) * spec.plane_thickness;
    cloud.points.emplace_back(rng.uniform(-e, e), rng.uniform(-e, e), g + dz,
                              0.2);
  }
  auto emit = [&](const std::vector<detail::Primitive>& prims,
                  std::size_t count) {
    if (prims.empty() || count == 0) return;
    std::vector<double> cumulative;
    double total = 0.0;
    for (const auto& p : prims) cumulative.push_back(total += p.area());
    for (std::size_t i = 0; i < count; ++i) {
      const double pick = rng.uniform(0.0, total);
      auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
      const auto& prim =
          prims[std::min<std::size_t>(it - cumulative.begin(), prims.size() - 1)];
      cloud.points.emplace_back(prim.sample(rng), prim.intensity);
    }
  };
  emit(structure, n_struct);
  emit(clutter, n_clutter);
  return cloud;
}

// Ranges are symmetric half-widths; yaw is drawn from
// +-[min_abs_yaw_deg, max_yaw_deg].
struct PerturbationSpec {
  double max_translation_xy = 1.5;
  double max_translation_z = 0.25;
  double max_yaw_deg = 180.0;
  double min_abs_yaw_deg = 0.0;
  double max_roll_pitch_deg = 3.0;
  double noise_sigma = 0.0;
  double dropout = 0.0;
  double sector_width_deg = 0.0;  // 0 disables sector removal
};

struct SyntheticScene {
  PointCloud base_cloud;
  PerturbationSpec perturbation;
};

struct SyntheticPair {
  PointCloud source;
  PointCloud target;
  Pose truth;  // maps source coordinates into the target frame
};

namespace detail {

inline PointCloud degrade(const PointCloud& in, const PerturbationSpec& spec,
                          Rng& rng) {
  PointCloud out;
  out.frame_id = in.frame_id;
  out.points.reserve(in.size());
  for (const auto& p : in.points) {
    const bool drop = spec.dropout > 0.0 && rng.uniform() < spec.dropout;
    Vec3 noise = Vec3::Zero();
    if (spec.noise_sigma > 0.0) {
      noise = Vec3(rng.normal(), rng.normal(), rng.normal()) * spec.noise_sigma;
    }
    if (!drop) out.points.emplace_back(p.position + noise, p.intensity);
  }
  if (spec.sector_width_deg > 0.0) {
    out = remove_sector(out, rng.uniform(0.0, 360.0), spec.sector_width_deg);
  }
  return out;
}

}  // namespace detail

inline SyntheticPair generate_synthetic_pair(const SyntheticScene& scene,
                                             std::uint64_t seed) {
  const auto& s = scene.perturbation;
  if (s.max_translation_xy < 0 || s.max_translation_z < 0 ||
      s.max_yaw_deg < 0 || s.max_roll_pitch_deg < 0 || s.noise_sigma < 0 ||
      s.min_abs_yaw_deg < 0 || s.min_abs_yaw_deg > s.max_yaw_deg) {
    throw InvalidArgument("generate_synthetic_pair: ranges must be >= 0");
  }
  if (!(s.dropout >= 0.0 && s.dropout < 1.0)) {
    throw InvalidArgument("generate_synthetic_pair: dropout must be in [0,1)");
  }
  require_non_empty(scene.base_cloud, "generate_synthetic_pair");

  Rng rng(mix_seed(seed, 0x9a1f));
  const double tx = rng.uniform(-1.0, 1.0) * s.max_translation_xy;
  const double ty = rng.uniform(-1.0, 1.0) * s.max_translation_xy;
  const double tz = rng.uniform(-1.0, 1.0) * s.max_translation_z;
  const double yaw_mag = rng.uniform(s.min_abs_yaw_deg, s.max_yaw_deg);
  const double yaw = rng.uniform() < 0.5 ? -yaw_mag : yaw_mag;
  const double pitch = rng.uniform(-1.0, 1.0) * s.max_roll_pitch_deg;
  const double roll = rng.uniform(-1.0, 1.0) * s.max_roll_pitch_deg;

  SyntheticPair pair;
  pair.truth = Pose::from_ypr(deg2rad(yaw), deg2rad(pitch), deg2rad(roll),
                              Vec3(tx, ty, tz));
  pair.source = detail::degrade(scene.base_cloud, s, rng);
  pair.target =
      detail::degrade(apply_pose(pair.truth, scene.base_cloud), s, rng);
  pair.source.frame_id = "source";
  pair.target.frame_id = "target";
  return pair;
}

// Procedural world: every cell of a square grid holds objects drawn from a
// generator seeded by (seed, cell). Scans sample the surfaces around a
// sensor pose afresh on each visit.
struct WorldSpec {
  std::uint64_t seed = 1;
  double cell_size = 10.0;
  double sensor_range = 20.0;  // horizontal, m
  double sensor_height = 0.5;  // ground is at z = -sensor_height in scans
  double ground_density = 5.0;   // points per m^2
  double object_density = 20.0;  // points per m^2 of surface
  double noise_sigma = 0.02;
};

namespace detail {

inline std::vector<Primitive> world_cell(const WorldSpec& w, long cx, long cy) {
  Rng rng(mix_seed(mix_seed(w.seed, static_cast<std::uint64_t>(cx)),
                   static_cast<std::uint64_t>(cy) ^ 0xce11));
  std::vector<Primitive> prims;
  const double x0 = cx * w.cell_size, y0 = cy * w.cell_size;
  auto at = [&] {
    return std::pair{x0 + rng.uniform() * w.cell_size,
                     y0 + rng.uniform() * w.cell_size};
  };
  const auto boxes = rng.index(3);
  for (std::size_t i = 0; i < boxes; ++i) {
    auto [x, y] = at();
    prims.push_back(random_box(rng, x, y, 0.0));
  }
  if (rng.uniform() < 0.35) {
    auto [x, y] = at();
    prims.push_back(random_wall(rng, x, y, 0.0));
  }
  const auto poles = rng.index(3);
  for (std::size_t i = 0; i < poles; ++i) {
    auto [x, y] = at();
    prims.push_back(random_pole(rng, x, y, 0.0));
  }
  const auto blobs = rng.index(3);
  for (std::size_t i = 0; i < blobs; ++i) {
    auto [x, y] = at();
    prims.push_back(random_blob(rng, x, y, 0.0));
  }
  return prims;
}

}  // namespace detail

// Scan in the sensor frame of `sensor_pose` (a world-frame pose whose
// translation z is the sensor height).
inline PointCloud generate_world_scan(const WorldSpec& w,
                                      const Pose& sensor_pose,
                                      std::uint64_t scan_seed) {
  Rng rng(mix_seed(w.seed ^ 0x5ca4, scan_seed));
  const Vec3 origin = sensor_pose.translation();
  const double range = w.sensor_range;
  const double range2 = range * range;
  std::vector<Point> world_points;

  const auto n_ground = static_cast<std::size_t>(
      std::llround(w.ground_density * kPi * range2));
  for (std::size_t i = 0; i < n_ground; ++i) {
    const double r = range * std::sqrt(rng.uniform());
    const double phi = rng.uniform(0.0, 2.0 * kPi);
    world_points.emplace_back(origin.x() + r * std::cos(phi),
                              origin.y() + r * std::sin(phi), 0.0, 0.2);
  }
  const long c0x = static_cast<long>(std::floor((origin.x() - range) / w.cell_size)) - 1;
  const long c1x = static_cast<long>(std::floor((origin.x() + range) / w.cell_size)) + 1;
  const long c0y = static_cast<long>(std::floor((origin.y() - range) / w.cell_size)) - 1;
  const long c1y = static_cast<long>(std::floor((origin.y() + range) / w.cell_size)) + 1;
  for (long cx = c0x; cx <= c1x; ++cx) {
    for (long cy = c0y; cy <= c1y; ++cy) {
      for (const auto& prim : detail::world_cell(w, cx, cy)) {
        const double count = prim.area() * w.object_density;
        auto n = static_cast<std::size_t>(count);
        if (rng.uniform() < count - static_cast<double>(n)) ++n;
        for (std::size_t i = 0; i < n; ++i) {
          const Vec3 p = prim.sample(rng);
          const double dx = p.x() - origin.x(), dy = p.y() - origin.y();
          if (dx * dx + dy * dy <= range2) {
            world_points.emplace_back(p, prim.intensity);
          }
        }
      }
    }
  }
  const Pose to_sensor = inverse(sensor_pose);
  PointCloud scan;
  scan.points.reserve(world_points.size());
  for (const auto& p : world_points) {
    Vec3 q = to_sensor * p.position;
    if (w.noise_sigma > 0.0) {
      q += Vec3(rng.normal(), rng.normal(), rng.normal()) * w.noise_sigma;
    }
    scan.points.emplace_back(q, p.intensity);
  }
  return scan;
}

enum class RevisitKind { kNone, kSameDirection, kReverse };

struct TrajectorySpec {
  std::size_t num_scans = 300;
  std::size_t same_revisits = 20;
  std::size_t reverse_revisits = 20;
  double spacing = 1.0;         // m between consecutive scans
  double lane_separation = 60.0;  // m between route segments
  double lateral_jitter = 0.75;   // m, revisit offset across the route
  double heading_jitter_deg = 5.0;
};

struct SyntheticTrajectory {
  std::vector<Pose> poses;         // world frame sensor poses
  std::vector<RevisitKind> kinds;  // what each scan revisits
};

// Route layout: segment A on lane 0, a same-direction pass over part of A,
// a fresh segment B on lane 1, a reverse pass over the end of A, and a
// fresh segment C on lane 2. With no revisits requested the route is a
// single straight lane.
inline SyntheticTrajectory make_trajectory(const TrajectorySpec& spec,
                                           double sensor_height,
                                           std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x7a1));
  SyntheticTrajectory traj;
  auto push = [&](double x, double y, double heading, RevisitKind kind) {
    traj.poses.push_back(Pose::from_ypr(heading, 0.0, 0.0,
                                        Vec3(x, y, sensor_height)));
    traj.kinds.push_back(kind);
  };
  const auto n = spec.num_scans;
  const auto s = spec.same_revisits, r = spec.reverse_revisits;
  const double d = spec.spacing;
  if (s + r == 0) {
    for (std::size_t i = 0; i < n; ++i) {
      push(d * static_cast<double>(i), 0.0, 0.0, RevisitKind::kNone);
    }
    return traj;
  }
  if (n < s + r) throw InvalidArgument("make_trajectory: too few scans");
  const std::size_t fresh = n - s - r;
  const std::size_t len_a = (fresh * 45) / 100;
  const std::size_t len_b = (fresh - len_a) / 2;
  const std::size_t len_c = fresh - len_a - len_b;
  constexpr std::size_t kMargin = 10;
  // Revisited stretches must stay disjoint and beyond the exclusion window.
  if (len_a < 2 * kMargin + s + r + 10 || len_b < 60) {
    throw InvalidArgument("make_trajectory: route too short for revisits");
  }
  const double lane = spec.lane_separation;
  auto jitter = [&] { return rng.uniform(-1.0, 1.0) * spec.lateral_jitter; };
  auto heading_noise = [&] {
    return deg2rad(rng.uniform(-1.0, 1.0) * spec.heading_jitter_deg);
  };

  for (std::size_t i = 0; i < len_a; ++i) {
    push(d * static_cast<double>(i), 0.0, 0.0, RevisitKind::kNone);
  }
  for (std::size_t k = 0; k < s; ++k) {
    push(d * static_cast<double>(kMargin + k) + 0.3 * jitter(), jitter(),
         heading_noise(), RevisitKind::kSameDirection);
  }
  for (std::size_t i = 0; i < len_b; ++i) {
    push(d * static_cast<double>(i), lane, 0.0, RevisitKind::kNone);
  }
  for (std::size_t k = 0; k < r; ++k) {
    const double x = d * static_cast<double>(len_a - kMargin - 1 - k);
    push(x + 0.3 * jitter(), jitter(), kPi + heading_noise(),
         RevisitKind::kReverse);
  }
  for (std::size_t i = 0; i < len_c; ++i) {
    push(d * static_cast<double>(i), 2.0 * lane, 0.0, RevisitKind::kNone);
  }
  return traj;
}

}  // namespace lcd

#endif  // LCD_SYNTHETIC_HPP
