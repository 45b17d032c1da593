#ifndef LCD_GEOM_HPP
#define LCD_GEOM_HPP

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "lcd/error.hpp"

namespace lcd {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kPi = std::numbers::pi;

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

// A LiDAR return. Coordinates in meters, intensity is unitless reflectance
// (0 when the source has no intensity channel).
struct Point {
  Vec3 position = Vec3::Zero();
  double intensity = 0.0;

  Point() = default;
  Point(double x, double y, double z, double i = 0.0)
      : position(x, y, z), intensity(i) {}
  Point(const Vec3& p, double i = 0.0) : position(p), intensity(i) {}

  double x() const { return position.x(); }
  double y() const { return position.y(); }
  double z() const { return position.z(); }

  bool finite() const {
    return position.allFinite() && std::isfinite(intensity);
  }
  bool operator==(const Point& o) const {
    return position == o.position && intensity == o.intensity;
  }
};

// Ordered set of points. An empty cloud is a representable value; every
// consumer that needs geometry rejects it explicitly.
struct PointCloud {
  std::vector<Point> points;
  std::string frame_id;

  PointCloud() = default;
  explicit PointCloud(std::vector<Point> pts, std::string frame = {})
      : points(std::move(pts)), frame_id(std::move(frame)) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const Point& operator[](std::size_t i) const { return points[i]; }
  Point& operator[](std::size_t i) { return points[i]; }

  std::vector<Vec3> positions() const {
    std::vector<Vec3> out;
    out.reserve(points.size());
    for (const auto& p : points) out.push_back(p.position);
    return out;
  }

  bool operator==(const PointCloud& o) const { return points == o.points; }
};

inline void require_non_empty(const PointCloud& cloud, const char* what) {
  if (cloud.empty()) {
    throw InvalidArgument(std::string(what) + ": point cloud is empty");
  }
}

namespace detail {

inline double orthonormality_residual(const Mat3& r) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
}

// Closest rotation in the Frobenius sense.
inline Mat3 nearest_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0
                ? -1.0
                : 1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

}  // namespace detail

// Rigid transform x -> R x + t.
class Pose {
 public:
  static constexpr double kTolerance = 1e-9;

  Pose() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

  // Throws InvalidArgument unless R^T R = I and det R = +1 within 1e-9.
  Pose(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {
    if (!rotation.allFinite() || !translation.allFinite()) {
      throw InvalidArgument("Pose: non-finite rotation or translation");
    }
    if (detail::orthonormality_residual(rotation) > kTolerance ||
        std::abs(rotation.determinant() - 1.0) > kTolerance) {
      throw InvalidArgument("Pose: rotation is not a proper orthonormal matrix");
    }
  }

  static Pose identity() { return {}; }
  static Pose from_translation(const Vec3& t) {
    return Pose(Mat3::Identity(), t);
  }
  // Angle in radians about a (normalized here) axis.
  static Pose from_axis_angle(const Vec3& axis, double angle,
                              const Vec3& t = Vec3::Zero()) {
    return Pose(Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix(),
                t);
  }
  // R = Rz(yaw) Ry(pitch) Rx(roll), angles in radians.
  static Pose from_ypr(double yaw, double pitch, double roll,
                       const Vec3& t = Vec3::Zero()) {
    const Mat3 r = (Eigen::AngleAxisd(yaw, Vec3::UnitZ()) *
                    Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
                    Eigen::AngleAxisd(roll, Vec3::UnitX()))
                       .toRotationMatrix();
    return Pose(r, t);
  }
  // Projects an arbitrary 3x3 onto SO(3) first.
  static Pose orthonormalized(const Mat3& m, const Vec3& t) {
    return Pose(detail::nearest_rotation(m), t);
  }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Vec3 operator*(const Vec3& p) const { return rotation_ * p + translation_; }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation_;
    m.topRightCorner<3, 1>() = translation_;
    return m;
  }

  // Heading of the rotated x axis, radians in (-pi, pi].
  double yaw() const { return std::atan2(rotation_(1, 0), rotation_(0, 0)); }

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

struct PoseError {
  double translation_error = 0.0;  // meters
  double rotation_error = 0.0;     // degrees, in [0, 180]
};

inline Pose inverse(const Pose& p) {
  const Mat3 rt = p.rotation().transpose();
  return Pose(rt, -(rt * p.translation()));
}

// Applies b first, then a.
inline Pose compose(const Pose& a, const Pose& b) {
  Mat3 r = a.rotation() * b.rotation();
  if (detail::orthonormality_residual(r) > Pose::kTolerance) {
    r = detail::nearest_rotation(r);
  }
  return Pose(r, a.rotation() * b.translation() + a.translation());
}

inline Pose operator*(const Pose& a, const Pose& b) { return compose(a, b); }

inline PointCloud apply_pose(const Pose& pose, const PointCloud& cloud) {
  PointCloud out;
  out.frame_id = cloud.frame_id;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) {
    out.points.emplace_back(pose * p.position, p.intensity);
  }
  return out;
}

// Geodesic angle of R_true^T R_est. Same value as acos((trace - 1) / 2),
// but atan2 of the cosine and sine parts keeps full precision near 0 and
// 180 degrees where acos loses about half the digits.
inline double rotation_angle_deg(const Mat3& r) {
  const double c = (r.trace() - 1.0) / 2.0;
  const Vec3 axis(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return rad2deg(std::atan2(axis.norm() / 2.0, c));
}

inline PoseError pose_error(const Pose& estimate, const Pose& truth) {
  PoseError err;
  err.translation_error = (estimate.translation() - truth.translation()).norm();
  err.rotation_error =
      rotation_angle_deg(truth.rotation().transpose() * estimate.rotation());
  return err;
}

// Removes points whose azimuth atan2(y, x) falls in the half-open sector
// [center - width/2, center + width/2). Degrees throughout.
inline PointCloud remove_sector(const PointCloud& cloud, double center_azimuth,
                                double width) {
  if (!(width >= 0.0 && width < 360.0)) {
    throw InvalidArgument("remove_sector: width must lie in [0, 360)");
  }
  PointCloud out;
  out.frame_id = cloud.frame_id;
  out.points.reserve(cloud.size());
  const double start = center_azimuth - width / 2.0;
  for (const auto& p : cloud.points) {
    const double az = rad2deg(std::atan2(p.y(), p.x()));
    double offset = std::fmod(az - start, 360.0);
    if (offset < 0.0) offset += 360.0;
    if (!(offset < width)) out.points.push_back(p);
  }
  return out;
}

}  // namespace lcd

#endif  // LCD_GEOM_HPP
