#ifndef LCD_IO_HPP
#define LCD_IO_HPP

// KITTI-format scan and pose files, sequences and loop groundtruth.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lcd/error.hpp"
#include "lcd/geom.hpp"

namespace lcd {

static_assert(std::endian::native == std::endian::little,
              "scan I/O assumes a little-endian host");
static_assert(std::numeric_limits<float>::is_iec559);

// Scan file: raw little-endian float32 quadruples (x, y, z, intensity).
inline PointCloud read_scan(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open scan file: " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size % 16 != 0) {
    throw FormatError("scan file " + path.string() + " has " +
                      std::to_string(size) +
                      " bytes, not a multiple of 16");
  }
  std::vector<float> raw(size / 4);
  in.seekg(0);
  if (size > 0 && !in.read(reinterpret_cast<char*>(raw.data()),
                           static_cast<std::streamsize>(size))) {
    throw IoError("failed reading scan file: " + path.string());
  }
  PointCloud cloud;
  cloud.frame_id = path.stem().string();
  cloud.points.reserve(size / 16);
  for (std::size_t i = 0; i < size / 16; ++i) {
    const float* q = raw.data() + 4 * i;
    Point p(q[0], q[1], q[2], q[3]);
    if (!p.position.allFinite()) {
      throw FormatError("scan file " + path.string() +
                        ": non-finite coordinate at point " +
                        std::to_string(i));
    }
    cloud.points.push_back(p);
  }
  return cloud;
}

inline void write_scan(const std::filesystem::path& path,
                       const PointCloud& cloud) {
  std::vector<float> raw;
  raw.reserve(cloud.size() * 4);
  for (const auto& p : cloud.points) {
    raw.push_back(static_cast<float>(p.x()));
    raw.push_back(static_cast<float>(p.y()));
    raw.push_back(static_cast<float>(p.z()));
    raw.push_back(static_cast<float>(p.intensity));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write scan file: " + path.string());
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (!out) throw IoError("failed writing scan file: " + path.string());
}

namespace detail {

// Rotation blocks from text files carry ~1e-7 rounding. Anything within
// kRejectResidual is projected onto SO(3) so the Pose invariant holds.
inline constexpr double kRejectResidual = 1e-3;

inline Pose pose_from_rows(const double v[12], const std::string& where) {
  Mat3 r;
  Vec3 t;
  for (int row = 0; row < 3; ++row) {
    for (int col = 0; col < 3; ++col) r(row, col) = v[row * 4 + col];
    t(row) = v[row * 4 + 3];
  }
  const double residual = orthonormality_residual(r);
  if (residual > kRejectResidual || r.determinant() <= 0.0) {
    throw FormatError(where + ": rotation is not orthonormal (residual " +
                      std::to_string(residual) + ")");
  }
  if (residual > Pose::kTolerance ||
      std::abs(r.determinant() - 1.0) > Pose::kTolerance) {
    return Pose::orthonormalized(r, t);
  }
  return Pose(r, t);
}

}  // namespace detail

inline Pose parse_pose_line(const std::string& line, const std::string& where) {
  std::istringstream ss(line);
  double v[12];
  int n = 0;
  std::string tok;
  while (ss >> tok) {
    if (n == 12) throw FormatError(where + ": more than 12 numbers");
    try {
      std::size_t used = 0;
      v[n] = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw FormatError(where + ": cannot parse number '" + tok + "'");
    }
    if (!std::isfinite(v[n])) throw FormatError(where + ": non-finite value");
    ++n;
  }
  if (n != 12) {
    throw FormatError(where + ": expected 12 numbers, found " +
                      std::to_string(n));
  }
  return detail::pose_from_rows(v, where);
}

// One pose per line, row-major 3x4 [R|t]. Blank lines are skipped.
inline std::vector<Pose> read_poses(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pose file: " + path.string());
  std::vector<Pose> poses;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    poses.push_back(parse_pose_line(
        line, path.string() + " line " + std::to_string(line_no)));
  }
  return poses;
}

inline std::string format_pose_line(const Pose& p) {
  std::ostringstream ss;
  ss << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (int row = 0; row < 3; ++row) {
    for (int col = 0; col < 3; ++col) {
      ss << p.rotation()(row, col) << ' ';
    }
    ss << p.translation()(row);
    if (row < 2) ss << ' ';
  }
  return ss.str();
}

inline void write_poses(const std::filesystem::path& path,
                        std::span<const Pose> poses) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write pose file: " + path.string());
  for (const auto& p : poses) out << format_pose_line(p) << '\n';
  if (!out) throw IoError("failed writing pose file: " + path.string());
}

// Scans are loaded on demand; concurrent load_scan calls only read files.
struct Sequence {
  std::string name;
  std::vector<std::filesystem::path> scan_paths;
  std::vector<Pose> poses;

  std::size_t size() const { return scan_paths.size(); }
  PointCloud load_scan(std::size_t i) const { return read_scan(scan_paths.at(i)); }
};

// Expects <dir>/velodyne/*.bin (or *.bin directly in dir) sorted by name.
inline Sequence open_sequence(const std::filesystem::path& dir,
                              const std::filesystem::path& poses_path) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) {
    throw IoError("sequence directory not found: " + dir.string());
  }
  const fs::path scan_dir =
      fs::is_directory(dir / "velodyne") ? dir / "velodyne" : dir;
  Sequence seq;
  seq.name = dir.filename().string();
  for (const auto& entry : fs::directory_iterator(scan_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".bin") {
      seq.scan_paths.push_back(entry.path());
    }
  }
  std::sort(seq.scan_paths.begin(), seq.scan_paths.end());
  seq.poses = read_poses(poses_path);
  if (seq.poses.size() != seq.scan_paths.size()) {
    throw FormatError("sequence " + dir.string() + " has " +
                      std::to_string(seq.scan_paths.size()) + " scans but " +
                      std::to_string(seq.poses.size()) + " poses");
  }
  return seq;
}

inline constexpr double kDefaultLoopRadius = 4.0;
inline constexpr std::size_t kDefaultExclusion = 50;

// Pairs (i, j), i > j, i - j > exclusion_window, with translation distance
// <= loop_radius. Stored sorted by (i, j).
class LoopGroundtruth {
 public:
  LoopGroundtruth() = default;
  LoopGroundtruth(std::vector<std::pair<std::size_t, std::size_t>> pairs,
                  std::size_t num_scans, double radius, std::size_t exclusion)
      : pairs_(std::move(pairs)),
        has_loop_(num_scans, false),
        loop_radius_(radius),
        exclusion_window_(exclusion) {
    std::sort(pairs_.begin(), pairs_.end());
    for (const auto& [i, j] : pairs_) has_loop_.at(i) = true;
  }

  const std::vector<std::pair<std::size_t, std::size_t>>& pairs() const {
    return pairs_;
  }
  bool contains(std::size_t i, std::size_t j) const {
    return std::binary_search(pairs_.begin(), pairs_.end(), std::pair{i, j});
  }
  // Whether query i has at least one true loop partner.
  bool has_loop(std::size_t i) const {
    return i < has_loop_.size() && has_loop_[i];
  }
  std::size_t num_scans() const { return has_loop_.size(); }
  double loop_radius() const { return loop_radius_; }
  std::size_t exclusion_window() const { return exclusion_window_; }

 private:
  std::vector<std::pair<std::size_t, std::size_t>> pairs_;
  std::vector<bool> has_loop_;
  double loop_radius_ = kDefaultLoopRadius;
  std::size_t exclusion_window_ = kDefaultExclusion;
};

// Full 3D Euclidean distance between groundtruth translations.
inline LoopGroundtruth build_loop_groundtruth(
    std::span<const Pose> poses, double radius = kDefaultLoopRadius,
    std::size_t exclusion = kDefaultExclusion) {
  if (radius < 0.0) throw InvalidArgument("loop radius must be >= 0");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  const double r2 = radius * radius;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    for (std::size_t j = 0; j + exclusion < i; ++j) {
      if ((poses[i].translation() - poses[j].translation()).squaredNorm() <=
          r2) {
        pairs.emplace_back(i, j);
      }
    }
  }
  return LoopGroundtruth(std::move(pairs), poses.size(), radius, exclusion);
}

inline LoopGroundtruth build_loop_groundtruth(
    const Sequence& seq, double radius = kDefaultLoopRadius,
    std::size_t exclusion = kDefaultExclusion) {
  return build_loop_groundtruth(std::span<const Pose>(seq.poses), radius,
                                exclusion);
}

}  // namespace lcd

#endif  // LCD_IO_HPP
