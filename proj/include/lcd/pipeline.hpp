#ifndef LCD_PIPELINE_HPP
#define LCD_PIPELINE_HPP

// Online loop closure: descriptor query, distance threshold, relative pose,
// ICP fitness gate. Also the training losses, kept as offline diagnostics.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include "lcd/descriptor.hpp"
#include "lcd/registration.hpp"
#include "lcd/transport.hpp"

namespace lcd {

enum class RegistrationMethod { kRansac, kUotFast };

inline const char* to_string(RegistrationMethod m) {
  return m == RegistrationMethod::kRansac ? "ransac" : "fast";
}

inline RegistrationMethod parse_registration_method(const std::string& s) {
  if (s == "ransac") return RegistrationMethod::kRansac;
  if (s == "fast" || s == "uot") return RegistrationMethod::kUotFast;
  throw InvalidArgument("unknown registration method '" + s +
                        "' (expected ransac or fast)");
}

struct LcdConfig {
  double similarity_threshold = 0.9;  // descriptor L2 distance
  double icp_fitness_threshold = 0.9;
  std::int64_t exclusion = 50;
  double loop_radius = 4.0;  // m, groundtruth only
  RegistrationMethod method = RegistrationMethod::kRansac;
  std::size_t stride = 1;  // every stride-th scan is a keyframe

  void validate() const {
    if (!(similarity_threshold >= 0.0)) {
      throw InvalidArgument("LcdConfig: similarity threshold must be >= 0");
    }
    if (!(icp_fitness_threshold >= 0.0 && icp_fitness_threshold <= 1.0)) {
      throw InvalidArgument("LcdConfig: ICP fitness threshold must be in [0, 1]");
    }
    if (exclusion < 0 || stride < 1 || !(loop_radius >= 0.0)) {
      throw InvalidArgument("LcdConfig: invalid exclusion, stride or radius");
    }
  }
};

enum class RejectReason { kNone, kThreshold, kConsistency };

inline const char* to_string(RejectReason r) {
  switch (r) {
    case RejectReason::kNone: return "none";
    case RejectReason::kThreshold: return "threshold";
    case RejectReason::kConsistency: return "consistency";
  }
  return "none";
}

// accepted implies descriptor_distance < th and fitness > th_icp.
struct LoopDetection {
  std::int64_t query_index = 0;
  std::int64_t matched_index = 0;
  double descriptor_distance = 0.0;
  Pose pose;  // query frame -> matched frame
  double fitness = 0.0;
  bool accepted = false;
  RejectReason reject_reason = RejectReason::kThreshold;
};

struct StageTimes {
  double descriptor_extraction = 0.0;  // s
  double query = 0.0;
  double registration = 0.0;
};

struct PipelineSettings {
  FrontEndSpec front_end;
  UotParams uot;
  RansacParams ransac;
  IcpParams icp;
  LcdConfig lcd;
  // ICP on keypoints only instead of the downsampled clouds.
  bool icp_on_keypoints = false;
  std::uint64_t seed = 0;
};

inline PointCloud keypoint_cloud(const KeypointSet& kp) {
  PointCloud c;
  c.points.reserve(kp.size());
  for (const auto& p : kp.coordinates) c.points.emplace_back(p);
  return c;
}

// Per-trajectory state. Scans must be processed in index order.
class PipelineState {
 public:
  PipelineState(PipelineSettings settings, VladParams params)
      : settings_(std::move(settings)), vlad_(std::move(params)) {
    settings_.lcd.validate();
    vlad_.validate();
    if (vlad_.feature_dim() != settings_.front_end.features.dimension()) {
      throw InvalidArgument("PipelineState: VLAD params expect " +
                            std::to_string(vlad_.feature_dim()) +
                            "-dim features, front end produces " +
                            std::to_string(settings_.front_end.features.dimension()));
    }
  }

  const PipelineSettings& settings() const { return settings_; }
  const VladParams& vlad() const { return vlad_; }
  const DescriptorDatabase& database() const { return db_; }
  const std::vector<StageTimes>& timings() const { return timings_; }

  const ScanFeatures& stored(std::int64_t index) const {
    auto it = scans_.find(index);
    if (it == scans_.end()) {
      throw InvalidArgument("PipelineState: scan " + std::to_string(index) + " not stored");
    }
    return it->second;
  }

  // Registration of `query` against a stored scan plus the ICP gate.
  // Failures of the geometric stages count as inconsistency.
  void verify(const ScanFeatures& query, std::int64_t candidate,
              LoopDetection& det) const {
    const auto& target = stored(candidate);
    try {
      Pose initial;
      if (settings_.lcd.method == RegistrationMethod::kRansac) {
        initial = ransac_register(query.features, target.features,
                                  settings_.ransac,
                                  mix_seed(settings_.seed, static_cast<std::uint64_t>(det.query_index)))
                      .pose;
      } else {
        initial = estimate_pose_uot(query.features, target.features, settings_.uot).pose;
      }
      const auto refined =
          settings_.icp_on_keypoints
              ? icp(keypoint_cloud(query.features.keypoints),
                    keypoint_cloud(target.features.keypoints), initial, settings_.icp)
              : icp(query.downsampled, target.downsampled, initial, settings_.icp);
      det.pose = refined.pose;
      det.fitness = refined.fitness;
    } catch (const Error&) {
      det.pose = Pose::identity();
      det.fitness = 0.0;
    }
    det.accepted = det.fitness > settings_.lcd.icp_fitness_threshold;
    det.reject_reason = det.accepted ? RejectReason::kNone : RejectReason::kConsistency;
  }

  // Returns none when no database entry lies outside the exclusion window.
  // The scan's descriptor is appended afterwards in every case.
  std::optional<LoopDetection> process_scan(std::int64_t index, const PointCloud& scan) {
    using clock = std::chrono::steady_clock;
    StageTimes t;
    auto t0 = clock::now();
    auto features = extract_scan_features(scan, settings_.front_end);
    const auto descriptor = global_descriptor(features.features, vlad_);
    auto t1 = clock::now();
    t.descriptor_extraction = std::chrono::duration<double>(t1 - t0).count();
    const auto hit = db_.query(descriptor, index, settings_.lcd.exclusion);
    auto t2 = clock::now();
    t.query = std::chrono::duration<double>(t2 - t1).count();

    std::optional<LoopDetection> out;
    if (hit) {
      LoopDetection det;
      det.query_index = index;
      det.matched_index = hit->scan_index;
      det.descriptor_distance = hit->distance;
      if (hit->distance < settings_.lcd.similarity_threshold) {
        verify(features, hit->scan_index, det);
      }
      out = det;
    }
    t.registration = std::chrono::duration<double>(clock::now() - t2).count();
    timings_.push_back(t);
    db_.append(index, descriptor);
    scans_.emplace(index, std::move(features));
    return out;
  }

 private:
  PipelineSettings settings_;
  VladParams vlad_;
  DescriptorDatabase db_;
  std::map<std::int64_t, ScanFeatures> scans_;
  std::vector<StageTimes> timings_;
};

// ---- detection log -------------------------------------------------------

inline constexpr const char* kDetectionCsvHeader =
    "query_index,matched_index,distance,accepted,reject_reason,tx,ty,tz,yaw_deg,fitness";

// One row per processed scan; scans without an eligible candidate have
// matched_index -1 and empty numeric fields.
inline void write_detection_row(std::ostream& out, std::int64_t query_index,
                                const std::optional<LoopDetection>& det) {
  if (!det) {
    out << query_index << ",-1,,0,none,,,,,\n";
    return;
  }
  std::ostringstream row;
  row << std::setprecision(9);
  const Vec3 t = det->pose.translation();
  row << det->query_index << ',' << det->matched_index << ','
      << det->descriptor_distance << ',' << (det->accepted ? 1 : 0) << ','
      << to_string(det->reject_reason) << ',' << t.x() << ',' << t.y() << ','
      << t.z() << ',' << rad2deg(det->pose.yaw()) << ',' << det->fitness << '\n';
  out << row.str();
}

struct DetectionRow {
  std::int64_t query_index = 0;
  std::int64_t matched_index = -1;  // -1: no eligible candidate
  double distance = 0.0;
  bool accepted = false;
  Vec3 translation = Vec3::Zero();
  double yaw_deg = 0.0;
  double fitness = 0.0;

  // Roll and pitch are not logged; exact for planar motion.
  Pose pose() const { return Pose::from_ypr(deg2rad(yaw_deg), 0.0, 0.0, translation); }
};

inline std::vector<DetectionRow> read_detection_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open detection log: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kDetectionCsvHeader) {
    throw FormatError(path.string() + ": missing detection header");
  }
  std::vector<DetectionRow> rows;
  int n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    const std::string where = path.string() + ":" + std::to_string(n);
    if (f.size() < 4) throw FormatError(where + ": expected at least 4 fields");
    DetectionRow r;
    try {
      r.query_index = std::stoll(f[0]);
      r.matched_index = std::stoll(f[1]);
      r.accepted = f[3] == "1";
      if (r.matched_index >= 0) {
        if (f.size() != 10) throw FormatError(where + ": expected 10 fields");
        r.distance = std::stod(f[2]);
        r.translation = Vec3(std::stod(f[5]), std::stod(f[6]), std::stod(f[7]));
        r.yaw_deg = std::stod(f[8]);
        r.fitness = std::stod(f[9]);
      }
    } catch (const std::logic_error&) {
      throw FormatError(where + ": bad number");
    }
    rows.push_back(r);
  }
  return rows;
}

// ---- losses ----------------------------------------------------------------

enum class PointNorm { kL1, kL2 };

struct LossConfig {
  double margin = 0.5;
  double beta = 0.05;
  PointNorm norm = PointNorm::kL1;

  void validate() const {
    if (!(margin > 0.0) || !(beta >= 0.0)) {
      throw InvalidArgument("LossConfig: need margin > 0 and beta >= 0");
    }
  }
};

inline double point_norm(const Vec3& v, PointNorm norm) {
  return norm == PointNorm::kL1 ? v.cwiseAbs().sum() : v.norm();
}

inline double triplet_loss(const GlobalDescriptor& anchor,
                           const GlobalDescriptor& positive,
                           const GlobalDescriptor& negative,
                           const LossConfig& cfg = {}) {
  cfg.validate();
  return std::max(0.0, descriptor_distance(anchor, positive) -
                           descriptor_distance(anchor, negative) + cfg.margin);
}

// Mean per-point distance between the cloud under `predicted` and `truth`.
inline double pose_loss(const PointCloud& cloud, const Pose& predicted,
                        const Pose& truth, PointNorm norm = PointNorm::kL1) {
  require_non_empty(cloud, "pose_loss");
  double sum = 0.0;
  for (const auto& p : cloud.points) {
    sum += point_norm(predicted * p.position - truth * p.position, norm);
  }
  return sum / static_cast<double>(cloud.size());
}

// Mean distance between soft-projected targets and the true positions of the
// anchor keypoints, over rows above the mass floor.
inline double ot_aux_loss(const TransportPlan& plan, const KeypointSet& anchor,
                          const KeypointSet& positive, const Pose& truth,
                          PointNorm norm = PointNorm::kL1) {
  if (plan.matrix.rows() != static_cast<Eigen::Index>(anchor.size())) {
    throw InvalidArgument("ot_aux_loss: plan rows do not match anchor keypoints");
  }
  const auto corr = project_soft(plan, positive);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t j = 0; j < corr.valid.size(); ++j) {
    if (!corr.valid[j]) continue;
    sum += point_norm(corr.projected[j] - truth * anchor.coordinates[j], norm);
    ++n;
  }
  return sum / static_cast<double>(n);
}

inline double total_loss(double triplet, double pose, double ot,
                         const LossConfig& cfg = {}) {
  cfg.validate();
  if (!std::isfinite(triplet) || !std::isfinite(pose) || !std::isfinite(ot)) {
    throw InvalidArgument("total_loss: non-finite component");
  }
  return triplet + pose + cfg.beta * ot;
}

}  // namespace lcd

#endif  // LCD_PIPELINE_HPP
