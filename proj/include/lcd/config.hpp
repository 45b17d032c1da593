#ifndef LCD_CONFIG_HPP
#define LCD_CONFIG_HPP

// Flat key=value run configuration. Every key has a default; unknown keys
// are rejected. Lines starting with '#' are comments.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lcd/descriptor.hpp"
#include "lcd/error.hpp"
#include "lcd/pipeline.hpp"
#include "lcd/synthetic.hpp"

namespace lcd {

struct ConfigKey {
  const char* key;
  const char* default_value;
  const char* unit;
  const char* help;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"seed", "0", "", "master seed for every random draw"},
      {"threads", "0", "", "worker threads, 0 = all cores"},
      {"voxel.size", "0.1", "m", "voxel edge"},
      {"voxel.min_x", "-70.4", "m", "crop box"},
      {"voxel.min_y", "-70.4", "m", "crop box"},
      {"voxel.min_z", "-1", "m", "crop box"},
      {"voxel.max_x", "70.4", "m", "crop box"},
      {"voxel.max_y", "70.4", "m", "crop box"},
      {"voxel.max_z", "3", "m", "crop box"},
      {"sampling.keypoints", "4096", "", "FPS keypoints per scan"},
      {"sampling.random_seed_point", "false", "", "start FPS at a seeded index instead of 0"},
      {"features.radii", "0.6,1.2,2.4", "m", "neighborhood radii"},
      {"features.angle_bins", "8", "", "normal-inclination histogram bins"},
      {"features.radial_bins", "8", "", "neighbor-distance histogram bins"},
      {"features.min_neighbors", "5", "", "minimum neighbors for a populated block"},
      {"features.normal_neighbors", "10", "", "k for normal estimation"},
      {"features.height_bins", "8", "", "height-context histogram bins, 0 disables the block"},
      {"features.height_range", "4", "m", "vertical extent covered by the height histogram"},
      {"uot.lambda", "0.01", "", "entropy weight"},
      {"uot.rho", "0.01", "", "marginal relaxation weight"},
      {"uot.iterations", "5", "", "Sinkhorn iterations"},
      {"uot.weighting", "peak", "", "pose-fit row weights: peak or row_mass"},
      {"ransac.iterations", "5000", "", "maximum hypotheses"},
      {"ransac.inlier_threshold", "0.6", "m", "inlier distance"},
      {"ransac.min_inlier_fraction", "0.05", "", "support needed to report convergence"},
      {"ransac.mutual", "true", "", "keep only mutual nearest feature matches"},
      {"icp.variant", "point_to_point", "", "point_to_point or point_to_plane"},
      {"icp.iterations", "50", "", "maximum iterations"},
      {"icp.max_distance", "1.0", "m", "correspondence distance"},
      {"icp.epsilon", "1e-6", "rad+m", "convergence threshold on the step"},
      {"icp.normal_neighbors", "10", "", "k for target normals (point_to_plane)"},
      {"icp.on_keypoints", "false", "", "refine on keypoints instead of full clouds"},
      {"vlad.clusters", "64", "", "NetVLAD clusters K"},
      {"vlad.output_dim", "256", "", "descriptor size G"},
      {"vlad.alpha", "100", "", "assignment sharpness"},
      {"vlad.gate_bias", "3", "", "initial context-gating bias"},
      {"vlad.intra_normalize", "false", "", "per-cluster L2 normalization"},
      {"lcd.threshold", "0.9", "", "descriptor distance below which a loop is verified"},
      {"lcd.icp_fitness", "0.9", "", "minimum ICP fitness to accept a loop"},
      {"lcd.exclusion", "50", "scans", "recent scans excluded from retrieval"},
      {"lcd.loop_radius", "4", "m", "groundtruth loop radius"},
      {"lcd.method", "ransac", "", "ransac or fast"},
      {"lcd.stride", "1", "scans", "keyframe stride"},
      {"loss.margin", "0.5", "", "triplet margin"},
      {"loss.beta", "0.05", "", "weight of the transport auxiliary loss"},
      {"loss.norm", "l1", "", "per-point norm of pose losses: l1 or l2"},
      {"trajectory.num_scans", "300", "", "scans in a synthetic trajectory"},
      {"trajectory.same_revisits", "20", "", "same-direction revisit scans"},
      {"trajectory.reverse_revisits", "20", "", "reverse-direction revisit scans"},
      {"trajectory.spacing", "1", "m", "distance between consecutive scans"},
      {"trajectory.lane_separation", "60", "m", "distance between route segments"},
      {"trajectory.lateral_jitter", "0.75", "m", "revisit offset across the route"},
      {"trajectory.heading_jitter", "5", "deg", "revisit heading noise"},
      {"world.cell_size", "10", "m", "object cell size"},
      {"world.sensor_range", "20", "m", "horizontal sensor range"},
      {"world.sensor_height", "0.5", "m", "sensor height above ground"},
      {"world.ground_density", "5", "pts/m^2", "ground sampling density"},
      {"world.object_density", "20", "pts/m^2", "object surface sampling density"},
      {"world.noise_sigma", "0.02", "m", "per-axis range noise"},
  };
  return keys;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.key] = k.default_value;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path.string());
    RunConfig cfg;
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
      ++n;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw FormatError(path.string() + ":" + std::to_string(n) + ": expected key=value");
      }
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw InvalidArgument("unknown config key '" + key + "'");
    it->second = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw InvalidArgument("unknown config key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key) const {
    const auto& s = get(key);
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw InvalidArgument("config key '" + key + "': not a number: '" + s + "'");
    }
    return v;
  }

  std::int64_t get_int(const std::string& key) const {
    const auto& s = get(key);
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw InvalidArgument("config key '" + key + "': not an integer: '" + s + "'");
    }
    return v;
  }

  std::size_t get_count(const std::string& key) const {
    const auto v = get_int(key);
    if (v < 0) throw InvalidArgument("config key '" + key + "' must be >= 0");
    return static_cast<std::size_t>(v);
  }

  bool get_bool(const std::string& key) const {
    const auto& s = get(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw InvalidArgument("config key '" + key + "': not a boolean: '" + s + "'");
  }

  std::vector<double> get_list(const std::string& key) const {
    std::vector<double> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      double v = 0.0;
      auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (item.empty() || ec != std::errc() || p != item.data() + item.size()) {
        throw InvalidArgument("config key '" + key + "': bad list entry '" + item + "'");
      }
      out.push_back(v);
    }
    return out;
  }

  std::uint64_t seed() const { return static_cast<std::uint64_t>(get_int("seed")); }
  unsigned threads() const { return static_cast<unsigned>(get_count("threads")); }

  // Key=value lines in table order.
  std::string dump() const {
    std::string out;
    for (const auto& k : config_keys()) out += std::string(k.key) + "=" + get(k.key) + "\n";
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> values_;
};

// ---- typed views -----------------------------------------------------------

inline FrontEndSpec front_end_spec(const RunConfig& c) {
  FrontEndSpec s;
  s.voxel.voxel_size = c.get_double("voxel.size");
  s.voxel.min_bound = Vec3(c.get_double("voxel.min_x"), c.get_double("voxel.min_y"),
                           c.get_double("voxel.min_z"));
  s.voxel.max_bound = Vec3(c.get_double("voxel.max_x"), c.get_double("voxel.max_y"),
                           c.get_double("voxel.max_z"));
  s.voxel.validate();
  s.keypoints = c.get_count("sampling.keypoints");
  s.random_seed_point = c.get_bool("sampling.random_seed_point");
  s.seed = c.seed();
  s.features.radii = c.get_list("features.radii");
  s.features.angle_bins = static_cast<int>(c.get_int("features.angle_bins"));
  s.features.radial_bins = static_cast<int>(c.get_int("features.radial_bins"));
  s.features.min_neighbors = c.get_count("features.min_neighbors");
  s.features.normal_neighbors = c.get_count("features.normal_neighbors");
  s.features.height_bins = static_cast<int>(c.get_int("features.height_bins"));
  s.features.height_range = c.get_double("features.height_range");
  s.features.threads = c.threads();
  s.features.validate();
  return s;
}

inline UotParams uot_params(const RunConfig& c) {
  UotParams p;
  p.lambda = c.get_double("uot.lambda");
  p.rho = c.get_double("uot.rho");
  p.iterations = static_cast<int>(c.get_int("uot.iterations"));
  const auto& w = c.get("uot.weighting");
  if (w == "peak") {
    p.weighting = SvdWeighting::kPeak;
  } else if (w == "row_mass") {
    p.weighting = SvdWeighting::kRowMass;
  } else {
    throw InvalidArgument("uot.weighting must be peak or row_mass");
  }
  p.validate();
  return p;
}

inline RansacParams ransac_params(const RunConfig& c) {
  RansacParams p;
  p.max_iterations = static_cast<int>(c.get_int("ransac.iterations"));
  p.inlier_threshold = c.get_double("ransac.inlier_threshold");
  p.min_inlier_fraction = c.get_double("ransac.min_inlier_fraction");
  p.mutual_check = c.get_bool("ransac.mutual");
  p.validate();
  return p;
}

inline IcpParams icp_params(const RunConfig& c) {
  IcpParams p;
  const auto& v = c.get("icp.variant");
  if (v == "point_to_point") {
    p.variant = IcpVariant::kPointToPoint;
  } else if (v == "point_to_plane") {
    p.variant = IcpVariant::kPointToPlane;
  } else {
    throw InvalidArgument("icp.variant must be point_to_point or point_to_plane");
  }
  p.max_iterations = static_cast<int>(c.get_int("icp.iterations"));
  p.correspondence_distance = c.get_double("icp.max_distance");
  p.convergence_epsilon = c.get_double("icp.epsilon");
  p.normal_neighbors = c.get_count("icp.normal_neighbors");
  p.validate();
  return p;
}

inline VladFitOptions vlad_fit_options(const RunConfig& c) {
  VladFitOptions o;
  o.clusters = c.get_int("vlad.clusters");
  o.output_dim = c.get_int("vlad.output_dim");
  o.alpha = c.get_double("vlad.alpha");
  o.gate_bias = c.get_double("vlad.gate_bias");
  o.intra_normalize = c.get_bool("vlad.intra_normalize");
  return o;
}

inline LcdConfig lcd_config(const RunConfig& c) {
  LcdConfig l;
  l.similarity_threshold = c.get_double("lcd.threshold");
  l.icp_fitness_threshold = c.get_double("lcd.icp_fitness");
  l.exclusion = c.get_int("lcd.exclusion");
  l.loop_radius = c.get_double("lcd.loop_radius");
  l.method = parse_registration_method(c.get("lcd.method"));
  l.stride = c.get_count("lcd.stride");
  l.validate();
  return l;
}

inline LossConfig loss_config(const RunConfig& c) {
  LossConfig l;
  l.margin = c.get_double("loss.margin");
  l.beta = c.get_double("loss.beta");
  const auto& n = c.get("loss.norm");
  if (n == "l1") {
    l.norm = PointNorm::kL1;
  } else if (n == "l2") {
    l.norm = PointNorm::kL2;
  } else {
    throw InvalidArgument("loss.norm must be l1 or l2");
  }
  l.validate();
  return l;
}

inline PipelineSettings pipeline_settings(const RunConfig& c) {
  PipelineSettings s;
  s.front_end = front_end_spec(c);
  s.uot = uot_params(c);
  s.ransac = ransac_params(c);
  s.icp = icp_params(c);
  s.lcd = lcd_config(c);
  s.icp_on_keypoints = c.get_bool("icp.on_keypoints");
  s.seed = c.seed();
  return s;
}

inline TrajectorySpec trajectory_spec(const RunConfig& c) {
  TrajectorySpec t;
  t.num_scans = c.get_count("trajectory.num_scans");
  t.same_revisits = c.get_count("trajectory.same_revisits");
  t.reverse_revisits = c.get_count("trajectory.reverse_revisits");
  t.spacing = c.get_double("trajectory.spacing");
  t.lane_separation = c.get_double("trajectory.lane_separation");
  t.lateral_jitter = c.get_double("trajectory.lateral_jitter");
  t.heading_jitter_deg = c.get_double("trajectory.heading_jitter");
  return t;
}

inline WorldSpec world_spec(const RunConfig& c) {
  WorldSpec w;
  w.seed = c.seed();
  w.cell_size = c.get_double("world.cell_size");
  w.sensor_range = c.get_double("world.sensor_range");
  w.sensor_height = c.get_double("world.sensor_height");
  w.ground_density = c.get_double("world.ground_density");
  w.object_density = c.get_double("world.object_density");
  w.noise_sigma = c.get_double("world.noise_sigma");
  return w;
}

}  // namespace lcd

#endif  // LCD_CONFIG_HPP
