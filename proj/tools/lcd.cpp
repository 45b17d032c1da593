// lcd: loop-closure detection and registration on KITTI-format sequences.
// Exit codes: 0 ok, 1 stage failure, 2 usage or input error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcd/config.hpp"
#include "lcd/eval.hpp"
#include "lcd/io.hpp"
#include "lcd/pipeline.hpp"
#include "lcd/synthetic.hpp"

namespace fs = std::filesystem;
using namespace lcd;

namespace {

constexpr int kOk = 0;
constexpr int kStageFailure = 1;
constexpr int kUsage = 2;

// Anything wrong with what the user handed in; maps to exit code 2.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename Fn>
auto load(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw InputError(e.what());
  }
}

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
};

RunConfig make_config(const Globals& g) {
  return load([&] {
    RunConfig cfg = g.config_path.empty() ? RunConfig() : RunConfig::from_file(g.config_path);
    for (const auto& kv : g.overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (g.seed) cfg.set("seed", std::to_string(*g.seed));
    if (g.threads) cfg.set("threads", std::to_string(*g.threads));
    pipeline_settings(cfg);  // validate every typed view up front
    loss_config(cfg);
    return cfg;
  });
}

std::string config_help() {
  std::ostringstream s;
  s << "\nConfiguration keys (key = default [unit]: description):\n";
  for (const auto& k : config_keys()) {
    s << "  " << k.key << " = " << k.default_value;
    if (*k.unit) s << " [" << k.unit << "]";
    s << ": " << k.help << '\n';
  }
  return s.str();
}

std::vector<fs::path> list_scans(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InputError("scan directory not found: " + dir.string());
  const fs::path scan_dir = fs::is_directory(dir / "velodyne") ? dir / "velodyne" : dir;
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(scan_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".bin") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw InputError("no .bin scans in " + scan_dir.string());
  return out;
}

// ---- register --------------------------------------------------------------

struct RegisterArgs {
  std::string source, target, method, dump_plan, truth;
  bool no_icp = false;
  bool icp_keypoints = false;
  bool json = false;
};

int cmd_register(const Globals& g, const RegisterArgs& a) {
  const auto cfg = make_config(g);
  auto settings = load([&] { return pipeline_settings(cfg); });
  if (!a.method.empty()) settings.lcd.method = load([&] { return parse_registration_method(a.method); });
  const auto source = load([&] { return read_scan(a.source); });
  const auto target = load([&] { return read_scan(a.target); });
  std::optional<Pose> truth;
  if (!a.truth.empty()) {
    const auto poses = load([&] { return read_poses(a.truth); });
    if (poses.size() != 1) throw InputError(a.truth + ": expected exactly one pose");
    truth = poses.front();
  }

  const auto fs_src = extract_scan_features(source, settings.front_end);
  const auto fs_tgt = extract_scan_features(target, settings.front_end);
  RegistrationResult result;
  if (settings.lcd.method == RegistrationMethod::kRansac) {
    result = ransac_register(fs_src.features, fs_tgt.features, settings.ransac, settings.seed);
    if (!a.dump_plan.empty()) {
      write_transport_plan(a.dump_plan, sinkhorn_uot(cost_matrix(fs_src.features, fs_tgt.features), settings.uot));
    }
  } else {
    const auto est = estimate_pose_uot(fs_src.features, fs_tgt.features, settings.uot);
    result.pose = est.pose;
    if (!a.dump_plan.empty()) write_transport_plan(a.dump_plan, est.plan);
  }
  if (!a.no_icp) {
    result = a.icp_keypoints || settings.icp_on_keypoints
                 ? icp(keypoint_cloud(fs_src.features.keypoints),
                       keypoint_cloud(fs_tgt.features.keypoints), result.pose, settings.icp)
                 : icp(fs_src.downsampled, fs_tgt.downsampled, result.pose, settings.icp);
  }
  std::optional<PoseError> err;
  if (truth) err = pose_error(result.pose, *truth);

  if (a.json) {
    nlohmann::ordered_json j;
    j["method"] = to_string(settings.lcd.method);
    j["icp"] = !a.no_icp;
    const Eigen::Matrix4d m = result.pose.matrix();
    j["pose"] = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) j["pose"].push_back(m(r, c));
    }
    j["yaw_deg"] = rad2deg(result.pose.yaw());
    if (!a.no_icp) {
      j["fitness"] = result.fitness;
      j["inlier_rmse"] = result.inlier_rmse;
      j["icp_iterations"] = result.iterations_used;
      j["icp_converged"] = result.converged;
    }
    if (err) {
      j["te_m"] = err->translation_error;
      j["re_deg"] = err->rotation_error;
      j["success"] = success_check(*err);
    }
    std::cout << j.dump(2) << '\n';
    return kOk;
  }

  std::cout << "method " << to_string(settings.lcd.method) << (a.no_icp ? "" : "+icp") << '\n'
            << "pose " << format_pose_line(result.pose) << '\n'
            << "yaw_deg " << format_double(rad2deg(result.pose.yaw())) << '\n';
  if (!a.no_icp) {
    std::cout << "fitness " << format_double(result.fitness) << '\n'
              << "inlier_rmse " << format_double(result.inlier_rmse) << '\n'
              << "icp_iterations " << result.iterations_used << '\n';
  }
  if (err) {
    std::cout << "te_m " << format_double(err->translation_error) << '\n'
              << "re_deg " << format_double(err->rotation_error) << '\n'
              << "success " << (success_check(*err) ? 1 : 0) << '\n';
  }
  return kOk;
}

// ---- detect ----------------------------------------------------------------

struct DetectArgs {
  std::string sequence, poses, params, out = "detections.csv", pairs, store, method;
};

int cmd_detect(const Globals& g, const DetectArgs& a) {
  const auto cfg = make_config(g);
  auto settings = load([&] { return pipeline_settings(cfg); });
  if (!a.method.empty()) settings.lcd.method = load([&] { return parse_registration_method(a.method); });
  const auto seq = load([&] { return open_sequence(a.sequence, a.poses); });
  auto params = load([&] { return read_vlad_params(a.params); });
  std::optional<PipelineState> state;
  load([&] { state.emplace(settings, std::move(params)); return 0; });

  std::ofstream out(a.out, std::ios::trunc);
  if (!out) throw InputError("cannot write detections: " + a.out);
  out << kDetectionCsvHeader << '\n';

  std::size_t processed = 0, failed = 0, candidates = 0, verified = 0, accepted = 0;
  const std::size_t stride = settings.lcd.stride;
  for (std::size_t i = 0; i < seq.size(); i += stride) {
    try {
      const auto scan = seq.load_scan(i);
      const auto det = state->process_scan(static_cast<std::int64_t>(i), scan);
      write_detection_row(out, static_cast<std::int64_t>(i), det);
      ++processed;
      if (det) {
        ++candidates;
        verified += det->reject_reason != RejectReason::kThreshold ? 1 : 0;
        accepted += det->accepted ? 1 : 0;
      }
    } catch (const Error& e) {
      ++failed;
      std::cerr << "scan " << i << ": skipped: " << e.what() << '\n';
    }
  }
  out.flush();
  if (!out) throw Error("failed writing detections: " + a.out);

  TimingSamples timing;
  for (const auto& t : state->timings()) {
    timing.descriptor_extraction.push_back(t.descriptor_extraction);
    timing.map_query.push_back(t.query);
  }
  const auto entries = state->database().snapshot();
  if (!a.pairs.empty()) {
    std::vector<ScoredPair> pairs;
    for (const auto& q : entries) {
      for (const auto& c : entries) {
        if (q.scan_index - c.scan_index <= settings.lcd.exclusion) continue;
        const auto t0 = std::chrono::steady_clock::now();
        const double d = descriptor_distance(q.descriptor, c.descriptor);
        timing.pairwise_comparison.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        pairs.push_back({q.scan_index, c.scan_index, -d, false});
      }
    }
    write_scored_pairs(a.pairs, pairs);
  }
  if (!a.store.empty()) write_descriptor_store(a.store, state->database());

  std::cout << "scans " << seq.size() << "\nprocessed " << processed << "\nfailed " << failed
            << "\ncandidates " << candidates << "\nverified " << verified << "\naccepted "
            << accepted << '\n';
  for (const auto& t : timing_report(timing)) {
    if (t.samples == 0) continue;
    std::cerr << "timing " << t.stage << " median " << t.median << " s, p95 " << t.p95 << " s\n";
  }
  const std::size_t attempted = processed + failed;
  if (attempted > 0 && 10 * failed > attempted) {
    std::cerr << "error: " << failed << " of " << attempted << " scans failed\n";
    return kStageFailure;
  }
  return kOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string input, poses, out = "report";
  int protocol = 1;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  const auto cfg = make_config(g);
  const auto lcd = load([&] { return lcd_config(cfg); });
  const auto poses = load([&] { return read_poses(a.poses); });
  const auto gt = load([&] {
    return build_loop_groundtruth(std::span<const Pose>(poses), lcd.loop_radius,
                                  static_cast<std::size_t>(lcd.exclusion));
  });

  PrCurve curve;
  std::optional<RegistrationStats> stats;
  if (a.protocol == 1) {
    const auto rows = load([&] { return read_detection_log(a.input); });
    std::vector<std::optional<Candidate>> best(poses.size());
    std::vector<RegistrationSample> samples;
    for (const auto& r : rows) {
      if (r.query_index < 0 || static_cast<std::size_t>(r.query_index) >= poses.size()) {
        throw InputError("detection for scan " + std::to_string(r.query_index) +
                         " but groundtruth has " + std::to_string(poses.size()) + " poses");
      }
      if (r.matched_index < 0) continue;
      if (r.matched_index >= r.query_index) {
        throw InputError("detection " + std::to_string(r.query_index) + " matches a later scan");
      }
      best[static_cast<std::size_t>(r.query_index)] = Candidate{r.matched_index, -r.distance};
      const auto q = static_cast<std::size_t>(r.query_index);
      const auto m = static_cast<std::size_t>(r.matched_index);
      if (r.accepted && gt.contains(q, m)) {
        const Pose truth = inverse(poses[m]) * poses[q];
        const auto err = pose_error(r.pose(), truth);
        samples.push_back({err, success_check(err)});
      }
    }
    curve = load([&] { return protocol1(best, gt); });
    if (!samples.empty()) stats = registration_stats(samples);
  } else {
    auto pairs = load([&] { return read_scored_pairs(a.input); });
    for (const auto& p : pairs) {
      if (static_cast<std::size_t>(std::max(p.query_index, p.candidate_index)) >= poses.size()) {
        throw InputError("pair (" + std::to_string(p.query_index) + ", " +
                         std::to_string(p.candidate_index) + ") outside groundtruth");
      }
    }
    curve = load([&] { return protocol2(std::move(pairs), gt); });
  }
  emit_report(curve, stats, {}, a.out);

  std::cout << "protocol " << a.protocol << "\nloops " << gt.pairs().size() << "\nthresholds "
            << curve.points.size() << "\nap " << format_double(curve.ap) << '\n';
  if (curve.no_positives) std::cout << "note: groundtruth has no loops\n";
  if (stats) {
    std::cout << "registered " << stats->count << "\nsuccess_rate "
              << format_double(stats->success_rate) << '\n';
  }
  return kOk;
}

// ---- synth -----------------------------------------------------------------

struct SynthArgs {
  std::string out;
  bool pair = false;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
  const auto cfg = make_config(g);
  const std::uint64_t seed = cfg.seed();
  const fs::path dir(a.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create " + dir.string() + ": " + ec.message());

  if (a.pair) {
    SyntheticScene scene{generate_scene_cloud(SceneSpec{}, seed), {}};
    scene.perturbation.noise_sigma = cfg.get_double("world.noise_sigma");
    const auto p = generate_synthetic_pair(scene, mix_seed(seed, 1));
    write_scan(dir / "source.bin", p.source);
    write_scan(dir / "target.bin", p.target);
    const std::vector<Pose> truth{p.truth};
    write_poses(dir / "truth.txt", truth);
    std::cout << "wrote pair to " << dir.string() << '\n';
    return kOk;
  }

  const auto world = load([&] { return world_spec(cfg); });
  const auto traj = load([&] { return make_trajectory(trajectory_spec(cfg), world.sensor_height, seed); });
  fs::create_directories(dir / "velodyne", ec);
  if (ec) throw InputError("cannot create " + (dir / "velodyne").string() + ": " + ec.message());
  for (std::size_t i = 0; i < traj.poses.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.bin", i);
    write_scan(dir / "velodyne" / name, generate_world_scan(world, traj.poses[i], mix_seed(seed, i)));
  }
  write_poses(dir / "poses.txt", traj.poses);
  std::ofstream kinds(dir / "revisits.txt", std::ios::trunc);
  for (auto k : traj.kinds) {
    kinds << (k == RevisitKind::kNone ? "none" : k == RevisitKind::kSameDirection ? "same" : "reverse")
          << '\n';
  }
  std::cout << "wrote " << traj.poses.size() << " scans to " << dir.string() << '\n';
  return kOk;
}

// ---- fit-vlad --------------------------------------------------------------

struct FitArgs {
  std::string scans, out = "vlad.bin";
  std::size_t every = 3;
};

int cmd_fit_vlad(const Globals& g, const FitArgs& a) {
  const auto cfg = make_config(g);
  const auto fe = load([&] { return front_end_spec(cfg); });
  const auto opts = vlad_fit_options(cfg);
  if (a.every == 0) throw InputError("--every must be >= 1");
  const auto paths = list_scans(a.scans);
  std::vector<KeypointFeatures> training;
  for (std::size_t i = 0; i < paths.size(); i += a.every) {
    const auto scan = load([&] { return read_scan(paths[i]); });
    training.push_back(extract_scan_features(scan, fe).features);
  }
  const auto params = fit_vlad_params(training, cfg.seed(), opts);
  write_vlad_params(a.out, params);
  std::cout << "fitted K=" << params.clusters() << " D=" << params.feature_dim()
            << " G=" << params.output_dim() << " on " << training.size() << " scans -> " << a.out
            << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LiDAR loop-closure detection and registration"};
  app.footer(config_help());
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "key=value configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "override a configuration key (key=value), repeatable");
  app.add_option("--seed", g.seed, "master seed (overrides the config)");
  app.add_option("--threads", g.threads, "worker threads, 0 = all cores (overrides the config)");

  RegisterArgs reg;
  auto* sub_reg = app.add_subcommand("register", "estimate the pose mapping source into target");
  sub_reg->add_option("source", reg.source, "source scan (.bin)")->required();
  sub_reg->add_option("target", reg.target, "target scan (.bin)")->required();
  sub_reg->add_option("--method", reg.method, "ransac or fast (default: lcd.method)")
      ->check(CLI::IsMember({"ransac", "fast", "uot"}));
  sub_reg->add_flag("--no-icp", reg.no_icp, "skip ICP refinement");
  sub_reg->add_flag("--icp-keypoints", reg.icp_keypoints, "run ICP on keypoints instead of full clouds");
  sub_reg->add_flag("--json", reg.json, "print one JSON record instead of key/value lines");
  sub_reg->add_option("--dump-plan", reg.dump_plan, "write the transport plan (text matrix)");
  sub_reg->add_option("--truth", reg.truth, "pose file with the true pose, adds TE/RE");

  DetectArgs det;
  auto* sub_det = app.add_subcommand("detect", "run loop detection over a sequence");
  sub_det->add_option("sequence", det.sequence, "sequence directory")->required();
  sub_det->add_option("poses", det.poses, "pose file")->required();
  sub_det->add_option("--params", det.params, "VLAD parameter file from fit-vlad")->required();
  sub_det->add_option("--out", det.out, "detection CSV")->capture_default_str();
  sub_det->add_option("--pairs", det.pairs, "also write all-pairs scores for protocol 2");
  sub_det->add_option("--store", det.store, "also write the descriptor store");
  sub_det->add_option("--method", det.method, "ransac or fast")
      ->check(CLI::IsMember({"ransac", "fast", "uot"}));

  EvalArgs ev;
  auto* sub_ev = app.add_subcommand("eval", "precision-recall evaluation");
  sub_ev->add_option("input", ev.input, "detection CSV (protocol 1) or pairs CSV (protocol 2)")
      ->required();
  sub_ev->add_option("poses", ev.poses, "groundtruth pose file")->required();
  sub_ev->add_option("--protocol", ev.protocol, "1: best candidate per query, 2: all pairs")->capture_default_str()
      ->check(CLI::IsMember({1, 2}));
  sub_ev->add_option("--out", ev.out, "report prefix")->capture_default_str();

  SynthArgs sy;
  auto* sub_sy = app.add_subcommand("synth", "write a synthetic sequence or pair");
  sub_sy->add_option("--out", sy.out, "output directory")->required();
  sub_sy->add_flag("--pair", sy.pair, "write one registration pair instead of a trajectory");

  FitArgs fit;
  auto* sub_fit = app.add_subcommand("fit-vlad", "fit VLAD parameters on training scans");
  sub_fit->add_option("scans", fit.scans, "directory of .bin scans")->required();
  sub_fit->add_option("--out", fit.out, "parameter file")->capture_default_str();
  sub_fit->add_option("--every", fit.every, "use every n-th scan")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*sub_reg) return cmd_register(g, reg);
    if (*sub_det) return cmd_detect(g, det);
    if (*sub_ev) return cmd_eval(g, ev);
    if (*sub_sy) return cmd_synth(g, sy);
    if (*sub_fit) return cmd_fit_vlad(g, fit);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStageFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStageFailure;
  }
  return kUsage;
}
