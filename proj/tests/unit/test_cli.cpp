#include <gtest/gtest.h>
#include <json.hpp>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "lcd/io.hpp"
#include "lcd/pipeline.hpp"
#include "lcd/synthetic.hpp"
#include "test_util.hpp"

namespace lcd {
namespace {

namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "lcd_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

RunResult lcd_run(const std::string& args) {
  static int counter = 0;
  const auto tag = std::to_string(counter++);
  const auto out = scratch() / ("stdout" + tag), err = scratch() / ("stderr" + tag);
  const std::string cmd = std::string(LCD_CLI_PATH) + " " + args + " >" + out.string() + " 2>" +
                          err.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// Value of a "key value" line in plain CLI output.
std::string field(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind(key + " ", 0) == 0) return line.substr(key.size() + 1);
  }
  return "";
}

const std::string kSmall = "--set sampling.keypoints=512 ";

TEST(Cli, HelpListsEveryConfigKeyAndUsageErrorsExitTwo) {
  const auto help = lcd_run("--help");
  EXPECT_EQ(help.code, 0);
  for (const char* key : {"uot.lambda", "lcd.exclusion", "icp.on_keypoints", "world.noise_sigma",
                          "sampling.keypoints"}) {
    EXPECT_NE(help.out.find(key), std::string::npos) << key;
  }
  EXPECT_EQ(lcd_run("").code, 2);
  EXPECT_EQ(lcd_run("frobnicate").code, 2);
  EXPECT_EQ(lcd_run("--set nope.key=1 synth --out " + (scratch() / "x").string()).code, 2);
  EXPECT_EQ(lcd_run("--set uot.lambda=-1 synth --out " + (scratch() / "x").string()).code, 2);
}

class CliPair : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ASSERT_EQ(lcd_run("--seed 5 synth --pair --out " + dir().string()).code, 0);
  }
  static fs::path dir() { return scratch() / "pair"; }
  static std::string src() { return (dir() / "source.bin").string(); }
  static std::string tgt() { return (dir() / "target.bin").string(); }
  static std::string truth() { return (dir() / "truth.txt").string(); }
};

TEST_F(CliPair, SelfRegistrationIsIdentity) {
  const auto r = lcd_run(kSmall + "register --json " + src() + " " + src());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  const std::vector<double> pose = j["pose"];
  ASSERT_EQ(pose.size(), 12u);
  const double identity[12] = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
  for (int i = 0; i < 12; ++i) EXPECT_NEAR(pose[static_cast<std::size_t>(i)], identity[i], 1e-6) << i;
  EXPECT_TRUE(j["icp_converged"].get<bool>());
}

TEST_F(CliPair, BothMethodsRecoverTheTruePose) {
  for (const std::string method : {"ransac", "fast"}) {
    const auto r = lcd_run(kSmall + "register --method " + method + " --truth " + truth() + " " +
                           src() + " " + tgt());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(field(r.out, "method"), method + "+icp");
    EXPECT_EQ(field(r.out, "success"), "1") << r.out;
    EXPECT_LT(std::stod(field(r.out, "te_m")), 0.3);
    EXPECT_LT(std::stod(field(r.out, "re_deg")), 2.0);
  }
  const auto j = nlohmann::json::parse(
      lcd_run(kSmall + "register --json --icp-keypoints --truth " + truth() + " " + src() + " " +
              tgt())
          .out);
  EXPECT_EQ(j["method"], "ransac");
  EXPECT_TRUE(j["success"].get<bool>());
}

TEST_F(CliPair, DumpPlanWritesMatrix) {
  const auto plan = scratch() / "plan.txt";
  const auto r = lcd_run(kSmall + "register --method fast --no-icp --dump-plan " + plan.string() +
                         " " + src() + " " + tgt());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(field(r.out, "fitness").empty());
  const auto back = read_transport_plan(plan);
  EXPECT_EQ(back.matrix.rows(), 512);
  EXPECT_EQ(back.matrix.cols(), 512);
}

TEST_F(CliPair, MissingOrCorruptInputsExitTwo) {
  const auto missing = (scratch() / "nowhere.bin").string();
  const auto r = lcd_run("register " + missing + " " + src());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(missing), std::string::npos);
  const auto bad = scratch() / "bad.bin";
  std::ofstream(bad) << "12345";
  EXPECT_EQ(lcd_run("register " + bad.string() + " " + src()).code, 2);
  EXPECT_EQ(lcd_run("register --method icp " + src() + " " + src()).code, 2);
}

TEST(Cli, SynthIsDeterministicAndReingestsExactly) {
  const auto a = scratch() / "synth_a", b = scratch() / "synth_b";
  const std::string opts = "--seed 9 --set trajectory.num_scans=6 --set trajectory.same_revisits=0 "
                           "--set trajectory.reverse_revisits=0 synth --out ";
  ASSERT_EQ(lcd_run(opts + a.string()).code, 0);
  ASSERT_EQ(lcd_run(opts + b.string()).code, 0);
  EXPECT_EQ(slurp(a / "poses.txt"), slurp(b / "poses.txt"));
  for (int i = 0; i < 6; ++i) {
    const auto name = fs::path("velodyne") / ("00000" + std::to_string(i) + ".bin");
    const auto bytes = slurp(a / name);
    EXPECT_FALSE(bytes.empty());
    EXPECT_EQ(bytes, slurp(b / name));
    write_scan(scratch() / "again.bin", read_scan(a / name));
    EXPECT_EQ(slurp(scratch() / "again.bin"), bytes);
  }
  const auto seq = open_sequence(a, a / "poses.txt");
  EXPECT_EQ(seq.size(), 6u);
  EXPECT_NEAR(seq.poses[5].translation().x(), 5.0, 1e-9);
}

TEST(Cli, SynthTrajectoryHasDesignedRevisits) {
  const auto dir = scratch() / "synth_loop";
  // Poses only matter here; a tiny sensor range keeps the scans cheap.
  ASSERT_EQ(lcd_run("--seed 4 --set world.sensor_range=2 synth --out " + dir.string()).code, 0);
  const auto poses = read_poses(dir / "poses.txt");
  ASSERT_EQ(poses.size(), 300u);
  const auto gt = build_loop_groundtruth(std::span<const Pose>(poses));
  std::ifstream kinds(dir / "revisits.txt");
  std::string kind;
  int revisits = 0;
  for (std::size_t i = 0; std::getline(kinds, kind); ++i) {
    EXPECT_EQ(gt.has_loop(i), kind != "none") << i;
    revisits += kind != "none";
  }
  EXPECT_EQ(revisits, 40);
}

// Six places 40 m apart, then a reverse revisit of place 0 and a
// same-direction revisit of place 3.
class CliSequence : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto seq = dir();
    fs::create_directories(seq / "velodyne");
    WorldSpec world;
    world.seed = 77;
    std::vector<Pose> poses;
    for (int i = 0; i < 6; ++i) poses.push_back(Pose::from_ypr(0, 0, 0, Vec3(40.0 * i, 0, 0.5)));
    poses.push_back(Pose::from_ypr(kPi + 0.03, 0, 0, Vec3(0.5, 0.4, 0.5)));
    poses.push_back(Pose::from_ypr(0.05, 0, 0, Vec3(120.3, -0.5, 0.5)));
    for (std::size_t i = 0; i < poses.size(); ++i) {
      write_scan(seq / "velodyne" / ("00000" + std::to_string(i) + ".bin"),
                 generate_world_scan(world, poses[i], 100 + i));
    }
    write_poses(seq / "poses.txt", poses);
    const auto r = lcd_run(kSmall + "--set vlad.clusters=16 --set vlad.output_dim=7 fit-vlad " +
                           (seq / "velodyne").string() + " --every 1 --out " + params());
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static fs::path dir() { return scratch() / "seq"; }
  static std::string poses() { return (dir() / "poses.txt").string(); }
  static std::string params() { return (scratch() / "vlad.bin").string(); }
  static std::string detect(const std::string& extra, const fs::path& out) {
    // A VLAD fitted on eight scans separates places only coarsely, so the
    // descriptor gate is opened and ICP fitness does the rejecting.
    return kSmall + "--set lcd.exclusion=3 --set lcd.threshold=1.6 " + extra + " detect " + dir().string() + " " +
           poses() + " --params " + params() + " --out " + out.string();
  }
};

TEST_F(CliSequence, DetectsBothRevisitsAndIsThreadIndependent) {
  const auto out1 = scratch() / "det1.csv", out3 = scratch() / "det3.csv";
  const auto r = lcd_run(detect("--threads 1", out1) + " --pairs " +
                         (scratch() / "pairs.csv").string() + " --store " +
                         (scratch() / "store.bin").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(field(r.out, "processed"), "8");
  EXPECT_EQ(field(r.out, "accepted"), "2") << slurp(out1);
  const auto rows = read_detection_log(out1);
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows[6].matched_index, 0);
  EXPECT_TRUE(rows[6].accepted);
  EXPECT_EQ(rows[7].matched_index, 3);
  EXPECT_TRUE(rows[7].accepted);
  for (const auto& row : rows) {
    if (row.matched_index >= 0) {
      EXPECT_LE(row.matched_index, row.query_index - 4);
    }
  }
  EXPECT_FALSE(rows[4].accepted);
  EXPECT_FALSE(rows[5].accepted);

  ASSERT_EQ(lcd_run(detect("--threads 3", out3)).code, 0);
  EXPECT_EQ(slurp(out1), slurp(out3));
  EXPECT_EQ(read_descriptor_store(scratch() / "store.bin").size(), 8u);

  const auto e1 = lcd_run("--set lcd.exclusion=3 eval " + out1.string() + " " + poses() +
                          " --out " + (scratch() / "rep1").string());
  ASSERT_EQ(e1.code, 0) << e1.err;
  EXPECT_EQ(field(e1.out, "ap"), "1");
  EXPECT_EQ(field(e1.out, "success_rate"), "1");
  EXPECT_TRUE(fs::exists(scratch() / "rep1.svg"));
  const auto e2 = lcd_run("--set lcd.exclusion=3 eval --protocol 2 " +
                          (scratch() / "pairs.csv").string() + " " + poses() + " --out " +
                          (scratch() / "rep2").string());
  ASSERT_EQ(e2.code, 0) << e2.err;
  EXPECT_EQ(field(e2.out, "loops"), "2");
}

TEST_F(CliSequence, CorruptScansAreSkipped) {
  const auto copy = scratch() / "seq_corrupt";
  fs::remove_all(copy);
  fs::copy(dir(), copy, fs::copy_options::recursive);
  std::ofstream(copy / "velodyne" / "000002.bin", std::ios::trunc) << "not a scan";
  const std::string base = kSmall + "detect " + copy.string() + " " + (copy / "poses.txt").string() +
                           " --params " + params() + " --out " + (scratch() / "dc.csv").string();
  // One of eight scans failing exceeds the 10% budget.
  const auto r = lcd_run(base);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("scan 2: skipped"), std::string::npos) << r.err;
  EXPECT_EQ(field(r.out, "processed"), "7");
  EXPECT_EQ(field(r.out, "failed"), "1");
  EXPECT_EQ(read_detection_log(scratch() / "dc.csv").size(), 7u);
}

TEST(Cli, StraightLineHasNoDetectionsAndSkipsOneCorruptScan) {
  const auto dir = scratch() / "line";
  ASSERT_EQ(lcd_run("--seed 2 --set trajectory.num_scans=10 --set trajectory.same_revisits=0 "
                    "--set trajectory.reverse_revisits=0 synth --out " + dir.string())
                .code,
            0);
  const auto params = (scratch() / "line_vlad.bin").string();
  ASSERT_EQ(lcd_run(kSmall + "--set vlad.clusters=8 --set vlad.output_dim=4 fit-vlad " +
                    (dir / "velodyne").string() + " --every 2 --out " + params)
                .code,
            0);
  std::ofstream(dir / "velodyne" / "000004.bin", std::ios::trunc) << "xyz";
  const auto r = lcd_run(kSmall + "detect " + dir.string() + " " + (dir / "poses.txt").string() +
                         " --params " + params + " --out " + (scratch() / "line.csv").string());
  EXPECT_EQ(r.code, 0) << r.err;  // 1 of 10 is within the 10% budget
  EXPECT_EQ(field(r.out, "processed"), "9");
  EXPECT_EQ(field(r.out, "accepted"), "0");
  for (const auto& row : read_detection_log(scratch() / "line.csv")) {
    EXPECT_EQ(row.matched_index, -1);
  }
}

TEST(Cli, EvalOracleHandCaseAndProtocolFlag) {
  const auto dir = scratch() / "evalcase";
  fs::create_directories(dir);
  std::vector<Pose> poses;
  for (double x : {0.0, 100.0, 200.0, 0.5, 100.5}) poses.push_back(Pose::from_ypr(0, 0, 0, Vec3(x, 0, 0)));
  write_poses(dir / "poses.txt", poses);
  const std::string p = (dir / "poses.txt").string();
  {
    std::ofstream out(dir / "hand.csv");
    out << "query_index,candidate_index,score\n3,0,0.9\n3,1,0.8\n4,1,0.7\n";
  }
  const auto hand = lcd_run("--set lcd.exclusion=1 eval --protocol 2 " + (dir / "hand.csv").string() +
                            " " + p + " --out " + (dir / "hand").string());
  ASSERT_EQ(hand.code, 0) << hand.err;
  EXPECT_NEAR(std::stod(field(hand.out, "ap")), 5.0 / 6.0, 1e-9);

  {
    std::ofstream out(dir / "oracle.csv");
    out << "query_index,candidate_index,score\n";
    for (int i = 2; i < 5; ++i) {
      for (int j = 0; j + 1 < i; ++j) {
        out << i << ',' << j << ','
            << -(poses[static_cast<std::size_t>(i)].translation() -
                 poses[static_cast<std::size_t>(j)].translation())
                    .norm()
            << '\n';
      }
    }
  }
  const auto oracle = lcd_run("--set lcd.exclusion=1 eval --protocol 2 " +
                              (dir / "oracle.csv").string() + " " + p + " --out " +
                              (dir / "oracle").string());
  ASSERT_EQ(oracle.code, 0) << oracle.err;
  EXPECT_EQ(field(oracle.out, "ap"), "1");

  EXPECT_EQ(lcd_run("eval --protocol 3 " + (dir / "hand.csv").string() + " " + p).code, 2);
  // The default exclusion of 50 makes every pair invalid.
  EXPECT_EQ(lcd_run("eval --protocol 2 " + (dir / "hand.csv").string() + " " + p).code, 2);
}

}  // namespace
}  // namespace lcd
