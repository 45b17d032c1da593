#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "lcd/pipeline.hpp"
#include "lcd/synthetic.hpp"
#include "test_util.hpp"

namespace lcd {
namespace {

constexpr std::int64_t kExclusion = 5;
constexpr std::size_t kPlaces = 6;

// Scans 0..5 visit six different scenes; scans 6..11 revisit them in order,
// each under a large random motion, so scan i + 6 loops with scan i.
class PipelineRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    FrontEndSpec fe;
    fe.keypoints = 384;
    SceneSpec spec;
    spec.num_points = 6000;
    std::vector<KeypointFeatures> training;
    for (std::uint64_t s = 0; s < 20; ++s) {
      training.push_back(extract_scan_features(generate_scene_cloud(spec, 4000 + s), fe).features);
    }
    VladFitOptions o;
    o.clusters = 32;
    o.output_dim = 16;
    params_ = new VladParams(fit_vlad_params(training, 3, o));
    scans_ = new std::vector<PointCloud>(2 * kPlaces);
    truths_ = new std::vector<Pose>(kPlaces);
    for (std::size_t i = 0; i < kPlaces; ++i) {
      SyntheticScene scene;
      scene.base_cloud = generate_scene_cloud(spec, 4100 + i);
      scene.perturbation.noise_sigma = 0.01;
      const auto pair = generate_synthetic_pair(scene, 4200 + i);
      (*scans_)[i] = pair.source;
      (*scans_)[i + kPlaces] = pair.target;
      (*truths_)[i] = pair.truth;
    }
    settings_ = new PipelineSettings();
    settings_->front_end = fe;
    settings_->lcd.exclusion = kExclusion;
  }
  static void TearDownTestSuite() {
    delete params_;
    delete scans_;
    delete truths_;
    delete settings_;
  }

  static std::vector<std::optional<LoopDetection>> run(const PipelineSettings& s,
                                                       const VladParams& p) {
    PipelineState state(s, p);
    std::vector<std::optional<LoopDetection>> out;
    for (std::size_t i = 0; i < scans_->size(); ++i) {
      out.push_back(state.process_scan(static_cast<std::int64_t>(i), (*scans_)[i]));
    }
    EXPECT_EQ(state.database().size(), scans_->size());
    EXPECT_EQ(state.timings().size(), scans_->size());
    return out;
  }

  static void expect_outside_window(const std::vector<std::optional<LoopDetection>>& dets) {
    for (const auto& d : dets) {
      if (d) {
        EXPECT_LE(d->matched_index, d->query_index - kExclusion - 1);
      }
    }
  }

  static inline VladParams* params_ = nullptr;
  static inline std::vector<PointCloud>* scans_ = nullptr;
  static inline std::vector<Pose>* truths_ = nullptr;
  static inline PipelineSettings* settings_ = nullptr;
};

TEST_F(PipelineRun, RevisitsAreDetectedWithCorrectPose) {
  for (auto method : {RegistrationMethod::kRansac, RegistrationMethod::kUotFast}) {
    auto s = *settings_;
    s.lcd.method = method;
    const auto dets = run(s, *params_);
    for (std::size_t i = 0; i <= kExclusion; ++i) EXPECT_FALSE(dets[i].has_value()) << i;
    expect_outside_window(dets);
    for (std::size_t i = 0; i < kPlaces; ++i) {
      const auto& d = dets[i + kPlaces];
      ASSERT_TRUE(d.has_value());
      SCOPED_TRACE(std::string(to_string(method)) + " query " + std::to_string(i + kPlaces));
      EXPECT_EQ(d->matched_index, static_cast<std::int64_t>(i));
      EXPECT_TRUE(d->accepted);
      EXPECT_EQ(d->reject_reason, RejectReason::kNone);
      EXPECT_LT(d->descriptor_distance, s.lcd.similarity_threshold);
      EXPECT_GT(d->fitness, s.lcd.icp_fitness_threshold);
      // The query is the revisit (target) scan, matched against the source.
      const auto err = pose_error(d->pose, inverse((*truths_)[i]));
      EXPECT_LE(err.translation_error, 0.3);
      EXPECT_LE(err.rotation_error, 2.0);
    }
  }
}

TEST_F(PipelineRun, KeypointIcpAlsoAcceptsRevisits) {
  auto s = *settings_;
  s.icp_on_keypoints = true;
  const auto dets = run(s, *params_);
  for (std::size_t i = 0; i < kPlaces; ++i) {
    ASSERT_TRUE(dets[i + kPlaces].has_value());
    EXPECT_EQ(dets[i + kPlaces]->matched_index, static_cast<std::int64_t>(i));
    EXPECT_TRUE(dets[i + kPlaces]->accepted);
  }
}

TEST_F(PipelineRun, ForgedDescriptorMatchIsRejectedAsInconsistent) {
  // Zero compression makes every descriptor the same vector, so each query
  // hits the oldest eligible scan at distance 0 regardless of geometry.
  VladParams forged = *params_;
  forged.compression.setZero();
  forged.compression_bias.setOnes();
  const auto dets = run(*settings_, forged);
  int inconsistent = 0;
  for (std::size_t q = kExclusion + 1; q < dets.size(); ++q) {
    ASSERT_TRUE(dets[q].has_value());
    EXPECT_EQ(dets[q]->matched_index, 0);
    EXPECT_EQ(dets[q]->descriptor_distance, 0.0);
    if (q != kPlaces) {  // only scan 6 truly revisits scan 0
      EXPECT_FALSE(dets[q]->accepted) << q;
      EXPECT_EQ(dets[q]->reject_reason, RejectReason::kConsistency);
      EXPECT_LE(dets[q]->fitness, settings_->lcd.icp_fitness_threshold);
      ++inconsistent;
    }
  }
  EXPECT_EQ(inconsistent, 5);
}

TEST_F(PipelineRun, AcceptanceIsMonotoneInThreshold) {
  std::set<std::int64_t> previous;
  for (double th : {0.0, 0.2, 0.5, 0.9, 1.3, 2.1}) {
    auto s = *settings_;
    s.lcd.similarity_threshold = th;
    const auto dets = run(s, *params_);
    expect_outside_window(dets);
    std::set<std::int64_t> accepted;
    for (const auto& d : dets) {
      if (!d) continue;
      if (d->accepted) {
        EXPECT_LT(d->descriptor_distance, th);
        accepted.insert(d->query_index);
      } else if (d->descriptor_distance >= th) {
        EXPECT_EQ(d->reject_reason, RejectReason::kThreshold);
      }
    }
    EXPECT_TRUE(std::includes(accepted.begin(), accepted.end(), previous.begin(), previous.end()))
        << "th = " << th;
    previous = accepted;
  }
  EXPECT_EQ(previous.size(), kPlaces);
}

TEST_F(PipelineRun, RejectsMismatchedSettings) {
  auto s = *settings_;
  s.front_end.features.height_bins = 0;
  EXPECT_THROW(PipelineState(s, *params_), InvalidArgument);
  s = *settings_;
  s.lcd.icp_fitness_threshold = 1.5;
  EXPECT_THROW(PipelineState(s, *params_), InvalidArgument);
}

TEST(RegistrationMethodParse, NamesRoundTrip) {
  EXPECT_EQ(parse_registration_method("ransac"), RegistrationMethod::kRansac);
  EXPECT_EQ(parse_registration_method("fast"), RegistrationMethod::kUotFast);
  EXPECT_EQ(parse_registration_method(to_string(RegistrationMethod::kUotFast)),
            RegistrationMethod::kUotFast);
  EXPECT_THROW(parse_registration_method("icp"), InvalidArgument);
}

TEST(KeypointCloud, CopiesCoordinates) {
  KeypointSet kp;
  kp.indices = {4, 9};
  kp.coordinates = {Vec3(1, 2, 3), Vec3(-1, 0, 5)};
  const auto c = keypoint_cloud(kp);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[1].position, Vec3(-1, 0, 5));
}

TEST(DetectionLog, RoundTrip) {
  test::TempDir dir;
  LoopDetection d;
  d.query_index = 120;
  d.matched_index = 17;
  d.descriptor_distance = 0.4321;
  d.pose = Pose::from_ypr(deg2rad(-171.25), 0, 0, Vec3(1.5, -0.25, 0.125));
  d.fitness = 0.97;
  d.accepted = true;
  d.reject_reason = RejectReason::kNone;
  {
    std::ofstream out(dir / "det.csv");
    out << kDetectionCsvHeader << '\n';
    write_detection_row(out, 119, std::nullopt);
    write_detection_row(out, 120, d);
  }
  const auto rows = read_detection_log(dir / "det.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].query_index, 119);
  EXPECT_EQ(rows[0].matched_index, -1);
  EXPECT_FALSE(rows[0].accepted);
  EXPECT_EQ(rows[1].matched_index, 17);
  EXPECT_TRUE(rows[1].accepted);
  EXPECT_NEAR(rows[1].distance, 0.4321, 1e-12);
  EXPECT_NEAR(rows[1].fitness, 0.97, 1e-12);
  const auto err = pose_error(rows[1].pose(), d.pose);
  EXPECT_LE(err.translation_error, 1e-8);
  EXPECT_LE(err.rotation_error, 1e-6);

  std::ofstream(dir / "bad.csv") << "query_index,matched\n";
  EXPECT_THROW(read_detection_log(dir / "bad.csv"), FormatError);
  std::ofstream(dir / "bad2.csv") << kDetectionCsvHeader << "\n3,1,x,1,none,0,0,0,0,1\n";
  EXPECT_THROW(read_detection_log(dir / "bad2.csv"), FormatError);
  EXPECT_THROW(read_detection_log(dir / "none.csv"), IoError);
}

GlobalDescriptor unit(std::mt19937_64& rng, int g) {
  std::normal_distribution<double> n;
  Eigen::VectorXd v(g);
  for (int i = 0; i < g; ++i) v(i) = n(rng);
  return {v.normalized()};
}

TEST(TripletLoss, HandCasesAndFormula) {
  std::mt19937_64 rng(200);
  const auto a = unit(rng, 8);
  GlobalDescriptor far{-a.vector};  // distance 2 > margin
  EXPECT_EQ(triplet_loss(a, a, far), 0.0);
  EXPECT_EQ(triplet_loss(a, a, a), 0.5);
  for (int i = 0; i < 100; ++i) {
    const auto x = unit(rng, 8), p = unit(rng, 8), n = unit(rng, 8);
    const double dp = (x.vector - p.vector).norm(), dn = (x.vector - n.vector).norm();
    const double l = triplet_loss(x, p, n);
    EXPECT_NEAR(l, std::max(0.0, dp - dn + 0.5), 1e-15);
    EXPECT_GE(l, 0.0);
    EXPECT_EQ(l == 0.0, dp + 0.5 <= dn);
  }
  LossConfig bad;
  bad.margin = 0.0;
  EXPECT_THROW(triplet_loss(a, a, a, bad), InvalidArgument);
}

TEST(PoseLoss, HandCasesAndNaiveLoop) {
  std::mt19937_64 rng(201);
  const auto cloud = test::random_cloud(rng, 200);
  const auto truth = test::random_pose(rng);
  EXPECT_EQ(pose_loss(cloud, truth, truth), 0.0);
  const Pose shifted = Pose::from_ypr(0, 0, 0, Vec3(1, 0, 0)) * truth;
  EXPECT_NEAR(pose_loss(cloud, shifted, truth), 1.0, 1e-12);
  const Pose diagonal = Pose::from_ypr(0, 0, 0, Vec3(1, 1, 1)) * truth;
  EXPECT_NEAR(pose_loss(cloud, diagonal, truth, PointNorm::kL1), 3.0, 1e-12);
  EXPECT_NEAR(pose_loss(cloud, diagonal, truth, PointNorm::kL2), std::sqrt(3.0), 1e-12);

  const auto predicted = test::random_pose(rng);
  double naive = 0.0;
  for (const auto& p : cloud.points) {
    const Vec3 a = predicted.rotation() * p.position + predicted.translation();
    const Vec3 b = truth.rotation() * p.position + truth.translation();
    naive += std::abs(a.x() - b.x()) + std::abs(a.y() - b.y()) + std::abs(a.z() - b.z());
  }
  EXPECT_NEAR(pose_loss(cloud, predicted, truth), naive / 200.0, 1e-10);
  EXPECT_GT(pose_loss(cloud, predicted, truth), 0.0);
  EXPECT_THROW(pose_loss(PointCloud{}, truth, truth), InvalidArgument);
}

TEST(OtAuxLoss, HardAssignmentAndUniformPlan) {
  std::mt19937_64 rng(202);
  const auto truth = test::random_pose(rng, 3.0);
  KeypointSet anchor, positive;
  for (int i = 0; i < 6; ++i) {
    anchor.indices.push_back(static_cast<std::size_t>(i));
    anchor.coordinates.push_back(test::random_cloud(rng, 1)[0].position);
  }
  // The positive set lists the true correspondences in reverse order.
  for (int i = 5; i >= 0; --i) {
    positive.indices.push_back(static_cast<std::size_t>(5 - i));
    positive.coordinates.push_back(truth * anchor.coordinates[static_cast<std::size_t>(i)]);
  }
  TransportPlan plan;
  plan.matrix = Eigen::MatrixXd::Zero(6, 6);
  for (int i = 0; i < 6; ++i) plan.matrix(i, 5 - i) = 1.0 / 6.0;
  EXPECT_NEAR(ot_aux_loss(plan, anchor, positive, truth), 0.0, 1e-12);

  // Identity truth with s_j = p_j.
  plan.matrix = Eigen::MatrixXd::Identity(6, 6);
  EXPECT_NEAR(ot_aux_loss(plan, anchor, anchor, Pose::identity()), 0.0, 1e-12);

  // Uniform plan: every row projects to the target centroid (2/3, 0, 0).
  KeypointSet a2, t2;
  a2.indices = {0, 1};
  a2.coordinates = {Vec3(0, 0, 0), Vec3(1, 1, 0)};
  t2.indices = {0, 1, 2};
  t2.coordinates = {Vec3(0, 0, 0), Vec3(0, 0, 0), Vec3(2, 0, 0)};
  plan.matrix = Eigen::MatrixXd::Constant(2, 3, 1.0 / 6.0);
  // |(2/3,0,0)|_1 = 2/3 and |(-1/3,-1,0)|_1 = 4/3, mean 1.
  EXPECT_NEAR(ot_aux_loss(plan, a2, t2, Pose::identity()), 1.0, 1e-12);
  EXPECT_NEAR(ot_aux_loss(plan, a2, t2, Pose::identity(), PointNorm::kL2),
              (2.0 / 3.0 + std::sqrt(1.0 / 9.0 + 1.0)) / 2.0, 1e-12);

  plan.matrix.setZero();
  EXPECT_THROW(ot_aux_loss(plan, a2, t2, Pose::identity()), InvalidArgument);
  plan.matrix = Eigen::MatrixXd::Constant(3, 3, 0.1);
  EXPECT_THROW(ot_aux_loss(plan, a2, t2, Pose::identity()), InvalidArgument);
}

TEST(TotalLoss, LinearCombination) {
  EXPECT_EQ(total_loss(0, 0, 0), 0.0);
  EXPECT_NEAR(total_loss(1, 1, 1), 2.05, 1e-15);
  LossConfig c;
  c.beta = 0.0;
  EXPECT_EQ(total_loss(0.3, 0.4, 100.0, c), 0.3 + 0.4);
  EXPECT_THROW(total_loss(std::nan(""), 0, 0), InvalidArgument);
  c.beta = -1.0;
  EXPECT_THROW(total_loss(0, 0, 0, c), InvalidArgument);
}

}  // namespace
}  // namespace lcd
