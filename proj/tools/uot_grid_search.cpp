// Grid search over the UOT regularizers (lambda, rho) at a fixed iteration
// count. For each grid point it reports
//   - how far the L-iteration plan is from a long-run plan on random 16x16
//     costs (the scaling has to be close to converged at the chosen L), and
//   - registration success and mean error over synthetic reverse-loop pairs.
// The shipped defaults (lambda = rho = 0.01, L = 5) came from this search.
//
// usage: lcd_uot_grid_search [--pairs N] [--keypoints K] [--iterations L]

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <vector>

#include "lcd/registration.hpp"
#include "lcd/synthetic.hpp"
#include "lcd/transport.hpp"

using namespace lcd;

namespace {

double convergence_gap(double lambda, double rho, int iterations) {
  Rng rng(101);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    CostMatrix c(16, 16);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.uniform(0.0, 2.0);
    UotParams p;
    p.lambda = lambda;
    p.rho = rho;
    p.iterations = iterations;
    const auto short_run = sinkhorn_uot(c, p).matrix;
    p.iterations = 5000;
    worst = std::max(worst, (short_run - sinkhorn_uot(c, p).matrix).cwiseAbs().maxCoeff());
  }
  return worst;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UOT regularizer grid search on synthetic pairs"};
  int pairs = 20;
  std::size_t keypoints = 1536;
  int iterations = 5;
  app.add_option("--pairs", pairs, "synthetic pairs per grid point")->check(CLI::PositiveNumber);
  app.add_option("--keypoints", keypoints, "keypoints per scan")->check(CLI::PositiveNumber);
  app.add_option("--iterations", iterations, "scaling iterations L")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  FrontEndSpec fe;
  fe.keypoints = keypoints;
  std::vector<KeypointFeatures> src, dst;
  std::vector<Pose> truth;
  for (int i = 0; i < pairs; ++i) {
    SyntheticScene scene{generate_scene_cloud(SceneSpec{}, 1000 + static_cast<std::uint64_t>(i)), {}};
    scene.perturbation.noise_sigma = 0.02;
    const auto pair = generate_synthetic_pair(scene, 5000 + static_cast<std::uint64_t>(i));
    src.push_back(extract_scan_features(pair.source, fe).features);
    dst.push_back(extract_scan_features(pair.target, fe).features);
    truth.push_back(pair.truth);
  }

  std::printf("lambda,rho,plan_gap,success,pairs,mean_te,mean_re\n");
  for (double lambda : {0.003, 0.005, 0.01, 0.02, 0.03, 0.05}) {
    for (double rho : {0.003, 0.01, 0.03, 0.1, 1.0}) {
      UotParams p;
      p.lambda = lambda;
      p.rho = rho;
      p.iterations = iterations;
      int ok = 0;
      double te = 0.0, re = 0.0;
      for (int i = 0; i < pairs; ++i) {
        try {
          const auto e = pose_error(estimate_pose_uot(src[i], dst[i], p).pose, truth[i]);
          if (success_check(e)) {
            ++ok;
            te += e.translation_error;
            re += e.rotation_error;
          }
        } catch (const Error&) {
          // degenerate plan: counts as a failure
        }
      }
      const double denom = std::max(ok, 1);
      std::printf("%g,%g,%.3e,%d,%d,%.4f,%.4f\n", lambda, rho, convergence_gap(lambda, rho, iterations),
                  ok, pairs, te / denom, re / denom);
      std::fflush(stdout);
    }
  }
  return 0;
}
