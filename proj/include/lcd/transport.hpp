#ifndef LCD_TRANSPORT_HPP
#define LCD_TRANSPORT_HPP

// Relative pose from soft feature correspondences: entropic unbalanced
// optimal transport via scaling iterations, projection of every source
// keypoint onto the target keypoints, and weighted Kabsch alignment.

#include <Eigen/SVD>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lcd/error.hpp"
#include "lcd/features.hpp"
#include "lcd/geom.hpp"

namespace lcd {

// Weight given to row j in the pose fit: its total mass, or its largest
// entry (which discounts rows whose mass is spread over many targets).
enum class SvdWeighting { kRowMass, kPeak };

struct UotParams {
  double lambda = 0.01;  // entropy weight
  double rho = 0.01;     // marginal (mass preservation) weight
  int iterations = 5;
  SvdWeighting weighting = SvdWeighting::kPeak;

  void validate() const {
    if (!(lambda > 0.0) || !(rho > 0.0) || iterations < 1 ||
        !std::isfinite(lambda) || !std::isfinite(rho)) {
      throw InvalidArgument("UotParams: lambda, rho and iterations must be positive");
    }
  }
  double exponent() const { return rho / (rho + lambda); }
};

struct TransportPlan {
  Eigen::MatrixXd matrix;  // N_P x N_S, nonnegative
  UotParams params;
  Eigen::VectorXd row_mass;
  bool log_domain = false;  // which kernel produced it
};

namespace detail {

inline void finish_plan(TransportPlan& plan) {
  if (!plan.matrix.allFinite()) {
    std::ostringstream ss;
    ss << "sinkhorn_uot: transport plan is not finite (lambda = "
       << plan.params.lambda << ")";
    throw NumericalError(ss.str());
  }
  plan.row_mass = plan.matrix.rowwise().sum();
}

inline double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& x) {
  const double m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.array() - m).exp().sum());
}

}  // namespace detail

// Scaling iterations exactly as stated for the unbalanced problem:
//   K = exp(-C / lambda), a = 1/N_P, b = v = 1/N_S
//   repeat L times: u = (a / Kv)^(rho/(rho+lambda)), v = (b / K^T u)^(...)
//   T = diag(u) K diag(v)
// `u_history`, when given, receives u after every iteration.
inline TransportPlan sinkhorn_uot_standard(
    const CostMatrix& cost, const UotParams& params,
    std::vector<Eigen::VectorXd>* u_history = nullptr) {
  params.validate();
  const auto n = cost.rows(), m = cost.cols();
  const double e = params.exponent();
  const Eigen::MatrixXd kernel = (-cost.array() / params.lambda).exp().matrix();
  const Eigen::VectorXd a = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  const Eigen::VectorXd b = Eigen::VectorXd::Constant(m, 1.0 / static_cast<double>(m));
  Eigen::VectorXd v = b;
  Eigen::VectorXd u(n);
  for (int it = 0; it < params.iterations; ++it) {
    u = (a.array() / (kernel * v).array()).pow(e).matrix();
    v = (b.array() / (kernel.transpose() * u).array()).pow(e).matrix();
    if (u_history) u_history->push_back(u);
  }
  TransportPlan plan;
  plan.params = params;
  plan.matrix = u.asDiagonal() * kernel * v.asDiagonal();
  detail::finish_plan(plan);
  return plan;
}

// Same iterations on log-scalings; stable when C / lambda is large.
inline TransportPlan sinkhorn_uot_log(
    const CostMatrix& cost, const UotParams& params,
    std::vector<Eigen::VectorXd>* u_history = nullptr) {
  params.validate();
  const auto n = cost.rows(), m = cost.cols();
  const double e = params.exponent();
  const Eigen::MatrixXd log_kernel = -cost / params.lambda;
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(m));
  Eigen::VectorXd f(n);
  Eigen::VectorXd g = Eigen::VectorXd::Constant(m, log_b);
  for (int it = 0; it < params.iterations; ++it) {
    for (Eigen::Index j = 0; j < n; ++j) {
      f(j) = e * (log_a -
                  detail::log_sum_exp(log_kernel.row(j).transpose() + g));
    }
    for (Eigen::Index k = 0; k < m; ++k) {
      g(k) = e * (log_b - detail::log_sum_exp(log_kernel.col(k) + f));
    }
    if (u_history) u_history->push_back(f.array().exp().matrix());
  }
  TransportPlan plan;
  plan.params = params;
  plan.log_domain = true;
  plan.matrix =
      ((log_kernel.colwise() + f).rowwise() + g.transpose()).array().exp().matrix();
  detail::finish_plan(plan);
  return plan;
}

// Above this value of (row or column minimum of C) / lambda the plain
// kernel loses whole rows to underflow.
inline constexpr double kLogDomainSwitch = 30.0;

inline bool needs_log_domain(const CostMatrix& cost, double lambda) {
  const double worst_row = cost.rowwise().minCoeff().maxCoeff();
  const double worst_col = cost.colwise().minCoeff().maxCoeff();
  return std::max(worst_row, worst_col) / lambda > kLogDomainSwitch;
}

inline TransportPlan sinkhorn_uot(const CostMatrix& cost,
                                  const UotParams& params) {
  params.validate();
  if (cost.size() == 0) throw InvalidArgument("sinkhorn_uot: empty cost matrix");
  if (!cost.allFinite()) throw InvalidArgument("sinkhorn_uot: non-finite cost");
  if (needs_log_domain(cost, params.lambda)) return sinkhorn_uot_log(cost, params);
  return sinkhorn_uot_standard(cost, params);
}

struct SoftCorrespondences {
  std::vector<Vec3> projected;  // barycentric target position per source row
  Eigen::VectorXd weights;      // row masses
  std::vector<bool> valid;

  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true));
  }
};

// Rows with mass <= relative_floor * max row mass carry no usable match and
// are marked invalid.
inline constexpr double kDefaultRelativeMassFloor = 1e-9;

inline SoftCorrespondences project_soft(
    const TransportPlan& plan, std::span<const Vec3> target,
    double relative_floor = kDefaultRelativeMassFloor) {
  if (static_cast<std::size_t>(plan.matrix.cols()) != target.size()) {
    throw InvalidArgument("project_soft: plan has " +
                          std::to_string(plan.matrix.cols()) +
                          " columns but there are " +
                          std::to_string(target.size()) + " target keypoints");
  }
  const auto n = plan.matrix.rows();
  Eigen::Matrix<double, Eigen::Dynamic, 3> tgt(target.size(), 3);
  for (std::size_t k = 0; k < target.size(); ++k) {
    tgt.row(static_cast<Eigen::Index>(k)) = target[k].transpose();
  }
  const Eigen::Matrix<double, Eigen::Dynamic, 3> weighted = plan.matrix * tgt;
  SoftCorrespondences out;
  out.weights = plan.matrix.rowwise().sum();
  out.projected.assign(static_cast<std::size_t>(n), Vec3::Zero());
  out.valid.assign(static_cast<std::size_t>(n), false);
  const double floor = relative_floor * (n > 0 ? out.weights.maxCoeff() : 0.0);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (out.weights(j) > floor && out.weights(j) > 0.0) {
      out.projected[static_cast<std::size_t>(j)] =
          weighted.row(j).transpose() / out.weights(j);
      out.valid[static_cast<std::size_t>(j)] = true;
    }
  }
  if (out.valid_count() == 0) {
    throw InvalidArgument("project_soft: no effective correspondences");
  }
  return out;
}

inline SoftCorrespondences project_soft(const TransportPlan& plan,
                                        const KeypointSet& target,
                                        double relative_floor = kDefaultRelativeMassFloor) {
  return project_soft(plan, std::span<const Vec3>(target.coordinates), relative_floor);
}

// argmin_{R,t} sum_j w_j |R p_j + t - q_j|^2 with reflection correction.
inline Pose weighted_svd(std::span<const Vec3> source,
                         std::span<const Vec3> target,
                         std::span<const double> weights) {
  if (source.size() != target.size() || source.size() != weights.size()) {
    throw InvalidArgument("weighted_svd: input sizes differ");
  }
  double total = 0.0;
  std::size_t positive = 0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw InvalidArgument("weighted_svd: weights must be finite and >= 0");
    }
    total += w;
    if (w > 0.0) ++positive;
  }
  if (positive < 3) {
    throw InvalidArgument("weighted_svd: need at least 3 positively weighted points");
  }
  Vec3 src_mean = Vec3::Zero(), dst_mean = Vec3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    src_mean += weights[i] * source[i];
    dst_mean += weights[i] * target[i];
  }
  src_mean /= total;
  dst_mean /= total;
  Mat3 cross = Mat3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (weights[i] == 0.0) continue;
    cross += weights[i] * (source[i] - src_mean) * (target[i] - dst_mean).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (!(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0)) {
    throw DegenerateGeometry("weighted_svd: correspondences are collinear or collapsed");
  }
  const Mat3& u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  Mat3 r = v * d * u.transpose();
  if (detail::orthonormality_residual(r) > Pose::kTolerance) {
    r = detail::nearest_rotation(r);
  }
  return Pose(r, dst_mean - r * src_mean);
}

inline Pose weighted_svd(std::span<const Vec3> source,
                         std::span<const Vec3> target) {
  std::vector<double> w(source.size(), 1.0);
  return weighted_svd(source, target, w);
}

struct UotEstimate {
  Pose pose;
  TransportPlan plan;
  SoftCorrespondences correspondences;
};

// Costs -> transport plan -> projected targets -> weighted Kabsch. The pose
// maps source keypoints onto the target.
inline UotEstimate estimate_pose_from_cost(const CostMatrix& cost,
                                           const KeypointSet& source,
                                           const KeypointSet& target,
                                           const UotParams& params) {
  if (static_cast<std::size_t>(cost.rows()) != source.size()) {
    throw InvalidArgument("estimate_pose_from_cost: cost rows do not match source keypoints");
  }
  UotEstimate est;
  est.plan = sinkhorn_uot(cost, params);
  est.correspondences = project_soft(est.plan, target);
  std::vector<Vec3> src, dst;
  std::vector<double> w;
  const auto& corr = est.correspondences;
  for (std::size_t j = 0; j < corr.valid.size(); ++j) {
    if (!corr.valid[j]) continue;
    src.push_back(source.coordinates[j]);
    dst.push_back(corr.projected[j]);
    const auto row = static_cast<Eigen::Index>(j);
    w.push_back(params.weighting == SvdWeighting::kRowMass
                    ? corr.weights(row)
                    : est.plan.matrix.row(row).maxCoeff());
  }
  est.pose = weighted_svd(src, dst, w);
  return est;
}

inline UotEstimate estimate_pose_uot(const KeypointFeatures& source,
                                     const KeypointFeatures& target,
                                     const UotParams& params) {
  return estimate_pose_from_cost(cost_matrix(source, target), source.keypoints,
                                 target.keypoints, params);
}

// Text dump: a header line with dimensions and parameters, then one line
// per row.
inline void write_transport_plan(const std::filesystem::path& path,
                                 const TransportPlan& plan) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write transport plan: " + path.string());
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "# lcd-transport-plan v1\n";
  out << "rows " << plan.matrix.rows() << " cols " << plan.matrix.cols()
      << " lambda " << plan.params.lambda << " rho " << plan.params.rho
      << " iterations " << plan.params.iterations << '\n';
  for (Eigen::Index j = 0; j < plan.matrix.rows(); ++j) {
    for (Eigen::Index k = 0; k < plan.matrix.cols(); ++k) {
      if (k) out << ' ';
      out << plan.matrix(j, k);
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing transport plan: " + path.string());
}

inline TransportPlan read_transport_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open transport plan: " + path.string());
  std::string magic;
  std::getline(in, magic);
  if (magic != "# lcd-transport-plan v1") {
    throw FormatError(path.string() + ": not a transport plan dump");
  }
  std::string k_rows, k_cols, k_lambda, k_rho, k_iter;
  Eigen::Index rows = 0, cols = 0;
  TransportPlan plan;
  if (!(in >> k_rows >> rows >> k_cols >> cols >> k_lambda >> plan.params.lambda >>
        k_rho >> plan.params.rho >> k_iter >> plan.params.iterations) ||
      k_rows != "rows" || k_cols != "cols" || rows < 0 || cols < 0) {
    throw FormatError(path.string() + ": malformed transport plan header");
  }
  plan.matrix.resize(rows, cols);
  for (Eigen::Index j = 0; j < rows; ++j) {
    for (Eigen::Index k = 0; k < cols; ++k) {
      if (!(in >> plan.matrix(j, k))) {
        throw FormatError(path.string() + ": truncated transport plan");
      }
    }
  }
  plan.row_mass = plan.matrix.rowwise().sum();
  return plan;
}

}  // namespace lcd

#endif  // LCD_TRANSPORT_HPP
