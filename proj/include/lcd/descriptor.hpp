#ifndef LCD_DESCRIPTOR_HPP
#define LCD_DESCRIPTOR_HPP

// Global place descriptor: soft-assigned VLAD aggregation of keypoint
// features, an affine compression layer and context gating, plus an exact
// append-only descriptor database.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "lcd/error.hpp"
#include "lcd/features.hpp"
#include "lcd/synthetic.hpp"

namespace lcd {

struct VladParams {
  Eigen::MatrixXd centroids;         // K x D
  Eigen::MatrixXd assign_weights;    // K x D
  Eigen::VectorXd assign_bias;       // K
  Eigen::MatrixXd compression;       // G x (K*D)
  Eigen::VectorXd compression_bias;  // G
  Eigen::MatrixXd gate_weights;      // G x G
  Eigen::VectorXd gate_bias;         // G
  bool intra_normalize = false;

  Eigen::Index clusters() const { return centroids.rows(); }
  Eigen::Index feature_dim() const { return centroids.cols(); }
  Eigen::Index output_dim() const { return compression.rows(); }

  void validate() const {
    const auto k = clusters(), d = feature_dim(), g = output_dim();
    if (k < 1 || d < 1 || g < 1) throw InvalidArgument("VladParams: empty parameters");
    if (assign_weights.rows() != k || assign_weights.cols() != d ||
        assign_bias.size() != k || compression.cols() != k * d ||
        compression_bias.size() != g || gate_weights.rows() != g ||
        gate_weights.cols() != g || gate_bias.size() != g) {
      throw InvalidArgument("VladParams: inconsistent dimensions");
    }
    if (!centroids.allFinite() || !assign_weights.allFinite() ||
        !assign_bias.allFinite() || !compression.allFinite() ||
        !compression_bias.allFinite() || !gate_weights.allFinite() ||
        !gate_bias.allFinite()) {
      throw InvalidArgument("VladParams: non-finite parameters");
    }
  }
};

// Unit-norm G-vector.
struct GlobalDescriptor {
  Eigen::VectorXd vector;
  Eigen::Index size() const { return vector.size(); }
};

// softmax_k(w_k . f_i + b_k) per row, with max subtraction.
inline Eigen::MatrixXd soft_assign(const FeatureMatrix& features,
                                   const VladParams& params) {
  if (features.cols() != params.feature_dim()) {
    throw InvalidArgument("soft_assign: feature dimension mismatch");
  }
  Eigen::MatrixXd logits = features * params.assign_weights.transpose();
  logits.rowwise() += params.assign_bias.transpose();
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  return logits;
}

// V_k = sum_i a_k(f_i) (f_i - c_k), blocks laid out cluster by cluster.
// Each block is L2-normalized when intra_normalize is set, then the whole
// vector.
inline Eigen::VectorXd vlad_aggregate(const FeatureMatrix& features,
                                      const Eigen::MatrixXd& assignments,
                                      const VladParams& params) {
  const auto k = params.clusters(), d = params.feature_dim();
  if (features.cols() != d || assignments.rows() != features.rows() ||
      assignments.cols() != k) {
    throw InvalidArgument("vlad_aggregate: dimension mismatch");
  }
  const Eigen::MatrixXd weighted = assignments.transpose() * features;  // K x D
  const Eigen::VectorXd mass = assignments.colwise().sum().transpose();
  Eigen::VectorXd v(k * d);
  for (Eigen::Index c = 0; c < k; ++c) {
    auto block = v.segment(c * d, d);
    block = (weighted.row(c) - mass(c) * params.centroids.row(c)).transpose();
    if (params.intra_normalize) {
      const double n = block.norm();
      if (n > 0.0) block /= n;
    }
  }
  const double n = v.norm();
  if (n > 0.0) v /= n;
  return v;
}

inline Eigen::VectorXd context_gate(const Eigen::VectorXd& x,
                                    const VladParams& params) {
  if (x.size() != params.output_dim()) {
    throw InvalidArgument("context_gate: dimension mismatch");
  }
  const Eigen::VectorXd z = params.gate_weights * x + params.gate_bias;
  const Eigen::ArrayXd gate = 1.0 / (1.0 + (-z.array()).exp());
  return (gate * x.array()).matrix();
}

inline GlobalDescriptor global_descriptor(const KeypointFeatures& features,
                                          const VladParams& params) {
  params.validate();
  if (features.size() == 0) throw InvalidArgument("global_descriptor: no keypoints");
  const auto assign = soft_assign(features.features, params);
  const auto vlad = vlad_aggregate(features.features, assign, params);
  const Eigen::VectorXd compressed =
      params.compression * vlad + params.compression_bias;
  Eigen::VectorXd gated = context_gate(compressed, params);
  const double n = gated.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw NumericalError("global_descriptor: descriptor vanished before normalization");
  }
  return {gated / n};
}

// L2 distance between unit descriptors: O(G), no access to the clouds.
inline double descriptor_distance(const GlobalDescriptor& a,
                                  const GlobalDescriptor& b) {
  if (a.size() != b.size()) throw InvalidArgument("descriptor_distance: size mismatch");
  return (a.vector - b.vector).norm();
}

namespace detail {

inline Eigen::MatrixXd stack_features(std::span<const KeypointFeatures> sets) {
  Eigen::Index rows = 0, dim = -1;
  for (const auto& s : sets) {
    rows += static_cast<Eigen::Index>(s.size());
    if (dim < 0) dim = s.features.cols();
    if (s.features.cols() != dim) {
      throw InvalidArgument("fit_vlad_params: training sets differ in dimension");
    }
  }
  Eigen::MatrixXd all(rows, std::max<Eigen::Index>(dim, 0));
  Eigen::Index r = 0;
  for (const auto& s : sets) {
    all.middleRows(r, s.features.rows()) = s.features;
    r += s.features.rows();
  }
  return all;
}

// Lloyd iterations from a k-means++ start, until assignments settle or the
// centroid shift falls below tolerance. Empty clusters are re-seeded with
// the point farthest from its centroid.
inline Eigen::MatrixXd kmeans(const Eigen::MatrixXd& x, Eigen::Index k,
                              std::uint64_t seed, int max_iterations = 100) {
  const auto n = x.rows();
  Rng rng(mix_seed(seed, 0x6b6d));
  Eigen::MatrixXd centers(k, x.cols());
  Eigen::VectorXd d2 = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  centers.row(0) = x.row(static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n))));
  for (Eigen::Index c = 1; c < k; ++c) {
    d2 = d2.cwiseMin((x.rowwise() - centers.row(c - 1)).rowwise().squaredNorm());
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (pick = 0; pick < n - 1; ++pick) {
        target -= d2(pick);
        if (target < 0.0) break;
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
    }
    centers.row(c) = x.row(pick);
  }

  std::vector<Eigen::Index> label(static_cast<std::size_t>(n), -1);
  const Eigen::VectorXd x_sq = x.rowwise().squaredNorm();
  // Stop once the centroids move less than 1e-4 of the mean per-dimension
  // variance, summed over clusters.
  const double variance =
      (x.rowwise() - x.colwise().mean()).squaredNorm() / static_cast<double>(n * x.cols());
  const double shift_tolerance = 1e-4 * variance * static_cast<double>(k * x.cols());
  for (int it = 0; it < max_iterations; ++it) {
    bool changed = false;
    // |x - c|^2 = |x|^2 - 2 x.c + |c|^2, via one matrix product
    Eigen::MatrixXd d2_all = -2.0 * (x * centers.transpose());
    d2_all.rowwise() += centers.rowwise().squaredNorm().transpose();
    d2_all.colwise() += x_sq;
    Eigen::VectorXd best_d2(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      best_d2(i) = std::max(0.0, d2_all.row(i).minCoeff(&best));
      if (label[static_cast<std::size_t>(i)] != best) {
        label[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    if (!changed && it > 0) break;
    const Eigen::MatrixXd previous = centers;
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, x.cols());
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(k);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(label[static_cast<std::size_t>(i)]) += x.row(i);
      counts(label[static_cast<std::size_t>(i)]) += 1.0;
    }
    for (Eigen::Index c = 0; c < k; ++c) {
      if (counts(c) > 0.0) {
        centers.row(c) = sums.row(c) / counts(c);
      } else {
        Eigen::Index far = 0;
        best_d2.maxCoeff(&far);
        centers.row(c) = x.row(far);
        best_d2(far) = 0.0;
      }
    }
    if ((centers - previous).squaredNorm() <= shift_tolerance) break;
  }
  return centers;
}

// Top principal directions as rows; rows beyond the data rank stay zero.
inline Eigen::MatrixXd principal_components(const Eigen::MatrixXd& centered,
                                            Eigen::Index count) {
  const auto n = centered.rows(), dim = centered.cols();
  Eigen::MatrixXd comps = Eigen::MatrixXd::Zero(count, dim);
  const Eigen::MatrixXd gram = centered * centered.transpose();  // n x n
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
  const Eigen::VectorXd evals = es.eigenvalues();
  const double top = n > 0 ? evals(n - 1) : 0.0;
  Eigen::Index filled = 0;
  for (Eigen::Index e = n - 1; e >= 0 && filled < count; --e) {
    if (!(evals(e) > 1e-10 * top) || !(top > 0.0)) break;
    Eigen::VectorXd dir = centered.transpose() * es.eigenvectors().col(e);
    dir /= dir.norm();
    Eigen::Index arg = 0;
    dir.cwiseAbs().maxCoeff(&arg);
    if (dir(arg) < 0.0) dir = -dir;
    comps.row(filled++) = dir.transpose();
  }
  return comps;
}

}  // namespace detail

struct VladFitOptions {
  Eigen::Index clusters = 64;
  Eigen::Index output_dim = 256;
  double alpha = 100.0;     // softmax sharpness of the initial assignment
  double gate_bias = 3.0;   // sigma(3) ~ 0.95: near pass-through gating
  bool intra_normalize = false;
  int kmeans_iterations = 100;
};

// Clusters by k-means++/Lloyd; assignment weights w_k = alpha c_k,
// b_k = -alpha |c_k|^2 / 2; compression from PCA of the training VLAD
// vectors; gate W = 0, b = gate_bias.
inline VladParams fit_vlad_params(std::span<const KeypointFeatures> training,
                                  std::uint64_t seed,
                                  const VladFitOptions& opts = {}) {
  if (opts.clusters < 1 || opts.output_dim < 1) {
    throw InvalidArgument("fit_vlad_params: clusters and output_dim must be >= 1");
  }
  if (training.size() < 2) {
    throw InvalidArgument("fit_vlad_params: need at least 2 training scans");
  }
  const Eigen::MatrixXd all = detail::stack_features(training);
  if (all.rows() < opts.clusters) {
    throw InvalidArgument("fit_vlad_params: " + std::to_string(opts.clusters) +
                          " clusters requested but only " +
                          std::to_string(all.rows()) + " feature vectors");
  }
  VladParams p;
  p.intra_normalize = opts.intra_normalize;
  p.centroids = detail::kmeans(all, opts.clusters, seed, opts.kmeans_iterations);
  p.assign_weights = opts.alpha * p.centroids;
  p.assign_bias = -0.5 * opts.alpha * p.centroids.rowwise().squaredNorm();

  const auto kd = p.centroids.rows() * p.centroids.cols();
  Eigen::MatrixXd vlads(static_cast<Eigen::Index>(training.size()), kd);
  for (std::size_t s = 0; s < training.size(); ++s) {
    const auto& f = training[s].features;
    vlads.row(static_cast<Eigen::Index>(s)) =
        vlad_aggregate(f, soft_assign(f, p), p).transpose();
  }
  const Eigen::VectorXd mean = vlads.colwise().mean().transpose();
  const Eigen::MatrixXd centered = vlads.rowwise() - mean.transpose();
  p.compression = detail::principal_components(centered, opts.output_dim);
  p.compression_bias = -(p.compression * mean);
  p.gate_weights = Eigen::MatrixXd::Zero(opts.output_dim, opts.output_dim);
  p.gate_bias = Eigen::VectorXd::Constant(opts.output_dim, opts.gate_bias);
  return p;
}

struct QueryHit {
  std::int64_t scan_index;
  double distance;
};

// Append-only, exact. One writer; readers see a consistent prefix.
class DescriptorDatabase {
 public:
  struct Entry {
    std::int64_t scan_index;
    GlobalDescriptor descriptor;
  };

  DescriptorDatabase() = default;
  DescriptorDatabase(const DescriptorDatabase& o) : entries_(o.snapshot()) {}
  DescriptorDatabase& operator=(const DescriptorDatabase& o) {
    if (this != &o) {
      auto copy = o.snapshot();
      std::unique_lock lock(mutex_);
      entries_ = std::move(copy);
    }
    return *this;
  }

  void append(std::int64_t scan_index, GlobalDescriptor descriptor) {
    std::unique_lock lock(mutex_);
    if (!entries_.empty()) {
      if (scan_index <= entries_.back().scan_index) {
        throw InvalidArgument("DescriptorDatabase: indices must be strictly increasing");
      }
      if (descriptor.size() != entries_.front().descriptor.size()) {
        throw InvalidArgument("DescriptorDatabase: descriptor size mismatch");
      }
    }
    entries_.push_back({scan_index, std::move(descriptor)});
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

  std::vector<Entry> snapshot() const {
    std::shared_lock lock(mutex_);
    return entries_;
  }

  // Nearest entry (L2) among scan_index < query_index - exclusion, i.e. at
  // least exclusion+1 scans back. Ties resolve to the lowest index.
  std::optional<QueryHit> query(const GlobalDescriptor& q,
                                std::int64_t query_index,
                                std::int64_t exclusion) const {
    std::shared_lock lock(mutex_);
    std::optional<QueryHit> best;
    for (const auto& e : entries_) {
      if (query_index - e.scan_index <= exclusion) break;  // sorted
      const double d = descriptor_distance(e.descriptor, q);
      if (!best || d < best->distance) best = QueryHit{e.scan_index, d};
    }
    return best;
  }

 private:
  mutable std::shared_mutex mutex_;
  std::vector<Entry> entries_;
};

inline std::optional<QueryHit> db_query(const DescriptorDatabase& db,
                                        const GlobalDescriptor& q,
                                        std::int64_t query_index,
                                        std::int64_t exclusion = 50) {
  return db.query(q, query_index, exclusion);
}

namespace detail {

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::ifstream& in, const std::string& what) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw FormatError(what + ": truncated file");
  }
  return v;
}
inline void put_matrix(std::ofstream& out, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) put(out, m(r, c));
  }
}
inline void get_matrix(std::ifstream& in, Eigen::MatrixXd& m, const std::string& what) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = get<double>(in, what);
  }
}

inline constexpr char kStoreMagic[8] = {'L', 'C', 'D', 'D', 'E', 'S', 'C', '1'};
inline constexpr char kParamsMagic[7] = {'L', 'C', 'D', 'V', 'L', 'A', 'D'};
inline constexpr std::uint8_t kParamsVersion = 1;

}  // namespace detail

// Layout: magic "LCDDESC1", uint64 G, uint64 count, then per entry an int64
// scan index followed by G float64 values. Little-endian.
inline void write_descriptor_store(const std::filesystem::path& path,
                                   const DescriptorDatabase& db) {
  const auto entries = db.snapshot();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write descriptor store: " + path.string());
  out.write(detail::kStoreMagic, sizeof(detail::kStoreMagic));
  const std::uint64_t g = entries.empty() ? 0 : static_cast<std::uint64_t>(entries[0].descriptor.size());
  detail::put(out, g);
  detail::put(out, static_cast<std::uint64_t>(entries.size()));
  for (const auto& e : entries) {
    detail::put(out, e.scan_index);
    for (Eigen::Index i = 0; i < e.descriptor.size(); ++i) detail::put(out, e.descriptor.vector(i));
  }
  if (!out) throw IoError("failed writing descriptor store: " + path.string());
}

inline DescriptorDatabase read_descriptor_store(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open descriptor store: " + path.string());
  const std::string what = path.string();
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, detail::kStoreMagic, 8) != 0) {
    throw FormatError(what + ": not a descriptor store");
  }
  const auto g = detail::get<std::uint64_t>(in, what);
  const auto count = detail::get<std::uint64_t>(in, what);
  DescriptorDatabase db;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto index = detail::get<std::int64_t>(in, what);
    GlobalDescriptor d{Eigen::VectorXd(static_cast<Eigen::Index>(g))};
    for (std::uint64_t j = 0; j < g; ++j) d.vector(static_cast<Eigen::Index>(j)) = detail::get<double>(in, what);
    db.append(index, std::move(d));
  }
  return db;
}

// Layout: magic "LCDVLAD", version byte, uint32 K, D, G, uint8 flags
// (bit 0: intra-normalization), then float64 arrays in declaration order,
// row-major.
inline void write_vlad_params(const std::filesystem::path& path, const VladParams& p) {
  p.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write VLAD params: " + path.string());
  out.write(detail::kParamsMagic, sizeof(detail::kParamsMagic));
  detail::put(out, detail::kParamsVersion);
  detail::put(out, static_cast<std::uint32_t>(p.clusters()));
  detail::put(out, static_cast<std::uint32_t>(p.feature_dim()));
  detail::put(out, static_cast<std::uint32_t>(p.output_dim()));
  detail::put(out, static_cast<std::uint8_t>(p.intra_normalize ? 1 : 0));
  detail::put_matrix(out, p.centroids);
  detail::put_matrix(out, p.assign_weights);
  detail::put_matrix(out, p.assign_bias);
  detail::put_matrix(out, p.compression);
  detail::put_matrix(out, p.compression_bias);
  detail::put_matrix(out, p.gate_weights);
  detail::put_matrix(out, p.gate_bias);
  if (!out) throw IoError("failed writing VLAD params: " + path.string());
}

inline VladParams read_vlad_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open VLAD params: " + path.string());
  const std::string what = path.string();
  char magic[7];
  if (!in.read(magic, 7) || std::memcmp(magic, detail::kParamsMagic, 7) != 0) {
    throw FormatError(what + ": not a VLAD params file");
  }
  const auto version = detail::get<std::uint8_t>(in, what);
  if (version != detail::kParamsVersion) {
    throw FormatError(what + ": unsupported params version " + std::to_string(version));
  }
  const auto k = static_cast<Eigen::Index>(detail::get<std::uint32_t>(in, what));
  const auto d = static_cast<Eigen::Index>(detail::get<std::uint32_t>(in, what));
  const auto g = static_cast<Eigen::Index>(detail::get<std::uint32_t>(in, what));
  VladParams p;
  p.intra_normalize = (detail::get<std::uint8_t>(in, what) & 1) != 0;
  p.centroids.resize(k, d);
  p.assign_weights.resize(k, d);
  Eigen::MatrixXd assign_bias(k, 1), comp_bias(g, 1), gate_bias(g, 1);
  p.compression.resize(g, k * d);
  p.gate_weights.resize(g, g);
  detail::get_matrix(in, p.centroids, what);
  detail::get_matrix(in, p.assign_weights, what);
  detail::get_matrix(in, assign_bias, what);
  detail::get_matrix(in, p.compression, what);
  detail::get_matrix(in, comp_bias, what);
  detail::get_matrix(in, p.gate_weights, what);
  detail::get_matrix(in, gate_bias, what);
  p.assign_bias = assign_bias.col(0);
  p.compression_bias = comp_bias.col(0);
  p.gate_bias = gate_bias.col(0);
  p.validate();
  return p;
}

}  // namespace lcd

#endif  // LCD_DESCRIPTOR_HPP
