#ifndef LCD_EVAL_HPP
#define LCD_EVAL_HPP

// Loop-detection metrics (best-candidate and all-pairs protocols, exact PR
// sweeps, step-integrated AP), registration statistics, timing summaries
// and report files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lcd/error.hpp"
#include "lcd/geom.hpp"
#include "lcd/io.hpp"

namespace lcd {

// score is a similarity: higher means more alike (use -distance).
struct ScoredPair {
  std::int64_t query_index = 0;
  std::int64_t candidate_index = 0;
  double score = 0.0;
  bool is_true_loop = false;
};

struct Candidate {
  std::int64_t index = 0;
  double score = 0.0;
};

struct PrPoint {
  double threshold = 0.0;  // pairs with score >= threshold are positive
  double precision = 0.0;
  double recall = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

// Points are ordered by descending threshold, so recall never decreases
// along the list.
struct PrCurve {
  std::vector<PrPoint> points;
  double ap = 0.0;
  // Set when the groundtruth holds no positive; recall is then reported as
  // 0 and ap as 0 instead of NaN.
  bool no_positives = false;
};

inline std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return s.str();
}

namespace detail {

// AP = sum_k (R_k - R_{k-1}) P_k with R_0 = 0.
inline double step_ap(const std::vector<PrPoint>& pts) {
  double ap = 0.0, prev = 0.0;
  for (const auto& p : pts) {
    ap += (p.recall - prev) * p.precision;
    prev = p.recall;
  }
  return ap;
}

inline std::vector<double> unique_descending(std::vector<double> scores) {
  std::sort(scores.begin(), scores.end(), std::greater<>());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
  return scores;
}

}  // namespace detail

// Best candidate per query (nullopt when the query had none). At threshold
// t: score >= t and a true loop -> TP; score >= t and not a loop -> FP;
// score < t (or no candidate) while the query has a true loop -> FN;
// otherwise TN. `include`, when given, masks which queries take part.
inline PrCurve protocol1(const std::vector<std::optional<Candidate>>& best,
                         const LoopGroundtruth& gt,
                         const std::vector<bool>* include = nullptr) {
  if (best.empty()) throw InvalidArgument("protocol1: empty sequence");
  if (best.size() != gt.num_scans()) {
    throw InvalidArgument("protocol1: " + std::to_string(best.size()) +
                          " queries but groundtruth covers " +
                          std::to_string(gt.num_scans()) + " scans");
  }
  if (include && include->size() != best.size()) {
    throw InvalidArgument("protocol1: mask size mismatch");
  }
  struct Q {
    double score;
    bool has_candidate, correct, has_loop;
  };
  std::vector<Q> qs;
  std::size_t loop_queries = 0;
  for (std::size_t i = 0; i < best.size(); ++i) {
    if (include && !(*include)[i]) continue;
    const bool has_loop = gt.has_loop(i);
    loop_queries += has_loop ? 1 : 0;
    if (best[i]) {
      if (best[i]->index < 0 || static_cast<std::size_t>(best[i]->index) >= i) {
        throw InvalidArgument("protocol1: candidate of query " + std::to_string(i) +
                              " is not an earlier scan");
      }
      qs.push_back({best[i]->score, true,
                    gt.contains(i, static_cast<std::size_t>(best[i]->index)), has_loop});
    } else {
      qs.push_back({0.0, false, false, has_loop});
    }
  }
  std::vector<double> scores;
  for (const auto& q : qs) {
    if (q.has_candidate) scores.push_back(q.score);
  }
  PrCurve curve;
  curve.no_positives = loop_queries == 0;
  for (double t : detail::unique_descending(std::move(scores))) {
    PrPoint p;
    p.threshold = t;
    for (const auto& q : qs) {
      const bool above = q.has_candidate && q.score >= t;
      if (above) {
        (q.correct ? p.tp : p.fp)++;
      } else if (q.has_loop) {
        p.fn++;
      } else {
        p.tn++;
      }
    }
    p.precision = static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fp);
    p.recall = p.tp + p.fn > 0
                   ? static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fn)
                   : 0.0;
    curve.points.push_back(p);
  }
  curve.ap = curve.no_positives ? 0.0 : detail::step_ap(curve.points);
  return curve;
}

// All pairs as independent binary decisions, labels from is_true_loop.
inline PrCurve protocol2(std::vector<ScoredPair> pairs) {
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const ScoredPair& a, const ScoredPair& b) { return a.score > b.score; });
  std::size_t positives = 0;
  for (const auto& p : pairs) positives += p.is_true_loop ? 1 : 0;
  PrCurve curve;
  curve.no_positives = positives == 0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < pairs.size();) {
    const double t = pairs[i].score;
    for (; i < pairs.size() && pairs[i].score == t; ++i) {
      (pairs[i].is_true_loop ? tp : fp)++;
    }
    PrPoint p;
    p.threshold = t;
    p.tp = tp;
    p.fp = fp;
    p.fn = positives - tp;
    p.tn = pairs.size() - positives - fp;
    p.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    p.recall = positives ? static_cast<double>(tp) / static_cast<double>(positives) : 0.0;
    curve.points.push_back(p);
  }
  curve.ap = curve.no_positives ? 0.0 : detail::step_ap(curve.points);
  return curve;
}

// Relabels every pair from the groundtruth first.
inline PrCurve protocol2(std::vector<ScoredPair> pairs, const LoopGroundtruth& gt) {
  for (auto& p : pairs) {
    if (p.query_index < 0 || p.candidate_index < 0 ||
        p.query_index - p.candidate_index <= static_cast<std::int64_t>(gt.exclusion_window())) {
      throw InvalidArgument("protocol2: pair (" + std::to_string(p.query_index) + ", " +
                            std::to_string(p.candidate_index) +
                            ") violates the exclusion window");
    }
    p.is_true_loop = gt.contains(static_cast<std::size_t>(p.query_index),
                                 static_cast<std::size_t>(p.candidate_index));
  }
  return protocol2(std::move(pairs));
}

inline constexpr const char* kPairsCsvHeader = "query_index,candidate_index,score";

inline void write_scored_pairs(const std::filesystem::path& path,
                               const std::vector<ScoredPair>& pairs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write pairs: " + path.string());
  out << kPairsCsvHeader << '\n';
  for (const auto& p : pairs) {
    out << p.query_index << ',' << p.candidate_index << ',' << format_double(p.score) << '\n';
  }
  if (!out) throw IoError("failed writing pairs: " + path.string());
}

// Labels are left false; protocol2(pairs, gt) assigns them.
inline std::vector<ScoredPair> read_scored_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pairs: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kPairsCsvHeader) {
    throw FormatError(path.string() + ": missing pairs header");
  }
  std::vector<ScoredPair> pairs;
  int n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    ScoredPair p;
    char c1 = 0, c2 = 0;
    std::istringstream ss(line);
    if (!(ss >> p.query_index >> c1 >> p.candidate_index >> c2 >> p.score) || c1 != ',' ||
        c2 != ',') {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": bad pair row");
    }
    pairs.push_back(p);
  }
  return pairs;
}

// ---- registration ----------------------------------------------------------

struct RegistrationSample {
  PoseError error;
  bool success = false;
};

struct RegistrationStats {
  std::size_t count = 0;
  double success_rate = 0.0;
  std::optional<double> te_succ, re_succ;  // absent with no successes
  double te_all = 0.0, re_all = 0.0;
};

inline RegistrationStats registration_stats(const std::vector<RegistrationSample>& samples) {
  if (samples.empty()) throw InvalidArgument("registration_stats: empty input");
  RegistrationStats s;
  s.count = samples.size();
  double te = 0.0, re = 0.0, te_ok = 0.0, re_ok = 0.0;
  std::size_t ok = 0;
  for (const auto& r : samples) {
    te += r.error.translation_error;
    re += r.error.rotation_error;
    if (r.success) {
      te_ok += r.error.translation_error;
      re_ok += r.error.rotation_error;
      ++ok;
    }
  }
  const auto n = static_cast<double>(samples.size());
  s.success_rate = static_cast<double>(ok) / n;
  s.te_all = te / n;
  s.re_all = re / n;
  if (ok > 0) {
    s.te_succ = te_ok / static_cast<double>(ok);
    s.re_succ = re_ok / static_cast<double>(ok);
  }
  return s;
}

// ---- timing ----------------------------------------------------------------

struct StageTiming {
  std::string stage;
  std::size_t samples = 0;
  double median = 0.0;  // s
  double p95 = 0.0;     // s, nearest rank
};

inline StageTiming summarize_stage(std::string name, std::vector<double> seconds) {
  StageTiming t;
  t.stage = std::move(name);
  t.samples = seconds.size();
  if (seconds.empty()) return t;
  std::sort(seconds.begin(), seconds.end());
  const std::size_t n = seconds.size();
  t.median = n % 2 ? seconds[n / 2] : 0.5 * (seconds[n / 2 - 1] + seconds[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  t.p95 = seconds[std::max<std::size_t>(rank, 1) - 1];
  return t;
}

struct TimingSamples {
  std::vector<double> descriptor_extraction;
  std::vector<double> pairwise_comparison;
  std::vector<double> map_query;
};

inline std::vector<StageTiming> timing_report(const TimingSamples& run) {
  return {summarize_stage("descriptor_extraction", run.descriptor_extraction),
          summarize_stage("pairwise_comparison", run.pairwise_comparison),
          summarize_stage("map_query", run.map_query)};
}

// ---- report files ----------------------------------------------------------

inline constexpr const char* kPrCsvHeader = "row,threshold,precision,recall,ap";

inline std::string render_pr_svg(const PrCurve& curve) {
  constexpr double w = 480, h = 400, m = 50;
  auto px = [&](double r) { return m + r * (w - 2 * m); };
  auto py = [&](double p) { return h - m - p * (h - 2 * m); };
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" viewBox=\"0 0 " << w << ' ' << h << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << w / 2 << "\" y=\"25\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       "font-size=\"16\">Precision-recall (AP = "
    << std::setprecision(4) << curve.ap << std::setprecision(2) << ")</text>\n";
  s << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\""
    << py(0) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(0) << "\" y2=\""
    << py(1) << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = k / 4.0;
    s << "<text x=\"" << px(v) << "\" y=\"" << py(0) + 18
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << v
      << "</text>\n";
    s << "<text x=\"" << px(0) - 8 << "\" y=\"" << py(v) + 4
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << v
      << "</text>\n";
  }
  s << "<text x=\"" << w / 2 << "\" y=\"" << h - 10
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">recall</text>\n";
  s << "<text x=\"15\" y=\"" << h / 2 << "\" transform=\"rotate(-90 15 " << h / 2
    << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">precision</text>\n";
  s << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (const auto& p : curve.points) s << px(p.recall) << ',' << py(p.precision) << ' ';
  s << "\"/>\n</svg>\n";
  return s.str();
}

// Writes <prefix>.csv (one "point" row per curve point plus one "summary"
// row; header only for an empty curve), <prefix>.svg for non-empty curves,
// and <prefix>_stats.csv with registration and timing summaries when given.
inline void emit_report(const PrCurve& curve, const std::optional<RegistrationStats>& stats,
                        const std::vector<StageTiming>& timing,
                        const std::filesystem::path& prefix) {
  auto with_suffix = [&](const std::string& suffix) {
    return std::filesystem::path(prefix.string() + suffix);
  };
  {
    std::ofstream csv(with_suffix(".csv"), std::ios::trunc);
    if (!csv) throw IoError("cannot write report: " + with_suffix(".csv").string());
    csv << kPrCsvHeader << '\n';
    if (!curve.points.empty()) {
      for (const auto& p : curve.points) {
        csv << "point," << format_double(p.threshold) << ',' << format_double(p.precision)
            << ',' << format_double(p.recall) << ",\n";
      }
      csv << "summary,,,," << format_double(curve.ap) << '\n';
    }
    if (!csv) throw IoError("failed writing report: " + with_suffix(".csv").string());
  }
  if (!curve.points.empty()) {
    std::ofstream svg(with_suffix(".svg"), std::ios::trunc);
    if (!svg) throw IoError("cannot write plot: " + with_suffix(".svg").string());
    svg << render_pr_svg(curve);
  }
  if (stats || !timing.empty()) {
    std::ofstream out(with_suffix("_stats.csv"), std::ios::trunc);
    if (!out) throw IoError("cannot write stats: " + with_suffix("_stats.csv").string());
    out << "key,value\n";
    if (curve.no_positives) out << "no_positives,1\n";
    if (stats) {
      auto opt = [](const std::optional<double>& v) {
        return v ? format_double(*v) : std::string("-");
      };
      out << "pairs," << stats->count << '\n'
          << "success_rate," << format_double(stats->success_rate) << '\n'
          << "te_succ_m," << opt(stats->te_succ) << '\n'
          << "te_all_m," << format_double(stats->te_all) << '\n'
          << "re_succ_deg," << opt(stats->re_succ) << '\n'
          << "re_all_deg," << format_double(stats->re_all) << '\n';
    }
    for (const auto& t : timing) {
      out << t.stage << "_samples," << t.samples << '\n'
          << t.stage << "_median_s," << format_double(t.median) << '\n'
          << t.stage << "_p95_s," << format_double(t.p95) << '\n';
    }
  }
}

// Reads the curve back from a report CSV (counts are not stored).
inline PrCurve read_pr_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kPrCsvHeader) {
    throw FormatError(path.string() + ": missing PR header");
  }
  PrCurve curve;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 5) throw FormatError(path.string() + ": bad row '" + line + "'");
    try {
      if (f[0] == "point") {
        curve.points.push_back({std::stod(f[1]), std::stod(f[2]), std::stod(f[3])});
      } else if (f[0] == "summary") {
        curve.ap = std::stod(f[4]);
      } else {
        throw FormatError(path.string() + ": unknown row kind '" + f[0] + "'");
      }
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ": bad number in '" + line + "'");
    }
  }
  return curve;
}

}  // namespace lcd

#endif  // LCD_EVAL_HPP
