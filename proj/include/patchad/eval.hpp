#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchad/codebook.hpp"
#include "patchad/fusion.hpp"
#include "patchad/io.hpp"
#include "patchad/trainer.hpp"

namespace patchad {

// ---------------------------------------------------------------------------
// Scores

struct AnomalyScores {
  std::vector<double> points;       // in [0, 1]
  std::vector<std::uint8_t> valid;  // thresholded mask
  double object = 0.0;
};

/// Mean of the top ceil(1% of N) point scores.
inline double object_score(std::span<const double> scores) {
  if (scores.empty()) fail(ErrorCode::EmptyInput, "no point scores");
  const auto k = static_cast<std::size_t>(std::ceil(0.01 * static_cast<double>(scores.size())));
  std::vector<double> s(scores.begin(), scores.end());
  std::partial_sort(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k), s.end(), std::greater<>());
  return std::accumulate(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k), 0.0) / static_cast<double>(k);
}

/// L1 offset norms divided by their per-cloud maximum, zeroed where the mask probability is below
/// `threshold`.
inline AnomalyScores point_scores(const Matrix<double>& offsets, const Matrix<double>& probs, double threshold = 0.5) {
  const auto n = offsets.rows();
  if (n == 0) fail(ErrorCode::EmptyInput, "no points to score");
  if (offsets.cols() != 3 || probs.rows() != n || probs.cols() != 1)
    fail(ErrorCode::ShapeMismatch, "point_scores needs [N,3] offsets and [N,1] probabilities");
  const Eigen::VectorXd raw = offsets.cwiseAbs().rowwise().sum();
  const double top = raw.maxCoeff();
  AnomalyScores out;
  out.points.resize(static_cast<std::size_t>(n));
  out.valid.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool valid = probs(i, 0) >= threshold;
    out.valid[static_cast<std::size_t>(i)] = valid;
    out.points[static_cast<std::size_t>(i)] = (valid && top > 0.0) ? std::min(1.0, raw[i] / (top + 1e-12)) : 0.0;
  }
  out.object = object_score(out.points);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

namespace detail {

inline void check_labels(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) fail(ErrorCode::CountMismatch, "one label per score");
  const auto pos = std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; });
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size()))
    fail(ErrorCode::SingleClass, "labels need both classes");
}

/// Indices ordered by descending score.
inline std::vector<std::size_t> by_score_desc(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace detail

/// Mann-Whitney statistic with half credit for ties, counted in integers.
inline double auc_roc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  detail::check_labels(scores, labels);
  const auto idx = detail::by_score_desc(scores);
  std::uint64_t pos = 0, neg = 0, twice_u = 0;
  std::uint64_t neg_below = 0;
  for (auto l : labels) (l ? pos : neg) += 1;
  // Walk tie groups from the top; negatives strictly below a group are those not yet seen.
  std::uint64_t neg_seen = 0;
  for (std::size_t a = 0; a < idx.size();) {
    std::size_t b = a;
    std::uint64_t gp = 0, gn = 0;
    while (b < idx.size() && scores[idx[b]] == scores[idx[a]]) {
      (labels[idx[b]] ? gp : gn) += 1;
      ++b;
    }
    neg_below = neg - neg_seen - gn;
    twice_u += gp * (2 * neg_below + gn);
    neg_seen += gn;
    a = b;
  }
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

/// Average precision: sum over distinct thresholds of (recall step) x precision.
inline double auc_pr(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  detail::check_labels(scores, labels);
  const auto idx = detail::by_score_desc(scores);
  const double total_pos = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  std::uint64_t tp = 0, seen = 0;
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t a = 0; a < idx.size();) {
    std::size_t b = a;
    while (b < idx.size() && scores[idx[b]] == scores[idx[a]]) {
      tp += labels[idx[b]] ? 1 : 0;
      ++seen;
      ++b;
    }
    const double recall = static_cast<double>(tp) / total_pos;
    ap += (recall - prev_recall) * (static_cast<double>(tp) / static_cast<double>(seen));
    prev_recall = recall;
    a = b;
  }
  return ap;
}

// ---------------------------------------------------------------------------
// Heatmaps

/// Linear blue -> red ramp: (round(255 s), 0, round(255 (1 - s))).
inline Rgb heat_color(double s) {
  s = std::clamp(s, 0.0, 1.0);
  return {static_cast<std::uint8_t>(std::lround(255.0 * s)), 0, static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - s)))};
}

inline void export_heatmap(const PointCloud& cloud, std::span<const double> scores, const std::filesystem::path& path) {
  if (scores.size() != cloud.size()) fail(ErrorCode::CountMismatch, "one score per point");
  std::vector<Rgb> colors(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) colors[i] = heat_color(scores[i]);
  PlyWriteOptions opts;
  opts.colors = &colors;
  write_ply(path, cloud, opts);
}

// ---------------------------------------------------------------------------
// Inference

struct InferenceConfig {
  PatchConfig patch = PatchConfig::shapenet();
  FusionOptions fusion;
  double mask_threshold = 0.5;
};

struct Inference {
  Matrix<double> offsets;  // [N, 3] in the input's units
  Matrix<double> probs;    // [N, 1]
  AnomalyScores scores;
  int level = 1;
};

/// Scores a single cloud: canonicalize, patchify, retrieve, select the scale, run the model.
template <typename T>
Inference infer(ParameterSet<T>& params, const Codebook& codebook, const PointCloud& cloud, const InferenceConfig& cfg) {
  auto [canon, tf] = normalize_to_canonical(cloud);
  const auto prepared = prepare_cloud(std::move(canon.points), cfg.patch);
  Tape<T> tape;
  auto pred = forward(tape, params, codebook, prepared, cfg.fusion, false);
  Inference out;
  out.offsets = tape.value(pred.offsets).template cast<double>() * tf.scale;
  out.probs = tape.value(pred.probs).template cast<double>();
  out.scores = point_scores(out.offsets, out.probs, cfg.mask_threshold);
  out.level = pred.level;
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct TestSample {
  std::string name;
  PointCloud cloud;
  std::vector<std::uint8_t> mask;  // ground-truth anomalous points
};

struct ClassMetrics {
  std::string name;
  double point_auc_roc = 0.0;
  double point_auc_pr = 0.0;
  double object_auc_roc = 0.0;
  double object_auc_pr = 0.0;
  std::size_t samples = 0;
};

struct MetricsReport {
  std::vector<ClassMetrics> classes;
  ClassMetrics mean;
  std::string config_hash;
};

/// Metrics from precomputed scores (one entry per sample).
inline ClassMetrics metrics_from_scores(const std::string& name, std::span<const TestSample> samples,
                                        std::span<const AnomalyScores> scores) {
  if (samples.empty()) fail(ErrorCode::MissingLabels, "empty test set");
  if (samples.size() != scores.size()) fail(ErrorCode::CountMismatch, "one score set per sample");
  std::vector<double> pts, objs;
  std::vector<std::uint8_t> pl, ol;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto& m = samples[s].mask;
    if (m.size() != scores[s].points.size()) fail(ErrorCode::CountMismatch, "labels do not match the scores");
    pts.insert(pts.end(), scores[s].points.begin(), scores[s].points.end());
    pl.insert(pl.end(), m.begin(), m.end());
    objs.push_back(scores[s].object);
    ol.push_back(std::any_of(m.begin(), m.end(), [](auto v) { return v != 0; }));
  }
  ClassMetrics c;
  c.name = name;
  c.samples = samples.size();
  c.point_auc_roc = auc_roc(pts, pl);
  c.point_auc_pr = auc_pr(pts, pl);
  c.object_auc_roc = auc_roc(objs, ol);
  c.object_auc_pr = auc_pr(objs, ol);
  return c;
}

template <typename T>
ClassMetrics evaluate_class(const std::string& name, ParameterSet<T>& params, const Codebook& codebook,
                            std::span<const TestSample> samples, const InferenceConfig& cfg,
                            const std::filesystem::path& heatmap_dir = {}) {
  if (samples.empty()) fail(ErrorCode::MissingLabels, "empty test set for class '" + name + "'");
  std::vector<AnomalyScores> scores;
  scores.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.mask.size() != s.cloud.size()) fail(ErrorCode::MissingLabels, "sample '" + s.name + "' lacks labels");
    scores.push_back(infer(params, codebook, s.cloud, cfg).scores);
    if (!heatmap_dir.empty()) export_heatmap(s.cloud, scores.back().points, heatmap_dir / (s.name + "_heat.ply"));
  }
  return metrics_from_scores(name, samples, scores);
}

inline MetricsReport make_report(std::vector<ClassMetrics> classes, std::string config_hash = {}) {
  MetricsReport r;
  r.classes = std::move(classes);
  r.config_hash = std::move(config_hash);
  r.mean.name = "mean";
  for (const auto& c : r.classes) {
    r.mean.point_auc_roc += c.point_auc_roc;
    r.mean.point_auc_pr += c.point_auc_pr;
    r.mean.object_auc_roc += c.object_auc_roc;
    r.mean.object_auc_pr += c.object_auc_pr;
    r.mean.samples += c.samples;
  }
  if (!r.classes.empty()) {
    const double n = static_cast<double>(r.classes.size());
    r.mean.point_auc_roc /= n;
    r.mean.point_auc_pr /= n;
    r.mean.object_auc_roc /= n;
    r.mean.object_auc_pr /= n;
  }
  return r;
}

inline nlohmann::json to_json(const ClassMetrics& c) {
  return {{"class", c.name},
          {"samples", c.samples},
          {"point_auc_roc", c.point_auc_roc},
          {"point_auc_pr", c.point_auc_pr},
          {"object_auc_roc", c.object_auc_roc},
          {"object_auc_pr", c.object_auc_pr}};
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : r.classes) classes.push_back(to_json(c));
  return {{"classes", classes}, {"mean", to_json(r.mean)}, {"config_hash", r.config_hash}};
}

inline void write_report(const MetricsReport& r, const std::filesystem::path& csv, const std::filesystem::path& json) {
  std::ofstream c(csv);
  if (!c) fail(ErrorCode::IoError, "cannot write '" + csv.string() + "'");
  c << "class,samples,point_auc_roc,point_auc_pr,object_auc_roc,object_auc_pr\n";
  auto row = [&](const ClassMetrics& m) {
    c << m.name << ',' << m.samples << ',' << m.point_auc_roc << ',' << m.point_auc_pr << ',' << m.object_auc_roc
      << ',' << m.object_auc_pr << '\n';
  };
  for (const auto& m : r.classes) row(m);
  row(r.mean);
  std::ofstream j(json);
  if (!j) fail(ErrorCode::IoError, "cannot write '" + json.string() + "'");
  j << to_json(r).dump(2) << '\n';
}

}  // namespace patchad
