#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "patchad/geometry.hpp"
#include "patchad/patchify.hpp"
#include "patchad/tape.hpp"

namespace patchad {

inline constexpr int kFeatureDim = 32;
inline constexpr std::size_t kEncoderNeighbors = 16;
inline constexpr int kEncoderInputs = 9;
inline constexpr int kEncoderHidden = 64;

/// Per-point encoder inputs: [x - local centroid, covariance eigenvalues, normal]. Offsets from the
/// centroid are divided by their RMS over the cloud and eigenvalues enter as log(lambda / s^2 + 1e-4)
/// with s the RMS neighbourhood radius, so curvature differences of a few orders of magnitude all
/// land in the first layer's working range.
struct EncoderInput {
  Matrix<double> features;
  std::vector<Vec3> normals;
  double spacing = 1.0;
};

inline constexpr double kEigenFloor = 1e-4;

inline EncoderInput encoder_input(std::span<const Vec3> pts, std::size_t k = kEncoderNeighbors) {
  if (pts.size() <= k) fail(ErrorCode::TooFewPoints, "encoder needs more than " + std::to_string(k) + " points");
  auto geo = local_geometry(pts, k);
  double acc = 0.0, rel_acc = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    acc += geo.eigenvalues[i].sum();
    rel_acc += (pts[i] - geo.local_centroids[i]).squaredNorm();
  }
  const double n = static_cast<double>(pts.size());
  const double spacing = std::sqrt(acc / n), rel_rms = std::sqrt(rel_acc / n);
  const double s = spacing > 0.0 ? spacing : 1.0;
  const double r = rel_rms > 0.0 ? rel_rms : 1.0;
  EncoderInput in;
  in.spacing = s;
  in.features.resize(static_cast<Eigen::Index>(pts.size()), kEncoderInputs);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const Vec3 rel = (pts[i] - geo.local_centroids[i]) / r;
    for (int a = 0; a < 3; ++a) {
      in.features(row, a) = rel[a];
      in.features(row, 3 + a) = std::log(geo.eigenvalues[i][a] / (s * s) + kEigenFloor);
      in.features(row, 6 + a) = geo.normals[i][a];
    }
  }
  in.normals = std::move(geo.normals);
  return in;
}

/// enc.w1 [9,64], enc.w2 [64,64], enc.w3 [64,32] and their row biases.
template <typename T>
void add_encoder_params(ParameterSet<T>& params, std::mt19937_64& rng) {
  params.add("enc.w1", glorot<T>(kEncoderInputs, kEncoderHidden, rng));
  params.add("enc.b1", Matrix<T>::Zero(1, kEncoderHidden));
  params.add("enc.w2", centered_glorot<T>(kEncoderHidden, kEncoderHidden, rng));
  params.add("enc.b2", Matrix<T>::Zero(1, kEncoderHidden));
  params.add("enc.w3", centered_glorot<T>(kEncoderHidden, kFeatureDim, rng));
  params.add("enc.b3", Matrix<T>::Zero(1, kFeatureDim));
}

/// Point features z [N, 32].
template <typename T>
Var encode_points(Tape<T>& tape, ParameterSet<T>& params, const EncoderInput& input, bool trainable) {
  Var x = tape.constant(input.features.template cast<T>());
  Var h = tape.elu_plus_one(
      tape.dense(x, tape.weight(params.get("enc.w1"), trainable), tape.weight(params.get("enc.b1"), trainable)));
  h = tape.elu_plus_one(
      tape.dense(h, tape.weight(params.get("enc.w2"), trainable), tape.weight(params.get("enc.b2"), trainable)));
  return tape.dense(h, tape.weight(params.get("enc.w3"), trainable), tape.weight(params.get("enc.b3"), trainable));
}

template <typename T>
Matrix<T> encode_points(ParameterSet<T>& params, const EncoderInput& input) {
  Tape<T> tape;
  return tape.value(encode_points(tape, params, input, false));
}

// ---------------------------------------------------------------------------
// Patch features

enum class FeatureMode { mean_point, pooling, mean_feature };

inline std::string_view to_string(FeatureMode m) {
  switch (m) {
    case FeatureMode::mean_point: return "mean_point";
    case FeatureMode::pooling: return "pooling";
    case FeatureMode::mean_feature: return "mean_feature";
  }
  return "unknown";
}

inline FeatureMode parse_feature_mode(std::string_view s) {
  for (auto m : {FeatureMode::mean_point, FeatureMode::pooling, FeatureMode::mean_feature})
    if (to_string(m) == s) return m;
  fail(ErrorCode::BadConfig, "unknown feature mode '" + std::string(s) + "'");
}

/// Mean of the member coordinates (the patch centroid, as opposed to the sphere center).
inline Vec3 patch_centroid(const Patch& patch, std::span<const Vec3> pts) {
  if (patch.members.empty()) fail(ErrorCode::EmptyPatch, "patch has no members");
  Vec3 rel = Vec3::Zero();
  for (Index i : patch.members) rel += pts[i] - patch.center;
  return patch.center + rel / static_cast<double>(patch.members.size());
}

/// Row groups that turn per-point features into per-patch features for `mode`: inverse-distance
/// weights of the 3 members nearest the patch centroid, uniform weights, or plain membership.
inline RowGroups patch_groups(const PatchSet& set, std::span<const Vec3> pts, FeatureMode mode) {
  RowGroups groups;
  for (const auto& patch : set.patches) {
    if (patch.members.empty()) fail(ErrorCode::EmptyPatch, "patch has no members");
    switch (mode) {
      case FeatureMode::mean_point: {
        const Vec3 q = patch_centroid(patch, pts);
        std::vector<std::pair<double, Index>> d;
        d.reserve(patch.members.size());
        for (Index i : patch.members) d.emplace_back(sq_dist(pts[i], q), i);
        const std::size_t m = std::min<std::size_t>(3, d.size());
        std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(m), d.end());
        std::vector<Index> rows(m);
        std::vector<double> w(m);
        double total = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          rows[j] = d[j].second;
          w[j] = 1.0 / (std::sqrt(d[j].first) + 1e-9);
          total += w[j];
        }
        for (auto& x : w) x /= total;
        groups.add(rows, w);
        break;
      }
      case FeatureMode::mean_feature: {
        // Sorted so the sum does not depend on member order.
        std::vector<Index> rows = patch.members;
        std::sort(rows.begin(), rows.end());
        std::vector<double> w(rows.size(), 1.0 / static_cast<double>(rows.size()));
        groups.add(rows, w);
        break;
      }
      case FeatureMode::pooling: {
        std::vector<Index> rows = patch.members;
        std::sort(rows.begin(), rows.end());
        groups.add(rows);
        break;
      }
    }
  }
  return groups;
}

/// Unit-norm patch features [P, 32] for every patch of `set`, in rank order.
template <typename T>
Var patch_features(Tape<T>& tape, Var z, const PatchSet& set, std::span<const Vec3> pts, FeatureMode mode) {
  auto groups = patch_groups(set, pts, mode);
  Var raw = mode == FeatureMode::pooling ? tape.max_rows(z, std::move(groups)) : tape.weighted_rows(z, std::move(groups));
  return tape.l2_normalize_rows(raw);
}

/// Single-patch convenience form over precomputed point features.
inline Eigen::VectorXd patch_feature(const Patch& patch, std::span<const Vec3> pts, const Matrix<double>& features,
                                     FeatureMode mode) {
  if (patch.members.empty()) fail(ErrorCode::EmptyPatch, "patch has no members");
  PatchSet one;
  one.patches = {patch};
  Tape<double> tape;
  Var z = tape.constant(features);
  return tape.value(patch_features(tape, z, one, pts, mode)).row(0).transpose();
}

}  // namespace patchad
