#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchad/codebook.hpp"
#include "patchad/encoder.hpp"
#include "patchad/tape.hpp"

namespace patchad {

// ---------------------------------------------------------------------------
// Rotary position encoding

/// Rotation pair k turns channels (2k, 2k+1) by pos[k % 3] * theta^(-2k/dim).
struct RopeConfig {
  int dim = kFeatureDim;
  int heads = 4;
  double theta = 10000.0;

  void validate() const {
    if (dim <= 0 || dim % 2 != 0) fail(ErrorCode::BadConfig, "rope dimension must be even");
    if (heads <= 0 || dim % heads != 0 || (dim / heads) % 2 != 0)
      fail(ErrorCode::BadConfig, "rope heads must split the dimension into whole pairs");
    if (!(theta > 0.0)) fail(ErrorCode::BadConfig, "rope base must be positive");
  }
  int pairs() const { return dim / 2; }
  static int axis(int pair) { return pair % 3; }
  double omega(int pair) const { return std::pow(theta, -2.0 * pair / dim); }
};

inline nlohmann::json to_json(const RopeConfig& c) { return {{"dim", c.dim}, {"heads", c.heads}, {"theta", c.theta}}; }

inline RopeConfig rope_from_json(const nlohmann::json& j) {
  RopeConfig c;
  c.dim = j.value("dim", c.dim);
  c.heads = j.value("heads", c.heads);
  c.theta = j.value("theta", c.theta);
  c.validate();
  return c;
}

/// cos/sin table with one row per position.
template <typename T>
RotaryTable<T> rope_table(std::span<const Vec3> positions, const RopeConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(positions.size());
  RotaryTable<T> t{Matrix<T>(n, cfg.pairs()), Matrix<T>(n, cfg.pairs())};
  for (Eigen::Index i = 0; i < n; ++i)
    for (int k = 0; k < cfg.pairs(); ++k) {
      // Angles are evaluated in the table's precision.
      const T a = static_cast<T>(positions[static_cast<std::size_t>(i)][RopeConfig::axis(k)] * cfg.omega(k));
      t.cos(i, k) = std::cos(a);
      t.sin(i, k) = std::sin(a);
    }
  return t;
}

inline Eigen::VectorXd rope_rotate(const Eigen::VectorXd& v, const Vec3& pos, const RopeConfig& cfg) {
  if (v.size() != cfg.dim) fail(ErrorCode::ShapeMismatch, "rope input width differs from the config");
  Eigen::VectorXd out(v.size());
  for (int k = 0; k < cfg.pairs(); ++k) {
    const double a = pos[RopeConfig::axis(k)] * cfg.omega(k), c = std::cos(a), s = std::sin(a);
    out[2 * k] = v[2 * k] * c - v[2 * k + 1] * s;
    out[2 * k + 1] = v[2 * k] * s + v[2 * k + 1] * c;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

inline constexpr int kGateHidden = 16;
inline constexpr int kHeadHidden = 64;
inline constexpr int kHeadOutputs = 4;  // offset xyz + mask logit

template <typename T>
void add_fusion_params(ParameterSet<T>& params, std::mt19937_64& rng) {
  const int d = kFeatureDim;
  for (const char* n : {"wq", "wk", "wv", "wo"}) {
    params.add(std::string("attn.") + n, glorot<T>(d, d, rng));
    params.add(std::string("attn.b") + n[1], Matrix<T>::Zero(1, d));
  }
  params.add("gate.w1", glorot<T>(1, kGateHidden, rng));
  params.add("gate.b1", Matrix<T>::Zero(1, kGateHidden));
  params.add("gate.w2", centered_glorot<T>(kGateHidden, d, rng));
  params.add("gate.b2", Matrix<T>::Zero(1, d));
  params.add("mod.w1", glorot<T>(1, kGateHidden, rng));
  params.add("mod.b1", Matrix<T>::Zero(1, kGateHidden));
  params.add("mod.w2", centered_glorot<T>(kGateHidden, 2 * d, rng, 0.1));
  Matrix<T> mb = Matrix<T>::Zero(1, 2 * d);
  mb.leftCols(d).setOnes();  // gamma starts at 1, beta at 0
  params.add("mod.b2", std::move(mb));
  params.add("head.w1", glorot<T>(2 * d, kHeadHidden, rng));
  params.add("head.b1", Matrix<T>::Zero(1, kHeadHidden));
  params.add("head.w2", centered_glorot<T>(kHeadHidden, d, rng));
  params.add("head.b2", Matrix<T>::Zero(1, d));
  params.add("head.wf", glorot<T>(d, kHeadOutputs, rng, 0.01));
  params.add("head.bf", Matrix<T>::Zero(1, kHeadOutputs));
}

/// Encoder plus fusion head, drawn from one seed.
template <typename T>
ParameterSet<T> make_model_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet<T> params;
  add_encoder_params(params, rng);
  add_fusion_params(params, rng);
  return params;
}

// ---------------------------------------------------------------------------
// Building blocks

enum class AttentionKind { linear, softmax };

inline std::string_view to_string(AttentionKind k) { return k == AttentionKind::linear ? "linear" : "softmax"; }

inline AttentionKind parse_attention(std::string_view s) {
  if (s == "linear") return AttentionKind::linear;
  if (s == "softmax") return AttentionKind::softmax;
  fail(ErrorCode::BadConfig, "unknown attention kind '" + std::string(s) + "'");
}

struct FusionOptions {
  RopeConfig rope;
  AttentionKind attention = AttentionKind::linear;
  FeatureMode feature_mode = FeatureMode::mean_point;
  bool use_attention = true;
  bool use_modulation = true;
  bool attention_residual = false;  // z_hat = z + attention(z) instead of attention(z)
  bool normalize_scale = true;      // divide Eq. 2 sums by the pair count before the argmax
};

inline nlohmann::json to_json(const FusionOptions& o) {
  return {{"rope", to_json(o.rope)},
          {"attention", to_string(o.attention)},
          {"feature_mode", to_string(o.feature_mode)},
          {"use_attention", o.use_attention},
          {"use_modulation", o.use_modulation},
          {"attention_residual", o.attention_residual},
          {"normalize_scale", o.normalize_scale}};
}

inline FusionOptions fusion_from_json(const nlohmann::json& j) {
  FusionOptions o;
  if (j.contains("rope")) o.rope = rope_from_json(j["rope"]);
  o.attention = parse_attention(j.value("attention", std::string(to_string(o.attention))));
  o.feature_mode = parse_feature_mode(j.value("feature_mode", std::string(to_string(o.feature_mode))));
  o.use_attention = j.value("use_attention", o.use_attention);
  o.use_modulation = j.value("use_modulation", o.use_modulation);
  o.attention_residual = j.value("attention_residual", o.attention_residual);
  o.normalize_scale = j.value("normalize_scale", o.normalize_scale);
  return o;
}

/// 1 - t.p for unit features, in [0, 2].
inline double patch_discrepancy(const Eigen::VectorXd& t, const Eigen::VectorXd& p) { return 1.0 - t.dot(p); }

/// Row-wise discrepancy [P, 1] between query patches and their templates.
template <typename T>
Var patch_discrepancy(Tape<T>& tape, Var queries, Var templates) {
  return tape.affine(tape.rowdot(queries, templates), T(-1), T(1));
}

/// Point tokens attend to template tokens. `qrot` rotates per point, `krot` per template.
template <typename T>
Var cross_attention(Tape<T>& tape, ParameterSet<T>& params, Var z, Var templates, const RotaryTable<T>& qrot,
                    const RotaryTable<T>& krot, const FusionOptions& opts, bool trainable) {
  if (opts.attention == AttentionKind::softmax)
    fail(ErrorCode::Unsupported, "softmax cross-attention is not implemented");
  if (tape.value(templates).rows() == 0) fail(ErrorCode::EmptyTemplates, "no template tokens");
  auto w = [&](const char* n) { return tape.weight(params.get(n), trainable); };
  Var q = tape.elu_plus_one(tape.dense(z, w("attn.wq"), w("attn.bq")));
  Var k = tape.elu_plus_one(tape.dense(templates, w("attn.wk"), w("attn.bk")));
  Var v = tape.dense(templates, w("attn.wv"), w("attn.bv"));
  Var a = tape.rope_linear_attention(q, k, v, qrot, krot, opts.rope.heads);
  Var out = tape.dense(a, w("attn.wo"), w("attn.bo"));
  return opts.attention_residual ? tape.add(z, out) : out;
}

/// z' = rho * (gamma * z_hat + beta) with rho, gamma, beta driven by the discrepancy. With `owner`, df holds one
/// row per patch and the gate and modulation are evaluated per patch, then spread to the owning points.
template <typename T>
Var gated_modulation(Tape<T>& tape, ParameterSet<T>& params, Var zhat, Var df, bool trainable,
                     const std::vector<Index>* owner = nullptr) {
  auto w = [&](const char* n) { return tape.weight(params.get(n), trainable); };
  Var rho = tape.sigmoid(
      tape.dense(tape.elu_plus_one(tape.dense(df, w("gate.w1"), w("gate.b1"))), w("gate.w2"), w("gate.b2")));
  Var gb = tape.dense(tape.elu_plus_one(tape.dense(df, w("mod.w1"), w("mod.b1"))), w("mod.w2"), w("mod.b2"));
  if (owner) {
    rho = tape.gather_rows(rho, *owner);
    gb = tape.gather_rows(gb, *owner);
  }
  Var gamma = tape.slice_cols(gb, 0, kFeatureDim);
  Var beta = tape.slice_cols(gb, kFeatureDim, kFeatureDim);
  return tape.mul(rho, tape.add(tape.mul(gamma, zhat), beta));
}

/// [N, 4]: offset xyz and mask logit from MLP([z', z_hat]) + z_hat.
template <typename T>
Var predict_head(Tape<T>& tape, ParameterSet<T>& params, Var zmod, Var zhat, bool trainable) {
  auto w = [&](const char* n) { return tape.weight(params.get(n), trainable); };
  const Var parts[] = {zmod, zhat};
  Var h = tape.elu_plus_one(tape.dense(tape.concat_cols(parts), w("head.w1"), w("head.b1")));
  h = tape.add(tape.dense(h, w("head.w2"), w("head.b2")), zhat);
  return tape.dense(h, w("head.wf"), w("head.bf"));
}

// ---------------------------------------------------------------------------
// Full forward pass

template <typename T>
struct Prediction {
  Var offsets;  // [N, 3]
  Var probs;    // [N, 1]
  int level = 1;
  std::vector<double> alphas;        // Eq. 2 sums per level
  std::vector<Retrieval> retrieved;  // templates at the selected level, in rank order
  std::vector<Index> owner;          // point -> patch at the selected level
};

/// Runs encoder, retrieval, scale selection, attention, modulation and head on one prepared cloud.
template <typename T>
Prediction<T> forward(Tape<T>& tape, ParameterSet<T>& params, const Codebook& codebook, const PreparedCloud& cloud,
                      const FusionOptions& opts, bool trainable) {
  if (cloud.patches.empty()) fail(ErrorCode::EmptyInput, "no patch levels");
  Prediction<T> out;
  Var z = encode_points(tape, params, cloud.input, trainable);

  std::vector<Var> queries;
  std::vector<std::vector<Retrieval>> matches;
  std::vector<std::size_t> counts;
  for (const auto& set : cloud.patches) {
    Var p = patch_features(tape, z, set, cloud.points, opts.feature_mode);
    auto r = codebook.retrieve_all(set.level, tape.value(p));
    double alpha = 0.0;
    for (const auto& m : r) alpha += m.similarity;
    out.alphas.push_back(alpha);
    counts.push_back(r.size());
    queries.push_back(p);
    matches.push_back(std::move(r));
  }
  const auto sel = static_cast<std::size_t>(select_scale(out.alphas, counts, opts.normalize_scale) - 1);
  const PatchSet& set = cloud.patches[sel];
  out.level = set.level;
  out.retrieved = std::move(matches[sel]);
  out.owner = set.assignment(cloud.points);

  Var templates = tape.constant(codebook.features<T>(set.level, out.retrieved));
  Var zhat = z;
  if (opts.use_attention) {
    std::vector<Vec3> qpos(cloud.points.size()), kpos(set.size());
    std::vector<Vec3> centroids(set.size());
    for (std::size_t j = 0; j < set.size(); ++j) {
      centroids[j] = patch_centroid(set.patches[j], cloud.points);
      kpos[j] = set.patches[j].center - set.object_centroid;
    }
    for (std::size_t i = 0; i < qpos.size(); ++i) qpos[i] = cloud.points[i] - centroids[out.owner[i]];
    const auto qrot = rope_table<T>(qpos, opts.rope), krot = rope_table<T>(kpos, opts.rope);
    zhat = cross_attention(tape, params, z, templates, qrot, krot, opts, trainable);
  }
  Var zmod = zhat;
  if (opts.use_modulation) {
    Var df = patch_discrepancy(tape, queries[sel], templates);
    zmod = gated_modulation(tape, params, zhat, df, trainable, &out.owner);
  }
  Var head = predict_head(tape, params, zmod, zhat, trainable);
  out.offsets = tape.slice_cols(head, 0, 3);
  out.probs = tape.sigmoid(tape.slice_cols(head, 3, 1));
  return out;
}

}  // namespace patchad
