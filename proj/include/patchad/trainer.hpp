#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchad/codebook.hpp"
#include "patchad/fusion.hpp"
#include "patchad/patchify.hpp"
#include "patchad/synth.hpp"
#include "patchad/tape.hpp"

namespace patchad {

// ---------------------------------------------------------------------------
// Losses

struct LossWeights {
  double sim = 0.5;
  double bce = 0.5;

  void validate() const {
    if (!(std::isfinite(sim) && std::isfinite(bce) && sim >= 0.0 && bce >= 0.0))
      fail(ErrorCode::BadConfig, "loss weights must be finite and nonnegative");
  }
};

struct LossParts {
  double total = 0.0;
  double dist = 0.0;
  double sim = 0.0;
  double bce = 0.0;
};

inline double loss_total(double dist, double sim, double bce, const LossWeights& w) {
  w.validate();
  return dist + w.sim * sim + w.bce * bce;
}

/// Mean per-point L1 distance between offset sets [N, 3].
inline double loss_dist(const Matrix<double>& pred, const Matrix<double>& gt) {
  Tape<double> t;
  return t.value(t.l1_loss(t.constant(pred), gt))(0, 0);
}

/// -mean of (1 + cos) / 2 over points with a nonzero ground-truth offset; 0 when there are none.
inline double loss_sim(const Matrix<double>& pred, const Matrix<double>& gt) {
  Tape<double> t;
  return t.value(t.cosine_loss(t.constant(pred), gt))(0, 0);
}

inline double loss_bce(const Matrix<double>& probs, const Matrix<double>& gt) {
  Tape<double> t;
  return t.value(t.bce_loss(t.constant(probs), gt))(0, 0);
}

/// Weighted total on the tape; fills `parts` with the component values when given.
template <typename T>
Var loss_total(Tape<T>& tape, Var offsets, Var probs, const Matrix<T>& gt_offsets, const Matrix<T>& gt_mask,
               const LossWeights& w, LossParts* parts = nullptr) {
  w.validate();
  const Var terms[] = {tape.l1_loss(offsets, gt_offsets), tape.cosine_loss(offsets, gt_offsets),
                       tape.bce_loss(probs, gt_mask)};
  const T coeffs[] = {T(1), static_cast<T>(w.sim), static_cast<T>(w.bce)};
  Var total = tape.linear_combination(terms, coeffs);
  if (parts) {
    parts->dist = static_cast<double>(tape.value(terms[0])(0, 0));
    parts->sim = static_cast<double>(tape.value(terms[1])(0, 0));
    parts->bce = static_cast<double>(tape.value(terms[2])(0, 0));
    parts->total = static_cast<double>(tape.value(total)(0, 0));
  }
  return total;
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  int epochs = 300;
  double lr = 1e-3;
  int batch_size = 1;  // clouds per optimizer step
  std::size_t min_anomalies = 1;
  std::size_t max_anomalies = 3;
  std::vector<AmplitudePreset> presets{AmplitudePreset::small, AmplitudePreset::large};
  std::uint64_t seed = 0;
  PatchConfig patch = PatchConfig::shapenet();
  AugmentOptions augment;
  FusionOptions fusion;
  LossWeights weights;
  double tau = kDefaultTau;
  int codebook_every = 25;    // rebuild the codebook from the current encoder every K epochs
  int checkpoint_every = 0;   // 0 writes only the final checkpoint
  bool augment_enabled = true;  // off trains on clean clouds only
  std::filesystem::path checkpoint_path;  // empty disables checkpoints
  std::filesystem::path log_path;         // empty disables the CSV log

  void validate() const {
    if (epochs < 1) fail(ErrorCode::BadConfig, "epochs must be at least 1");
    if (!(lr > 0.0)) fail(ErrorCode::BadConfig, "learning rate must be positive");
    if (batch_size < 1) fail(ErrorCode::BadConfig, "batch size must be at least 1");
    if (min_anomalies > max_anomalies) fail(ErrorCode::BadConfig, "anomaly count range is empty");
    if (presets.empty()) fail(ErrorCode::BadConfig, "no amplitude presets");
    if (codebook_every < 0 || checkpoint_every < 0) fail(ErrorCode::BadConfig, "cadences must be nonnegative");
    weights.validate();
    patch.validate();
    fusion.rope.validate();
  }
};

struct EpochLog {
  int epoch = 0;
  LossParts loss;
  double wall_ms = 0.0;
};

template <typename T>
struct TrainResult {
  ParameterSet<T> params;
  Codebook codebook;
  std::vector<EpochLog> log;
};

// ---------------------------------------------------------------------------
// Samples

/// Deterministic per-step seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

/// A canonicalized abnormal cloud with its ground truth in canonical units.
struct LabeledCloud {
  PreparedCloud cloud;
  Matrix<double> offsets;  // [N, 3]
  Matrix<double> mask;     // [N, 1]
};

inline LabeledCloud label_sample(const PointCloud& abnormal, const std::vector<Vec3>& offsets,
                                 const std::vector<std::uint8_t>& mask, PatchConfig patch) {
  if (offsets.size() != abnormal.size() || mask.size() != abnormal.size())
    fail(ErrorCode::CountMismatch, "labels do not match the cloud");
  auto [canon, tf] = normalize_to_canonical(abnormal);
  LabeledCloud s;
  s.offsets.resize(static_cast<Eigen::Index>(offsets.size()), 3);
  s.mask.resize(static_cast<Eigen::Index>(offsets.size()), 1);
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    s.offsets.row(static_cast<Eigen::Index>(i)) = tf.apply_vector(offsets[i]).transpose();
    s.mask(static_cast<Eigen::Index>(i), 0) = mask[i] ? 1.0 : 0.0;
  }
  s.cloud = prepare_cloud(std::move(canon.points), patch);
  return s;
}

/// Fresh pseudo-anomalous training sample drawn from a normal cloud.
inline LabeledCloud make_training_sample(const PointCloud& normal, const TrainConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PatchConfig patch = cfg.patch;
  patch.seed = rng();
  if (!cfg.augment_enabled) {
    std::vector<Vec3> zero(normal.size(), Vec3::Zero());
    std::vector<std::uint8_t> none(normal.size(), 0);
    return label_sample(normal, zero, none, patch);
  }
  std::uniform_int_distribution<std::size_t> count(cfg.min_anomalies, cfg.max_anomalies);
  const std::size_t n = count(rng);
  const auto preset = cfg.presets[rng() % cfg.presets.size()];
  const auto sample = negative_augment(normal, n, preset, rng(), cfg.augment);
  return label_sample(sample.abnormal, sample.offsets, sample.mask, patch);
}

/// Canonical copies of the normal clouds, patchified with the configured seed.
inline std::vector<PreparedCloud> prepare_normals(std::span<const PointCloud> clouds, const PatchConfig& patch) {
  std::vector<PreparedCloud> out;
  out.reserve(clouds.size());
  for (const auto& c : clouds) out.push_back(prepare_cloud(normalize_to_canonical(c).first.points, patch));
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

/// One forward/backward pass; gradients accumulate into `params` scaled by `scale`.
template <typename T>
LossParts train_step(ParameterSet<T>& params, const Codebook& codebook, const LabeledCloud& sample,
                     const TrainConfig& cfg, T scale = T(1)) {
  Tape<T> tape;
  auto pred = forward(tape, params, codebook, sample.cloud, cfg.fusion, true);
  LossParts parts;
  const Matrix<T> gt_offsets = sample.offsets.template cast<T>(), gt_mask = sample.mask.template cast<T>();
  Var loss = loss_total(tape, pred.offsets, pred.probs, gt_offsets, gt_mask, cfg.weights, &parts);
  if (!std::isfinite(parts.total)) fail(ErrorCode::NonFinite, "loss is not finite");
  tape.backward(scale == T(1) ? loss : tape.affine(loss, scale));
  return parts;
}

inline void write_log_header(std::ostream& out) { out << "epoch,loss_total,loss_dist,loss_sim,loss_bce,wall_ms\n"; }

inline void write_log_row(std::ostream& out, const EpochLog& e) {
  out << e.epoch << ',' << e.loss.total << ',' << e.loss.dist << ',' << e.loss.sim << ',' << e.loss.bce << ','
      << e.wall_ms << '\n';
}

/// Trains one class model. `on_epoch` (optional) observes every finished epoch.
template <typename T>
TrainResult<T> train(std::span<const PointCloud> normals, const TrainConfig& cfg, ParameterSet<T> params,
                     const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (normals.empty()) fail(ErrorCode::EmptyInput, "training needs at least one normal cloud");
  std::vector<PointCloud> canon;
  canon.reserve(normals.size());
  for (const auto& c : normals) {
    auto cc = normalize_to_canonical(c).first;
    if (!cc.has_normals()) cc.normals = estimate_normals(cc, kEncoderNeighbors).normals;
    canon.push_back(std::move(cc));
  }
  const auto prepared = prepare_normals(canon, cfg.patch);

  TrainResult<T> result{std::move(params), Codebook(cfg.tau), {}};
  result.codebook = build_codebook<T>(prepared, result.params, cfg.fusion.feature_mode, cfg.tau);
  AdamState<T> adam;
  adam.config.lr = cfg.lr;

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path);
    if (!log) fail(ErrorCode::IoError, "cannot write '" + cfg.log_path.string() + "'");
    write_log_header(log);
  }
  auto checkpoint = [&](int epoch) {
    if (cfg.checkpoint_path.empty()) return;
    nlohmann::json meta = {{"epoch", epoch}, {"seed", cfg.seed}, {"fusion", to_json(cfg.fusion)},
                           {"patch", to_json(cfg.patch)}};
    save_checkpoint(cfg.checkpoint_path, result.params, meta);
  };

  std::mt19937_64 order_rng(mix_seed(cfg.seed, 0xC0FFEE));
  std::vector<std::size_t> order(canon.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), order_rng);
    LossParts sum;
    std::size_t steps = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
      result.params.zero_grad();
      const std::size_t end = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch_size));
      const T scale = T(1) / static_cast<T>(end - s);
      for (std::size_t b = s; b < end; ++b) {
        const std::uint64_t step_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), b);
        try {
          const auto sample = make_training_sample(canon[order[b]], cfg, step_seed);
          const auto parts = train_step(result.params, result.codebook, sample, cfg, scale);
          sum.total += parts.total;
          sum.dist += parts.dist;
          sum.sim += parts.sim;
          sum.bce += parts.bce;
          ++steps;
        } catch (const Error& e) {
          if (e.code() != ErrorCode::NonFinite) throw;
          fail(ErrorCode::NaNLoss, "epoch " + std::to_string(epoch) + ", cloud " + std::to_string(order[b]) +
                                       ", sample seed " + std::to_string(step_seed) + ": " + e.what());
        }
      }
      adam_step(result.params, adam);
    }
    EpochLog entry;
    entry.epoch = epoch;
    const double n = static_cast<double>(std::max<std::size_t>(1, steps));
    entry.loss = {sum.total / n, sum.dist / n, sum.sim / n, sum.bce / n};
    if (cfg.codebook_every > 0 && (epoch % cfg.codebook_every == 0 || epoch == cfg.epochs))
      result.codebook = build_codebook<T>(prepared, result.params, cfg.fusion.feature_mode, cfg.tau);
    entry.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(entry);
    if (log) {
      write_log_row(log, entry);
      log.flush();
    }
    if (on_epoch) on_epoch(entry);
    if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) checkpoint(epoch);
  }
  checkpoint(cfg.epochs);
  return result;
}

}  // namespace patchad
