#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchad/eval.hpp"
#include "patchad/trainer.hpp"

namespace patchad {

// ---------------------------------------------------------------------------
// Presets and configuration

enum class Preset { shapenet, real3d, industrial };

inline std::string_view to_string(Preset p) {
  switch (p) {
    case Preset::shapenet: return "shapenet";
    case Preset::real3d: return "real3d";
    case Preset::industrial: return "industrial";
  }
  return "?";
}

inline Preset parse_preset(std::string_view s) {
  if (s == "shapenet") return Preset::shapenet;
  if (s == "real3d") return Preset::real3d;
  if (s == "industrial") return Preset::industrial;
  fail(ErrorCode::BadConfig, "unknown preset '" + std::string(s) + "'");
}

/// Procedural benchmark: every class is one shape kind with independent draws per cloud.
struct SuiteConfig {
  std::vector<ShapeKind> classes{ShapeKind::sphere, ShapeKind::box, ShapeKind::cylinder, ShapeKind::torus,
                                 ShapeKind::gear};
  std::size_t train_clouds = 20;
  std::size_t test_anomalous = 50;
  std::size_t test_clean = 50;
  std::size_t points = 2048;
  std::size_t min_anomalies = 1;  // per anomalous test sample
  std::size_t max_anomalies = 1;

  void validate() const {
    if (classes.empty()) fail(ErrorCode::BadConfig, "suite needs at least one class");
    if (train_clouds == 0) fail(ErrorCode::BadConfig, "suite needs training clouds");
    if (points < 100) fail(ErrorCode::BadConfig, "suite clouds need at least 100 points");
    if (min_anomalies == 0 || min_anomalies > max_anomalies) fail(ErrorCode::BadConfig, "bad test anomaly range");
  }
};

struct PipelineConfig {
  Preset preset = Preset::shapenet;
  std::uint64_t seed = 0;
  SuiteConfig suite;
  TrainConfig train;
  double mask_threshold = 0.5;

  InferenceConfig inference() const { return {train.patch, train.fusion, mask_threshold}; }

  void validate() const {
    suite.validate();
    train.validate();
    if (!(mask_threshold >= 0.0 && mask_threshold <= 1.0)) fail(ErrorCode::BadConfig, "mask threshold not in [0, 1]");
  }

  static PipelineConfig from_preset(Preset p, std::uint64_t seed = 0) {
    PipelineConfig c;
    c.preset = p;
    c.seed = seed;
    c.train.seed = seed;
    // Without the skip path a collapsed codebook leaves every point with the same attended feature.
    c.train.fusion.attention_residual = true;
    if (p == Preset::industrial) {
      c.train.patch = PatchConfig::industrial();
      c.train.augment = AugmentOptions::industrial();
    } else {
      c.train.patch = p == Preset::real3d ? PatchConfig::real3d() : PatchConfig::shapenet();
    }
    return c;
  }
};

inline nlohmann::json to_json(const AugmentOptions& o) {
  nlohmann::json kinds = nlohmann::json::array();
  for (auto k : o.kinds) kinds.push_back(to_string(k));
  return {{"kinds", kinds},         {"sigma_min", o.sigma_min}, {"sigma_max", o.sigma_max},
          {"mask_min", o.mask_min}, {"mask_max", o.mask_max},   {"ratio_min", o.ratio_min},
          {"ratio_max", o.ratio_max}, {"max_retries", o.max_retries}};
}

inline AugmentOptions augment_from_json(const nlohmann::json& j, AugmentOptions o) {
  if (j.contains("kinds")) {
    o.kinds.clear();
    for (const auto& k : j["kinds"]) o.kinds.push_back(parse_anomaly_kind(k.get<std::string>()));
  }
  o.sigma_min = j.value("sigma_min", o.sigma_min);
  o.sigma_max = j.value("sigma_max", o.sigma_max);
  o.mask_min = j.value("mask_min", o.mask_min);
  o.mask_max = j.value("mask_max", o.mask_max);
  o.ratio_min = j.value("ratio_min", o.ratio_min);
  o.ratio_max = j.value("ratio_max", o.ratio_max);
  o.max_retries = j.value("max_retries", o.max_retries);
  return o;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json presets = nlohmann::json::array();
  for (auto p : c.presets) presets.push_back(p == AmplitudePreset::small ? "small" : "large");
  return {{"epochs", c.epochs},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"min_anomalies", c.min_anomalies},
          {"max_anomalies", c.max_anomalies},
          {"presets", presets},
          {"patch", to_json(c.patch)},
          {"augment", to_json(c.augment)},
          {"fusion", to_json(c.fusion)},
          {"lambda_sim", c.weights.sim},
          {"lambda_bce", c.weights.bce},
          {"tau", c.tau},
          {"codebook_every", c.codebook_every},
          {"checkpoint_every", c.checkpoint_every},
          {"augment_enabled", c.augment_enabled}};
}

inline TrainConfig train_from_json(const nlohmann::json& j, TrainConfig c) {
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.min_anomalies = j.value("min_anomalies", c.min_anomalies);
  c.max_anomalies = j.value("max_anomalies", c.max_anomalies);
  if (j.contains("presets")) {
    c.presets.clear();
    for (const auto& p : j["presets"]) {
      const auto s = p.get<std::string>();
      if (s != "small" && s != "large") fail(ErrorCode::BadConfig, "amplitude preset must be small or large");
      c.presets.push_back(s == "small" ? AmplitudePreset::small : AmplitudePreset::large);
    }
  }
  if (j.contains("patch")) c.patch = patch_config_from_json(j["patch"], c.patch);
  if (j.contains("augment")) c.augment = augment_from_json(j["augment"], c.augment);
  if (j.contains("fusion")) c.fusion = fusion_from_json(j["fusion"]);
  c.weights.sim = j.value("lambda_sim", c.weights.sim);
  c.weights.bce = j.value("lambda_bce", c.weights.bce);
  c.tau = j.value("tau", c.tau);
  c.codebook_every = j.value("codebook_every", c.codebook_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.augment_enabled = j.value("augment_enabled", c.augment_enabled);
  return c;
}

inline nlohmann::json to_json(const SuiteConfig& s) {
  nlohmann::json classes = nlohmann::json::array();
  for (auto k : s.classes) classes.push_back(to_string(k));
  return {{"classes", classes},
          {"train_clouds", s.train_clouds},
          {"test_anomalous", s.test_anomalous},
          {"test_clean", s.test_clean},
          {"points", s.points},
          {"min_anomalies", s.min_anomalies},
          {"max_anomalies", s.max_anomalies}};
}

inline SuiteConfig suite_from_json(const nlohmann::json& j, SuiteConfig s) {
  if (j.contains("classes")) {
    s.classes.clear();
    for (const auto& k : j["classes"]) s.classes.push_back(parse_shape_kind(k.get<std::string>()));
  }
  s.train_clouds = j.value("train_clouds", s.train_clouds);
  s.test_anomalous = j.value("test_anomalous", s.test_anomalous);
  s.test_clean = j.value("test_clean", s.test_clean);
  s.points = j.value("points", s.points);
  s.min_anomalies = j.value("min_anomalies", s.min_anomalies);
  s.max_anomalies = j.value("max_anomalies", s.max_anomalies);
  return s;
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  return {{"preset", to_string(c.preset)},
          {"seed", c.seed},
          {"suite", to_json(c.suite)},
          {"train", to_json(c.train)},
          {"mask_threshold", c.mask_threshold}};
}

/// Builds a config from JSON. The preset (from the file unless overridden) supplies every absent field.
inline PipelineConfig pipeline_from_json(const nlohmann::json& j, std::optional<Preset> preset = {},
                                         std::optional<std::uint64_t> seed = {}) {
  try {
    const Preset p = preset ? *preset : parse_preset(j.value("preset", std::string("shapenet")));
    const std::uint64_t s = seed ? *seed : j.value("seed", std::uint64_t{0});
    auto c = PipelineConfig::from_preset(p, s);
    if (j.contains("suite")) c.suite = suite_from_json(j["suite"], c.suite);
    if (j.contains("train")) c.train = train_from_json(j["train"], c.train);
    c.train.seed = s;
    c.mask_threshold = j.value("mask_threshold", c.mask_threshold);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::BadConfig, std::string("config: ") + e.what());
  }
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path, std::optional<Preset> preset = {},
                                           std::optional<std::uint64_t> seed = {}) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot read '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::BadConfig, "config '" + path.string() + "': " + e.what());
  }
  return pipeline_from_json(j, preset, seed);
}

/// CRC-64 of the canonical JSON dump, as 16 hex digits.
inline std::string config_hash(const PipelineConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(crc64(to_json(c).dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Synthetic suite

struct ClassData {
  std::string name;
  std::vector<PointCloud> train;
  std::vector<TestSample> test;
};

/// Train clouds, then anomalous test samples alternating small/large amplitude, then clean test clouds.
/// Every cloud is an independent draw of the class shape.
inline ClassData make_class_data(ShapeKind kind, const SuiteConfig& suite, const AugmentOptions& augment,
                                 std::uint64_t seed) {
  suite.validate();
  ClassData d;
  d.name = std::string(to_string(kind));
  const auto k = static_cast<std::uint64_t>(kind);
  std::uint64_t draw = 0;
  for (std::size_t i = 0; i < suite.train_clouds; ++i)
    d.train.push_back(gen_shape(kind, suite.points, mix_seed(seed, k, draw++)));
  std::mt19937_64 rng(mix_seed(seed, k, 0xA11CE));
  std::uniform_int_distribution<std::size_t> count(suite.min_anomalies, suite.max_anomalies);
  for (std::size_t i = 0; i < suite.test_anomalous; ++i) {
    const auto normal = gen_shape(kind, suite.points, mix_seed(seed, k, draw++));
    const auto preset = i % 2 == 0 ? AmplitudePreset::small : AmplitudePreset::large;
    auto aug = negative_augment(normal, count(rng), preset, rng(), augment);
    d.test.push_back({d.name + "_anomalous_" + std::to_string(i), std::move(aug.abnormal), std::move(aug.mask)});
  }
  for (std::size_t i = 0; i < suite.test_clean; ++i) {
    auto normal = gen_shape(kind, suite.points, mix_seed(seed, k, draw++));
    std::vector<std::uint8_t> none(normal.size(), 0);
    d.test.push_back({d.name + "_clean_" + std::to_string(i), std::move(normal), std::move(none)});
  }
  return d;
}

struct ClassRun {
  ClassMetrics metrics;
  std::vector<EpochLog> log;
  double train_seconds = 0.0;
  double eval_seconds = 0.0;
};

/// Trains one model on the class's normal clouds (32-bit) and evaluates it on the class's test set.
inline ClassRun run_class(const ClassData& data, const PipelineConfig& cfg,
                          const std::function<void(const EpochLog&)>& on_epoch = {}) {
  ClassRun run;
  const auto t0 = std::chrono::steady_clock::now();
  auto trained = train<float>(data.train, cfg.train, make_model_params<float>(cfg.train.seed), on_epoch);
  const auto t1 = std::chrono::steady_clock::now();
  run.metrics = evaluate_class<float>(data.name, trained.params, trained.codebook, data.test, cfg.inference());
  run.log = std::move(trained.log);
  run.train_seconds = std::chrono::duration<double>(t1 - t0).count();
  run.eval_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  return run;
}

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationVariant {
  std::string axis;  // "strategy" or "feature"
  std::string name;
  PipelineConfig config;
};

/// Patch strategies (single-level alternatives use the middle configured level) and feature modes,
/// each varied alone around `base`.
inline std::vector<AblationVariant> ablation_variants(const PipelineConfig& base) {
  std::vector<AblationVariant> out;
  const auto& levels = base.train.patch.levels;
  const LevelSpec mid = levels.at(levels.size() / 2);
  for (auto s : {PatchStrategy::multi_scale_spheres, PatchStrategy::fps_spheres, PatchStrategy::fps_voxels,
                 PatchStrategy::grid3d}) {
    PipelineConfig c = base;
    c.train.patch.strategy = s;
    if (s != PatchStrategy::multi_scale_spheres) c.train.patch.levels = {mid};
    out.push_back({"strategy", std::string(to_string(s)), c});
  }
  for (auto m : {FeatureMode::mean_point, FeatureMode::pooling, FeatureMode::mean_feature}) {
    PipelineConfig c = base;
    c.train.fusion.feature_mode = m;
    out.push_back({"feature", std::string(to_string(m)), c});
  }
  return out;
}

}  // namespace patchad
