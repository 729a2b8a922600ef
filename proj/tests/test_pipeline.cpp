#include <gtest/gtest.h>

#include "patchad/pipeline.hpp"

using namespace patchad;

TEST(Preset, ParseAndPrint) {
  for (auto p : {Preset::shapenet, Preset::real3d, Preset::industrial}) EXPECT_EQ(parse_preset(to_string(p)), p);
  EXPECT_THROW(parse_preset("mvtec"), Error);
}

TEST(Preset, IndustrialPatchNumbers) {
  const auto c = PipelineConfig::from_preset(Preset::industrial, 4);
  ASSERT_EQ(c.train.patch.levels.size(), 3u);
  EXPECT_EQ(c.train.patch.levels[0], (LevelSpec{64, 32}));
  EXPECT_EQ(c.train.patch.levels[1], (LevelSpec{32, 64}));
  EXPECT_EQ(c.train.patch.levels[2], (LevelSpec{8, 192}));
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.train.seed, 4u);
  EXPECT_TRUE(c.train.fusion.attention_residual);
}

TEST(Preset, ObjectBenchmarksShareDefaults) {
  const auto a = PipelineConfig::from_preset(Preset::shapenet);
  const auto b = PipelineConfig::from_preset(Preset::real3d);
  EXPECT_EQ(a.train.patch.levels, b.train.patch.levels);
  EXPECT_EQ(a.train.epochs, 300);
  EXPECT_EQ(a.suite.train_clouds, 20u);
  EXPECT_EQ(a.suite.points, 2048u);
}

TEST(Config, JsonRoundTrip) {
  auto c = PipelineConfig::from_preset(Preset::industrial, 9);
  c.suite.classes = {ShapeKind::gear, ShapeKind::box};
  c.suite.test_clean = 7;
  c.train.epochs = 12;
  c.train.lr = 3e-4;
  c.train.fusion.feature_mode = FeatureMode::pooling;
  c.mask_threshold = 0.4;
  const auto back = pipeline_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, OverridesAndValidation) {
  const nlohmann::json j = {{"preset", "shapenet"}, {"seed", 5}, {"train", {{"epochs", 3}}}};
  const auto c = pipeline_from_json(j, Preset::industrial, 11);
  EXPECT_EQ(c.preset, Preset::industrial);
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.train.epochs, 3);
  EXPECT_THROW(pipeline_from_json({{"mask_threshold", 2.0}}), Error);
  EXPECT_THROW(pipeline_from_json({{"train", {{"epochs", 0}}}}), Error);
}

TEST(Config, HashTracksContent) {
  auto a = PipelineConfig::from_preset(Preset::shapenet, 1);
  auto b = a;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.train.lr *= 2.0;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Suite, DeterministicAndLabeled) {
  SuiteConfig s;
  s.train_clouds = 2;
  s.test_anomalous = 3;
  s.test_clean = 2;
  s.points = 512;
  const auto a = make_class_data(ShapeKind::torus, s, AugmentOptions{}, 3);
  const auto b = make_class_data(ShapeKind::torus, s, AugmentOptions{}, 3);
  ASSERT_EQ(a.train.size(), 2u);
  ASSERT_EQ(a.test.size(), 5u);
  for (std::size_t i = 0; i < a.test.size(); ++i) {
    EXPECT_EQ(a.test[i].cloud.points, b.test[i].cloud.points);
    const auto anomalous = std::count(a.test[i].mask.begin(), a.test[i].mask.end(), std::uint8_t{1});
    if (i < 3) EXPECT_GT(anomalous, 0);
    else EXPECT_EQ(anomalous, 0);
  }
  EXPECT_NE(a.train[0].points, a.train[1].points);
}

TEST(Ablation, VariantsVaryOneAxis) {
  const auto base = PipelineConfig::from_preset(Preset::shapenet);
  const auto vs = ablation_variants(base);
  ASSERT_EQ(vs.size(), 7u);
  for (const auto& v : vs) {
    EXPECT_NO_THROW(v.config.validate());
    if (v.axis == "feature") EXPECT_EQ(v.config.train.patch.levels, base.train.patch.levels);
    else if (v.config.train.patch.strategy != PatchStrategy::multi_scale_spheres)
      EXPECT_EQ(v.config.train.patch.levels.size(), 1u);
  }
}
