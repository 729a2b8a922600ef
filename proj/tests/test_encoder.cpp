#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "patchad/encoder.hpp"
#include "patchad/patchify.hpp"
#include "patchad/synth.hpp"

using namespace patchad;

namespace {

ParameterSet<double> make_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet<double> ps;
  add_encoder_params(ps, rng);
  // Nonzero biases so the bias path is exercised too.
  std::normal_distribution<double> g(0.0, 0.1);
  for (auto& p : ps)
    if (p.value.rows() == 1)
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = g(rng);
  return ps;
}

Eigen::VectorXd normalized(const Eigen::VectorXd& v) { return v / (v.norm() + 1e-12); }

constexpr FeatureMode kModes[] = {FeatureMode::mean_point, FeatureMode::pooling, FeatureMode::mean_feature};

}  // namespace

TEST(Encoder, TranslationInvariantAndDeterministic) {
  const auto cloud = gen_shape(ShapeKind::torus, 1024, 1);
  auto ps = make_params(2);
  const Matrix<double> z = encode_points(ps, encoder_input(cloud.points));
  EXPECT_EQ(z.rows(), 1024);
  EXPECT_EQ(z.cols(), kFeatureDim);
  EXPECT_EQ(encode_points(ps, encoder_input(cloud.points)), z);
  auto moved = cloud.points;
  for (auto& p : moved) p += Vec3(5, -3, 2);
  const Matrix<double> zt = encode_points(ps, encoder_input(moved));
  EXPECT_LT((zt - z).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Encoder, ZeroWeightsGiveBiasPattern) {
  const auto cloud = gen_shape(ShapeKind::sphere, 200, 3);
  auto ps = make_params(4);
  for (auto& p : ps)
    if (p.value.rows() > 1) p.value.setZero();
  const Matrix<double> z = encode_points(ps, encoder_input(cloud.points));
  for (Eigen::Index i = 0; i < z.rows(); ++i) ASSERT_EQ(z.row(i), ps.get("enc.b3").value.row(0));
}

TEST(Encoder, TooFewPoints) {
  std::vector<Vec3> pts(16, Vec3::Zero());
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = Vec3(static_cast<double>(i), 0.5 * i * i, 0);
  try {
    encoder_input(pts);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooFewPoints);
  }
}

TEST(PatchFeature, SingletonPatch) {
  std::mt19937_64 rng(5);
  std::vector<Vec3> pts{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  Matrix<double> f = Matrix<double>::Random(3, kFeatureDim);
  Patch p{pts[1], {1}, 1, 0};
  for (auto mode : kModes) {
    const auto out = patch_feature(p, pts, f, mode);
    EXPECT_LT((out - normalized(f.row(1).transpose())).norm(), 1e-12) << to_string(mode);
  }
}

TEST(PatchFeature, ExactHitReturnsThatPoint) {
  // Symmetric patch whose centroid is member 0.
  std::vector<Vec3> pts{{0, 0, 0}, {1, 0, 0}, {-1, 0, 0}, {0, 2, 0}, {0, -2, 0}};
  Matrix<double> f = Matrix<double>::Random(5, kFeatureDim);
  Patch p{Vec3(0.1, 0.1, 0), {0, 1, 2, 3, 4}, 1, 0};
  const auto out = patch_feature(p, pts, f, FeatureMode::mean_point);
  EXPECT_LT((out - normalized(f.row(0).transpose())).norm(), 1e-6);
}

TEST(PatchFeature, TwoPointHandEvaluation) {
  std::vector<Vec3> pts{{0, 0, 0}, {1, 0, 0}};
  Matrix<double> f(2, kFeatureDim);
  for (int c = 0; c < kFeatureDim; ++c) {
    f(0, c) = std::sin(c + 1.0);
    f(1, c) = std::cos(2.0 * c);
  }
  Patch p{Vec3(0.5, 0, 0), {0, 1}, 1, 0};
  const Eigen::VectorXd mean = (f.row(0) + f.row(1)).transpose() / 2.0;
  const Eigen::VectorXd mx = f.row(0).cwiseMax(f.row(1)).transpose();
  EXPECT_LT((patch_feature(p, pts, f, FeatureMode::mean_feature) - normalized(mean)).norm(), 1e-12);
  EXPECT_LT((patch_feature(p, pts, f, FeatureMode::pooling) - normalized(mx)).norm(), 1e-12);
  // The centroid sits midway, so both neighbours get equal inverse-distance weight.
  EXPECT_LT((patch_feature(p, pts, f, FeatureMode::mean_point) - normalized(mean)).norm(), 1e-9);
}

TEST(PatchFeature, UnitNormPermutationAndTranslation) {
  const auto cloud = gen_shape(ShapeKind::gear, 2048, 6);
  auto ps = make_params(7);
  const auto z = encode_points(ps, encoder_input(cloud.points));
  auto moved = cloud.points;
  for (auto& p : moved) p += Vec3(5, -3, 2);
  const auto zt = encode_points(ps, encoder_input(moved));
  const auto sets = patchify_multiscale(cloud, PatchConfig::shapenet());
  std::mt19937_64 rng(8);
  for (const auto& set : sets)
    for (const auto& patch : set.patches) {
      Patch shuffled = patch;
      std::shuffle(shuffled.members.begin(), shuffled.members.end(), rng);
      Patch shifted = patch;
      shifted.center += Vec3(5, -3, 2);
      for (auto mode : kModes) {
        const auto f = patch_feature(patch, cloud.points, z, mode);
        ASSERT_NEAR(f.norm(), 1.0, 1e-6);
        const auto g = patch_feature(shuffled, cloud.points, z, mode);
        if (mode == FeatureMode::mean_point) ASSERT_LT((f - g).norm(), 1e-9);
        else ASSERT_EQ(f, g);
        ASSERT_LT((patch_feature(shifted, moved, zt, mode) - f).cwiseAbs().maxCoeff(), 1e-6);
      }
    }
}

TEST(PatchFeature, EmptyPatchRejected) {
  std::vector<Vec3> pts{{0, 0, 0}};
  Matrix<double> f = Matrix<double>::Zero(1, kFeatureDim);
  for (auto mode : kModes) EXPECT_THROW(patch_feature(Patch{}, pts, f, mode), Error);
}

TEST(PatchFeature, GradientsThroughEncoder) {
  auto cloud = gen_shape(ShapeKind::box, 160, 9);
  const auto input = encoder_input(cloud.points);
  PatchConfig cfg{PatchStrategy::multi_scale_spheres, {{6, 24}}, 1};
  const auto set = patchify_multiscale(cloud, cfg).front();
  auto ps = make_params(10);
  std::mt19937_64 rng(11);
  const Matrix<double> w = Matrix<double>::Random(static_cast<Eigen::Index>(set.size()), kFeatureDim);
  for (auto mode : kModes) {
    const double err = grad_check(ps, [&](Tape<double>& t) {
      Var z = encode_points(t, ps, input, true);
      Var f = patch_features(t, z, set, cloud.points, mode);
      return t.sum(t.mul(f, t.constant(w)));
    });
    EXPECT_LE(err, 1e-4) << to_string(mode);
  }
}
