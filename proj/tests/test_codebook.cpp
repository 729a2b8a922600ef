#include <gtest/gtest.h>

#include <random>

#include "patchad/codebook.hpp"
#include "patchad/synth.hpp"

using namespace patchad;

namespace {

using Vec32 = Eigen::Matrix<double, kFeatureDim, 1>;

Vec32 unit(int axis) { return Vec32::Unit(axis); }

std::span<const double> as_span(const Vec32& v) { return {v.data(), static_cast<std::size_t>(kFeatureDim)}; }

SpatialKey key(std::uint64_t k, int level = 1) { return {k, level}; }

// Step-by-step replay of the merge rule with float storage and double arithmetic.
struct ReferenceCodebook {
  struct Entry {
    float c[kFeatureDim];
    double n;
  };
  double tau;
  std::vector<Entry> entries;
  double ledger = 0.0;
  std::vector<std::size_t> decisions;

  void insert(const Vec32& raw) {
    double t[kFeatureDim], norm = 0.0;
    for (int i = 0; i < kFeatureDim; ++i) norm += raw[i] * raw[i];
    norm = std::sqrt(norm);
    for (int i = 0; i < kFeatureDim; ++i) t[i] = raw[i] / norm;
    for (std::size_t j = 0; j < entries.size(); ++j) {
      double s = 0.0;
      for (int i = 0; i < kFeatureDim; ++i) s += static_cast<double>(entries[j].c[i]) * t[i];
      if (s < tau) continue;
      double m[kFeatureDim], mn = 0.0;
      for (int i = 0; i < kFeatureDim; ++i) {
        m[i] = (entries[j].n * entries[j].c[i] + s * t[i]) / (entries[j].n + s);
        mn += m[i] * m[i];
      }
      mn = std::sqrt(mn);
      for (int i = 0; i < kFeatureDim; ++i) entries[j].c[i] = static_cast<float>(m[i] / mn);
      entries[j].n += s;
      ledger += s;
      decisions.push_back(j);
      return;
    }
    Entry e{};
    for (int i = 0; i < kFeatureDim; ++i) e.c[i] = static_cast<float>(t[i]);
    e.n = 1.0;
    entries.push_back(e);
    ledger += 1.0;
    decisions.push_back(entries.size() - 1);
  }
};

// Clustered features: a handful of directions plus noise, so both merges and new entries occur.
std::vector<Vec32> clustered(std::size_t n, std::size_t clusters, double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Vec32> centers(clusters);
  for (auto& c : centers) {
    for (int i = 0; i < kFeatureDim; ++i) c[i] = g(rng);
    c.normalize();
  }
  std::vector<Vec32> out(n);
  for (auto& v : out) {
    v = centers[rng() % clusters];
    for (int i = 0; i < kFeatureDim; ++i) v[i] += noise * g(rng);
  }
  return out;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::IoError;
}

}  // namespace

TEST(Update, SelfMergeIsFixedPoint) {
  Codebook cb;
  Vec32 f = Vec32::LinSpaced(1.0, 2.0);
  cb.update(1, as_span(f), key(1));
  const Feature before = cb.level(1)[0].feature;
  cb.update(1, as_span(f), key(2));
  ASSERT_EQ(cb.size(1), 1u);
  EXPECT_LT((cb.level(1)[0].feature - before).norm(), 1e-7);
  EXPECT_NEAR(cb.level(1)[0].weight, 2.0, 1e-6);
  EXPECT_EQ(cb.level(1)[0].keys, (std::set<std::uint64_t>{1, 2}));
}

TEST(Update, OrthogonalVectorsStaySeparate) {
  Codebook cb(0.85);
  cb.update(1, as_span(unit(0)), key(1));
  cb.update(1, as_span(unit(1)), key(2));
  EXPECT_EQ(cb.size(1), 2u);
  EXPECT_EQ(cb.size(2), 0u);
}

TEST(Update, MergeFormulaAtCosineNineTenths) {
  Codebook cb(0.85);
  cb.update(2, as_span(unit(0)), key(1));
  const double s = 0.9;
  Vec32 t = s * unit(0) + std::sqrt(1 - s * s) * unit(1);
  cb.update(2, as_span(t), key(2));
  ASSERT_EQ(cb.size(2), 1u);
  Vec32 expect = (unit(0) + s * t) / 1.9;
  expect.normalize();
  const auto& e = cb.level(2)[0];
  EXPECT_NEAR(e.weight, 1.9, 1e-7);
  EXPECT_LT((e.feature.cast<double>() - expect).norm(), 1e-6);
  EXPECT_NEAR(e.feature.cast<double>().norm(), 1.0, 1e-6);
}

TEST(Update, Errors) {
  Codebook cb;
  Vec32 z = Vec32::Zero();
  EXPECT_EQ(code_of([&] { cb.update(1, as_span(z), key(0)); }), ErrorCode::NonFinite);
  EXPECT_EQ(code_of([&] { cb.update(4, as_span(unit(0)), key(0)); }), ErrorCode::BadConfig);
  EXPECT_EQ(code_of([] { Codebook bad(0.0); }), ErrorCode::BadConfig);
  EXPECT_EQ(code_of([] { Codebook bad(1.5); }), ErrorCode::BadConfig);
}

TEST(Update, MatchesReferenceOnTenThousandInserts) {
  const auto feats = clustered(10000, 40, 0.12, 1);
  Codebook cb(0.85);
  ReferenceCodebook ref{0.85, {}, 0.0, {}};
  for (std::size_t i = 0; i < feats.size(); ++i) {
    const auto got = cb.update(1, as_span(feats[i]), key(i));
    ref.insert(feats[i]);
    ASSERT_EQ(got, ref.decisions.back()) << "insert " << i;
  }
  ASSERT_EQ(cb.size(1), ref.entries.size());
  EXPECT_LT(cb.size(1), feats.size());
  EXPECT_GT(cb.size(1), 40u);
  double total = 0.0;
  for (std::size_t j = 0; j < ref.entries.size(); ++j) {
    const auto& e = cb.level(1)[j];
    EXPECT_NEAR(e.weight, ref.entries[j].n, 1e-9);
    for (int i = 0; i < kFeatureDim; ++i) ASSERT_EQ(e.feature[i], ref.entries[j].c[i]);
    EXPECT_NEAR(e.feature.cast<double>().norm(), 1.0, 1e-6);
    EXPECT_GE(e.weight, 1.0);
    EXPECT_FALSE(e.keys.empty());
    total += e.weight;
  }
  // Weight ledger: one per new entry plus the similarity of each merge.
  EXPECT_NEAR(total, ref.ledger, 1e-9 * ref.ledger);
}

TEST(Update, CountEqualsInsertsWhenAllDistinct) {
  const auto feats = clustered(300, 1, 10.0, 2);
  Codebook cb;
  for (std::size_t i = 0; i < feats.size(); ++i) cb.update(3, as_span(feats[i]), key(i, 3));
  // Noise dominates the shared direction, so pairwise cosines stay far below 0.85.
  EXPECT_EQ(cb.size(3), feats.size());
}

TEST(Retrieve, Examples) {
  Codebook cb;
  EXPECT_EQ(code_of([&] { cb.retrieve(1, as_span(unit(0))); }), ErrorCode::EmptyLevel);
  cb.update(1, as_span(unit(3)), key(1));
  auto r = cb.retrieve(1, as_span(unit(3)));
  EXPECT_EQ(r.index, 0u);
  EXPECT_DOUBLE_EQ(r.similarity, 1.0);
  Vec32 neg = -unit(3);
  r = cb.retrieve(1, as_span(neg));
  EXPECT_EQ(r.index, 0u);
  EXPECT_DOUBLE_EQ(r.similarity, -1.0);
}

TEST(Retrieve, MatchesExhaustiveScan) {
  const auto feats = clustered(3000, 600, 0.3, 3);
  Codebook cb;
  for (std::size_t i = 0; i < feats.size(); ++i) cb.update(1 + static_cast<int>(i % 3), as_span(feats[i]), key(i));
  const auto queries = clustered(200, 50, 0.5, 4);
  for (int l = 1; l <= 3; ++l) {
    ASSERT_LE(cb.size(l), 1000u);
    ASSERT_GT(cb.size(l), 5u);
    Matrix<double> qm(static_cast<Eigen::Index>(queries.size()), kFeatureDim);
    for (std::size_t i = 0; i < queries.size(); ++i) qm.row(static_cast<Eigen::Index>(i)) = queries[i].normalized().transpose();
    const auto batch = cb.retrieve_all(l, qm);
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const Vec32 q = queries[i].normalized();
      std::size_t best = 0;
      double best_s = -2.0;
      for (std::size_t j = 0; j < cb.size(l); ++j) {
        const double s = cb.level(l)[j].feature.cast<double>().dot(q);
        if (s > best_s) {
          best_s = s;
          best = j;
        }
      }
      const auto r = cb.retrieve(l, as_span(q));
      ASSERT_EQ(r.index, best);
      ASSERT_NEAR(r.similarity, best_s, 1e-12);
      ASSERT_EQ(batch[i].index, best);
    }
  }
}

TEST(Retrieve, TiesGoToLowestIndex) {
  Codebook cb(1.0);
  Vec32 a = unit(0), b = unit(1);
  cb.update(1, as_span(a), key(1));
  cb.update(1, as_span(b), key(2));
  Vec32 q = (a + b).normalized();
  EXPECT_EQ(cb.retrieve(1, as_span(q)).index, 0u);
}

TEST(ScaleSimilarity, Examples) {
  Matrix<double> p = Matrix<double>::Identity(4, kFeatureDim);
  EXPECT_DOUBLE_EQ(scale_similarity(p, p), 4.0);
  Matrix<double> o = Matrix<double>::Zero(4, kFeatureDim);
  for (int j = 0; j < 4; ++j) o(j, 10 + j) = 1.0;
  EXPECT_DOUBLE_EQ(scale_similarity(p, o), 0.0);
  Matrix<double> q = Matrix<double>::Zero(3, kFeatureDim), t = Matrix<double>::Zero(5, kFeatureDim);
  const double cosines[] = {1.0, 0.5, -0.2};
  for (int j = 0; j < 3; ++j) {
    q(j, j) = 1.0;
    t(j, j) = cosines[j];
    t(j, 20) = std::sqrt(1 - cosines[j] * cosines[j]);
  }
  EXPECT_NEAR(scale_similarity(q, t), 1.3, 1e-15);
  EXPECT_EQ(code_of([&] { scale_similarity(Matrix<double>(0, kFeatureDim), t); }), ErrorCode::EmptyInput);
}

TEST(SelectScale, Examples) {
  const double one[] = {0.3};
  const std::size_t one_count[] = {5};
  EXPECT_EQ(select_scale(one, one_count), 1);
  const double a[] = {0.9, 0.7, 0.5};
  const std::size_t ones[] = {1, 1, 1};
  EXPECT_EQ(select_scale(a, ones), 1);
  const double eq[] = {192 * 0.5, 64 * 0.5, 32 * 0.5};
  const std::size_t counts[] = {192, 64, 32};
  EXPECT_EQ(select_scale(eq, counts), 1);
  // Raw sums favour the level with more patches; normalization removes that bias.
  const double raw[] = {192 * 0.5, 64 * 0.9, 32 * 0.6};
  EXPECT_EQ(select_scale(raw, counts), 2);
  EXPECT_EQ(select_scale(raw, counts, false), 1);
  EXPECT_EQ(code_of([] { select_scale({}, {}); }), ErrorCode::EmptyInput);
}

TEST(Serialize, RoundTripEmptyAndCorrupt) {
  const auto feats = clustered(500, 30, 0.15, 5);
  Codebook cb(0.8);
  for (std::size_t i = 0; i < feats.size(); ++i) cb.update(1 + static_cast<int>(i % 3), as_span(feats[i]), key(i * 7919));
  const auto bytes = cb.serialize();
  EXPECT_EQ(bytes.substr(0, 4), "PBCB");
  const auto back = Codebook::deserialize(bytes);
  EXPECT_TRUE(back == cb);
  EXPECT_EQ(back.serialize(), bytes);

  const auto empty = Codebook().serialize();
  const auto e = Codebook::deserialize(empty);
  EXPECT_EQ(e.total_size(), 0u);
  EXPECT_EQ(empty.size(), 4u + 4 + 8 + 3 * 8 + 8);

  EXPECT_EQ(code_of([&] { Codebook::deserialize(bytes.substr(0, bytes.size() - 5)); }), ErrorCode::CorruptFile);
  std::string flipped = bytes;
  flipped[40] ^= 0x10;
  EXPECT_EQ(code_of([&] { Codebook::deserialize(flipped); }), ErrorCode::CorruptFile);
  std::string v2 = bytes;
  v2[4] = 9;
  EXPECT_EQ(code_of([&] { Codebook::deserialize(v2); }), ErrorCode::VersionMismatch);

  const auto dir = std::filesystem::path(PATCHAD_TEST_TMP) / "codebook";
  std::filesystem::create_directories(dir);
  save_codebook(dir / "cb.bin", cb);
  EXPECT_TRUE(load_codebook(dir / "cb.bin") == cb);
}

TEST(Crc, KnownCheckValue) {
  // CRC-64/XZ check value for "123456789".
  EXPECT_EQ(crc64("123456789"), 0x995DC9BBDF1939FAULL);
}

namespace {

ParameterSet<double> encoder_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet<double> ps;
  add_encoder_params(ps, rng);
  return ps;
}

}  // namespace

TEST(Build, MinimalOneEntryPerLevel) {
  auto ps = encoder_params(1);
  const auto cloud = gen_shape(ShapeKind::sphere, 512, 2);
  PatchConfig cfg{PatchStrategy::multi_scale_spheres, {{1, 16}, {1, 32}, {1, 64}}, 0};
  const PreparedCloud prepared[] = {prepare_cloud(cloud.points, cfg)};
  const auto cb = build_codebook<double>(prepared, ps, FeatureMode::mean_point);
  for (int l = 1; l <= 3; ++l) EXPECT_EQ(cb.size(l), 1u);
  EXPECT_EQ(code_of([&] { build_codebook<double>({}, ps, FeatureMode::mean_point); }), ErrorCode::EmptyInput);
}

TEST(Build, SymmetricShapeCompresses) {
  auto ps = encoder_params(3);
  const auto cloud = gen_shape(ShapeKind::box, 2048, 4);
  const auto cfg = PatchConfig::shapenet();
  const PreparedCloud prepared[] = {prepare_cloud(cloud.points, cfg)};
  const auto cb = build_codebook<double>(prepared, ps, FeatureMode::mean_point);
  std::size_t patches = 0;
  for (const auto& s : prepared[0].patches) patches += s.size();
  EXPECT_LT(cb.total_size(), patches);
  const auto again = build_codebook<double>(prepared, ps, FeatureMode::mean_point);
  EXPECT_EQ(again.serialize(), cb.serialize());
}

TEST(Build, TranslationInvariantFeatures) {
  auto ps = encoder_params(5);
  const auto cloud = gen_shape(ShapeKind::torus, 2048, 6);
  auto moved = cloud.points;
  for (auto& p : moved) p += Vec3(5, -3, 2);
  const auto cfg = PatchConfig::shapenet();
  const PreparedCloud a[] = {prepare_cloud(cloud.points, cfg)};
  const PreparedCloud b[] = {prepare_cloud(moved, cfg)};
  const auto ca = build_codebook<double>(a, ps, FeatureMode::mean_point);
  const auto cb = build_codebook<double>(b, ps, FeatureMode::mean_point);
  bool keys_differ = false;
  for (int l = 1; l <= 3; ++l) {
    ASSERT_EQ(ca.size(l), cb.size(l));
    for (std::size_t j = 0; j < ca.size(l); ++j) {
      EXPECT_LT((ca.level(l)[j].feature - cb.level(l)[j].feature).cwiseAbs().maxCoeff(), 1e-6);
      EXPECT_NEAR(ca.level(l)[j].weight, cb.level(l)[j].weight, 1e-6);
      keys_differ = keys_differ || ca.level(l)[j].keys != cb.level(l)[j].keys;
    }
  }
  EXPECT_TRUE(keys_differ);
}
