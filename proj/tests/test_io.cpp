#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "patchad/io.hpp"

using namespace patchad;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const std::string& name) {
  fs::path dir = fs::path(PATCHAD_TEST_TMP) / "io";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
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

TEST(Load, XyzThreePoints) {
  const auto p = tmp("three.xyz");
  write_text(p, "0 0 0\n1 0 0\n0 1 0\n");
  const auto c = load_pointcloud(p);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.points[1], Vec3(1, 0, 0));
  EXPECT_FALSE(c.has_normals());
}

TEST(Load, XyzWithNormalsAndComments) {
  const auto p = tmp("normals.txt");
  write_text(p, "# header\n0 0 0 0 0 2\n\n1 1 1 0 3 0\n");
  const auto c = load_pointcloud(p);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_NEAR((c.normals[0] - Vec3(0, 0, 1)).norm(), 0.0, 1e-15);
  EXPECT_NEAR((c.normals[1] - Vec3(0, 1, 0)).norm(), 0.0, 1e-15);
}

TEST(Load, EmptyAndMalformed) {
  const auto e = tmp("empty.xyz");
  write_text(e, "");
  EXPECT_EQ(code_of([&] { load_pointcloud(e); }), ErrorCode::EmptyCloud);
  const auto bad = tmp("bad.xyz");
  write_text(bad, "0 0 zero\n");
  EXPECT_EQ(code_of([&] { load_pointcloud(bad); }), ErrorCode::MalformedFile);
  const auto ply = tmp("bad.ply");
  write_text(ply, "ply\nformat binary_little_endian 1.0\nelement vertex 10\nproperty float x\n"
                  "property float y\nproperty float z\nend_header\nabc");
  EXPECT_EQ(code_of([&] { load_pointcloud(ply); }), ErrorCode::MalformedFile);
  EXPECT_EQ(code_of([&] { load_pointcloud(tmp("missing.xyz")); }), ErrorCode::IoError);
}

TEST(Load, ObjCubeSurfaceSampling) {
  const auto p = tmp("cube.obj");
  write_text(p,
             "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nv 1 0 1\nv 1 1 1\nv 0 1 1\n"
             "f 1 2 3 4\nf 5 8 7 6\nf 1 5 6 2\nf 2 6 7 3\nf 3 7 8 4\nf 4 8 5 1\n");
  EXPECT_EQ(load_pointcloud(p).size(), 8u);
  LoadOptions opts;
  opts.sample_surface = 10000;
  opts.seed = 4;
  const auto c = load_pointcloud(p, opts);
  ASSERT_EQ(c.size(), 10000u);
  int per_face[6] = {};
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& q = c.points[i];
    ASSERT_TRUE((q.array() >= -1e-12).all() && (q.array() <= 1 + 1e-12).all());
    // Every sample lies on some face of the cube.
    const double face_dist = std::min({q.x(), 1 - q.x(), q.y(), 1 - q.y(), q.z(), 1 - q.z()});
    ASSERT_LT(face_dist, 1e-12);
    const int axis = c.normals[i].cwiseAbs().maxCoeff() == std::abs(c.normals[i].x()) ? 0
                     : std::abs(c.normals[i].y()) > std::abs(c.normals[i].z())  ? 1
                                                                                 : 2;
    ++per_face[axis * 2 + (c.normals[i][axis] > 0)];
  }
  // Equal-area faces: each gets about 1/6 of the samples.
  for (int f : per_face) EXPECT_NEAR(f, 10000.0 / 6.0, 200.0);
}

TEST(Ply, RoundTripBinaryAsciiDouble) {
  PointCloud c;
  c.points = {{0.1, -2.5, 3.0}, {1e-3, 4.0, -0.75}};
  c.normals = {{0, 0, 1}, {0.6, 0.8, 0}};
  for (bool binary : {true, false})
    for (bool dbl : {true, false}) {
      const auto p = tmp(std::string("rt_") + (binary ? "b" : "a") + (dbl ? "d" : "f") + ".ply");
      PlyWriteOptions opts;
      opts.binary = binary;
      opts.double_precision = dbl;
      write_ply(p, c, opts);
      const auto r = load_pointcloud(p);
      ASSERT_EQ(r.size(), 2u);
      ASSERT_TRUE(r.has_normals());
      for (std::size_t i = 0; i < 2; ++i) {
        if (dbl) EXPECT_EQ(r.points[i], c.points[i]);
        else EXPECT_LT((r.points[i] - c.points[i]).norm(), 1e-6);
        EXPECT_LT((r.normals[i] - c.normals[i]).norm(), 1e-6);
      }
    }
}

TEST(Ply, ColorsAndMixedTypes) {
  const auto p = tmp("mixed.ply");
  write_text(p,
             "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty double x\nproperty int y\n"
             "property float z\nproperty uchar red\nelement face 0\nproperty list uchar int vertex_indices\n"
             "end_header\n1.5 2 3 255\n-1 0 0.5 0\n");
  const auto c = load_pointcloud(p);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.points[0], Vec3(1.5, 2, 3));
  EXPECT_EQ(c.points[1], Vec3(-1, 0, 0.5));
}
