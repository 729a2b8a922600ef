#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "patchad/error.hpp"

namespace patchad {

using Vec3 = Eigen::Vector3d;
using Index = std::uint32_t;

/// N x 3 coordinates with optional per-point unit normals.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  bool has_normals() const noexcept { return !normals.empty(); }

  /// Throws NonFinite / CountMismatch if the invariants do not hold.
  void validate() const {
    for (const auto& p : points)
      if (!p.allFinite()) fail(ErrorCode::NonFinite, "point cloud holds a non-finite coordinate");
    if (normals.empty()) return;
    if (normals.size() != points.size())
      fail(ErrorCode::CountMismatch, "normal count differs from point count");
    for (const auto& n : normals)
      if (!n.allFinite() || std::abs(n.norm() - 1.0) > 1e-6)
        fail(ErrorCode::NonFinite, "normal is not a finite unit vector");
  }
};

inline double sq_dist(const Vec3& a, const Vec3& b) noexcept {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

inline Vec3 centroid(std::span<const Vec3> pts) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : pts) c += p;
  return pts.empty() ? c : Vec3(c / static_cast<double>(pts.size()));
}

// ---------------------------------------------------------------------------
// Canonical frame

/// Maps world coordinates into the canonical unit ball: x' = (x - translation) / scale.
struct CanonicalTransform {
  Vec3 translation = Vec3::Zero();
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const { return (p - translation) / scale; }
  Vec3 invert(const Vec3& p) const { return p * scale + translation; }
  Vec3 apply_vector(const Vec3& v) const { return v / scale; }
};

inline PointCloud apply_transform(const PointCloud& cloud, const CanonicalTransform& t) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(t.apply(p));
  out.normals = cloud.normals;
  return out;
}

inline PointCloud invert_transform(const PointCloud& cloud, const CanonicalTransform& t) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(t.invert(p));
  out.normals = cloud.normals;
  return out;
}

/// Centers the cloud on its centroid and scales it so the farthest point sits on the unit sphere.
inline std::pair<PointCloud, CanonicalTransform> normalize_to_canonical(const PointCloud& cloud) {
  if (cloud.empty()) fail(ErrorCode::EmptyCloud, "cannot normalize an empty cloud");
  CanonicalTransform t;
  t.translation = centroid(cloud.points);
  double max_norm = 0.0;
  for (const auto& p : cloud.points) max_norm = std::max(max_norm, (p - t.translation).norm());
  if (!(max_norm > 0.0)) fail(ErrorCode::DegenerateCloud, "all points are identical");
  t.scale = max_norm;
  auto out = apply_transform(cloud, t);
  // Second pass absorbs the rounding left by the first so the centroid lands on the origin.
  const Vec3 residual = centroid(out.points);
  for (auto& p : out.points) p -= residual;
  t.translation += residual * t.scale;
  return {std::move(out), t};
}

/// Indices of one representative per occupied voxel (lowest index wins). Voxels have edge
/// 2 / resolution, i.e. `resolution` cells across the canonical unit ball, and are anchored at
/// the cloud's bounding-box corner so the result does not depend on where the cloud sits.
inline std::vector<Index> voxel_dedup(std::span<const Vec3> pts, int resolution = 256) {
  if (resolution <= 0) fail(ErrorCode::BadConfig, "voxel resolution must be positive");
  if (pts.empty()) return {};
  Vec3 lo = pts[0];
  for (const auto& p : pts) lo = lo.cwiseMin(p);
  const double cell = 2.0 / resolution;
  std::unordered_map<std::uint64_t, Index> seen;
  seen.reserve(pts.size() * 2);
  std::vector<Index> keep;
  keep.reserve(pts.size());
  for (Index i = 0; i < pts.size(); ++i) {
    std::uint64_t key = 0;
    for (int a = 0; a < 3; ++a) {
      const auto q = static_cast<std::uint64_t>(std::floor((pts[i][a] - lo[a]) / cell));
      key = key * 0x100000001b3ULL + q;
    }
    if (seen.emplace(key, i).second) keep.push_back(i);
  }
  return keep;
}

// ---------------------------------------------------------------------------
// Sampling and neighborhoods

/// Deterministic start index for a seeded sampler.
inline Index seeded_start(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  return static_cast<Index>(rng() % n);
}

/// Farthest point sampling over `candidates` (indices into pts); ties go to the lowest index.
inline std::vector<Index> farthest_point_sampling(std::span<const Vec3> pts,
                                                  std::span<const Index> candidates,
                                                  std::size_t k, std::uint64_t seed) {
  const std::size_t n = candidates.size();
  if (k < 1 || k > n) fail(ErrorCode::BadK, "FPS needs 1 <= k <= N");
  std::vector<Index> selected;
  selected.reserve(k);
  // Coordinates in struct-of-arrays form so the distance update and the max vectorize.
  Eigen::ArrayXd xs(n), ys(n), zs(n);
  for (std::size_t j = 0; j < n; ++j) {
    const Vec3& p = pts[candidates[j]];
    xs[static_cast<Eigen::Index>(j)] = p.x();
    ys[static_cast<Eigen::Index>(j)] = p.y();
    zs[static_cast<Eigen::Index>(j)] = p.z();
  }
  Eigen::ArrayXd min_d = Eigen::ArrayXd::Constant(static_cast<Eigen::Index>(n), std::numeric_limits<double>::infinity());
  auto cur = static_cast<Eigen::Index>(seeded_start(seed, n));
  for (std::size_t it = 0; it < k; ++it) {
    selected.push_back(candidates[static_cast<std::size_t>(cur)]);
    min_d[cur] = -1.0;  // selected points stay below every distance
    const double cx = xs[cur], cy = ys[cur], cz = zs[cur];
    min_d = min_d.min((xs - cx).square() + (ys - cy).square() + (zs - cz).square());
    const double far = min_d.maxCoeff();
    cur = static_cast<Eigen::Index>(std::find(min_d.data(), min_d.data() + n, far) - min_d.data());
  }
  return selected;
}

inline std::vector<Index> farthest_point_sampling(std::span<const Vec3> pts, std::size_t k,
                                                  std::uint64_t seed) {
  std::vector<Index> all(pts.size());
  std::iota(all.begin(), all.end(), Index{0});
  return farthest_point_sampling(pts, all, k, seed);
}

inline std::vector<Index> farthest_point_sampling(const PointCloud& cloud, std::size_t k,
                                                  std::uint64_t seed) {
  return farthest_point_sampling(std::span<const Vec3>(cloud.points), k, seed);
}

/// Brute-force k nearest neighbours, ascending by distance, ties to the lower index.
inline std::vector<Index> knn(std::span<const Vec3> pts, const Vec3& query, std::size_t k) {
  if (k < 1 || k > pts.size()) fail(ErrorCode::BadK, "knn needs 1 <= k <= N");
  std::vector<std::pair<double, Index>> d(pts.size());
  for (Index i = 0; i < pts.size(); ++i) d[i] = {sq_dist(pts[i], query), i};
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  std::vector<Index> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = d[i].second;
  return out;
}

inline std::vector<Index> knn(const PointCloud& cloud, const Vec3& query, std::size_t k) {
  return knn(std::span<const Vec3>(cloud.points), query, k);
}

/// Uniform-grid accelerator returning exactly the brute-force `knn` answer.
/// Reusable buffers for repeated kNN queries.
struct KnnScratch {
  std::vector<double> dist, select;
  std::vector<Index> idx;
  std::vector<std::pair<double, Index>> best;
};

class KnnGrid {
 public:
  explicit KnnGrid(std::span<const Vec3> pts, double points_per_cell = 6.0) : pts_(pts) {
    if (pts.empty()) fail(ErrorCode::EmptyCloud, "cannot index an empty cloud");
    lo_ = pts[0];
    Vec3 hi = pts[0];
    for (const auto& p : pts) {
      lo_ = lo_.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    const Vec3 ext = (hi - lo_).cwiseMax(Vec3::Constant(1e-9));
    // Surface-like clouds: size cells from the area of the bounding box rather than its volume.
    const double area = 2.0 * (ext.x() * ext.y() + ext.y() * ext.z() + ext.x() * ext.z());
    cell_ = std::sqrt(area * points_per_cell / static_cast<double>(pts.size()));
    cell_ = std::max(cell_, ext.maxCoeff() / 128.0);
    for (int a = 0; a < 3; ++a)
      dims_[a] = std::max(1, static_cast<int>(std::floor(ext[a] / cell_)) + 1);
    const std::size_t n_cells = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
    start_.assign(n_cells + 1, 0);
    std::vector<std::size_t> cell_of(pts.size());
    for (Index i = 0; i < pts.size(); ++i) {
      cell_of[i] = linear(cell_coords(pts[i]));
      ++start_[cell_of[i] + 1];
    }
    for (std::size_t c = 0; c < n_cells; ++c) start_[c + 1] += start_[c];
    items_.resize(pts.size());
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (Index i = 0; i < pts.size(); ++i) items_[fill[cell_of[i]]++] = i;
    sorted_.resize(pts.size());
    for (std::size_t t = 0; t < items_.size(); ++t) sorted_[t] = pts[items_[t]];
  }

  std::size_t size() const noexcept { return pts_.size(); }

  std::vector<Index> query(const Vec3& q, std::size_t k) const {
    std::vector<Index> out(k);
    KnnScratch scratch;
    query_into(q, k, out.data(), scratch);
    return out;
  }

  /// Writes the k nearest indices of q, nearest first, into out; scratch is reused across calls.
  void query_into(const Vec3& q, std::size_t k, Index* out, KnnScratch& scratch) const {
    if (k < 1 || k > pts_.size()) fail(ErrorCode::BadK, "knn needs 1 <= k <= N");
    // Distances of whole shells are gathered first; the k-th smallest is final once it lies inside the block.
    if (scratch.dist.size() < pts_.size()) {
      scratch.dist.resize(pts_.size());
      scratch.select.resize(pts_.size());
      scratch.idx.resize(pts_.size());
    }
    double* dist = scratch.dist.data();
    Index* idx = scratch.idx.data();
    std::size_t m = 0;
    const auto c = cell_coords(q);
    const int max_shell = std::max({dims_[0], dims_[1], dims_[2]});
    double kth = 0.0;
    for (int s = 0; s <= max_shell; ++s) {
      for_shell(c, s, [&](std::size_t cell) {
        for (std::size_t t = start_[cell], e = start_[cell + 1]; t < e; ++t, ++m) {
          dist[m] = sq_dist(sorted_[t], q);
          idx[m] = items_[t];
        }
      });
      if (m >= k) {
        double* sel = scratch.select.data();
        std::copy(dist, dist + m, sel);
        std::nth_element(sel, sel + (k - 1), sel + m);
        kth = sel[k - 1];
        const double bound = shell_bound(q, c, s);
        if (kth < bound * bound) break;
      }
    }
    auto& best = scratch.best;
    best.clear();
    for (std::size_t t = 0; t < m; ++t)
      if (dist[t] <= kth) best.emplace_back(dist[t], idx[t]);
    std::sort(best.begin(), best.end());
    for (std::size_t i = 0; i < k; ++i) out[i] = best[i].second;
  }

  /// Appends (squared distance, index) for every point within squared radius r2 of q, unordered.
  void radius_into(const Vec3& q, double r2, std::vector<std::pair<double, Index>>& out) const {
    const double r = std::sqrt(r2);
    std::array<int, 3> a{}, b{};
    for (int ax = 0; ax < 3; ++ax) {
      a[ax] = std::clamp(static_cast<int>(std::floor((q[ax] - r - lo_[ax]) / cell_)), 0, dims_[ax] - 1);
      b[ax] = std::clamp(static_cast<int>(std::floor((q[ax] + r - lo_[ax]) / cell_)), 0, dims_[ax] - 1);
    }
    for (int x = a[0]; x <= b[0]; ++x)
      for (int y = a[1]; y <= b[1]; ++y)
        for (int z = a[2]; z <= b[2]; ++z) {
          const std::size_t cell = linear({x, y, z});
          for (std::size_t t = start_[cell]; t < start_[cell + 1]; ++t) {
            const double d = sq_dist(sorted_[t], q);
            if (d <= r2) out.emplace_back(d, items_[t]);
          }
        }
  }

 private:
  std::array<int, 3> cell_coords(const Vec3& p) const {
    std::array<int, 3> c{};
    for (int a = 0; a < 3; ++a)
      c[a] = std::clamp(static_cast<int>(std::floor((p[a] - lo_[a]) / cell_)), 0, dims_[a] - 1);
    return c;
  }
  std::size_t linear(const std::array<int, 3>& c) const {
    return (static_cast<std::size_t>(c[0]) * dims_[1] + c[1]) * dims_[2] + c[2];
  }

  // Lower bound on the distance from q to any point outside the (2s+1)^3 block around c.
  double shell_bound(const Vec3& q, const std::array<int, 3>& c, int s) const {
    double bound = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (c[a] - s > 0) bound = std::min(bound, q[a] - (lo_[a] + (c[a] - s) * cell_));
      if (c[a] + s < dims_[a] - 1) bound = std::min(bound, lo_[a] + (c[a] + s + 1) * cell_ - q[a]);
    }
    return std::max(bound, 0.0);
  }

  template <typename F>
  void for_shell(const std::array<int, 3>& c, int s, F&& visit) const {
    for (int x = c[0] - s; x <= c[0] + s; ++x) {
      if (x < 0 || x >= dims_[0]) continue;
      for (int y = c[1] - s; y <= c[1] + s; ++y) {
        if (y < 0 || y >= dims_[1]) continue;
        const bool edge_xy = (x == c[0] - s || x == c[0] + s || y == c[1] - s || y == c[1] + s);
        for (int z = c[2] - s; z <= c[2] + s; ++z) {
          if (z < 0 || z >= dims_[2]) continue;
          if (!edge_xy && z != c[2] - s && z != c[2] + s) continue;
          visit(linear({x, y, z}));
        }
      }
    }
  }

  std::span<const Vec3> pts_;
  Vec3 lo_;
  double cell_ = 1.0;
  std::array<int, 3> dims_{1, 1, 1};
  std::vector<std::size_t> start_;
  std::vector<Index> items_;
  std::vector<Vec3> sorted_;  // points in cell order
};

/// k nearest neighbours (self included) of every point, row-major N x k.
inline std::vector<Index> knn_all(std::span<const Vec3> pts, std::size_t k) {
  KnnGrid grid(pts);
  std::vector<Index> out(pts.size() * k);
  KnnScratch scratch;
  for (std::size_t i = 0; i < pts.size(); ++i) grid.query_into(pts[i], k, out.data() + i * k, scratch);
  return out;
}

// ---------------------------------------------------------------------------
// Local PCA

/// Per-point neighbourhood statistics shared by normal estimation and the encoder.
struct LocalGeometry {
  std::vector<Vec3> normals;          // outward-oriented unit normals
  std::vector<Vec3> eigenvalues;      // ascending covariance eigenvalues
  std::vector<Vec3> local_centroids;  // mean of the k-neighbourhood
  std::vector<std::uint8_t> degenerate;
  std::size_t k = 0;
};

inline LocalGeometry local_geometry(std::span<const Vec3> pts, std::size_t k) {
  if (k < 3 || pts.size() <= k) fail(ErrorCode::BadK, "local PCA needs N > k >= 3");
  const Vec3 center = centroid(pts);
  const auto nbrs = knn_all(pts, k);
  LocalGeometry g;
  g.k = k;
  g.normals.resize(pts.size());
  g.eigenvalues.resize(pts.size());
  g.local_centroids.resize(pts.size());
  g.degenerate.assign(pts.size(), 0);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Index* nb = nbrs.data() + i * k;
    Vec3 mean = Vec3::Zero();
    for (std::size_t j = 0; j < k; ++j) mean += pts[nb[j]];
    mean /= static_cast<double>(k);
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (std::size_t j = 0; j < k; ++j) {
      const Vec3 d = pts[nb[j]] - mean;
      cov += d * d.transpose();
    }
    cov /= static_cast<double>(k);
    solver.compute(cov);
    const Vec3 ev = solver.eigenvalues().cwiseMax(0.0);
    g.eigenvalues[i] = ev;
    g.local_centroids[i] = mean;
    const Vec3 radial = pts[i] - center;
    Vec3 n;
    if (ev[1] <= 1e-12 * std::max(ev[2], 1e-300)) {
      // Rank < 2: the neighbourhood does not span a plane.
      g.degenerate[i] = 1;
      n = radial.norm() > 0.0 ? Vec3(radial.normalized()) : Vec3::UnitZ();
    } else {
      n = solver.eigenvectors().col(0).normalized();
      if (n.dot(radial) < 0.0) n = -n;
    }
    g.normals[i] = n;
  }
  return g;
}

struct NormalEstimate {
  std::vector<Vec3> normals;
  std::vector<std::uint8_t> degenerate;  // 1 where the radial fallback was used
};

/// Smallest-eigenvalue direction of each k-NN covariance, oriented away from the centroid.
inline NormalEstimate estimate_normals(const PointCloud& cloud, std::size_t k) {
  auto g = local_geometry(cloud.points, k);
  return {std::move(g.normals), std::move(g.degenerate)};
}

// ---------------------------------------------------------------------------
// Spatial hashing

struct SpatialKey {
  std::uint64_t key = 0;
  int level = 1;
  friend bool operator==(const SpatialKey&, const SpatialKey&) = default;
};

inline SpatialKey spatial_hash(const Vec3& position, int level, double cell) {
  if (!(cell > 0.0)) fail(ErrorCode::BadConfig, "hash cell must be positive");
  std::uint64_t q[3];
  for (int a = 0; a < 3; ++a)
    q[a] = static_cast<std::uint64_t>(static_cast<std::int64_t>(std::floor(position[a] / cell)));
  const std::uint64_t key = (q[0] * 73856093ULL) ^ (q[1] * 19349663ULL) ^ (q[2] * 83492791ULL);
  return {key, level};
}

}  // namespace patchad
