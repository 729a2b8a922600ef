#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "patchad/error.hpp"
#include "patchad/geometry.hpp"

namespace patchad {

enum class PatchStrategy { multi_scale_spheres, fps_spheres, fps_voxels, grid3d, semantic_parts };

inline std::string_view to_string(PatchStrategy s) {
  switch (s) {
    case PatchStrategy::multi_scale_spheres: return "multi_scale_spheres";
    case PatchStrategy::fps_spheres: return "fps_spheres";
    case PatchStrategy::fps_voxels: return "fps_voxels";
    case PatchStrategy::grid3d: return "grid3d";
    case PatchStrategy::semantic_parts: return "semantic_parts";
  }
  return "unknown";
}

inline PatchStrategy parse_patch_strategy(std::string_view s) {
  for (auto v : {PatchStrategy::multi_scale_spheres, PatchStrategy::fps_spheres, PatchStrategy::fps_voxels,
                 PatchStrategy::grid3d, PatchStrategy::semantic_parts})
    if (to_string(v) == s) return v;
  fail(ErrorCode::BadConfig, "unknown patch strategy '" + std::string(s) + "'");
}

struct LevelSpec {
  std::size_t count = 0;  // patches at this level
  std::size_t size = 0;   // points per patch (kNN size); unused by grid3d / fps_voxels
  friend bool operator==(const LevelSpec&, const LevelSpec&) = default;
};

struct PatchConfig {
  PatchStrategy strategy = PatchStrategy::multi_scale_spheres;
  std::vector<LevelSpec> levels;  // fine -> coarse, strictly increasing patch size
  std::uint64_t seed = 0;
  int dedup_resolution = 256;  // voxel dedup of FPS candidates
  int voxel_grid = 32;         // voxels per bounding-box axis for fps_voxels

  /// 192x8, 64x32, 32x64: the object-benchmark setting.
  static PatchConfig shapenet() { return {PatchStrategy::multi_scale_spheres, {{192, 8}, {64, 32}, {32, 64}}}; }
  static PatchConfig real3d() { return shapenet(); }
  /// 64x32, 32x64, 8x192: fewer, larger patches for structural defects.
  static PatchConfig industrial() {
    return {PatchStrategy::multi_scale_spheres, {{64, 32}, {32, 64}, {8, 192}}};
  }

  void validate() const {
    if (levels.empty()) fail(ErrorCode::BadConfig, "patch config needs at least one level");
    for (std::size_t l = 0; l < levels.size(); ++l) {
      if (levels[l].count == 0) fail(ErrorCode::BadConfig, "patch count must be positive");
      const bool sized = strategy == PatchStrategy::multi_scale_spheres || strategy == PatchStrategy::fps_spheres;
      if (sized && levels[l].size == 0) fail(ErrorCode::BadConfig, "patch size must be positive");
      if (sized && l > 0 && levels[l].size <= levels[l - 1].size)
        fail(ErrorCode::BadConfig, "patch sizes must increase from fine to coarse");
    }
  }
};

struct Patch {
  Vec3 center = Vec3::Zero();
  std::vector<Index> members;
  int level = 1;
  std::size_t rank = 0;
};

/// Patches of one level, ordered by rank (distance of the center to the object centroid).
struct PatchSet {
  int level = 1;
  Vec3 object_centroid = Vec3::Zero();
  std::vector<Patch> patches;

  std::size_t size() const noexcept { return patches.size(); }

  double mean_radius(std::span<const Vec3> pts) const {
    if (patches.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& p : patches) {
      double r = 0.0;
      for (Index i : p.members) r = std::max(r, std::sqrt(sq_dist(pts[i], p.center)));
      acc += r;
    }
    return acc / static_cast<double>(patches.size());
  }

  /// For each point, the patch (by rank) whose center is nearest among those containing it.
  std::vector<Index> assignment(std::span<const Vec3> pts) const {
    std::vector<Index> owner(pts.size(), static_cast<Index>(-1));
    std::vector<double> best(pts.size(), std::numeric_limits<double>::infinity());
    for (Index j = 0; j < patches.size(); ++j)
      for (Index i : patches[j].members) {
        const double d = sq_dist(pts[i], patches[j].center);
        if (d < best[i]) {
          best[i] = d;
          owner[i] = j;
        }
      }
    return owner;
  }
};

namespace detail {

inline void rank_patches(PatchSet& set) {
  std::vector<double> d(set.patches.size());
  for (std::size_t j = 0; j < d.size(); ++j) d[j] = sq_dist(set.patches[j].center, set.object_centroid);
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a] < d[b]; });
  std::vector<Patch> sorted;
  sorted.reserve(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    sorted.push_back(std::move(set.patches[order[r]]));
    sorted.back().rank = r;
    sorted.back().level = set.level;
  }
  set.patches = std::move(sorted);
}

inline std::uint64_t level_seed(std::uint64_t seed, int level) { return seed + static_cast<std::uint64_t>(level); }

inline std::vector<Index> fps_centers(std::span<const Vec3> pts, std::size_t count, std::uint64_t seed,
                                      int dedup_resolution) {
  const auto candidates = voxel_dedup(pts, dedup_resolution);
  if (count > candidates.size()) fail(ErrorCode::TooFewPoints, "more patches requested than distinct points");
  return farthest_point_sampling(pts, candidates, count, seed);
}

/// kNN spheres around FPS centers; uncovered points are absorbed by growing the nearest patch.
inline PatchSet sphere_level(std::span<const Vec3> pts, const LevelSpec& spec, int level, std::uint64_t seed,
                             int dedup_resolution) {
  if (pts.size() < spec.size) fail(ErrorCode::TooFewPoints, "cloud smaller than the patch size");
  PatchSet set;
  set.level = level;
  set.object_centroid = centroid(pts);
  const auto centers = fps_centers(pts, spec.count, level_seed(seed, level), dedup_resolution);
  std::vector<std::uint8_t> covered(pts.size(), 0);
  set.patches.resize(centers.size());
  const bool full = spec.size == pts.size();
  std::optional<KnnGrid> grid;
  if (!full) grid.emplace(pts);
  for (std::size_t j = 0; j < centers.size(); ++j) {
    auto& p = set.patches[j];
    p.center = pts[centers[j]];
    if (full) {
      p.members = knn(pts, p.center, spec.size);
    } else {
      p.members = grid->query(p.center, spec.size);
    }
    for (Index i : p.members) covered[i] = 1;
  }
  // Each initially uncovered point grows the kNN radius of its nearest patch until it is a member.
  using Key = std::pair<double, Index>;
  std::vector<Vec3> center_pts(centers.size());
  for (std::size_t j = 0; j < centers.size(); ++j) center_pts[j] = set.patches[j].center;
  const KnnGrid center_grid(center_pts);
  KnnScratch scratch;
  std::vector<std::optional<Key>> grow_to(centers.size());
  for (Index u = 0; u < pts.size(); ++u) {
    if (covered[u]) continue;
    Index nearest = 0;
    center_grid.query_into(pts[u], 1, &nearest, scratch);
    const Key key{sq_dist(pts[u], center_pts[nearest]), u};
    if (!grow_to[nearest] || *grow_to[nearest] < key) grow_to[nearest] = key;
  }
  for (std::size_t j = 0; j < centers.size(); ++j) {
    if (!grow_to[j]) continue;
    std::vector<Key> inside;
    if (full) {
      for (Index i = 0; i < pts.size(); ++i) inside.emplace_back(sq_dist(pts[i], set.patches[j].center), i);
    } else {
      grid->radius_into(set.patches[j].center, grow_to[j]->first, inside);
    }
    std::erase_if(inside, [&](const Key& k) { return *grow_to[j] < k; });
    std::sort(inside.begin(), inside.end());
    auto& members = set.patches[j].members;
    members.clear();
    for (const auto& k : inside) members.push_back(k.second);
  }
  rank_patches(set);
  return set;
}

inline PatchSet grid_level(std::span<const Vec3> pts, const LevelSpec& spec, int level) {
  std::size_t g = 1;
  while (g * g * g < spec.count) ++g;
  Vec3 lo = pts[0], hi = pts[0];
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const Vec3 edge = ((hi - lo) / static_cast<double>(g)).cwiseMax(Vec3::Constant(1e-12));
  std::vector<std::vector<Index>> cells(g * g * g);
  for (Index i = 0; i < pts.size(); ++i) {
    std::size_t c[3];
    for (int a = 0; a < 3; ++a)
      c[a] = std::min(g - 1, static_cast<std::size_t>(std::max(0.0, std::floor((pts[i][a] - lo[a]) / edge[a]))));
    cells[(c[0] * g + c[1]) * g + c[2]].push_back(i);
  }
  PatchSet set;
  set.level = level;
  set.object_centroid = centroid(pts);
  for (std::size_t x = 0; x < g; ++x)
    for (std::size_t y = 0; y < g; ++y)
      for (std::size_t z = 0; z < g; ++z) {
        auto& m = cells[(x * g + y) * g + z];
        if (m.empty()) continue;
        Patch p;
        p.center = lo + Vec3((x + 0.5) * edge.x(), (y + 0.5) * edge.y(), (z + 0.5) * edge.z());
        p.members = std::move(m);
        set.patches.push_back(std::move(p));
      }
  rank_patches(set);
  return set;
}

inline PatchSet voxel_level(std::span<const Vec3> pts, const LevelSpec& spec, int level, std::uint64_t seed,
                            int dedup_resolution, int voxel_grid) {
  const auto centers = fps_centers(pts, spec.count, level_seed(seed, level), dedup_resolution);
  Vec3 lo = pts[0], hi = pts[0];
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double edge = std::max((hi - lo).maxCoeff() / voxel_grid, 1e-12);
  PatchSet set;
  set.level = level;
  set.object_centroid = centroid(pts);
  std::vector<Patch> patches(centers.size());
  for (std::size_t j = 0; j < centers.size(); ++j) patches[j].center = pts[centers[j]];
  for (Index i = 0; i < pts.size(); ++i) {
    Vec3 vc;
    for (int a = 0; a < 3; ++a) vc[a] = lo[a] + (std::floor((pts[i][a] - lo[a]) / edge) + 0.5) * edge;
    std::size_t nearest = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < patches.size(); ++j) {
      const double d = sq_dist(vc, patches[j].center);
      if (d < best) {
        best = d;
        nearest = j;
      }
    }
    patches[nearest].members.push_back(i);
  }
  for (auto& p : patches)
    if (!p.members.empty()) set.patches.push_back(std::move(p));
  rank_patches(set);
  return set;
}

}  // namespace detail

/// One PatchSet per configured level (level numbers start at 1).
inline std::vector<PatchSet> patchify_multiscale(std::span<const Vec3> pts, const PatchConfig& config) {
  config.validate();
  if (config.strategy == PatchStrategy::semantic_parts)
    fail(ErrorCode::Unsupported, "semantic-part patchification needs an external segmenter");
  std::size_t max_size = 0;
  for (const auto& l : config.levels) max_size = std::max(max_size, l.size);
  if (pts.size() < std::max<std::size_t>(max_size, 1)) fail(ErrorCode::TooFewPoints, "cloud smaller than the largest patch");
  std::vector<PatchSet> out;
  out.reserve(config.levels.size());
  for (std::size_t l = 0; l < config.levels.size(); ++l) {
    const int level = static_cast<int>(l) + 1;
    switch (config.strategy) {
      case PatchStrategy::multi_scale_spheres:
      case PatchStrategy::fps_spheres:
        out.push_back(detail::sphere_level(pts, config.levels[l], level, config.seed, config.dedup_resolution));
        break;
      case PatchStrategy::grid3d: out.push_back(detail::grid_level(pts, config.levels[l], level)); break;
      case PatchStrategy::fps_voxels:
        out.push_back(detail::voxel_level(pts, config.levels[l], level, config.seed, config.dedup_resolution,
                                          config.voxel_grid));
        break;
      case PatchStrategy::semantic_parts: break;
    }
  }
  return out;
}

inline std::vector<PatchSet> patchify_multiscale(const PointCloud& cloud, const PatchConfig& config) {
  return patchify_multiscale(std::span<const Vec3>(cloud.points), config);
}

/// Single-level patchification with the configured strategy, using the first level spec.
inline PatchSet patchify_strategy(const PointCloud& cloud, const PatchConfig& config) {
  PatchConfig single = config;
  single.levels = {config.levels.at(0)};
  return patchify_multiscale(cloud, single).front();
}

inline nlohmann::json to_json(const PatchSet& set) {
  nlohmann::json centers = nlohmann::json::array(), members = nlohmann::json::array(),
                 ranks = nlohmann::json::array();
  for (const auto& p : set.patches) {
    centers.push_back({p.center.x(), p.center.y(), p.center.z()});
    members.push_back(p.members);
    ranks.push_back(p.rank);
  }
  return {{"level", set.level}, {"centers", centers}, {"member_indices", members}, {"ranks", ranks}};
}

inline nlohmann::json to_json(const PatchConfig& c) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : c.levels) levels.push_back({{"count", l.count}, {"size", l.size}});
  return {{"strategy", to_string(c.strategy)},
          {"levels", levels},
          {"seed", c.seed},
          {"dedup_resolution", c.dedup_resolution},
          {"voxel_grid", c.voxel_grid}};
}

/// Reads a patch config; absent fields keep the values of `base`.
inline PatchConfig patch_config_from_json(const nlohmann::json& j, PatchConfig base = PatchConfig::shapenet()) {
  try {
    if (j.contains("strategy")) base.strategy = parse_patch_strategy(j["strategy"].get<std::string>());
    if (j.contains("levels")) {
      base.levels.clear();
      for (const auto& l : j["levels"]) base.levels.push_back({l.at("count").get<std::size_t>(), l.value("size", std::size_t{0})});
    }
    base.seed = j.value("seed", base.seed);
    base.dedup_resolution = j.value("dedup_resolution", base.dedup_resolution);
    base.voxel_grid = j.value("voxel_grid", base.voxel_grid);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::BadConfig, std::string("patch config: ") + e.what());
  }
  base.validate();
  return base;
}

}  // namespace patchad
